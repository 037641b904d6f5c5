"""Backend dispatch for the hot kernels.

The numba and numpy implementations share one contract; which one backs
the public names is decided once at import time from VOXCOMPLETE_BACKEND
(see voxcomplete.backend). Both modules stay importable directly so the
benchmark can race them against each other.
"""

from voxcomplete.backend import selected_backend

if selected_backend() == "numba":
    from voxcomplete.kernels import numba_impl as _impl
else:
    from voxcomplete.kernels import numpy_impl as _impl

conv3d = _impl.conv3d
conv3d_grads = _impl.conv3d_grads
deconv3d = _impl.deconv3d
deconv3d_grads = _impl.deconv3d_grads
min_dists = _impl.min_dists
visible_mask = _impl.visible_mask

__all__ = [
    "conv3d",
    "conv3d_grads",
    "deconv3d",
    "deconv3d_grads",
    "min_dists",
    "visible_mask",
]
