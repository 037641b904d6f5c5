"""Flat-kernel mean-shift clustering.

Seeds are the input points themselves. Each seed repeatedly moves to the
mean of all points within `bandwidth` until the move is shorter than
`tol` or `max_iter` is hit; converged positions closer than bandwidth/2
merge into a single mode. The whole procedure is deterministic: no
sampling, fixed iteration order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from voxcomplete.errors import DomainError


@dataclass(frozen=True)
class ClusterResult:
    modes: np.ndarray  # (n_modes, dim) converged positions
    labels: np.ndarray  # (n_points,) index into modes
    bandwidth: float

    @property
    def n_modes(self) -> int:
        return self.modes.shape[0]

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_modes)


def mean_shift(
    features,
    bandwidth: float,
    max_iter: int = 300,
    tol: float = 1e-5,
) -> ClusterResult:
    pts = np.asarray(features, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise DomainError(f"features must be a nonempty (n, d) array, got {pts.shape}")
    if not np.isfinite(pts).all():
        raise DomainError("features contain non-finite values")
    if not bandwidth > 0:
        raise DomainError(f"bandwidth must be positive, got {bandwidth}")

    cur = pts.copy()
    active = np.ones(len(pts), dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        rows = np.flatnonzero(active)
        # (n_active, n_points) distances to the full point set
        d2 = ((cur[rows, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        within = d2 <= bandwidth * bandwidth
        counts = within.sum(axis=1)  # every seed is its own neighbor, so >= 1
        means = (within[:, :, None] * pts[None, :, :]).sum(axis=1) / counts[:, None]
        shift = np.sqrt(((means - cur[rows]) ** 2).sum(axis=1))
        cur[rows] = means
        active[rows[shift < tol]] = False

    # merge converged positions: first arrival founds the mode
    merge_r2 = (bandwidth / 2.0) ** 2
    modes: list[np.ndarray] = []
    for i in range(len(pts)):
        p = cur[i]
        if not any(((p - m) ** 2).sum() <= merge_r2 for m in modes):
            modes.append(p)
    modes_arr = np.array(modes)
    d2 = ((pts[:, None, :] - modes_arr[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return ClusterResult(modes=modes_arr, labels=labels, bandwidth=float(bandwidth))
