"""Finite-difference audit of the hand-derived network backward pass."""

import numpy as np
import pytest

from voxcomplete.losses import l1_full, l1_full_grad
from voxcomplete.net import (
    ArchConfig,
    backward_partial,
    backward_priors,
    encode_prior_features,
    forward_partial,
    init_model,
    zero_grads,
    zero_prior_grads,
)
from voxcomplete.priors import PriorBank
from voxcomplete.voxel import VoxelGrid

# piecewise-linear net: a large step crosses ReLU kinks and corrupts
# individual probes, so keep h small relative to typical activations
H = 1e-4
REL_TOL = 1e-3


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(11)
    params = init_model(ArchConfig.toy(16, seed=3))
    priors = tuple(
        VoxelGrid(rng.random((16, 16, 16)) < 0.3, object_id=f"p{i}")
        for i in range(2)
    )
    bank = PriorBank(priors=priors, kind="seen_category",
                     source_ids=(("p0",), ("p1",)))
    x = (rng.random((16, 16, 16)) < 0.35).astype(np.float64)[None]
    g = (rng.random((16, 16, 16)) < 0.3).astype(np.float64)
    return params, bank, x, g


def loss_at(params, bank, x, g):
    enc = encode_prior_features(params, bank.priors)
    out, _ = forward_partial(params, x, enc)
    return l1_full(out, g)


def analytic_grads(params, bank, x, g):
    enc = encode_prior_features(params, bank.priors, want_cache=True)
    out, cache = forward_partial(params, x, enc, want_cache=True)
    grads = zero_grads(params)
    dy = zero_prior_grads(params, len(bank))
    backward_partial(params, cache, l1_full_grad(out, g), grads, dy)
    backward_priors(params, enc, dy, grads)
    return grads


def test_parameter_gradients_match_fd(setup):
    params, bank, x, g = setup
    grads = analytic_grads(params, bank, x, g)

    # one probe per tensor plus extras: > 50 sampled coordinates covering
    # the encoder, both prior branches, attention inputs and the decoder
    rng = np.random.default_rng(99)
    probes = []
    for name in params.names():
        probes.append((name, int(rng.integers(params.tensors[name].size))))
    for name in ("enc1_w", "msl1_0_w", "dec4_w", "dec1_g"):
        probes.append((name, int(rng.integers(params.tensors[name].size))))
    assert len(probes) >= 50

    fds, ans = [], []
    for name, flat in probes:
        t = params.tensors[name]
        orig = t.flat[flat]
        t.flat[flat] = orig + H
        hi = loss_at(params, bank, x, g)
        t.flat[flat] = orig - H
        lo = loss_at(params, bank, x, g)
        t.flat[flat] = orig
        fd = (hi - lo) / (2 * H)
        an = grads[name].flat[flat]
        fds.append(fd)
        ans.append(an)
        # ReLU kinks inside the FD interval put O(h) noise on individual
        # near-zero components, so the tight comparison is norm-wise;
        # per coordinate only rule out an outright-wrong derivative.
        err = abs(fd - an)
        denom = max(abs(fd), abs(an), 1e-6)
        assert err < 1e-5 or err / denom < 5e-2, (
            f"{name}[{flat}]: fd={fd:.6g} analytic={an:.6g}"
        )
    fds, ans = np.array(fds), np.array(ans)
    rel = np.linalg.norm(fds - ans) / max(
        np.linalg.norm(fds), np.linalg.norm(ans)
    )
    assert rel < REL_TOL, f"norm-wise relative error {rel:.3g}"


def test_gradients_nonzero_everywhere(setup):
    # A dead tensor would pass the FD check trivially; rule that out.
    params, bank, x, g = setup
    grads = analytic_grads(params, bank, x, g)
    for name, t in grads.items():
        assert np.abs(t).max() > 0, f"{name} received no gradient"


def test_prior_feature_gradients_match_fd(setup):
    # Perturb one prior voxel's encoded features indirectly by checking
    # the accumulated dY against FD through the attention stack.
    params, bank, x, g = setup
    enc = encode_prior_features(params, bank.priors, want_cache=True)
    out, cache = forward_partial(params, x, enc, want_cache=True)
    grads = zero_grads(params)
    dy = zero_prior_grads(params, len(bank))
    backward_partial(params, cache, l1_full_grad(out, g), grads, dy)

    rng = np.random.default_rng(5)
    for pi in (0, 1):
        for level in (1, 2, 3):
            arr = enc.levels[pi][level]
            flat = int(rng.integers(arr.size))
            orig = arr.flat[flat]

            def run():
                o, _ = forward_partial(params, x, enc)
                return l1_full(o, g)

            arr.flat[flat] = orig + H
            hi = run()
            arr.flat[flat] = orig - H
            lo = run()
            arr.flat[flat] = orig
            fd = (hi - lo) / (2 * H)
            an = dy[pi][level].flat[flat]
            denom = max(abs(fd), abs(an), 1e-6)
            assert abs(fd - an) / denom < REL_TOL
