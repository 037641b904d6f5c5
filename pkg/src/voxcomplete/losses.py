"""Training objectives.

The coarse stage uses a plain full-grid L1 against ground truth. The
refinement stage has no ground truth and combines:

  - partial L1: agree with the observed partial scan on its support;
  - occupancy loss: keep the total predicted mass near H = alpha * |S|,
    the only term that ever pushes values down;
  - variance loss: 1 / var(O), pushing the field away from flat gray;
  - coarse loss: partial L1 against the missing-part mask T, a weak
    stand-in for supervision on unobserved voxels.

All functions accept DenseField/VoxelGrid or plain arrays and return
float64 scalars; each has a closed-form gradient w.r.t. the predicted
field O used by the trainer and checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from voxcomplete import kernels
from voxcomplete.errors import ConfigError, DomainError, ShapeError
from voxcomplete.voxel import DenseField, PointSet, VoxelGrid


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 2.5
    gamma1: float = 1e-5
    gamma2: float = 1e-4
    lambda_m: float = 0.5
    var_epsilon: float = 1e-8

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.gamma1 < 0 or self.gamma2 < 0 or self.lambda_m < 0:
            raise ConfigError("loss weights must be nonnegative")
        if not self.var_epsilon > 0:
            raise ConfigError(f"var_epsilon must be positive, got {self.var_epsilon}")


def _field(o) -> np.ndarray:
    if isinstance(o, DenseField):
        return o.values
    return np.asarray(o, dtype=np.float64)


def _mask(s) -> np.ndarray:
    if isinstance(s, VoxelGrid):
        return s.occ.astype(np.float64)
    return np.asarray(s, dtype=np.float64)


def _check(o: np.ndarray, s: np.ndarray):
    if o.shape != s.shape:
        raise ShapeError(f"field shape {o.shape} != mask shape {s.shape}")


def l1_full(o, g) -> float:
    o, g = _field(o), _mask(g)
    _check(o, g)
    return float(np.abs(o - g).mean())


def l1_full_grad(o, g) -> np.ndarray:
    o, g = _field(o), _mask(g)
    _check(o, g)
    return np.sign(o - g) / o.size


def partial_l1(o, s) -> float:
    o, s = _field(o), _mask(s)
    _check(o, s)
    return float((np.abs(o - s) * s).mean())


def partial_l1_grad(o, s) -> np.ndarray:
    o, s = _field(o), _mask(s)
    _check(o, s)
    return np.sign(o - s) * s / o.size


def occupancy_loss(o, s, alpha: float) -> float:
    """|sum(O) - H| with H = alpha * |S|. H = 0 (empty S) is legal."""
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    o, s = _field(o), _mask(s)
    _check(o, s)
    return float(abs(o.sum() - alpha * s.sum()))


def occupancy_loss_grad(o, s, alpha: float) -> np.ndarray:
    o, s = _field(o), _mask(s)
    _check(o, s)
    g = np.sign(o.sum() - alpha * s.sum())
    return np.full_like(o, g)


def occupancy_target(s, alpha: float) -> float:
    return float(alpha * _mask(s).sum())


def variance_loss(o, epsilon: float) -> float:
    """1 / (var(O) + epsilon), population variance over all voxels."""
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    o = _field(o)
    return float(1.0 / (o.var() + epsilon))


def variance_loss_grad(o, epsilon: float) -> np.ndarray:
    o = _field(o)
    v = o.var() + epsilon
    # d var / d o_i = 2 (o_i - mean) / n; the mean's own derivative cancels
    return -(2.0 / o.size) * (o - o.mean()) / (v * v)


def vpm_loss(o, s, hp: HyperParams):
    """Returns (total, components) with components keyed L_p, L_s, L_v."""
    lp = partial_l1(o, s)
    ls = occupancy_loss(o, s, hp.alpha)
    lv = variance_loss(o, hp.var_epsilon)
    total = lp + hp.gamma1 * ls + hp.gamma2 * lv
    return total, {"L_p": lp, "L_s": ls, "L_v": lv}


def vpm_loss_grad(o, s, hp: HyperParams) -> np.ndarray:
    return (
        partial_l1_grad(o, s)
        + hp.gamma1 * occupancy_loss_grad(o, s, hp.alpha)
        + hp.gamma2 * variance_loss_grad(o, hp.var_epsilon)
    )


def coarse_loss(o, t) -> float:
    """Partial L1 against the missing-part mask T; 0 when T is empty."""
    return partial_l1(o, t)


def coarse_loss_grad(o, t) -> np.ndarray:
    return partial_l1_grad(o, t)


def casr_total(o, s, t, hp: HyperParams):
    """Returns (total, components); total = L_VPM + lambda * L_m."""
    vpm, comps = vpm_loss(o, s, hp)
    lm = coarse_loss(o, t)
    comps = dict(comps)
    comps["L_m"] = lm
    comps["L_vpm"] = vpm
    return vpm + hp.lambda_m * lm, comps


def casr_total_grad(o, s, t, hp: HyperParams) -> np.ndarray:
    return vpm_loss_grad(o, s, hp) + hp.lambda_m * coarse_loss_grad(o, t)


def point_partial_match(p_in: PointSet, p: PointSet) -> float:
    """One-directional chamfer: mean distance from each input point to the
    prediction. Reference implementation only; training uses the voxel
    losses above."""
    if len(p_in) == 0 or len(p) == 0:
        raise DomainError("point sets must be nonempty")
    return float(kernels.min_dists(p_in.points, p.points).mean())
