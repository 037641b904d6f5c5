"""Prior-assisted shape learning network (PSLN).

Two stride-2 convolutional encoders (one for the partial input, one
multi-kernel "MSL" stack per prior), cross-attention between their
features at layers 2..4, and a transposed-convolution decoder with skip
concatenations ending in a per-voxel two-way softmax.

Everything runs in float64 with hand-written gradients so that training
is exactly reproducible and finite-difference checkable. A forward pass
over a batch shares one prior encoding: priors are batch-constant, so
their features (and their backward pass) are computed once per step.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from voxcomplete import kernels
from voxcomplete.errors import ConfigError, CorruptionError, FormatError, ShapeError
from voxcomplete.priors import PriorBank
from voxcomplete.voxel import DenseField, VoxelGrid

CHECKPOINT_MAGIC = b"VCPT"
CHECKPOINT_VERSION = 1

ENC_KERNEL = 3  # input encoder: 3x3x3, stride 2, pad 1
DEC_KERNEL = 4  # decoder: 4x4x4 transposed, stride 2, pad 1
NORM_EPS = 1e-5


def branch_widths(c: int, n_branches: int) -> tuple:
    """Split c channels across branches as evenly as possible.

    The first c % n_branches branches take the extra channel; the widths
    always sum to c exactly so branch concatenation matches the layer
    width.
    """
    base, extra = divmod(c, n_branches)
    widths = tuple(base + (1 if i < extra else 0) for i in range(n_branches))
    if widths[-1] < 1:
        raise ConfigError(
            f"{c} channels cannot feed {n_branches} branches (empty branch)"
        )
    return widths


@dataclass(frozen=True)
class ArchConfig:
    resolution: int = 32
    channels: tuple = (16, 32, 64, 128)
    msl_kernels: tuple = ((7, 5, 3), (5, 3), (3,), (3,))
    attention_layers: tuple = (2, 3, 4)
    seed: int = 0
    normalize: bool = True

    def __post_init__(self):
        n = self.resolution
        if n % 16 != 0 or n < 16:
            raise ConfigError(
                f"resolution {n} must be divisible by 16 (four stride-2 halvings)"
            )
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(
            self, "msl_kernels", tuple(tuple(int(k) for k in ks) for ks in self.msl_kernels)
        )
        object.__setattr__(
            self, "attention_layers", tuple(int(i) for i in self.attention_layers)
        )
        if len(self.channels) != 4 or any(c < 1 for c in self.channels):
            raise ConfigError(f"need 4 positive channel widths, got {self.channels}")
        if len(self.msl_kernels) != 4:
            raise ConfigError("need kernel sets for 4 layers")
        for ks in self.msl_kernels:
            if not ks or any(k < 1 or k % 2 == 0 for k in ks):
                raise ConfigError(f"kernel sizes must be odd and positive, got {ks}")
        if self.attention_layers != (2, 3, 4):
            raise ConfigError("attention is wired at layers (2, 3, 4)")
        for c, ks in zip(self.channels, self.msl_kernels):
            branch_widths(c, len(ks))  # raises if a branch would be empty

    @classmethod
    def toy(cls, resolution: int = 16, seed: int = 0) -> "ArchConfig":
        return cls(resolution=resolution, channels=(8, 16, 32, 32), seed=seed)

    def level_size(self, i: int) -> int:
        return self.resolution // (2**i)

    def to_json(self) -> str:
        doc = {
            "resolution": self.resolution,
            "channels": list(self.channels),
            "msl_kernels": [list(ks) for ks in self.msl_kernels],
            "attention_layers": list(self.attention_layers),
            "seed": self.seed,
            "normalize": self.normalize,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArchConfig":
        doc = json.loads(text)
        return cls(
            resolution=doc["resolution"],
            channels=tuple(doc["channels"]),
            msl_kernels=tuple(tuple(ks) for ks in doc["msl_kernels"]),
            attention_layers=tuple(doc["attention_layers"]),
            seed=doc["seed"],
            normalize=bool(doc.get("normalize", True)),
        )


def _norm_at(cfg: ArchConfig, level: int) -> bool:
    """Feature normalization is applied where a spatial population exists."""
    return cfg.normalize and cfg.level_size(level) > 1


def _param_specs(cfg: ArchConfig) -> list:
    """(name, shape, fan_in) in a fixed order shared by init and I/O."""
    specs = []
    cprev = 1
    for i, c in enumerate(cfg.channels, start=1):
        fan = cprev * ENC_KERNEL**3
        specs.append((f"enc{i}_w", (c, cprev, ENC_KERNEL, ENC_KERNEL, ENC_KERNEL), fan))
        specs.append((f"enc{i}_b", (c,), fan))
        if _norm_at(cfg, i):
            specs.append((f"enc{i}_g", (c,), c))
            specs.append((f"enc{i}_o", (c,), c))
        cprev = c
    cprev = 1
    for i, (c, ks) in enumerate(zip(cfg.channels, cfg.msl_kernels), start=1):
        widths = branch_widths(c, len(ks))
        for j, (k, w) in enumerate(zip(ks, widths)):
            fan = cprev * k**3
            specs.append((f"msl{i}_{j}_w", (w, cprev, k, k, k), fan))
            specs.append((f"msl{i}_{j}_b", (w,), fan))
        if _norm_at(cfg, i):
            specs.append((f"msl{i}_g", (c,), c))
            specs.append((f"msl{i}_o", (c,), c))
        cprev = c
    c1, c2, c3, c4 = cfg.channels
    for name, cin, cout in (
        ("dec1", c4, c3),
        ("dec2", 2 * c3, c2),
        ("dec3", 2 * c2, c1),
        ("dec4", c1, 2),
    ):
        fan = cin * DEC_KERNEL**3
        specs.append((f"{name}_w", (cin, cout, DEC_KERNEL, DEC_KERNEL, DEC_KERNEL), fan))
        specs.append((f"{name}_b", (cout,), fan))
        if cfg.normalize and name != "dec4":
            specs.append((f"{name}_g", (cout,), cout))
            specs.append((f"{name}_o", (cout,), cout))
    return specs


@dataclass
class ModelParams:
    config: ArchConfig
    tensors: dict  # name -> float64 ndarray, keys in _param_specs order

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def names(self) -> list:
        return [name for name, _, _ in _param_specs(self.config)]

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())


OUTPUT_BIAS = 1.0


def init_model(config: ArchConfig) -> ModelParams:
    """He-uniform weights (bound sqrt(6/fan_in)), deterministic per seed.

    Normalization gains start at one, offsets and convolution biases at
    zero. The final bias starts the occupied channel near the low base rate
    of occupancy grids instead of at 0.5: the L1-through-softmax objective
    silences any voxel whose logit gap saturates, so the optimizer should
    spend its live steps shaping occupancy rather than draining bulk mass.
    """
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape, fan in _param_specs(config):
        if name.endswith(("_b", "_o")):
            tensors[name] = np.zeros(shape)
        elif name.endswith("_g"):
            tensors[name] = np.ones(shape)
        else:
            bound = np.sqrt(6.0 / fan)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    tensors["dec4_b"][:] = (OUTPUT_BIAS, -OUTPUT_BIAS)
    return ModelParams(config, tensors)


def zero_grads(params: ModelParams) -> dict:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


# ---------------------------------------------------------------------------
# feature types (public views over the array-level internals)

@dataclass(frozen=True)
class FeaturePyramid:
    levels: tuple  # arrays (C_i, n_i, n_i, n_i) for i = 1..4


@dataclass(frozen=True)
class AttentionOutput:
    fused: np.ndarray  # (C_i, n_i, n_i, n_i), same shape as the query features
    weights: np.ndarray  # (n_i^3, M * n_i^3) row-stochastic


def _relu(z):
    return np.maximum(z, 0.0)


def _inorm(z, gain, offset):
    """Per-channel standardization over the spatial axes of one sample.

    Deterministic per input (no cross-sample statistics), which keeps the
    forward pass pure and concurrency-safe. Also what makes deep training
    here viable at all: sign-like adaptive updates grow weight scales
    multiplicatively per layer, and without renormalization the output
    logits explode into saturation within ~100 steps.
    """
    mu = z.mean(axis=(1, 2, 3), keepdims=True)
    var = z.var(axis=(1, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (z - mu) * inv
    out = gain[:, None, None, None] * xhat + offset[:, None, None, None]
    return out, (xhat, inv, gain)


def _inorm_backward(dout, cache):
    """Returns (dz, dgain, doffset)."""
    xhat, inv, gain = cache
    dgain = (dout * xhat).sum(axis=(1, 2, 3))
    doffset = dout.sum(axis=(1, 2, 3))
    dxhat = dout * gain[:, None, None, None]
    m = dxhat.mean(axis=(1, 2, 3), keepdims=True)
    mx = (dxhat * xhat).mean(axis=(1, 2, 3), keepdims=True)
    dz = inv * (dxhat - m - xhat * mx)
    return dz, dgain, doffset


def _grid_input(grid: VoxelGrid, cfg: ArchConfig) -> np.ndarray:
    if grid.resolution != cfg.resolution:
        raise ShapeError(
            f"grid resolution {grid.resolution} != configured {cfg.resolution}"
        )
    return grid.occ.astype(np.float64)[None]


# ---------------------------------------------------------------------------
# input encoder

def _encode_partial(params: ModelParams, x: np.ndarray, want_cache: bool):
    cfg = params.config
    t = params.tensors
    levels, cache = [], []
    a = x
    for i in range(1, 5):
        z = kernels.conv3d(a, t[f"enc{i}_w"], t[f"enc{i}_b"], 2, 1)
        ncache = None
        if _norm_at(cfg, i):
            z, ncache = _inorm(z, t[f"enc{i}_g"], t[f"enc{i}_o"])
        if want_cache:
            cache.append((a, z, ncache))
        a = _relu(z)
        levels.append(a)
    return levels, cache


def encode_partial(params: ModelParams, grid: VoxelGrid) -> FeaturePyramid:
    levels, _ = _encode_partial(params, _grid_input(grid, params.config), False)
    return FeaturePyramid(levels=tuple(levels))


def _encode_partial_backward(params, cache, dlevels, grads):
    """dlevels: per-layer gradients w.r.t. the post-ReLU features."""
    t = params.tensors
    d = dlevels[3]
    for i in range(4, 0, -1):
        a, z, ncache = cache[i - 1]
        dz = d * (z > 0)
        if ncache is not None:
            dz, dg, do = _inorm_backward(dz, ncache)
            grads[f"enc{i}_g"] += dg
            grads[f"enc{i}_o"] += do
        dx, dw, db = kernels.conv3d_grads(a, t[f"enc{i}_w"], dz, 2, 1)
        grads[f"enc{i}_w"] += dw
        grads[f"enc{i}_b"] += db
        if i > 1:
            d = dlevels[i - 2] + dx


# ---------------------------------------------------------------------------
# multi-kernel prior encoder

def _encode_prior(params: ModelParams, x: np.ndarray, want_cache: bool):
    cfg = params.config
    t = params.tensors
    levels, cache = [], []
    a = x
    for i, ks in enumerate(cfg.msl_kernels, start=1):
        outs = [
            kernels.conv3d(a, t[f"msl{i}_{j}_w"], t[f"msl{i}_{j}_b"], 2, (k - 1) // 2)
            for j, k in enumerate(ks)
        ]
        z = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=0)
        ncache = None
        if _norm_at(cfg, i):
            z, ncache = _inorm(z, t[f"msl{i}_g"], t[f"msl{i}_o"])
        if want_cache:
            cache.append((a, z, ncache))
        a = _relu(z)
        levels.append(a)
    return levels, cache


def _encode_prior_backward(params, cache, dlevels, grads):
    cfg = params.config
    t = params.tensors
    d = dlevels[3]
    for i in range(4, 0, -1):
        ks = cfg.msl_kernels[i - 1]
        widths = branch_widths(cfg.channels[i - 1], len(ks))
        a, z, ncache = cache[i - 1]
        dz = d * (z > 0)
        if ncache is not None:
            dz, dg, do = _inorm_backward(dz, ncache)
            grads[f"msl{i}_g"] += dg
            grads[f"msl{i}_o"] += do
        dx = None
        off = 0
        for j, (k, w) in enumerate(zip(ks, widths)):
            dzj = dz[off:off + w]
            dxj, dw, db = kernels.conv3d_grads(
                a, t[f"msl{i}_{j}_w"], dzj, 2, (k - 1) // 2
            )
            grads[f"msl{i}_{j}_w"] += dw
            grads[f"msl{i}_{j}_b"] += db
            dx = dxj if dx is None else dx + dxj
            off += w
        if i > 1:
            d = dlevels[i - 2] + dx


def encode_priors(params: ModelParams, bank: PriorBank) -> list:
    cfg = params.config
    if bank.resolution != cfg.resolution:
        raise ShapeError(
            f"bank resolution {bank.resolution} != configured {cfg.resolution}"
        )
    pyramids = []
    for g in bank.priors:
        levels, _ = _encode_prior(params, g.occ.astype(np.float64)[None], False)
        pyramids.append(FeaturePyramid(levels=tuple(levels)))
    return pyramids


# ---------------------------------------------------------------------------
# cross-attention

def _attention(Xi: np.ndarray, Ys: list, want_cache: bool):
    c = Xi.shape[0]
    spatial = Xi.shape[1:]
    q = Xi.reshape(c, -1).T  # (n^3, C)
    for y in Ys:
        if y.shape != Xi.shape:
            raise ShapeError(f"prior features {y.shape} != query features {Xi.shape}")
    keys = np.concatenate([y.reshape(c, -1).T for y in Ys], axis=0)  # (M n^3, C)
    scale = 2.0 / c  # logits divided by C_i / 2
    logits = (q @ keys.T) * scale
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    fused = (w @ keys).T.reshape((c,) + spatial)  # values = keys
    cache = (q, keys, w, scale, spatial) if want_cache else None
    return fused, w, cache


def cross_attention(X_i: np.ndarray, Y_i: list) -> AttentionOutput:
    fused, w, _ = _attention(np.asarray(X_i, dtype=np.float64),
                             [np.asarray(y, dtype=np.float64) for y in Y_i], False)
    return AttentionOutput(fused=fused, weights=w)


def _attention_backward(cache, dF):
    """Returns (dXi, dK) for one scale; dK covers the pooled M n^3 tokens."""
    q, keys, w, scale, spatial = cache
    c = dF.shape[0]
    dfq = dF.reshape(c, -1).T  # (n^3, C)
    dw = dfq @ keys.T
    dkeys = w.T @ dfq  # value path
    inner = (dw * w).sum(axis=1, keepdims=True)
    dlog = w * (dw - inner)
    dq = (dlog @ keys) * scale
    dkeys += (dlog.T @ q) * scale  # key path
    return dq.T.reshape((c,) + spatial), dkeys


# ---------------------------------------------------------------------------
# decoder

def _softmax2(z4):
    m = z4.max(axis=0, keepdims=True)
    e = np.exp(z4 - m)
    return e / e.sum(axis=0, keepdims=True)


def _decode(params: ModelParams, f2, f3, f4, want_cache: bool):
    cfg = params.config
    t = params.tensors
    norm = cfg.normalize
    ncaches = [None, None, None]
    z1 = kernels.deconv3d(f4, t["dec1_w"], t["dec1_b"], 2, 1)
    if norm:
        z1, ncaches[0] = _inorm(z1, t["dec1_g"], t["dec1_o"])
    r1 = _relu(z1)
    c1 = np.concatenate([r1, f3], axis=0)
    z2 = kernels.deconv3d(c1, t["dec2_w"], t["dec2_b"], 2, 1)
    if norm:
        z2, ncaches[1] = _inorm(z2, t["dec2_g"], t["dec2_o"])
    r2 = _relu(z2)
    c2 = np.concatenate([r2, f2], axis=0)
    z3 = kernels.deconv3d(c2, t["dec3_w"], t["dec3_b"], 2, 1)
    if norm:
        z3, ncaches[2] = _inorm(z3, t["dec3_g"], t["dec3_o"])
    r3 = _relu(z3)
    z4 = kernels.deconv3d(r3, t["dec4_w"], t["dec4_b"], 2, 1)
    p = _softmax2(z4)
    cache = (f4, z1, c1, z2, c2, z3, r3, p, ncaches) if want_cache else None
    return p[1], cache


def decode(params: ModelParams, F_2, F_3, F_4) -> DenseField:
    cfg = params.config
    for i, f in ((2, F_2), (3, F_3), (4, F_4)):
        want = (cfg.channels[i - 1],) + (cfg.level_size(i),) * 3
        if f.shape != want:
            raise ShapeError(f"F_{i} has shape {f.shape}, expected {want}")
    out, _ = _decode(params, F_2, F_3, F_4, False)
    return DenseField(np.clip(out, 0.0, 1.0))


def _decode_backward(params, cache, dO, grads):
    """Returns (dF2, dF3, dF4) and accumulates decoder parameter grads."""
    t = params.tensors
    cfg = params.config
    c2w, c3w = cfg.channels[1], cfg.channels[2]
    f4, z1, c1, z2, c2, z3, r3, p, ncaches = cache
    # two-channel softmax: O = p1, dz1 = dO p1 p0, dz0 = -dO p1 p0
    g = dO * p[1] * p[0]
    dz4 = np.stack([-g, g])
    dr3, dw, db = kernels.deconv3d_grads(r3, t["dec4_w"], dz4, 2, 1)
    grads["dec4_w"] += dw
    grads["dec4_b"] += db
    dz3 = dr3 * (z3 > 0)
    if ncaches[2] is not None:
        dz3, dg, do = _inorm_backward(dz3, ncaches[2])
        grads["dec3_g"] += dg
        grads["dec3_o"] += do
    dc2, dw, db = kernels.deconv3d_grads(c2, t["dec3_w"], dz3, 2, 1)
    grads["dec3_w"] += dw
    grads["dec3_b"] += db
    dr2, df2 = dc2[:c2w], dc2[c2w:]
    dz2 = dr2 * (z2 > 0)
    if ncaches[1] is not None:
        dz2, dg, do = _inorm_backward(dz2, ncaches[1])
        grads["dec2_g"] += dg
        grads["dec2_o"] += do
    dc1, dw, db = kernels.deconv3d_grads(c1, t["dec2_w"], dz2, 2, 1)
    grads["dec2_w"] += dw
    grads["dec2_b"] += db
    dr1, df3 = dc1[:c3w], dc1[c3w:]
    dz1 = dr1 * (z1 > 0)
    if ncaches[0] is not None:
        dz1, dg, do = _inorm_backward(dz1, ncaches[0])
        grads["dec1_g"] += dg
        grads["dec1_o"] += do
    df4, dw, db = kernels.deconv3d_grads(f4, t["dec1_w"], dz1, 2, 1)
    grads["dec1_w"] += dw
    grads["dec1_b"] += db
    return df2, df3, df4


# ---------------------------------------------------------------------------
# full forward / backward

@dataclass
class PriorEncoding:
    """Shared per-step prior features: levels per prior plus backprop caches."""

    levels: list  # per prior: list of 4 arrays
    caches: list  # per prior: conv caches (empty when not training)


def encode_prior_features(params: ModelParams, prior_grids, want_cache: bool = False
                          ) -> PriorEncoding:
    levels, caches = [], []
    for g in prior_grids:
        x = g.occ.astype(np.float64)[None] if isinstance(g, VoxelGrid) else g
        lv, cc = _encode_prior(params, x, want_cache)
        levels.append(lv)
        caches.append(cc)
    if not levels:
        raise ConfigError("prior bank must be nonempty")
    return PriorEncoding(levels=levels, caches=caches)


@dataclass
class SampleCache:
    x: np.ndarray
    enc_cache: list
    attn_caches: dict  # layer -> attention cache
    dec_cache: tuple


def forward_partial(params: ModelParams, x: np.ndarray, priors: PriorEncoding,
                    want_cache: bool = False):
    """Forward one sample against pre-encoded priors. Returns (O, cache)."""
    xlevels, enc_cache = _encode_partial(params, x, want_cache)
    fused = {}
    attn_caches = {}
    for i in (2, 3, 4):
        ys = [lv[i - 1] for lv in priors.levels]
        f, _, cache = _attention(xlevels[i - 1], ys, want_cache)
        fused[i] = f
        attn_caches[i] = cache
    out, dec_cache = _decode(params, fused[2], fused[3], fused[4], want_cache)
    cache = (
        SampleCache(x=x, enc_cache=enc_cache, attn_caches=attn_caches,
                    dec_cache=dec_cache)
        if want_cache
        else None
    )
    return out, cache


def backward_partial(params: ModelParams, cache: SampleCache, dO: np.ndarray,
                     grads: dict, dY_acc: list) -> None:
    """Backprop one sample; prior-feature grads accumulate into dY_acc.

    dY_acc is a list (per prior) of 4-element lists of arrays matching the
    prior pyramid shapes; the caller later runs backward_priors once.
    """
    df2, df3, df4 = _decode_backward(params, cache.dec_cache, dO, grads)
    m = len(dY_acc)
    dlevels = [None] * 4
    for i, df in ((2, df2), (3, df3), (4, df4)):
        dxi, dkeys = _attention_backward(cache.attn_caches[i], df)
        dlevels[i - 1] = dxi
        c = dxi.shape[0]
        n3 = dkeys.shape[0] // m
        spatial = dxi.shape[1:]
        for pi in range(m):
            dY_acc[pi][i - 1] += dkeys[pi * n3:(pi + 1) * n3].T.reshape((c,) + spatial)
    dlevels[0] = np.zeros_like(cache.enc_cache[1][0])  # layer-1 feeds only layer 2
    _encode_partial_backward(params, cache.enc_cache, dlevels, grads)


def zero_prior_grads(params: ModelParams, n_priors: int) -> list:
    cfg = params.config
    return [
        [
            np.zeros((cfg.channels[i],) + (cfg.level_size(i + 1),) * 3)
            for i in range(4)
        ]
        for _ in range(n_priors)
    ]


def backward_priors(params: ModelParams, priors: PriorEncoding, dY_acc: list,
                    grads: dict) -> None:
    for cache, dlevels in zip(priors.caches, dY_acc):
        _encode_prior_backward(params, cache, dlevels, grads)


def forward(params: ModelParams, grid: VoxelGrid, bank: PriorBank) -> DenseField:
    cfg = params.config
    if bank.resolution != cfg.resolution:
        raise ShapeError(
            f"bank resolution {bank.resolution} != configured {cfg.resolution}"
        )
    priors = encode_prior_features(params, bank.priors, want_cache=False)
    out, _ = forward_partial(params, _grid_input(grid, cfg), priors, want_cache=False)
    return DenseField(np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# checkpoints: a flat deterministic container (no archive timestamps)

def save_checkpoint(params: ModelParams, path) -> None:
    cfg_blob = params.config.to_json().encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, len(cfg_blob)),
        cfg_blob,
        struct.pack("<I", len(params.tensors)),
    ]
    for name, _, _ in _param_specs(params.config):
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    from voxcomplete.voxel import _atomic_write

    _atomic_write(path, b"".join(parts))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    try:
        version, cfg_len = struct.unpack("<II", buf[4:12])
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        cfg = ArchConfig.from_json(buf[off:off + cfg_len].decode("utf-8"))
        off += cfg_len
        (count,) = struct.unpack("<I", buf[off:off + 4])
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", buf[off:off + 2])
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack("<B", buf[off:off + 1])
            off += 1
            shape = struct.unpack(f"<{ndim}I", buf[off:off + 4 * ndim])
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off)
            off += size * 8
            tensors[name] = arr.reshape(shape).copy()
    except (struct.error, IndexError, UnicodeDecodeError, ValueError) as exc:
        raise CorruptionError(f"{path}: truncated checkpoint: {exc}") from exc
    expected = {name: shape for name, shape, _ in _param_specs(cfg)}
    if set(tensors) != set(expected):
        raise ShapeError(f"{path}: tensor names do not match the stored config")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ShapeError(
                f"{path}: tensor {name} has shape {tensors[name].shape}, "
                f"config requires {shape}"
            )
    return ModelParams(cfg, tensors)
