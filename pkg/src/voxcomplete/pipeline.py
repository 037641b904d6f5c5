"""Two-stage training orchestration and evaluation.

Stage 1 (CoSL) trains one model on seen categories with full supervision.
Stage 2 (CaSR) trains one fresh model per unseen category from that
stage's coarse outputs, supervised only by the category's partial scans
and the coarse missing-part mask; ground-truth completes never enter.

Batches share one prior encoding per step: priors are identical for every
sample, so their features are computed (and backpropagated) once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from voxcomplete import losses as L
from voxcomplete import net
from voxcomplete.errors import ConfigError, ShapeError, TrainingDiverged
from voxcomplete.net import ArchConfig, ModelParams
from voxcomplete.priors import PriorBank
from voxcomplete.voxel import (
    DenseField,
    VoxelGrid,
    binarize,
    chamfer,
    f1,
    iou,
    missing_part,
    to_points,
)

STAGES = ("cosl", "casr")

STAGE_DEFAULT_LR = {"cosl": 1e-3, "casr": 1e-4}


@dataclass
class TrainConfig:
    stage: str
    batch_size: int = 10
    epochs: int = 120
    lr: float | None = None
    decay: float = 0.5
    decay_every: int = 50
    seed: int = 0
    scans_per_object: int = 4
    val_fraction: float = 0.1
    max_steps: int | None = None
    eval_every: int = 1  # epochs between validation passes
    threshold: float = 0.5

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.lr is None:
            self.lr = STAGE_DEFAULT_LR[self.stage]
        if self.batch_size < 1 or self.epochs < 1 or not self.lr > 0:
            raise ConfigError("batch_size, epochs, and lr must be positive")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError(f"decay must lie in (0, 1], got {self.decay}")
        if self.decay_every < 1 or self.scans_per_object < 1 or self.eval_every < 1:
            raise ConfigError("decay_every, scans_per_object, eval_every must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.decay ** (epoch // cfg.decay_every)


class Adam:
    """Standard adaptive-moment optimizer (beta 0.9/0.999, eps 1e-8)."""

    def __init__(self, params: ModelParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.tensors.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    params: ModelParams  # best checkpoint per the stage's selection rule
    final_params: ModelParams
    log: list  # per-step/per-eval dict records
    best_metric: float
    steps: int


def _batches(order, size):
    for i in range(0, len(order), size):
        yield order[i:i + size]


def train_cosl(train_set, bank: PriorBank, cfg: TrainConfig,
               arch: ArchConfig | None = None) -> TrainResult:
    """Supervised coarse-stage training on (partial, complete) pairs.

    Best checkpoint = highest validation IoU on a held-out fraction of the
    pairs; with val_fraction 0 the final parameters are returned.
    """
    pairs = list(train_set)
    if cfg.stage != "cosl":
        raise ConfigError(f"expected a cosl config, got stage {cfg.stage!r}")
    if bank.kind != "seen_category":
        raise ConfigError(f"cosl needs a seen_category bank, got {bank.kind!r}")
    if not pairs:
        raise ConfigError("training set is empty")
    res = pairs[0][0].resolution
    for s, g in pairs:
        if s.resolution != res or g.resolution != res:
            raise ShapeError("training pairs mix resolutions")
    if bank.resolution != res:
        raise ShapeError(f"bank resolution {bank.resolution} != data {res}")
    if arch is None:
        arch = ArchConfig(resolution=res, seed=cfg.seed)

    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(pairs))
    n_val = int(round(cfg.val_fraction * len(pairs)))
    if cfg.val_fraction > 0:
        n_val = max(1, min(n_val, len(pairs) - 1))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        raise ConfigError("validation split leaves no training samples")

    params = net.init_model(arch)
    opt = Adam(params)
    xs = {i: pairs[i][0].occ.astype(np.float64)[None] for i in range(len(pairs))}
    gts = {i: pairs[i][1].occ.astype(np.float64) for i in range(len(pairs))}

    log: list = []
    best = params.copy()
    best_iou = -1.0
    step = 0
    stop = False
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        order = rng.permutation(train_idx)
        for batch in _batches(order, cfg.batch_size):
            priors = net.encode_prior_features(params, bank.priors, want_cache=True)
            grads = net.zero_grads(params)
            dy = net.zero_prior_grads(params, len(bank))
            inv = 1.0 / len(batch)
            loss = 0.0
            for i in batch:
                out, cache = net.forward_partial(params, xs[i], priors, want_cache=True)
                loss += L.l1_full(out, gts[i]) * inv
                net.backward_partial(params, cache, L.l1_full_grad(out, gts[i]) * inv,
                                     grads, dy)
            if not np.isfinite(loss):
                raise TrainingDiverged(step, [pairs[i][0].object_id for i in batch])
            net.backward_priors(params, priors, dy, grads)
            opt.step(params, grads, lr)
            step += 1
            log.append({"step": step, "epoch": epoch, "lr": lr, "loss": float(loss)})
            if cfg.max_steps is not None and step >= cfg.max_steps:
                stop = True
                break
        if len(val_idx) and (epoch % cfg.eval_every == 0 or stop or epoch == cfg.epochs - 1):
            val_iou = _mean_iou_vs(params, bank, [pairs[i][0] for i in val_idx],
                                   [pairs[i][1] for i in val_idx], cfg.threshold)
            log.append({"step": step, "epoch": epoch, "val_iou": val_iou})
            if val_iou > best_iou:
                best_iou = val_iou
                best = params.copy()
        if stop:
            break
    if not len(val_idx):
        best, best_iou = params.copy(), float("nan")
    return TrainResult(params=best, final_params=params, log=log,
                       best_metric=best_iou, steps=step)


def _mean_iou_vs(params, bank, inputs, refs, threshold) -> float:
    priors = net.encode_prior_features(params, bank.priors)
    vals = []
    for g, ref in zip(inputs, refs):
        out, _ = net.forward_partial(params, g.occ.astype(np.float64)[None], priors)
        pred = binarize(DenseField(np.clip(out, 0.0, 1.0)), threshold)
        vals.append(iou(pred, ref))
    return float(np.mean(vals))


def run_cosl_inference(params: ModelParams, partials, bank: PriorBank,
                       threshold: float = 0.5) -> list:
    """Forward + binarize each partial; outputs keep the input's identity."""
    priors = net.encode_prior_features(params, bank.priors)
    out = []
    for g in partials:
        o, _ = net.forward_partial(params, net._grid_input(g, params.config), priors)
        coarse = binarize(DenseField(np.clip(o, 0.0, 1.0)), threshold)
        out.append(VoxelGrid(coarse.occ, g.object_id, g.category))
    return out


@dataclass
class CasrResult:
    params: ModelParams  # best checkpoint by partial-input IoU
    final_params: ModelParams
    fields: list  # refined DenseField per object, from the best checkpoint
    log: list
    best_partial_iou: float
    steps: int


def refine_casr(coarse, partials_per_object, cat_bank: PriorBank, hp: L.HyperParams,
                cfg: TrainConfig, arch: ArchConfig | None = None) -> CasrResult:
    """Self-supervised refinement of one category.

    Model input is the object's coarse shape; the loss averages the
    matching objective over the object's partial scans, each with its own
    missing-part mask T = coarse minus that scan. Checkpoint selection
    uses only IoU against the partial inputs: no ground truth is read
    anywhere in this stage.
    """
    coarse = list(coarse)
    scans = [list(p) for p in partials_per_object]
    if cfg.stage != "casr":
        raise ConfigError(f"expected a casr config, got stage {cfg.stage!r}")
    if cat_bank.kind != "category_specific":
        raise ConfigError(
            f"casr needs a category_specific bank, got {cat_bank.kind!r}"
        )
    if not coarse or len(coarse) != len(scans) or any(not s for s in scans):
        raise ConfigError("category is empty or scans misaligned with coarse inputs")
    res = coarse[0].resolution
    if any(c.resolution != res for c in coarse) or cat_bank.resolution != res:
        raise ShapeError("coarse/bank resolutions disagree")
    if arch is None:
        arch = ArchConfig(resolution=res, seed=cfg.seed)

    scans = [s[:cfg.scans_per_object] for s in scans]
    masks = [
        [missing_part(c, sc).occ.astype(np.float64) for sc in s]
        for c, s in zip(coarse, scans)
    ]
    smasks = [[sc.occ.astype(np.float64) for sc in s] for s in scans]
    xs = [c.occ.astype(np.float64)[None] for c in coarse]

    params = net.init_model(arch)
    opt = Adam(params)
    rng = np.random.default_rng(cfg.seed)
    log: list = []
    best = params.copy()
    best_iou = -1.0
    step = 0
    stop = False
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        order = rng.permutation(len(coarse))
        for batch in _batches(order, cfg.batch_size):
            priors = net.encode_prior_features(params, cat_bank.priors, want_cache=True)
            grads = net.zero_grads(params)
            dy = net.zero_prior_grads(params, len(cat_bank))
            inv = 1.0 / len(batch)
            loss = 0.0
            comps = {"L_p": 0.0, "L_s": 0.0, "L_v": 0.0, "L_m": 0.0}
            for j in batch:
                out, cache = net.forward_partial(params, xs[j], priors, want_cache=True)
                sinv = inv / len(scans[j])
                do = np.zeros_like(out)
                for s, t in zip(smasks[j], masks[j]):
                    lval, c = L.casr_total(out, s, t, hp)
                    loss += lval * sinv
                    for k in comps:
                        comps[k] += c[k] * sinv
                    do += L.casr_total_grad(out, s, t, hp) * sinv
                net.backward_partial(params, cache, do, grads, dy)
            if not np.isfinite(loss):
                raise TrainingDiverged(step, [coarse[j].object_id for j in batch])
            net.backward_priors(params, priors, dy, grads)
            opt.step(params, grads, lr)
            step += 1
            rec = {"step": step, "epoch": epoch, "lr": lr, "total": float(loss)}
            rec.update({k: float(v) for k, v in comps.items()})
            log.append(rec)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                stop = True
                break
        if epoch % cfg.eval_every == 0 or stop or epoch == cfg.epochs - 1:
            piou = _partial_iou(params, cat_bank, xs, scans, cfg.threshold)
            log.append({"step": step, "epoch": epoch, "val_partial_iou": piou})
            if piou > best_iou:
                best_iou = piou
                best = params.copy()
        if stop:
            break

    priors = net.encode_prior_features(best, cat_bank.priors)
    fields = []
    for j, x in enumerate(xs):
        out, _ = net.forward_partial(best, x, priors)
        fields.append(DenseField(np.clip(out, 0.0, 1.0)))
    return CasrResult(params=best, final_params=params, fields=fields, log=log,
                      best_partial_iou=best_iou, steps=step)


def _partial_iou(params, bank, xs, scans, threshold) -> float:
    priors = net.encode_prior_features(params, bank.priors)
    vals = []
    for x, ss in zip(xs, scans):
        out, _ = net.forward_partial(params, x, priors)
        pred = binarize(DenseField(np.clip(out, 0.0, 1.0)), threshold)
        for sc in ss:
            vals.append(iou(pred, sc))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# hyperparameter selection and evaluation

@dataclass(frozen=True)
class HyperparamEvalSet:
    """Per-candidate predictions plus the shared reference grids.

    references are ground-truth completes for the cosl stage and partial
    inputs for the casr stage (where completes are unavailable).
    """

    predictions: tuple  # per candidate: tuple of DenseField | VoxelGrid
    references: tuple  # VoxelGrid

    def __post_init__(self):
        object.__setattr__(self, "predictions",
                           tuple(tuple(p) for p in self.predictions))
        object.__setattr__(self, "references", tuple(self.references))


def select_hyperparams(candidates, stage: str, eval_set: HyperparamEvalSet):
    """Pick the candidate whose predictions score the highest mean IoU
    against the references; ties go to the earlier candidate."""
    candidates = list(candidates)
    if stage not in STAGES:
        raise ConfigError(f"stage must be one of {STAGES}, got {stage!r}")
    if not candidates:
        raise ConfigError("need at least one candidate")
    if not eval_set.references or len(eval_set.predictions) != len(candidates):
        raise ConfigError("eval set empty or misaligned with candidates")
    best, best_score = None, -1.0
    for hp, preds in zip(candidates, eval_set.predictions):
        if len(preds) != len(eval_set.references):
            raise ConfigError("candidate predictions misaligned with references")
        score = float(np.mean([
            iou(binarize(p, 0.5) if isinstance(p, DenseField) else p, ref)
            for p, ref in zip(preds, eval_set.references)
        ]))
        if score > best_score:
            best, best_score = hp, score
    return best


@dataclass(frozen=True)
class GroupMetrics:
    iou: float
    f1: float
    cd: float | None  # x100; None when every sample was excluded
    count: int
    cd_excluded: int


@dataclass(frozen=True)
class MetricsReport:
    per_category: dict  # category -> GroupMetrics
    overall: GroupMetrics

    def to_doc(self) -> dict:
        def doc(g: GroupMetrics) -> dict:
            return {
                "iou": g.iou,
                "f1": g.f1,
                "cd_x100": g.cd,
                "count": g.count,
                "cd_excluded": g.cd_excluded,
            }

        return {
            "per_category": {c: doc(g) for c, g in sorted(self.per_category.items())},
            "overall": doc(self.overall),
        }

    def format_table(self) -> str:
        rows = [f"{'category':<12} {'n':>4} {'IoU':>8} {'F1':>8} {'CD(x100)':>10}"]
        items = sorted(self.per_category.items()) + [("average", self.overall)]
        for name, g in items:
            cd = f"{g.cd:10.4f}" if g.cd is not None else f"{'n/a':>10}"
            rows.append(f"{name:<12} {g.count:>4} {g.iou:8.4f} {g.f1:8.4f} {cd}")
            if g.cd_excluded:
                rows[-1] += f"  ({g.cd_excluded} excluded from CD)"
        return "\n".join(rows)


def _aggregate(samples) -> GroupMetrics:
    cds = [s["cd"] for s in samples if s["cd"] is not None]
    return GroupMetrics(
        iou=float(np.mean([s["iou"] for s in samples])),
        f1=float(np.mean([s["f1"] for s in samples])),
        cd=float(np.mean(cds)) if cds else None,
        count=len(samples),
        cd_excluded=sum(1 for s in samples if s["cd"] is None),
    )


def evaluate(predictions, ground_truths, categories) -> MetricsReport:
    """Per-sample IoU/F1/CD grouped by category plus the sample-weighted
    overall row. Empty predictions are excluded from CD (and counted)."""
    preds, gts, cats = list(predictions), list(ground_truths), list(categories)
    if not preds or len(preds) != len(gts) or len(preds) != len(cats):
        raise ConfigError("predictions, ground truths, and categories must align")
    samples = []
    for p, g, c in zip(preds, gts, cats):
        if p.resolution != g.resolution:
            raise ShapeError("prediction/ground-truth resolution mismatch")
        cd = None
        if p.count > 0 and g.count > 0:
            cd = 100.0 * chamfer(to_points(p), to_points(g))
        samples.append({"iou": iou(p, g), "f1": f1(p, g), "cd": cd, "category": c})
    per_cat = {}
    for c in sorted({s["category"] for s in samples}):
        per_cat[c] = _aggregate([s for s in samples if s["category"] == c])
    return MetricsReport(per_category=per_cat, overall=_aggregate(samples))
