"""Prior banks: the fixed reference shapes the network attends over.

Two constructions:
  - seen-category bank: cluster complete training shapes with mean-shift
    in a pooled-occupancy embedding and keep one representative per large
    cluster, so the bank spans the corpus's coarse structures;
  - category-specific bank: pair partial scans of distinct objects with
    minimal mutual overlap and take the union of each pair, so every
    prior approximates a more complete shape than any single scan.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from voxcomplete.clustering import mean_shift
from voxcomplete.errors import ConfigError, FormatError, ShapeError
from voxcomplete.voxel import VoxelGrid, load_grid, overlap_count, save_grid, union

BANK_KINDS = ("seen_category", "category_specific")

EMBED_POOL = 8  # shapes are embedded as 8^3 average-pooled occupancy


@dataclass(frozen=True)
class PriorBank:
    priors: tuple
    kind: str
    source_ids: tuple  # per prior, the contributing object ids
    fallback: bool = False  # True when fewer priors than requested exist

    def __post_init__(self):
        if self.kind not in BANK_KINDS:
            raise ConfigError(f"unknown bank kind {self.kind!r}")
        object.__setattr__(self, "priors", tuple(self.priors))
        object.__setattr__(
            self, "source_ids", tuple(tuple(ids) for ids in self.source_ids)
        )
        if not self.priors:
            raise ConfigError("prior bank must hold at least one prior")
        if len(self.priors) != len(self.source_ids):
            raise ConfigError("source_ids must align with priors")
        res = {g.resolution for g in self.priors}
        if len(res) != 1:
            raise ShapeError(f"priors mix resolutions {sorted(res)}")
        if self.kind == "category_specific":
            seen: set[str] = set()
            for ids in self.source_ids:
                for oid in ids:
                    if oid in seen:
                        raise ConfigError(
                            f"object {oid!r} contributes to more than one prior"
                        )
                    seen.add(oid)

    @property
    def resolution(self) -> int:
        return self.priors[0].resolution

    def __len__(self) -> int:
        return len(self.priors)


def embed_shape(grid: VoxelGrid) -> np.ndarray:
    """Average-pool occupancy to 8^3 and flatten (512-d, in [0,1])."""
    n = grid.resolution
    if n % EMBED_POOL != 0:
        raise ShapeError(f"resolution {n} not divisible by {EMBED_POOL}")
    f = n // EMBED_POOL
    pooled = (
        grid.occ.astype(np.float64)
        .reshape(EMBED_POOL, f, EMBED_POOL, f, EMBED_POOL, f)
        .mean(axis=(1, 3, 5))
    )
    return pooled.ravel()


def _source_id(grid: VoxelGrid, index: int) -> str:
    return grid.object_id if grid.object_id is not None else f"shape_{index:04d}"


def build_seen_prior_bank(complete_shapes, M: int, seed: int) -> PriorBank:
    """Pick M representative complete shapes by mean-shift clustering.

    Bandwidth is bisected over [0.01*D, D] (D = max pairwise embedding
    distance) until the mode count lands in [M, 2M]; the M largest
    clusters each contribute their member nearest to the mode. The whole
    construction is deterministic; `seed` is recorded for provenance but
    no randomness is consumed.
    """
    shapes = list(complete_shapes)
    if M < 1:
        raise ConfigError(f"M must be positive, got {M}")
    if len(shapes) < M:
        raise ConfigError(f"need at least M={M} shapes, got {len(shapes)}")
    feats = np.stack([embed_shape(g) for g in shapes])

    diffs = feats[:, None, :] - feats[None, :, :]
    dmax = float(np.sqrt((diffs**2).sum(axis=2)).max())
    if dmax == 0.0:
        result = mean_shift(feats, bandwidth=1.0)
        return _bank_from_clusters(shapes, feats, result, M, "seen_category")

    lo, hi = 0.01 * dmax, dmax
    best = None  # (mode_count, result) with smallest count >= M
    most = None  # result with the most modes seen, for the fallback path
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        result = mean_shift(feats, bandwidth=mid)
        count = result.n_modes
        if most is None or count > most.n_modes:
            most = result
        if M <= count <= 2 * M:
            best = result
            break
        if count >= M and (best is None or count < best.n_modes):
            best = result
        if count < M:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-12 * dmax:
            break
    if best is None:
        best = most  # fewer clusters than M exist; shrink below
    return _bank_from_clusters(shapes, feats, best, M, "seen_category")


def _bank_from_clusters(shapes, feats, result, M, kind) -> PriorBank:
    sizes = result.cluster_sizes()
    order = sorted(range(result.n_modes), key=lambda m: (-sizes[m], m))
    kept = order[:M]
    priors, src = [], []
    for m in kept:
        members = np.flatnonzero(result.labels == m)
        d2 = ((feats[members] - result.modes[m]) ** 2).sum(axis=1)
        rep = int(members[int(d2.argmin())])
        priors.append(shapes[rep])
        src.append((_source_id(shapes[rep], rep),))
    return PriorBank(
        priors=tuple(priors),
        kind=kind,
        source_ids=tuple(src),
        fallback=len(priors) < M,
    )


def build_category_prior_bank(partials, M: int) -> PriorBank:
    """Union minimally-overlapping partial-scan pairs from distinct objects.

    Pairs are ranked by overlap count ascending (ties by lexicographic
    object-id pair, then input position) and accepted greedily while both
    object ids are still unused. Returns fewer than M priors with the
    fallback flag set when the corpus cannot supply M disjoint pairs.
    """
    grids = list(partials)
    if M < 1:
        raise ConfigError(f"M must be positive, got {M}")
    for g in grids:
        if g.object_id is None:
            raise ConfigError("every partial must carry an object id")
    if len({g.object_id for g in grids}) < 2:
        raise ConfigError("need partials from at least 2 distinct objects")
    res = {g.resolution for g in grids}
    if len(res) != 1:
        raise ShapeError(f"partials mix resolutions {sorted(res)}")

    candidates = []
    for i in range(len(grids)):
        for j in range(i + 1, len(grids)):
            a, b = grids[i], grids[j]
            if a.object_id == b.object_id:
                continue
            ov = overlap_count(a, b)
            ida, idb = sorted((a.object_id, b.object_id))
            candidates.append((ov, ida, idb, i, j))
    candidates.sort()

    used: set[str] = set()
    priors, src = [], []
    for ov, ida, idb, i, j in candidates:
        if ida in used or idb in used:
            continue
        merged = union(grids[i], grids[j])
        cat = grids[i].category if grids[i].category == grids[j].category else None
        priors.append(merged.with_meta(category=cat))
        src.append((ida, idb))
        used.update((ida, idb))
        if len(priors) == M:
            break
    if not priors:
        raise ConfigError("no cross-object pair available")
    return PriorBank(
        priors=tuple(priors),
        kind="category_specific",
        source_ids=tuple(src),
        fallback=len(priors) < M,
    )


# ---------------------------------------------------------------------------
# bank directory layout: bank.json + one WVOX file per prior

def save_bank(bank: PriorBank, out_dir) -> str:
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, (grid, ids) in enumerate(zip(bank.priors, bank.source_ids)):
        name = f"prior_{i:04d}.wvox"
        save_grid(grid, os.path.join(out_dir, name))
        entries.append({"path": name, "source_ids": list(ids)})
    manifest = {
        "kind": bank.kind,
        "m": len(bank),
        "resolution": bank.resolution,
        "fallback": bank.fallback,
        "priors": entries,
    }
    path = os.path.join(out_dir, "bank.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def load_bank(path) -> PriorBank:
    path = os.fspath(path)
    if os.path.isdir(path):
        path = os.path.join(path, "bank.json")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not a bank manifest: {exc}") from exc
    base = os.path.dirname(path)
    if manifest.get("kind") not in BANK_KINDS:
        raise FormatError(f"{path}: missing or unknown bank kind")
    priors, src = [], []
    for entry in manifest["priors"]:
        priors.append(load_grid(os.path.join(base, entry["path"])))
        src.append(tuple(entry["source_ids"]))
    return PriorBank(
        priors=tuple(priors),
        kind=manifest["kind"],
        source_ids=tuple(src),
        fallback=bool(manifest.get("fallback", False)),
    )
