"""Procedural toy corpus and simulated scanning.

Four shape families share local parts (slabs, legs, poles, walls) so that
completing an unseen category can borrow structure learned from seen
ones: tables and benches share slab+legs, lamps contribute poles and
slabs, baskets contribute walls and slabs. Partial scans come from
orthographic occlusion culling along random view directions.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from voxcomplete import kernels
from voxcomplete.errors import ConfigError, DomainError, FormatError
from voxcomplete.voxel import VoxelGrid, save_grid

FAMILY_NAMES = ("table", "lamp", "basket", "bench")

TOY_RESOLUTIONS = (16, 32)
SCAN_POSES = 6  # single-direction culls fused into one stored scan


def _boxput(occ, x0, x1, y0, y1, z0, z1):
    n = occ.shape[0]
    occ[max(x0, 0):min(x1, n), max(y0, 0):min(y1, n), max(z0, 0):min(z1, n)] = True


def _legs(occ, rng, x0, x1, y0, y1, z0, z1, thick):
    # four corner legs inside the [x0,x1) x [y0,y1) footprint
    for cx, cy in ((x0, y0), (x1 - thick, y0), (x0, y1 - thick), (x1 - thick, y1 - thick)):
        _boxput(occ, cx, cx + thick, cy, cy + thick, z0, z1)


# Parts stay >= 2 voxels thick and size windows stay moderate so that
# instances of one family genuinely overlap and families share local
# structure (slabs, legs, poles, walls) at matching scales.

def _slab_thick(rng, n):
    return int(rng.integers(2, max(3, n // 6) + 1))


def _strut_thick(rng, n):
    return int(rng.integers(2, max(2, n // 8) + 1))


def _table(rng, n):
    occ = np.zeros((n, n, n), dtype=bool)
    w = int(rng.integers(round(0.70 * n), round(0.95 * n) + 1))
    d = int(rng.integers(round(0.70 * n), round(0.95 * n) + 1))
    x0, y0 = (n - w) // 2, (n - d) // 2
    h = int(rng.integers(round(0.60 * n), round(0.80 * n) + 1))
    tt = _slab_thick(rng, n)
    lt = _strut_thick(rng, n)
    _boxput(occ, x0, x0 + w, y0, y0 + d, h - tt, h)  # top slab
    _legs(occ, rng, x0, x0 + w, y0, y0 + d, 0, h - tt, lt)
    return occ


def _lamp(rng, n):
    occ = np.zeros((n, n, n), dtype=bool)
    bw = int(rng.integers(round(0.35 * n), round(0.55 * n) + 1))
    bx = (n - bw) // 2
    bt = _strut_thick(rng, n)
    _boxput(occ, bx, bx + bw, bx, bx + bw, 0, bt)  # base slab
    pt = _strut_thick(rng, n)
    px = (n - pt) // 2
    sh = int(rng.integers(round(0.20 * n), round(0.30 * n) + 1))
    top = int(rng.integers(round(0.60 * n), round(0.80 * n) + 1))
    _boxput(occ, px, px + pt, px, px + pt, 0, top - sh)  # pole
    sw = int(rng.integers(round(0.45 * n), round(0.65 * n) + 1))
    sx = (n - sw) // 2
    _boxput(occ, sx, sx + sw, sx, sx + sw, top - sh, top)  # shade
    return occ


def _basket(rng, n):
    occ = np.zeros((n, n, n), dtype=bool)
    w = int(rng.integers(round(0.65 * n), round(0.90 * n) + 1))
    d = int(rng.integers(round(0.65 * n), round(0.90 * n) + 1))
    h = int(rng.integers(round(0.45 * n), round(0.70 * n) + 1))
    x0, y0 = (n - w) // 2, (n - d) // 2
    wt = _strut_thick(rng, n)
    _boxput(occ, x0, x0 + w, y0, y0 + d, 0, h)  # solid block …
    occ[x0 + wt:x0 + w - wt, y0 + wt:y0 + d - wt, wt:h] = False  # … top open
    return occ


def _bench(rng, n):
    occ = np.zeros((n, n, n), dtype=bool)
    w = int(rng.integers(round(0.70 * n), round(0.95 * n) + 1))
    d = int(rng.integers(round(0.35 * n), round(0.55 * n) + 1))
    x0, y0 = (n - w) // 2, (n - d) // 2
    seat_h = int(rng.integers(round(0.30 * n), round(0.45 * n) + 1))
    st = _slab_thick(rng, n)
    lt = _strut_thick(rng, n)
    _boxput(occ, x0, x0 + w, y0, y0 + d, seat_h - st, seat_h)  # seat slab
    _legs(occ, rng, x0, x0 + w, y0, y0 + d, 0, seat_h - st, lt)
    back_h = int(rng.integers(round(0.55 * n), round(0.80 * n) + 1))
    _boxput(occ, x0, x0 + w, y0, y0 + st, seat_h, back_h)  # back rest
    return occ


FAMILIES = {"table": _table, "lamp": _lamp, "basket": _basket, "bench": _bench}


# ---------------------------------------------------------------------------
# scanning and noise

def simulate_partial_scan(grid: VoxelGrid, direction) -> VoxelGrid:
    """Orthographic occlusion culling.

    A voxel survives iff the ray from its center opposite to the view
    direction leaves the grid without crossing another occupied voxel,
    i.e. the voxel is visible to a camera looking along `direction`.
    Idempotent for a fixed direction, and the output is always a subset
    of the input.
    """
    try:
        d = np.asarray(direction, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DomainError(f"direction must be a nonzero 3-vector, got {direction!r}") from exc
    if d.shape != (3,) or not np.isfinite(d).all() or float((d * d).sum()) == 0.0:
        raise DomainError(f"direction must be a nonzero 3-vector, got {direction!r}")
    if grid.count == 0:
        return VoxelGrid(np.zeros_like(grid.occ), grid.object_id, grid.category)
    occ = np.ascontiguousarray(grid.occ.astype(np.uint8))
    kept = kernels.visible_mask(occ, -d)
    return VoxelGrid(kept.astype(bool), grid.object_id, grid.category)


def add_noise(grid: VoxelGrid, sigma: float, seed: int) -> VoxelGrid:
    """Flip empty voxels on with probability min(1, sigma/10); occupied
    voxels always survive."""
    if sigma < 0:
        raise DomainError(f"sigma must be nonnegative, got {sigma}")
    p = min(1.0, sigma / 10.0)
    rng = np.random.default_rng(seed)
    flips = rng.random(grid.occ.shape) < p
    return VoxelGrid(grid.occ | flips, grid.object_id, grid.category)


# ---------------------------------------------------------------------------
# corpus generation

@dataclass(frozen=True)
class ManifestEntry:
    object_id: str
    category: str
    split: str  # train | test
    complete_path: str  # relative to the manifest directory
    partial_paths: tuple


@dataclass(frozen=True)
class DatasetManifest:
    resolution: int
    seed: int
    categories: tuple
    per_category: int
    scans_per_object: int
    test_categories: tuple
    entries: tuple
    root: str = ""  # directory the relative paths resolve against

    def train_entries(self) -> list:
        return [e for e in self.entries if e.split == "train"]

    def test_entries(self) -> list:
        return [e for e in self.entries if e.split == "test"]

    def complete_path(self, entry: ManifestEntry) -> str:
        return os.path.join(self.root, entry.complete_path)

    def partial_paths(self, entry: ManifestEntry) -> list:
        return [os.path.join(self.root, p) for p in entry.partial_paths]

    def to_doc(self) -> dict:
        return {
            "resolution": self.resolution,
            "seed": self.seed,
            "categories": list(self.categories),
            "per_category": self.per_category,
            "scans_per_object": self.scans_per_object,
            "test_categories": list(self.test_categories),
            "entries": [
                {
                    "object_id": e.object_id,
                    "category": e.category,
                    "split": e.split,
                    "complete_path": e.complete_path,
                    "partial_paths": list(e.partial_paths),
                }
                for e in self.entries
            ],
        }


def _random_direction(rng) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        norm = float(np.sqrt((v * v).sum()))
        if norm > 1e-6:
            return v / norm


def gen_toy_dataset(
    resolution: int,
    categories,
    per_category: int,
    scans_per_object: int,
    seed: int,
    out_dir,
    test_categories=None,
) -> DatasetManifest:
    """Generate the corpus on disk and return its manifest.

    Unseen-category protocol: categories named in test_categories (default
    the last listed category) appear only in the test split; all their
    objects are withheld from training wholesale.
    """
    if resolution not in TOY_RESOLUTIONS:
        raise ConfigError(
            f"toy corpus resolution must be one of {TOY_RESOLUTIONS}, got {resolution}"
        )
    categories = tuple(categories)
    if not categories or per_category < 1 or scans_per_object < 1:
        raise ConfigError("need at least one category, object, and scan")
    unknown = [c for c in categories if c not in FAMILIES]
    if unknown:
        raise ConfigError(f"unknown shape families {unknown}; known: {FAMILY_NAMES}")
    if len(set(categories)) != len(categories):
        raise ConfigError("duplicate categories")
    if test_categories is None:
        test_categories = (categories[-1],)
    test_categories = tuple(test_categories)
    if not set(test_categories) <= set(categories):
        raise ConfigError("test_categories must be a subset of categories")
    if set(test_categories) == set(categories):
        raise ConfigError("at least one category must remain in the train split")

    out_dir = os.fspath(out_dir)
    os.makedirs(os.path.join(out_dir, "complete"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "partial"), exist_ok=True)

    n_objects = len(categories) * per_category
    children = np.random.SeedSequence(seed).spawn(n_objects)
    entries = []
    obj_idx = 0
    for cat in categories:
        split = "test" if cat in test_categories else "train"
        for i in range(per_category):
            rng = np.random.default_rng(children[obj_idx])
            obj_idx += 1
            oid = f"{cat}_{i:03d}"
            occ = FAMILIES[cat](rng, resolution)
            complete = VoxelGrid(occ, object_id=oid, category=cat)
            rel_complete = os.path.join("complete", f"{oid}.wvox")
            save_grid(complete, os.path.join(out_dir, rel_complete))
            rel_partials = []
            for si in range(scans_per_object):
                # One stored scan fuses a few single-direction culls, like a
                # short camera sweep. A lone view of these solid parts keeps
                # under 20% of the shape, which starves the occupancy target
                # H = alpha * |S|; six poses keep H near or above the size of
                # a plausible completion, the regime the refinement losses
                # are balanced for.
                occ_scan = np.zeros_like(complete.occ)
                for _ in range(SCAN_POSES):
                    view = simulate_partial_scan(complete, _random_direction(rng))
                    occ_scan |= view.occ
                scan = VoxelGrid(occ_scan, object_id=oid, category=cat)
                rel = os.path.join("partial", f"{oid}_s{si}.wvox")
                save_grid(scan, os.path.join(out_dir, rel))
                rel_partials.append(rel)
            entries.append(
                ManifestEntry(
                    object_id=oid,
                    category=cat,
                    split=split,
                    complete_path=rel_complete,
                    partial_paths=tuple(rel_partials),
                )
            )

    manifest = DatasetManifest(
        resolution=resolution,
        seed=seed,
        categories=categories,
        per_category=per_category,
        scans_per_object=scans_per_object,
        test_categories=test_categories,
        entries=tuple(entries),
        root=out_dir,
    )
    doc = json.dumps(manifest.to_doc(), sort_keys=True, indent=2) + "\n"
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(doc)
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))
    return manifest


def load_manifest(path) -> DatasetManifest:
    path = os.fspath(path)
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not a dataset manifest: {exc}") from exc
    try:
        entries = tuple(
            ManifestEntry(
                object_id=e["object_id"],
                category=e["category"],
                split=e["split"],
                complete_path=e["complete_path"],
                partial_paths=tuple(e["partial_paths"]),
            )
            for e in doc["entries"]
        )
        manifest = DatasetManifest(
            resolution=doc["resolution"],
            seed=doc["seed"],
            categories=tuple(doc["categories"]),
            per_category=doc["per_category"],
            scans_per_object=doc["scans_per_object"],
            test_categories=tuple(doc["test_categories"]),
            entries=entries,
            root=os.path.dirname(os.path.abspath(path)),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: manifest missing field {exc}") from exc
    ids = [e.object_id for e in manifest.entries]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate object ids")
    train_cats = {e.category for e in manifest.train_entries()}
    test_cats = {e.category for e in manifest.test_entries()}
    if train_cats & test_cats:
        raise FormatError(
            f"{path}: categories {sorted(train_cats & test_cats)} appear in both splits"
        )
    return manifest
