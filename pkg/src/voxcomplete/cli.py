"""Command-line surface.

Subcommands: gen-toy, build-priors, train-cosl, infer-cosl, refine-casr,
eval, export. Every run writes all outputs plus a resolved-config
snapshot under --out. Exit codes: 0 success, 1 validation error (bad
flags, bad inputs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from voxcomplete import data as datagen
from voxcomplete import net, pipeline
from voxcomplete.errors import TrainingDiverged, VoxError
from voxcomplete.losses import HyperParams
from voxcomplete.priors import (
    build_category_prior_bank,
    build_seen_prior_bank,
    load_bank,
    save_bank,
)
from voxcomplete.voxel import (
    DenseField,
    VoxelGrid,
    binarize,
    load_field,
    load_grid,
    record_loads,
    save_field,
    save_grid,
)
from voxcomplete.errors import ConfigError, FormatError


class _ArgError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit(2); we own exit codes
        raise _ArgError(message)


HYPER_KEYS = ("alpha", "gamma1", "gamma2", "lambda_m", "var_epsilon")
TRAIN_KEYS = (
    "batch_size", "epochs", "lr", "decay", "decay_every", "seed",
    "scans_per_object", "val_fraction", "max_steps", "eval_every", "threshold",
)
ARCH_KEYS = ("channels", "msl_kernels")
MISC_KEYS = ("m",)


def _read_overlay(path) -> dict:
    """key=value overlay file; values parse as JSON when possible."""
    overlay = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key == "lambda":
                key = "lambda_m"
            known = HYPER_KEYS + TRAIN_KEYS + ARCH_KEYS + MISC_KEYS
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                overlay[key] = json.loads(val)
            except json.JSONDecodeError:
                overlay[key] = val
    return overlay


def _overlay_from(args) -> dict:
    return _read_overlay(args.config) if getattr(args, "config", None) else {}


def _int_tuple(value, what):
    if isinstance(value, str):
        value = [v for v in value.split(",") if v]
    try:
        return tuple(int(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what} must be a list of integers, got {value!r}") from exc


def _hyper_from(overlay, args) -> HyperParams:
    kw = {k: overlay[k] for k in HYPER_KEYS if k in overlay}
    for k in ("alpha", "gamma1", "gamma2", "lambda_m"):
        v = getattr(args, k, None)
        if v is not None:
            kw[k] = v
    return HyperParams(**{k: float(v) for k, v in kw.items()})


def _train_from(overlay, stage, args) -> pipeline.TrainConfig:
    kw = {}
    for k in TRAIN_KEYS:
        if k in overlay:
            kw[k] = overlay[k]
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if kw.get("max_steps") is not None:
        kw["max_steps"] = int(kw["max_steps"])
    for k in ("batch_size", "epochs", "decay_every", "seed", "scans_per_object",
              "eval_every"):
        if k in kw:
            kw[k] = int(kw[k])
    for k in ("lr", "decay", "val_fraction", "threshold"):
        if k in kw:
            kw[k] = float(kw[k])
    return pipeline.TrainConfig(stage=stage, **kw)


def _arch_from(overlay, resolution, seed) -> net.ArchConfig:
    kw = {"resolution": resolution, "seed": seed}
    if "channels" in overlay:
        kw["channels"] = _int_tuple(overlay["channels"], "channels")
    if "msl_kernels" in overlay:
        ks = overlay["msl_kernels"]
        if not isinstance(ks, list):
            raise ConfigError("msl_kernels must be a JSON list of lists")
        kw["msl_kernels"] = tuple(_int_tuple(k, "msl_kernels") for k in ks)
    return net.ArchConfig(**kw)


def _write_snapshot(out_dir, command, resolved: dict):
    os.makedirs(out_dir, exist_ok=True)
    doc = {"command": command}
    doc.update(resolved)
    path = os.path.join(out_dir, "config_snapshot.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2, default=str)
        fh.write("\n")


def _write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# handlers

def _cmd_gen_toy(args):
    categories = tuple(c for c in args.categories.split(",") if c)
    test_cats = (
        tuple(c for c in args.test_categories.split(",") if c)
        if args.test_categories
        else None
    )
    manifest = datagen.gen_toy_dataset(
        resolution=args.resolution,
        categories=categories,
        per_category=args.per_category,
        scans_per_object=args.scans,
        seed=args.seed,
        out_dir=args.out,
        test_categories=test_cats,
    )
    _write_snapshot(args.out, "gen-toy", {
        "resolution": args.resolution,
        "categories": list(categories),
        "per_category": args.per_category,
        "scans": args.scans,
        "seed": args.seed,
        "test_categories": list(manifest.test_categories),
    })
    print(f"wrote {len(manifest.entries)} objects "
          f"({sum(len(e.partial_paths) for e in manifest.entries)} scans) "
          f"to {args.out}")


def _cmd_build_priors(args):
    manifest = datagen.load_manifest(args.manifest)
    overlay = _overlay_from(args)
    m = args.m if args.m is not None else int(overlay.get("m", 8))
    if args.kind == "seen":
        shapes = [load_grid(manifest.complete_path(e)) for e in manifest.train_entries()]
        bank = build_seen_prior_bank(shapes, M=m, seed=args.seed)
    else:
        if not args.category:
            raise ConfigError("--category is required for --kind category")
        entries = [e for e in manifest.entries if e.category == args.category]
        if not entries:
            raise ConfigError(f"no objects of category {args.category!r} in manifest")
        partials = [
            load_grid(p)
            for e in entries
            for p in manifest.partial_paths(e)
        ]
        bank = build_category_prior_bank(partials, M=m)
    save_bank(bank, args.out)
    _write_snapshot(args.out, "build-priors", {
        "manifest": os.path.abspath(args.manifest),
        "kind": args.kind,
        "m": m,
        "seed": args.seed,
        "category": args.category,
        "fallback": bank.fallback,
    })
    note = " (fallback: fewer priors than requested)" if bank.fallback else ""
    print(f"bank of {len(bank)} priors ({bank.kind}) -> {args.out}{note}")


def _cosl_pairs(manifest, scans_per_object):
    pairs = []
    for e in manifest.train_entries():
        complete = load_grid(manifest.complete_path(e))
        for p in manifest.partial_paths(e)[:scans_per_object]:
            pairs.append((load_grid(p), complete))
    return pairs


def _cmd_train_cosl(args):
    manifest = datagen.load_manifest(args.manifest)
    overlay = _overlay_from(args)
    bank = load_bank(args.bank)
    cfg = _train_from(overlay, "cosl", args)
    arch = _arch_from(overlay, manifest.resolution, cfg.seed)
    pairs = _cosl_pairs(manifest, cfg.scans_per_object)
    result = pipeline.train_cosl(pairs, bank, cfg, arch)
    os.makedirs(args.out, exist_ok=True)
    net.save_checkpoint(result.params, os.path.join(args.out, "best.vcpt"))
    net.save_checkpoint(result.final_params, os.path.join(args.out, "final.vcpt"))
    _write_jsonl(os.path.join(args.out, "train_log.jsonl"), result.log)
    _write_snapshot(args.out, "train-cosl", {
        "manifest": os.path.abspath(args.manifest),
        "bank": os.path.abspath(args.bank),
        "train": vars(cfg),
        "arch": json.loads(arch.to_json()),
    })
    print(f"trained {result.steps} steps; best val IoU {result.best_metric:.4f}; "
          f"checkpoints -> {args.out}")


def _split_entries(manifest, split):
    if split == "train":
        return manifest.train_entries()
    if split == "test":
        return manifest.test_entries()
    return list(manifest.entries)


def _cmd_infer_cosl(args):
    manifest = datagen.load_manifest(args.manifest)
    bank = load_bank(args.bank)
    params = net.load_checkpoint(args.checkpoint)
    entries = _split_entries(manifest, args.split)
    if not entries:
        raise ConfigError(f"no objects in split {args.split!r}")
    partials = [load_grid(manifest.partial_paths(e)[0]) for e in entries]
    coarse = pipeline.run_cosl_inference(params, partials, bank, args.threshold)
    out_dir = os.path.join(args.out, "coarse")
    os.makedirs(out_dir, exist_ok=True)
    for e, grid in zip(entries, coarse):
        save_grid(grid, os.path.join(out_dir, f"{e.object_id}.wvox"))
    _write_snapshot(args.out, "infer-cosl", {
        "manifest": os.path.abspath(args.manifest),
        "bank": os.path.abspath(args.bank),
        "checkpoint": os.path.abspath(args.checkpoint),
        "split": args.split,
        "threshold": args.threshold,
    })
    print(f"wrote {len(coarse)} coarse shapes -> {out_dir}")


def _cmd_refine_casr(args):
    overlay = _overlay_from(args)
    hp = _hyper_from(overlay, args)
    cfg = _train_from(overlay, "casr", args)
    bank_m = args.m if args.m is not None else int(overlay.get("m", 4))
    os.makedirs(args.out, exist_ok=True)
    with record_loads() as loaded:
        manifest = datagen.load_manifest(args.manifest)
        arch = _arch_from(overlay, manifest.resolution, cfg.seed)
        categories = sorted({e.category for e in manifest.test_entries()})
        if not categories:
            raise ConfigError("manifest has no test categories")
        refined_dir = os.path.join(args.out, "refined")
        os.makedirs(refined_dir, exist_ok=True)
        total = 0
        for cat in categories:
            entries = [e for e in manifest.test_entries() if e.category == cat]
            coarse = [
                load_grid(os.path.join(args.coarse, f"{e.object_id}.wvox"))
                for e in entries
            ]
            scans = [
                [load_grid(p) for p in manifest.partial_paths(e)[:cfg.scans_per_object]]
                for e in entries
            ]
            cat_bank = build_category_prior_bank(
                [s for ss in scans for s in ss], M=bank_m
            )
            result = pipeline.refine_casr(coarse, scans, cat_bank, hp, cfg, arch)
            net.save_checkpoint(
                result.params, os.path.join(args.out, f"casr_{cat}.vcpt")
            )
            _write_jsonl(os.path.join(args.out, f"casr_{cat}_log.jsonl"), result.log)
            for e, fld in zip(entries, result.fields):
                save_field(fld, os.path.join(refined_dir, f"{e.object_id}.wvfd"))
                pred = binarize(fld, cfg.threshold)
                save_grid(
                    VoxelGrid(pred.occ, e.object_id, cat),
                    os.path.join(refined_dir, f"{e.object_id}.wvox"),
                )
            total += len(entries)
            print(f"category {cat}: {len(entries)} objects refined, "
                  f"best partial IoU {result.best_partial_iou:.4f}")
    with open(os.path.join(args.out, "audit.json"), "w", encoding="utf-8") as fh:
        json.dump({"files_read": sorted(set(loaded))}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_snapshot(args.out, "refine-casr", {
        "manifest": os.path.abspath(args.manifest),
        "coarse": os.path.abspath(args.coarse),
        "m": bank_m,
        "hyper": vars(hp),
        "train": vars(cfg),
        "arch": json.loads(arch.to_json()),
    })
    print(f"refined {total} objects -> {refined_dir}")


def _cmd_eval(args):
    manifest = datagen.load_manifest(args.manifest)
    entries = _split_entries(manifest, args.split)
    if not entries:
        raise ConfigError(f"no objects in split {args.split!r}")
    preds, gts, cats = [], [], []
    for e in entries:
        pred_path = os.path.join(args.pred, f"{e.object_id}.wvox")
        gt_path = (
            os.path.join(args.gt, f"{e.object_id}.wvox")
            if args.gt
            else manifest.complete_path(e)
        )
        preds.append(load_grid(pred_path))
        gts.append(load_grid(gt_path))
        cats.append(e.category)
    report = pipeline.evaluate(preds, gts, cats)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_doc(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    table = report.format_table()
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    _write_snapshot(args.out, "eval", {
        "manifest": os.path.abspath(args.manifest),
        "pred": os.path.abspath(args.pred),
        "gt": os.path.abspath(args.gt) if args.gt else None,
        "split": args.split,
    })
    print(table)


_CUBE_FACES = (
    (0, 2, 1), (1, 2, 3), (4, 5, 6), (5, 7, 6),
    (0, 1, 5), (0, 5, 4), (2, 6, 7), (2, 7, 3),
    (0, 4, 6), (0, 6, 2), (1, 3, 7), (1, 7, 5),
)


def _cmd_export(args):
    try:
        grid = load_grid(args.input)
    except FormatError:
        grid = binarize(load_field(args.input), args.threshold)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.input))[0]
    n = grid.resolution
    idx = np.argwhere(grid.occ)
    if idx.shape[0] == 0:
        print(f"warning: {args.input} is empty; writing an empty file",
              file=sys.stderr)
    if args.format == "points":
        path = os.path.join(args.out, f"{stem}.xyz")
        with open(path, "w", encoding="utf-8") as fh:
            for i, j, k in idx:
                c = (np.array([i, j, k]) + 0.5) / n
                fh.write(f"{c[0]:.6f} {c[1]:.6f} {c[2]:.6f}\n")
    else:
        path = os.path.join(args.out, f"{stem}.obj")
        with open(path, "w", encoding="utf-8") as fh:
            for vi, (i, j, k) in enumerate(idx):
                for dz in (0, 1):
                    for dy in (0, 1):
                        for dx in (0, 1):
                            fh.write(
                                f"v {(i + dx) / n:.6f} {(j + dy) / n:.6f} "
                                f"{(k + dz) / n:.6f}\n"
                            )
                base = 8 * vi + 1  # OBJ indices are 1-based
                for a, b, c in _CUBE_FACES:
                    fh.write(f"f {base + a} {base + b} {base + c}\n")
    _write_snapshot(args.out, "export", {
        "input": os.path.abspath(args.input),
        "format": args.format,
        "threshold": args.threshold,
    })
    print(f"exported {idx.shape[0]} voxels -> {path}")


# ---------------------------------------------------------------------------
# parser

def _build_parser() -> _Parser:
    p = _Parser(prog="voxcomplete",
                description="Weakly-supervised voxel shape completion pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-toy", help="generate the procedural toy corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--resolution", type=int, default=16)
    g.add_argument("--categories", default="table,lamp,basket,bench")
    g.add_argument("--test-categories", default=None,
                   help="comma list; default: the last category")
    g.add_argument("--per-category", type=int, default=10)
    g.add_argument("--scans", type=int, default=4)
    g.set_defaults(func=_cmd_gen_toy)

    b = sub.add_parser("build-priors", help="build a prior bank from a corpus")
    b.add_argument("--manifest", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--kind", choices=("seen", "category"), required=True)
    b.add_argument("--m", type=int, default=None, help="bank size (default 8)")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--category", default=None,
                   help="category whose partial scans feed a category bank")
    b.add_argument("--config", default=None)
    b.set_defaults(func=_cmd_build_priors)

    t = sub.add_parser("train-cosl", help="train the coarse completion stage")
    t.add_argument("--manifest", required=True)
    t.add_argument("--bank", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--config", default=None, help="key=value overlay file")
    t.set_defaults(func=_cmd_train_cosl)

    i = sub.add_parser("infer-cosl", help="write coarse shapes for a split")
    i.add_argument("--manifest", required=True)
    i.add_argument("--bank", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--split", choices=("train", "test", "all"), default="test")
    i.add_argument("--threshold", type=float, default=0.5)
    i.set_defaults(func=_cmd_infer_cosl)

    r = sub.add_parser("refine-casr", help="self-supervised per-category refinement")
    r.add_argument("--manifest", required=True)
    r.add_argument("--coarse", required=True, help="directory of coarse .wvox files")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--config", default=None)
    r.add_argument("--m", type=int, default=None, help="category bank size (default 4)")
    r.add_argument("--alpha", type=float, default=None)
    r.add_argument("--lambda", dest="lambda_m", type=float, default=None)
    r.add_argument("--gamma1", type=float, default=None)
    r.add_argument("--gamma2", type=float, default=None)
    r.set_defaults(func=_cmd_refine_casr)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--manifest", required=True)
    e.add_argument("--pred", required=True, help="directory of {object_id}.wvox")
    e.add_argument("--gt", default=None,
                   help="override ground-truth directory (default: manifest completes)")
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("train", "test", "all"), default="test")
    e.set_defaults(func=_cmd_eval)

    x = sub.add_parser("export", help="export a grid or field for inspection")
    x.add_argument("--input", required=True)
    x.add_argument("--format", choices=("points", "cubes-obj"), required=True)
    x.add_argument("--threshold", type=float, default=0.5)
    x.add_argument("--out", required=True)
    x.set_defaults(func=_cmd_export)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _ArgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        args.func(args)
        return 0
    except TrainingDiverged as exc:
        print(f"runtime error: training diverged at step {exc.step} "
              f"(objects {exc.object_ids})", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return 1
    except VoxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything unplanned is a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
