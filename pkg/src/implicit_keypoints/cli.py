"""Command line: ``ikp {gen,import,fit,extract,eval,ablate,pipeline}``.

A dataset directory holds::

    config.json            resolved run configuration
    manifest.json          shapes, seeds and file names
    keypoints/<id>.json    ground-truth keypoints
    samples/<id>.ikps      training samples (gen only)
    fits/                  checkpoints, loss logs, fits.json
    pred/                  predicted keypoints, label scores, predictions.json
    meshes/                Marching Cubes sphere meshes (OBJ and PLY)
    report.json, report.txt

Exit status: 0 on success, 2 for invalid input or configuration, 3 for
numerical failures (divergence, degenerate extraction).
"""

from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Optional

import numpy as np

from . import pipeline as pl
from .config import RunConfig, load_config, save_config
from .extraction import DegeneratePointSet, ExtractionError
from .field.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .field.train import TrainingDiverged
from .geometry import GeometryError, SphereField
from .isosurface import write_grid, write_obj, write_ply
from .keypoint_io import (KeypointRecord, ValidationError, import_annotations, read_json,
                          read_keypoints, write_json, write_keypoints)
from .metrics import MetricError
from .sampling import SamplingError, make_training_set, make_udf_training_set, write_samples

log = logging.getLogger("implicit_keypoints")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
MANIFEST_FORMAT = "ikp-dataset"


class UsageError(ValueError):
    pass


# -- helpers ------------------------------------------------------------------

def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out_dir(args, cfg: RunConfig, default: Optional[str] = None) -> Path:
    out = args.out or cfg.output or default
    if not out:
        raise UsageError("no output directory; pass --out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_dataset(out: Path, cfg: RunConfig, shapes: list[tuple[KeypointRecord, int]], source: str,
                   samples: bool) -> None:
    (out / "keypoints").mkdir(exist_ok=True)
    if samples:
        (out / "samples").mkdir(exist_ok=True)
    entries = []
    for rec, seed in shapes:
        kp_name = f"keypoints/{rec.model_id}.json"
        write_keypoints(out / kp_name, rec)
        entry = {"model_id": rec.model_id, "category": rec.category, "seed": seed,
                 "keypoints": kp_name}
        if samples:
            name = f"samples/{rec.model_id}.ikps"
            sc = cfg.sample_config(seed)
            ts = (make_udf_training_set(rec.keypoints, sc, cfg.radius) if rec.keypoints.labeled
                  else make_training_set(SphereField(rec.keypoints, cfg.radius), sc))
            write_samples(out / name, ts)
            entry["samples"] = name
        entries.append(entry)
    save_config(out / "config.json", cfg)
    write_json(out / "manifest.json", {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "source": source,
        "seed": cfg.seed,
        "radius": cfg.radius,
        "min_separation": cfg.min_separation,
        "shapes": entries,
    })


def _load_dataset(path) -> tuple[dict, list[tuple[KeypointRecord, int]]]:
    root = Path(path)
    if not (root / "manifest.json").is_file():
        raise UsageError(f"{root}: no manifest.json (not a dataset directory)")
    manifest = read_json(root / "manifest.json")
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValidationError(f"{root}/manifest.json: not a dataset manifest")
    shapes = [(read_keypoints(root / e["keypoints"]), int(e["seed"])) for e in manifest["shapes"]]
    return manifest, shapes


def _dataset_config(args, root: Path) -> RunConfig:
    """Explicit --config wins; otherwise the config stored with the dataset."""
    if args.config or not (root / "config.json").is_file():
        return _resolve_config(args)
    cfg = load_config(root / "config.json")
    return cfg.replace(seed=args.seed) if args.seed is not None else cfg


# -- commands -----------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg)
    _write_dataset(out, cfg, pl.generate_shapes(cfg), "gen", samples=True)
    print(f"wrote {cfg.dataset.n_shapes} shapes to {out}")
    return EXIT_OK


def cmd_import(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg)
    records, report = import_annotations(read_json(args.annotations), args.normalize,
                                         cfg.dataset.normalize_half, cfg.radius)
    for line in report:
        print(f"rejected: {line}", file=sys.stderr)
    shapes = [(rec, pl.shape_seed(cfg.seed, i)) for i, rec in enumerate(records)]
    _write_dataset(out, cfg, shapes, "import", samples=False)
    write_json(out / "import_report.json", {"accepted": [r.model_id for r in records], "rejected": report})
    print(f"imported {len(records)} records, rejected {len(report)} problems")
    return EXIT_INVALID if report else EXIT_OK


def cmd_fit(args) -> int:
    root = Path(args.dataset)
    cfg = _dataset_config(args, root)
    _, shapes = _load_dataset(root)
    out = _out_dir(args, cfg, str(root))
    fits = out / "fits"
    fits.mkdir(exist_ok=True)
    entries = []
    for rec, seed in shapes:
        entry = {"model_id": rec.model_id}
        if args.analytic:
            entry["sdf"] = "analytic"
            if args.semantic:
                entry["udf"] = "analytic"
        else:
            sdf, udf = pl.fit_shape(rec, cfg, seed, semantic=args.semantic)
            for tag, res in (("sdf", sdf), ("udf", udf)):
                if res is None:
                    continue
                save_checkpoint(fits / f"{rec.model_id}.{tag}.ikpn", res.net)
                write_json(fits / f"{rec.model_id}.{tag}.loss.json", {
                    "model_id": rec.model_id, "head": tag,
                    "initial_loss": res.initial_loss, "history": res.history,
                })
                entry[tag] = f"fits/{rec.model_id}.{tag}.ikpn"
                entry[f"{tag}_final_loss"] = res.final_loss
        entries.append(entry)
    write_json(fits / "fits.json", {"analytic": bool(args.analytic), "semantic": bool(args.semantic),
                                    "config": cfg.to_dict(), "shapes": entries})
    print(f"fitted {len(entries)} shapes{' (analytic)' if args.analytic else ''}")
    return EXIT_OK


def cmd_extract(args) -> int:
    root = Path(args.dataset)
    cfg = _dataset_config(args, root)
    _, shapes = _load_dataset(root)
    out = _out_dir(args, cfg, str(root))
    fits_path = root / "fits" / "fits.json"
    fits = read_json(fits_path) if fits_path.is_file() else None
    if fits is None and not args.analytic:
        raise UsageError(f"{root}: no fits/fits.json; run fit first or pass --analytic")
    by_id = {e["model_id"]: e for e in fits["shapes"]} if fits else {}
    for sub in ("pred", "meshes") + (("grids",) if args.save_grid else ()):
        (out / sub).mkdir(exist_ok=True)
    entries = []
    for rec, _ in shapes:
        entry = by_id.get(rec.model_id, {})
        analytic = args.analytic or entry.get("sdf") == "analytic"
        if analytic:
            sdf = SphereField(rec.keypoints, cfg.radius)
        elif "sdf" in entry:
            sdf = pl.net_field(load_checkpoint(root / entry["sdf"]))
        else:
            raise UsageError(f"no SDF fit recorded for {rec.model_id}")
        udf = None
        want_labels = args.semantic or "udf" in entry
        if want_labels and rec.keypoints.labeled:
            if analytic or entry.get("udf") == "analytic":
                udf = pl.analytic_udf(rec.keypoints)
            elif "udf" in entry:
                udf = pl.net_udf(load_checkpoint(root / entry["udf"]))
        ex = pl.extract_from_field(sdf, cfg, udf=udf)
        write_keypoints(out / "pred" / f"{rec.model_id}.json",
                        KeypointRecord(rec.model_id, ex.keypoints, rec.category, cfg.radius))
        write_obj(out / "meshes" / f"{rec.model_id}.obj", ex.mesh)
        write_ply(out / "meshes" / f"{rec.model_id}.ply", ex.mesh)
        if args.save_grid:
            write_grid(out / "grids" / f"{rec.model_id}.ikpg", ex.grid)
        row = {"model_id": rec.model_id, "n_pred": len(ex.keypoints), "notes": ex.notes}
        if udf is not None:
            scores = pl.udf_scores(udf, rec.keypoints.points)
            write_json(out / "pred" / f"{rec.model_id}.scores.json", {
                "model_id": rec.model_id,
                "gt_labels": rec.keypoints.labels.tolist(),
                "scores": scores.tolist(),
            })
            row["scores"] = f"pred/{rec.model_id}.scores.json"
        entries.append(row)
    write_json(out / "pred" / "predictions.json", {"config": cfg.to_dict(), "shapes": entries})
    print(f"extracted keypoints for {len(entries)} shapes")
    return EXIT_OK


def cmd_eval(args) -> int:
    root = Path(args.dataset)
    cfg = _dataset_config(args, root)
    _, shapes = _load_dataset(root)
    pred_root = Path(args.predictions) if args.predictions else root
    out = _out_dir(args, cfg, str(root))
    preds, parts = [], []
    for rec, _ in shapes:
        path = pred_root / "pred" / f"{rec.model_id}.json"
        if not path.is_file():
            raise UsageError(f"missing prediction {path}")
        preds.append(read_keypoints(path).keypoints)
        spath = pred_root / "pred" / f"{rec.model_id}.scores.json"
        if spath.is_file():
            s = read_json(spath)
            parts.append((np.asarray(s["scores"], dtype=np.float64), np.asarray(s["gt_labels"])))
    report = pl.report_for([rec for rec, _ in shapes], preds, cfg, parts or None)
    doc = report.to_dict()
    doc["config"] = cfg.to_dict()
    write_json(out / "report.json", doc)
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg)
    if args.dataset:
        _, shapes = _load_dataset(args.dataset)
    else:
        shapes = pl.generate_shapes(cfg)
    if args.axis == "radius":
        rows = pl.ablate_radius(cfg, shapes, analytic=args.analytic)
        doc, text = {"axis": "radius", "rows": rows}, pl.radius_table(rows)
    else:
        if args.analytic:
            raise UsageError("the architecture axis needs trained fields; drop --analytic")
        cols = pl.ablate_architecture(cfg, shapes)
        doc, text = {"axis": "architecture", "columns": cols}, pl.architecture_table(cols)
    doc["analytic"] = bool(args.analytic)
    doc["config"] = cfg.to_dict()
    write_json(out / f"ablation_{args.axis}.json", doc)
    (out / f"ablation_{args.axis}.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg)
    args.out = str(out)
    args.dataset = str(out)
    args.predictions = None
    save_config(out / "config.json", cfg)
    args.config, args.seed = str(out / "config.json"), None
    for step in (cmd_gen, cmd_fit, cmd_extract, cmd_eval):
        step(args)
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run configuration (JSON)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, deterministic)")
    common.add_argument("--analytic", action="store_true", help="use the analytic sphere field instead of training")
    common.add_argument("--semantic", action="store_true", help="also fit and apply the stacked-UDF label head")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ikp", description="Keypoints as implicit sphere fields.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic keypoint dataset")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("import", parents=[common], help="import a keypoint annotation file")
    p.add_argument("annotations", help="JSON annotation file")
    p.add_argument("--normalize", action="store_true", help="center and rescale each record's keypoints")
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("fit", parents=[common], help="fit SDF (and UDF) heads per shape")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("extract", parents=[common], help="recover keypoints from fitted fields")
    p.add_argument("dataset")
    p.add_argument("--save-grid", action="store_true", help="also write the sampled grids")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("dataset")
    p.add_argument("--predictions", metavar="DIR", help="directory holding pred/ (default: dataset)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="radius or architecture ablation")
    p.add_argument("--axis", choices=("radius", "architecture"), required=True)
    p.add_argument("--dataset", help="use this dataset's shapes instead of generating them")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("pipeline", parents=[common], help="gen, fit, extract and eval in one directory")
    p.add_argument("--save-grid", action="store_true")
    p.set_defaults(func=cmd_pipeline)
    return parser


def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    if not hasattr(args, "save_grid"):
        args.save_grid = False
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except (TrainingDiverged, ExtractionError, DegeneratePointSet, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, UsageError, GeometryError, SamplingError, CheckpointError, MetricError,
            OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
