"""Per-shape stages shared by the command line and the acceptance checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .config import RunConfig
from .extraction import ExtractionConfig, extract_keypoints
from .field.losses import LossWeights
from .field.network import ImplicitNet, forward
from .field.posenc import PosEncConfig
from .field.train import FitResult, fit_sdf, fit_stacked_udf
from .geometry import KeypointSet, SphereField, TriangleMesh, label_of, stacked_udf
from .isosurface import ScalarGrid, eval_grid, marching_cubes
from .keypoint_io import KeypointRecord
from .metrics import MetricReport, build_report, score_shape
from .sampling import Box, random_keypoint_set

RADII = (0.24, 0.16, 0.08, 0.04, 0.02)
ACTIVATION_ORDER = ("relu", "selu", "sine")


def shape_seed(seed: int, index: int) -> int:
    """Independent per-shape seed derived from the run seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def model_name(index: int) -> str:
    return f"shape_{index:04d}"


def generate_shapes(cfg: RunConfig) -> list[tuple[KeypointRecord, int]]:
    """Seeded random keypoint sets, each with the seed it was drawn from."""
    ds = cfg.dataset
    out = []
    for i in range(ds.n_shapes):
        s = shape_seed(cfg.seed, i)
        kps = random_keypoint_set(ds.k, cfg.min_separation, Box.cube(ds.keypoint_half), s,
                                  ds.label_count or None)
        out.append((KeypointRecord(model_name(i), kps, ds.category, cfg.radius), s))
    return out


def fit_shape(record: KeypointRecord, cfg: RunConfig, seed: int, semantic: bool = False,
              radius: Optional[float] = None, **overrides) -> tuple[FitResult, Optional[FitResult]]:
    r = cfg.radius if radius is None else radius
    sdf = fit_sdf(SphereField(record.keypoints, r), cfg.fit_config(seed, **overrides))
    udf = None
    if semantic:
        ucfg = cfg.fit_config(seed, epochs=cfg.network.udf_epochs, **overrides)
        udf = fit_stacked_udf(record.keypoints, ucfg, r)
    return sdf, udf


def net_field(net: ImplicitNet) -> Callable:
    """Grid-evaluation callable running the net in its compute precision (float32)."""
    fast = net.astype(np.float32)
    return lambda p: forward(fast, p)[:, 0]


def udf_scores(udf: Callable, points: np.ndarray) -> np.ndarray:
    return np.asarray(udf(np.asarray(points, dtype=np.float64).reshape(-1, 3)), dtype=np.float64)


def net_udf(net: ImplicitNet) -> Callable:
    return lambda p: forward(net, p)


def analytic_udf(keypoints: KeypointSet) -> Callable:
    return lambda p: np.atleast_2d(stacked_udf(p, keypoints))


@dataclass
class Extraction:
    keypoints: KeypointSet
    mesh: TriangleMesh
    grid: ScalarGrid
    notes: list = field(default_factory=list)


def extract_from_field(sdf: Callable, cfg: RunConfig, radius: Optional[float] = None,
                       udf: Optional[Callable] = None) -> Extraction:
    """Grid evaluation, Marching Cubes and sphere-center recovery for one shape.

    With ``udf`` given, each predicted keypoint is labeled by its smallest channel.
    """
    grid = eval_grid(sdf, cfg.extraction.grid_resolution, cfg.grid_box)
    mesh = marching_cubes(grid)
    notes: list = []
    pred = extract_keypoints(mesh, cfg.extraction_config(radius), notes)
    if udf is not None and len(pred):
        scores = udf_scores(udf, pred.points)
        pred = KeypointSet(pred.points, np.atleast_1d(label_of(scores)), scores.shape[1])
    return Extraction(pred, mesh, grid, notes)


def report_for(gts: list[KeypointRecord], preds: list[KeypointSet], cfg: RunConfig,
               topk_parts: Optional[list] = None) -> MetricReport:
    scores = [score_shape(g.model_id, g.category, p, g.keypoints, cfg.metrics.thresholds,
                          cfg.metrics.one_to_one)
              for g, p in zip(gts, preds)]
    return build_report(scores, topk_parts)


def run_shape(record: KeypointRecord, cfg: RunConfig, seed: int, analytic: bool,
              radius: Optional[float] = None, **overrides) -> Extraction:
    r = cfg.radius if radius is None else radius
    if analytic:
        return extract_from_field(SphereField(record.keypoints, r), cfg, r)
    sdf, _ = fit_shape(record, cfg, seed, radius=r, **overrides)
    return extract_from_field(net_field(sdf.net), cfg, r)


def ablate_radius(cfg: RunConfig, shapes: list[tuple[KeypointRecord, int]], analytic: bool = False,
                  radii=RADII) -> list[dict]:
    """One row per radius: mean BHD/CD over the shape set, same keypoints throughout."""
    rows = []
    for r in radii:
        preds = [run_shape(rec, cfg, s, analytic, radius=r).keypoints for rec, s in shapes]
        rep = report_for([rec for rec, _ in shapes], preds, cfg)
        exact = sum(len(p) == len(rec.keypoints) for p, (rec, _) in zip(preds, shapes))
        rows.append({"radius": float(r), "bhd": rep.bhd, "cd": rep.cd, "exact_count": exact,
                     "shapes": len(shapes)})
    return rows


def architecture_grid(cfg: RunConfig):
    """The twelve (activation, positional encoding, gradient loss) combinations, table order."""
    n = cfg.network
    for act in ACTIVATION_ORDER:
        for pos in (False, True):
            for grad in (False, True):
                w = n.loss_weights if grad else (n.loss_weights[0], 0.0, 0.0)
                yield act, pos, grad, {
                    "activation": act,
                    "posenc": PosEncConfig(n.bands if pos else 0, True),
                    "weights": LossWeights(*w),
                }


def ablate_architecture(cfg: RunConfig, shapes: list[tuple[KeypointRecord, int]]) -> list[dict]:
    cols = []
    for act, pos, grad, overrides in architecture_grid(cfg):
        preds = [run_shape(rec, cfg, s, False, **overrides).keypoints for rec, s in shapes]
        rep = report_for([rec for rec, _ in shapes], preds, cfg)
        cols.append({"activation": act, "pos": pos, "grad": grad, "bhd": rep.bhd, "cd": rep.cd})
    return cols


def _cell(x: float) -> str:
    return f"{x:.4g}" if np.isfinite(x) else "inf"


def radius_table(rows: list[dict]) -> str:
    lines = ["Ablation of sphere radius",
             "Radius | " + " | ".join(f"{r['radius']:g}" for r in rows),
             "BHD    | " + " | ".join(_cell(r["bhd"]) for r in rows),
             "CD     | " + " | ".join(_cell(r["cd"]) for r in rows)]
    return "\n".join(lines) + "\n"


def architecture_table(cols: list[dict]) -> str:
    yes = {False: "wo", True: "w/"}
    lines = ["Ablation of network architecture",
             "Activation | " + " | ".join(c["activation"] for c in cols),
             "Pos, Grad  | " + " | ".join(f"{yes[c['pos']]},{yes[c['grad']]}" for c in cols),
             "BHD        | " + " | ".join(_cell(c["bhd"]) for c in cols),
             "CD         | " + " | ".join(_cell(c["cd"]) for c in cols)]
    return "\n".join(lines) + "\n"
