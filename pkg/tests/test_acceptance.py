"""End-to-end acceptance checks, one test per criterion.

Each test prints ``criterion N: PASS|FAIL`` with the measured numbers, and
the lines are repeated in the terminal summary. Tolerances are pinned here.
"""

import dataclasses
import json
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import least_squares

from implicit_keypoints.cli import main
from implicit_keypoints.config import RunConfig, save_config
from implicit_keypoints.extraction import best_sphere_center, extract_keypoints
from implicit_keypoints.field.losses import sdf_losses
from implicit_keypoints.field.network import (
    ImplicitNet,
    flatten_params,
    forward,
    forward_with_input_grad,
    siren_init,
    unflatten_into,
)
from implicit_keypoints.field.posenc import PosEncConfig
from implicit_keypoints.field.train import fit_stacked_udf
from implicit_keypoints.geometry import KeypointSet, SphereField, label_of, stacked_udf
from implicit_keypoints.isosurface import eval_grid, marching_cubes
from implicit_keypoints.metrics import bhd, cd, miou_curve, topk_accuracy
from implicit_keypoints.pipeline import (
    ablate_radius,
    extract_from_field,
    fit_shape,
    generate_shapes,
    net_field,
)
from implicit_keypoints.sampling import Box, SampleConfig, make_training_set, random_keypoint_set
from oracles import bhd_loop, cd_loop, iou_loop, random_pair

SEEDS = range(5)

# criterion 1
FIT_COUNT = 8
FIT_BHD_MAX = 0.01
FIT_CD_MAX = 1e-3
FIT_SECONDS_MAX = 20 * 60
# criterion 2
N_CONFIGS = 100
MIN_EXACT = 99
CENTER_ERR_MAX = 0.01
ANALYTIC_SECONDS_MAX = 5 * 60
# criteria 3 and 4
SPHERE_FIT_TOL = 1e-9
AUTODIFF_REL_TOL = 1e-4
# criterion 6
TOP1_MIN = 0.9
TOP3_MIN = 1.0
# criterion 8
EIKONAL_BAND = (0.8, 1.2)
EIKONAL_FRACTION_MIN = 0.9
NORMAL_COSINE_MIN = 0.95
N_PROBES = 10_000


def one_shape(seed: int):
    cfg = RunConfig(seed=seed)
    cfg = cfg.replace(dataset=dataclasses.replace(cfg.dataset, n_shapes=1))
    rec, shape_seed = generate_shapes(cfg)[0]
    return cfg, rec, shape_seed


@pytest.fixture(scope="session")
def fitted_sdfs():
    """Default-configuration SDF fit and extraction for one 8-keypoint shape per seed."""
    runs = []
    for seed in SEEDS:
        cfg, rec, shape_seed = one_shape(seed)
        t0 = time.perf_counter()
        sdf, _ = fit_shape(rec, cfg, shape_seed)
        ex = extract_from_field(net_field(sdf.net), cfg)
        runs.append({"record": rec, "net": sdf.net, "pred": ex.keypoints,
                     "seconds": time.perf_counter() - t0})
    return runs


@pytest.mark.slow
def test_criterion_1_fitted_sdf_recovers_eight_keypoints(fitted_sdfs, verdict):
    counts = [len(r["pred"]) for r in fitted_sdfs]
    bhds = [bhd(r["pred"], r["record"].keypoints) if len(r["pred"]) else np.inf for r in fitted_sdfs]
    cds = [cd(r["pred"], r["record"].keypoints) if len(r["pred"]) else np.inf for r in fitted_sdfs]
    seconds = sum(r["seconds"] for r in fitted_sdfs)
    med_bhd, med_cd = float(np.median(bhds)), float(np.median(cds))
    ok = (all(c == FIT_COUNT for c in counts) and med_bhd <= FIT_BHD_MAX and med_cd <= FIT_CD_MAX
          and seconds <= FIT_SECONDS_MAX)
    detail = (f"counts={counts} median BHD={med_bhd:.4g} (<= {FIT_BHD_MAX}) "
              f"median CD={med_cd:.3g} (<= {FIT_CD_MAX}) time={seconds:.0f}s (<= {FIT_SECONDS_MAX}s) "
              f"BHD per seed={[round(b, 5) for b in bhds]}")
    assert verdict(1, ok, detail)


def test_criterion_2_analytic_end_to_end(verdict):
    cfg = RunConfig()
    exact, worst, t0 = 0, 0.0, time.perf_counter()
    for i in range(N_CONFIGS):
        rng = np.random.default_rng([2, i])
        k = int(rng.integers(1, 13))
        gt = random_keypoint_set(k, 0.3, Box.cube(cfg.dataset.keypoint_half), rng)
        mesh = marching_cubes(eval_grid(SphereField(gt, cfg.radius), cfg.extraction.grid_resolution))
        pred = extract_keypoints(mesh, cfg.extraction_config())
        if len(pred) == k:
            exact += 1
            d = np.linalg.norm(pred.points[:, None] - gt.points[None], axis=2)
            assert sorted(d.argmin(axis=1).tolist()) == list(range(k))
            worst = max(worst, float(d.min(axis=1).max()))
    seconds = time.perf_counter() - t0
    ok = exact >= MIN_EXACT and worst < CENTER_ERR_MAX and seconds <= ANALYTIC_SECONDS_MAX
    assert verdict(2, ok, f"exact count {exact}/{N_CONFIGS} (>= {MIN_EXACT}) max center error "
                          f"{worst:.3g} (< {CENTER_ERR_MAX}) time={seconds:.0f}s (<= {ANALYTIC_SECONDS_MAX}s)")


def _kasa(points):
    a = np.c_[2 * points, np.ones(len(points))]
    sol = np.linalg.lstsq(a, np.einsum("nc,nc->n", points, points), rcond=None)[0]
    return sol[:3]


def _geometric_fit(points):
    c0 = points.mean(axis=0)
    r0 = np.linalg.norm(points - c0, axis=1).mean()

    def residual(x):
        return np.linalg.norm(points - x[:3], axis=1) - x[3]

    def jac(x):
        diff = x[:3] - points
        return np.c_[diff / np.linalg.norm(diff, axis=1, keepdims=True), -np.ones(len(points))]

    res = least_squares(residual, np.r_[c0, r0], jac=jac, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    return res.x[:3]


def test_criterion_3_closed_form_sphere_fit(verdict):
    rng = np.random.default_rng(3)
    worst_truth = worst_kasa = worst_lsq = 0.0
    cases = 0
    while cases < 1000:
        c = rng.uniform(-1, 1, 3)
        r = rng.uniform(0.01, 1.0)
        d = rng.normal(size=(int(rng.integers(4, 65)), 3))
        pts = c + r * d / np.linalg.norm(d, axis=1, keepdims=True)
        y = pts - pts.mean(axis=0)
        # the closed form needs a well-spread sample; nearly coplanar draws are redrawn
        if np.linalg.cond(y.T @ y) > 1e3:
            continue
        cases += 1
        got = best_sphere_center(pts)
        worst_truth = max(worst_truth, float(np.abs(got - c).max()))
        worst_kasa = max(worst_kasa, float(np.abs(got - _kasa(pts)).max()))
        worst_lsq = max(worst_lsq, float(np.abs(got - _geometric_fit(pts)).max()))
    ok = max(worst_truth, worst_kasa, worst_lsq) < SPHERE_FIT_TOL
    assert verdict(3, ok, f"{cases} cases, max |c - truth|={worst_truth:.2e} |c - algebraic lstsq|="
                          f"{worst_kasa:.2e} |c - geometric lstsq|={worst_lsq:.2e} (< {SPHERE_FIT_TOL})")


def _fd_params(loss, net, h=1e-6):
    flat = flatten_params(net.params)
    out = np.empty_like(flat)
    for i in range(flat.size):
        x = flat.copy()
        x[i] += h
        unflatten_into(net.params, x)
        up = loss()
        x[i] -= 2 * h
        unflatten_into(net.params, x)
        out[i] = (up - loss()) / (2 * h)
    unflatten_into(net.params, flat)
    return out


def test_criterion_4_autodiff_matches_finite_differences(verdict):
    worst_jac = worst_param = 0.0
    field = SphereField.from_points([[0.1, 0.0, 0.0], [-0.3, 0.2, 0.1]], 0.08)
    for i in range(100):
        rng = np.random.default_rng([4, i])
        widths = tuple(int(w) for w in rng.integers(2, 7, size=rng.integers(1, 4)))
        posenc = PosEncConfig(int(rng.integers(0, 3)), True)
        omega = float(rng.uniform(1.0, 30.0))
        net = siren_init(ImplicitNet(widths, 1, omega, posenc, "sine"), seed=i)
        pts = rng.uniform(-1, 1, (5, 3))
        _, jac = forward_with_input_grad(net, pts)
        h = 1e-6
        fd = np.stack([(forward(net, pts + h * e) - forward(net, pts - h * e)) / (2 * h) for e in np.eye(3)],
                      axis=1)
        worst_jac = max(worst_jac, float(np.abs(jac - fd).max() / np.abs(fd).max()))
        batch = make_training_set(field, SampleConfig(n_volume=6, n_surface=6, seed=i))
        _, grads = sdf_losses(net, batch)
        fd_p = _fd_params(lambda: sdf_losses(net, batch)[0].total, net)
        an = flatten_params(grads)
        worst_param = max(worst_param, float(np.abs(an - fd_p).max() / np.abs(fd_p).max()))
    ok = max(worst_jac, worst_param) < AUTODIFF_REL_TOL
    assert verdict(4, ok, f"100 nets, max relative error input Jacobian={worst_jac:.2e} "
                          f"loss parameter gradient={worst_param:.2e} (< {AUTODIFF_REL_TOL})")


def test_criterion_5_metric_oracles(verdict):
    o = [0.0, 0.0, 0.0]
    hand = [
        bhd([[0.3, 0.1, 0.2]], [[0.3, 0.1, 0.2]]) == 0.0,
        bhd([o], [[1, 0, 0]]) == 1.0,
        bhd([o, [1, 0, 0]], [o]) == 0.5,
        cd([[0.3, 0.1, 0.2]], [[0.3, 0.1, 0.2]]) == 0.0,
        cd([o], [[1, 0, 0]]) == 2.0,
        cd([o, [2, 0, 0]], [o]) == 2.0,
        all(m == 1.0 for _, m in miou_curve([[0.3, 0.1, 0.2]], [[0.3, 0.1, 0.2]], [0.01, 0.1])),
        miou_curve([o], [[1, 0, 0]], [0.5]) == [(0.5, 0.0)],
        miou_curve([o], [[0.05, 0, 0], [1, 0, 0]], [0.1]) == [(0.1, 0.5)],
    ]
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(1000):
        a, b = random_pair(rng)
        ts = [0.0, 0.01, 0.05, 0.1, 0.5]
        same = (bhd(a, b) == bhd_loop(a, b) and cd(a, b) == cd_loop(a, b)
                and all(m == iou_loop(a, b, t) for t, m in miou_curve(a, b, ts)))
        mismatches += not same
    ok = all(hand) and mismatches == 0
    assert verdict(5, ok, f"hand examples {sum(hand)}/9 bitwise, oracle mismatches {mismatches}/1000 (exact)")


@pytest.mark.slow
def test_criterion_6_stacked_udf_labels(verdict):
    analytic_ok = 0
    for i in range(100):
        rng = np.random.default_rng([6, i])
        kps = random_keypoint_set(int(rng.integers(1, 11)), 0.1, Box.cube(0.85), rng, 10)
        analytic_ok += bool(np.all(label_of(stacked_udf(kps.points, kps)) == kps.labels))
    scores, labels = [], []
    for seed in SEEDS:
        cfg, rec, shape_seed = one_shape(seed)
        res = fit_stacked_udf(rec.keypoints, cfg.fit_config(shape_seed, epochs=cfg.network.udf_epochs),
                              cfg.radius)
        scores.append(forward(res.net, rec.keypoints.points))
        labels.append(rec.keypoints.labels)
    acc = topk_accuracy(np.vstack(scores), np.concatenate(labels))
    ok = analytic_ok == 100 and acc[1] >= TOP1_MIN and acc[3] >= TOP3_MIN
    assert verdict(6, ok, f"analytic label recovery {analytic_ok}/100, fitted over {len(labels)} seeds "
                          f"({sum(map(len, labels))} keypoints) top-1={acc[1]:.3f} (>= {TOP1_MIN}) "
                          f"top-3={acc[3]:.3f} (>= {TOP3_MIN}) top-5={acc[5]:.3f}")


def test_criterion_7_radius_ablation_trend(verdict):
    cfg = RunConfig(seed=7)
    cfg = cfg.replace(dataset=dataclasses.replace(cfg.dataset, n_shapes=5))
    shapes = generate_shapes(cfg)
    rows = ablate_radius(cfg, shapes, analytic=True)
    by_r = {r["radius"]: r for r in rows}
    small, ref = by_r[0.02], by_r[0.08]
    # at r = 0.02 the default vote threshold can reject every component, which makes CD
    # infinite; the density-normalized threshold gives a finite comparison as well
    dense = cfg.replace(extraction=dataclasses.replace(cfg.extraction, density_normalize=True))
    d_small, d_ref = ablate_radius(dense, shapes, analytic=True, radii=(0.02, 0.08))
    finite = np.isfinite(d_small["cd"]) and d_small["cd"] > d_ref["cd"]
    ok = small["cd"] > ref["cd"] and finite
    table = ", ".join(f"r={r['radius']:g}: CD={r['cd']:.3g} exact={r['exact_count']}/{r['shapes']}" for r in rows)
    assert verdict(7, ok, f"analytic fields, 5 shapes: mean CD(0.02)={small['cd']:.3g} > "
                          f"mean CD(0.08)={ref['cd']:.3g} | {table} | density-normalized threshold: "
                          f"CD(0.02)={d_small['cd']:.3g} exact={d_small['exact_count']}/5 > "
                          f"CD(0.08)={d_ref['cd']:.3g}")


@pytest.mark.slow
def test_criterion_8_eikonal_and_normals(fitted_sdfs, verdict):
    fractions, cosines = [], []
    lo, hi = EIKONAL_BAND
    for seed, run in zip(SEEDS, fitted_sdfs):
        rng = np.random.default_rng([8, seed])
        _, jac = forward_with_input_grad(run["net"], rng.uniform(-1, 1, (N_PROBES, 3)))
        norm = np.linalg.norm(jac[:, :, 0], axis=1)
        fractions.append(float(np.mean((norm >= lo) & (norm <= hi))))
        kps = run["record"].keypoints
        u = rng.normal(size=(N_PROBES, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        surf = kps.points[rng.integers(0, len(kps), N_PROBES)] + run["record"].radius * u
        _, jac = forward_with_input_grad(run["net"], surf)
        g = jac[:, :, 0]
        cosines.append(float(np.mean(np.einsum("nc,nc->n", g, u) / np.linalg.norm(g, axis=1))))
    ok = min(fractions) >= EIKONAL_FRACTION_MIN and min(cosines) >= NORMAL_COSINE_MIN
    assert verdict(8, ok, f"fraction with |grad f| in [{lo}, {hi}] per seed={[round(f, 4) for f in fractions]} "
                          f"(>= {EIKONAL_FRACTION_MIN}); mean normal cosine per seed="
                          f"{[round(c, 4) for c in cosines]} (>= {NORMAL_COSINE_MIN})")


def _snapshot(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_cli_determinism(tmp_path, verdict):
    tiny = {
        "seed": 9,
        "dataset": {"n_shapes": 2, "k": 3},
        "sampling": {"n_volume": 300, "n_surface": 300, "icosphere_level": 2},
        "network": {"widths": [16, 16], "epochs": 2, "udf_epochs": 2, "batch_size": 200},
        "extraction": {"grid_resolution": 32},
    }
    config = tmp_path / "tiny.json"
    save_config(config, RunConfig.from_dict(tiny))
    arch = dict(tiny, dataset={"n_shapes": 1, "k": 2}, extraction={"grid_resolution": 20})
    arch_config = tmp_path / "arch.json"
    save_config(arch_config, RunConfig.from_dict(arch))
    ann = tmp_path / "ann.json"
    ann.write_text(json.dumps([{"model_id": "m", "category": "c", "keypoints": [
        {"xyz": [0.2, 0.0, 0.1], "semantic_id": 1}, {"xyz": [-0.3, 0.2, 0.0], "semantic_id": 0}]}]))

    def gen(out):
        return [["gen", "--config", str(config), "--out", out]]

    commands = {
        "gen": gen,
        "import": lambda out: [["import", str(ann), "--normalize", "--out", out]],
        "fit": lambda out: gen(out) + [["fit", out, "--semantic"]],
        "fit --analytic": lambda out: gen(out) + [["fit", out, "--analytic"]],
        "extract": lambda out: gen(out) + [["fit", out, "--semantic"], ["extract", out, "--save-grid"]],
        "eval": lambda out: gen(out) + [["fit", out, "--analytic", "--semantic"], ["extract", out], ["eval", out]],
        "ablate radius": lambda out: [["ablate", "--axis", "radius", "--analytic", "--config", str(config),
                                       "--out", out]],
        "ablate architecture": lambda out: [["ablate", "--axis", "architecture", "--config", str(arch_config),
                                             "--out", out]],
        "pipeline": lambda out: [["pipeline", "--config", str(config), "--semantic", "--out", out]],
    }
    differing = []
    for name, steps in commands.items():
        snaps = []
        for run in ("a", "b"):
            out = str(tmp_path / name.replace(" ", "_") / run)
            for argv in steps(out):
                assert main(argv) == 0, (name, argv)
            snaps.append(_snapshot(Path(out)))
        if snaps[0] != snaps[1]:
            differing.append(name)
    ok = not differing
    assert verdict(9, ok, f"{len(commands)} commands rerun into fresh directories, "
                          f"byte-identical outputs: {len(commands) - len(differing)}/{len(commands)}"
                          + (f" (differ: {differing})" if differing else ""))
