"""Acceptance criteria 1-8.

Each test records a one-line PASS/FAIL verdict that pytest prints in an
"acceptance criteria" section at the end of the run. Criteria 4 and 5 run
real benchmarks (about 8 and 20 minutes on one core).

    pytest -v tests/test_acceptance.py
"""

import csv
import json
import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from invpose import cli, lie
from invpose.field import AnalyticField, FieldSample
from invpose.harness import (
    TrialPlan,
    Variant,
    builtin_scene_names,
    default_camera,
    generate_orbit_frames,
    look_at_pose,
    mann_whitney_u,
    resolve_scene,
    run_plan,
    summarize,
    write_results,
)
from invpose.lie import Pose
from invpose.objective import MIN_DEPTH_OPACITY, LossConfig, evaluate
from invpose.render import (
    Camera,
    generate_rays,
    midpoint_samples,
    render_rays,
    render_with_pose_grad,
    sample_stratified,
)

JOBS = os.cpu_count() or 1
SCENES = builtin_scene_names()
# 8 scenes x 5 trials = 40 matched seeds per variant, at the reduced 512-ray / 64-sample budget
TRIALS_PER_SCENE = 5
BENCH_OPTIMIZER = dict(rays_per_step=512, samples_per_ray=64, stop_on_convergence=True, stop_loss_threshold=0.0)
# 1-frame magnitudes tried for criterion 5, largest first
MULTI_LADDER = (0.8, 0.5, 0.3, 0.2, 0.1)


def verdict(criterion, number, ok, detail):
    criterion(number, ok, detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# -- 1. Lie suite ------------------------------------------------------------------


def test_criterion_1_lie_suite(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_log = worst_inv = 0.0
    for _ in range(10_000):
        axis = rng.normal(size=3)
        phi = axis / np.linalg.norm(axis) * rng.uniform(0.0, 3.0)
        v = np.concatenate([rng.normal(scale=2.0, size=3), phi])
        worst_log = max(worst_log, np.max(np.abs(lie.log(lie.exp(v)) - v)))
        pose = lie.exp(np.concatenate([rng.normal(size=3), rng.uniform(-1.0, 1.0, 3)]))
        moved = lie.oplus(pose, v)
        for m in (
            lie.oplus(moved, -v).as_matrix() - pose.as_matrix(),
            (pose @ pose.inverse()).as_matrix() - np.eye(4),
            moved.inverse().as_matrix() - (lie.exp(-v) @ pose.inverse()).as_matrix(),
        ):
            worst_inv = max(worst_inv, np.max(np.abs(m)))
    elapsed = time.perf_counter() - start
    ok = worst_log < 1e-8 and worst_inv < 1e-9 and elapsed < 5.0
    verdict(criterion, 1, ok, f"round trip {worst_log:.1e}, oplus/inverse {worst_inv:.1e}, {elapsed:.1f} s")


# -- 2. renderer conservation ------------------------------------------------------


class SlabField:
    """Constant density between z = 0 and z = 1."""

    background = np.zeros(3)

    def __init__(self, sigma0):
        self.sigma0 = sigma0

    def bounds(self):
        return None

    def query(self, points):
        n = len(points)
        inside = (points[:, 2] >= 0) & (points[:, 2] <= 1.0)
        return FieldSample(np.where(inside, self.sigma0, 0.0), np.ones((n, 3)), np.zeros((n, 3)), np.zeros((n, 3, 3)))


def random_view(rng, radius=4.0):
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    if abs(d[2]) > 0.95:
        d[2] = 0.5
        d /= np.linalg.norm(d)
    return lie.oplus(look_at_pose(radius * d, rng.uniform(-0.3, 0.3, 3)), rng.normal(scale=0.05, size=6))


def test_criterion_2_renderer_conservation(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    cam = Camera.from_fov(100, 100, 60.0, 2.0, 6.0)
    worst = 0.0
    n_rays = 0
    for i in range(10):
        field = AnalyticField(resolve_scene(SCENES[i % len(SCENES)]))
        pix = rng.integers(0, 100, size=(1000, 2))
        rays = generate_rays(cam, random_view(rng), pix)
        t, dt = sample_stratified(2.0, 6.0, 64, False, rng, n_rays=1000)
        out = render_rays(field, rays.origins, rays.directions, t, dt)
        worst = max(worst, np.max(np.abs(out.weights.sum(axis=1) + (1.0 - out.opacity) - 1.0)))
        n_rays += len(pix)
    slab_err = 0.0
    for sigma0 in (0.5, 2.0, 5.0):
        t, dt = midpoint_samples(0.0, 1.0, 256, 1)
        out = render_rays(SlabField(sigma0), np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]), t, dt)
        slab_err = max(slab_err, abs(out.opacity[0] - (1.0 - math.exp(-sigma0))))
    elapsed = time.perf_counter() - start
    ok = n_rays == 10_000 and worst < 1e-9 and slab_err < 1e-3 and elapsed < 30.0
    verdict(criterion, 2, ok, f"{n_rays} rays, conservation {worst:.1e}, slab {slab_err:.1e}, {elapsed:.1f} s")


# -- 3. gradient oracle --------------------------------------------------------------


def relative_error(analytic, numeric, floor):
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), floor))


def render_jacobian_errors(rng, n_configs):
    cam = Camera.from_fov(64, 64, 60.0, 2.0, 6.0)
    color_errs, depth_errs = [], []
    h = 1e-5
    for i in range(n_configs):
        field = AnalyticField(resolve_scene(SCENES[i % len(SCENES)]))
        base = random_view(rng)
        delta = rng.normal(scale=0.05, size=6)
        rel = lie.exp(rng.normal(scale=0.1, size=6)) if i % 3 == 0 else Pose.identity()
        # aim at a point on the object so the Jacobian is not trivially zero
        local = (lie.oplus(base, delta) @ rel).inverse().apply(rng.uniform(-0.4, 0.4, 3))
        if local[2] <= 0.5:
            continue
        u = int(np.clip(cam.fx * local[0] / local[2] + cam.cx, 0, 63))
        v = int(np.clip(cam.fy * local[1] / local[2] + cam.cy, 0, 63))
        pix = np.array([[u, v]])
        t, dt = sample_stratified(2.0, 6.0, 96, False, rng, n_rays=1)
        out = render_with_pose_grad(field, cam, base, delta, pix, t, dt, rel)
        dc, dd = np.zeros((3, 6)), np.zeros(6)
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            hi = render_with_pose_grad(field, cam, base, delta + e, pix, t, dt, rel)
            lo = render_with_pose_grad(field, cam, base, delta - e, pix, t, dt, rel)
            dc[:, k] = (hi.color[0] - lo.color[0]) / (2 * h)
            dd[k] = (hi.depth[0] - lo.depth[0]) / (2 * h)
        color_errs.append(relative_error(out.d_color_ddelta[0], dc, 1e-3))
        # depth is only defined (and only used by the loss) on rays with some opacity
        if out.opacity[0] >= MIN_DEPTH_OPACITY:
            depth_errs.append(relative_error(out.d_depth_ddelta[0], dd, 1e-3))
    return color_errs, depth_errs


def loss_gradient_errors(rng, n_configs):
    cam = Camera.from_fov(48, 48, 60.0, 2.0, 6.0)
    cfg = LossConfig(rays_per_step=64, samples_per_ray=32)
    errs = []
    h = 1e-5
    for i in range(n_configs):
        scene = resolve_scene(SCENES[i % len(SCENES)])
        frames = generate_orbit_frames(scene, 4.0, 1 + (i % 2), 15.0, cam, azimuth_deg=rng.uniform(0, 360),
                                       n_samples=32)
        field = AnalyticField(scene)
        base = frames[-1].pose
        delta = rng.normal(scale=0.05, size=6)
        seed = int(rng.integers(2**31))
        rep = evaluate(field, frames, base, delta, cfg, seed)
        num = np.zeros(6)
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            num[k] = (evaluate(field, frames, base, delta + e, cfg, seed).total
                      - evaluate(field, frames, base, delta - e, cfg, seed).total) / (2 * h)
        errs.append(relative_error(rep.grad, num, 1e-6))
    return errs


def test_criterion_3_gradient_oracle(criterion):
    start = time.perf_counter()
    color_errs, depth_errs = render_jacobian_errors(np.random.default_rng(303), 300)
    loss_errs = loss_gradient_errors(np.random.default_rng(304), 200)
    elapsed = time.perf_counter() - start
    counts = (len(color_errs), len(depth_errs), len(loss_errs))
    worst = (max(color_errs), max(depth_errs), max(loss_errs))
    ok = min(counts) >= 200 and max(worst) < 1e-2 and elapsed < 300.0
    verdict(criterion, 3, ok, "configs color/depth/loss {}/{}/{}, worst rel {:.1e}/{:.1e}/{:.1e}, {:.0f} s".format(
        *counts, *worst, elapsed))


# -- benchmarks for 4, 5 and 6 --------------------------------------------------------


def bench_plan(magnitude, variants):
    plan = TrialPlan(scenes=SCENES, trans_lengths=[magnitude], trials_per_cell=TRIALS_PER_SCENE,
                     variants=variants, camera=default_camera())
    plan.optimizer = replace(plan.optimizer, **BENCH_OPTIMIZER)
    return plan


def cell(results, variant):
    (row,) = [r for r in summarize(results) if r.variant == variant and r.magnitude is not None]
    return row


def steps(results, variant):
    return [r.result.convergence_step for (v, _), recs in results if v == variant for r in recs if r.result.converged]


@pytest.fixture(scope="session")
def bench_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def depth_ablation(bench_dir):
    results = run_plan(bench_plan(0.8, [Variant("depth"), Variant("rgb", depth=False)]), jobs=JOBS)
    write_results(results, bench_dir / "depth_ablation")
    return results


def test_criterion_4_depth_ablation(criterion, depth_ablation):
    depth, rgb = cell(depth_ablation, "depth"), cell(depth_ablation, "rgb")
    sd, sr = steps(depth_ablation, "depth"), steps(depth_ablation, "rgb")
    med_d = float(np.median(sd)) if sd else math.inf
    med_r = float(np.median(sr)) if sr else math.inf
    p = mann_whitney_u(sd, sr)[1] if sd and sr else float("nan")
    ok = depth.n_trials == rgb.n_trials == 40 and depth.convergence_pct >= rgb.convergence_pct and med_d <= med_r
    verdict(criterion, 4, ok, f"0.8 m, 40 seeds: depth {depth.convergence_pct:.1f}% (median {med_d:g} steps) "
                              f"vs rgb {rgb.convergence_pct:.1f}% (median {med_r:g}), Mann-Whitney p = {p:.3g}")


@pytest.fixture(scope="session")
def multi_image(bench_dir, depth_ablation):
    """Walk the ladder down to the first magnitude with 1-frame convergence in [20, 60] %.

    The depth variant of the ablation is the 1-frame variant at 0.8 m with the same seeds,
    so that rung is reused. If no rung qualifies, the 8-frame variant still runs at the
    largest magnitude with the best 1-frame rate so the direction is reported.
    """
    ladder = []
    for magnitude in MULTI_LADDER:
        if magnitude == 0.8:
            one = [(key, recs) for key, recs in depth_ablation if key[0] == "depth"]
        else:
            one = run_plan(bench_plan(magnitude, [Variant("depth")]), jobs=JOBS)
            write_results(one, bench_dir / f"multi_image_one_{magnitude:g}")
        pct = cell(one, "depth").convergence_pct
        ladder.append((magnitude, pct))
        if 20.0 <= pct <= 60.0:
            break
    magnitude, one_pct = ladder[-1] if 20.0 <= ladder[-1][1] <= 60.0 else max(ladder, key=lambda mp: (mp[1], mp[0]))
    eight = run_plan(bench_plan(magnitude, [Variant("eight", n_frames=8)]), jobs=JOBS)
    write_results(eight, bench_dir / "multi_image_eight")
    return ladder, magnitude, one_pct, cell(eight, "eight").convergence_pct


def test_criterion_5_multi_image(criterion, multi_image):
    ladder, magnitude, one_pct, eight_pct = multi_image
    tried = ", ".join(f"{m:g} m {p:.1f}%" for m, p in ladder)
    feasible = 20.0 <= one_pct <= 60.0
    direction = f"{magnitude:g} m, 40 seeds: 8 frames {eight_pct:.1f}% vs 1 frame {one_pct:.1f}%"
    if not feasible:
        direction += "; no magnitude has 1-frame convergence in [20, 60] %"
    verdict(criterion, 5, feasible and eight_pct >= one_pct, f"{direction} (1-frame ladder: {tried})")


# -- 6. convergence bookkeeping --------------------------------------------------------


def test_criterion_6_convergence_bookkeeping(criterion, bench_dir, depth_ablation, multi_image):
    checked = mismatches = 0
    for results_csv in sorted(bench_dir.glob("*/results.csv")):
        with open(results_csv, newline="") as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            name = f"{row['variant']}_{float(row['magnitude']):g}_{row['scene']}_{int(row['trial']):03d}.csv"
            with open(results_csv.parent / "traces" / name, newline="") as fh:
                trace = [float(r["trans_err_m"]) for r in csv.DictReader(fh)]
            initial = float(row["initial_trans_err"])
            hits = [i for i, e in enumerate(trace) if e <= 0.1 * initial]
            expected = bool(hits) or initial <= 1e-6
            claimed = row["converged"] == "1"
            step_ok = not claimed or int(row["convergence_step"]) == (hits[0] if hits else 0)
            mismatches += (claimed != expected) or not step_ok or trace[0] != initial
            checked += 1
    ok = checked >= 160 and mismatches == 0
    verdict(criterion, 6, ok, f"{checked} trials re-checked from trace CSVs, {mismatches} mismatches")


# -- 7. Mann-Whitney correctness ---------------------------------------------------------


def test_criterion_7_mann_whitney(criterion):
    import itertools

    def pairwise_u(a, b):
        return sum(1.0 if x > y else 0.5 if x == y else 0.0 for x in a for y in b)

    def enumerated_p(a, b):
        pooled, na = list(a) + list(b), len(a)
        centre = na * len(b) / 2.0
        observed = abs(pairwise_u(a, b) - centre)
        hits = total = 0
        for combo in itertools.combinations(range(len(pooled)), na):
            chosen = set(combo)
            aa = [pooled[i] for i in combo]
            bb = [pooled[i] for i in range(len(pooled)) if i not in chosen]
            total += 1
            hits += abs(pairwise_u(aa, bb) - centre) >= observed - 1e-9
        return hits / total

    rng = np.random.default_rng(707)
    worst, cases = 0.0, 0
    for na in range(1, 12):
        for nb in range(1, 13 - na):
            a, b = rng.integers(0, 6, na).tolist(), rng.integers(0, 6, nb).tolist()
            worst = max(worst, abs(mann_whitney_u(a, b)[1] - enumerated_p(a, b)))
            cases += 1
    anchor = abs(mann_whitney_u([1, 2, 3, 4, 5], [6, 7, 8, 9, 10])[1] - 2 / 252)
    ok = worst < 1e-12 and anchor < 1e-12
    verdict(criterion, 7, ok, f"{cases} (n_a, n_b) splits, worst |p - enumerated| {worst:.1e}, "
                              f"[1..5] vs [6..10] off 2/252 by {anchor:.1e}")


# -- 8. determinism ------------------------------------------------------------------------


def test_criterion_8_determinism(criterion, tmp_path):
    plan = {
        "scenes": ["three_spheres", "dice", "table"],
        "trans_lengths": [0.5, 0.8],
        "trials_per_cell": 2,
        "variants": [{"name": "depth"}, {"name": "rgb", "depth": False}],
        "camera": Camera.from_fov(24, 24, 60.0, 2.0, 6.0).to_dict(),
        "frame_samples": 32,
        "optimizer": {"max_steps": 10, "rays_per_step": 64, "samples_per_ray": 16},
        "master_seed": 8,
    }
    path = tmp_path / "plan.json"
    path.write_text(json.dumps(plan))
    outputs = {}
    for name, jobs in (("a", 1), ("b", 1), ("c", 8)):
        assert cli.main(["bench", "--plan", str(path), "--out", str(tmp_path / name), "--jobs", str(jobs)]) == 0
        outputs[name] = (tmp_path / name / "results.csv").read_bytes()
    ok = outputs["a"] == outputs["b"] == outputs["c"]
    n_rows = outputs["a"].count(b"\n") - 1
    verdict(criterion, 8, ok, f"results.csv ({n_rows} trials) byte-identical across two runs and --jobs 1 vs 8")
