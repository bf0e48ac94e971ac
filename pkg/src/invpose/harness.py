"""Synthetic RGB-D benchmark: orbit frames, perturbed trials, tables and tests.

A plan crosses variants (depth term, low-pass field, wide sampling, frame
count) with translational perturbation magnitudes. Every trial index draws
its perturbation from a seed that ignores the variant, so variants are
compared on identical starting poses.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from . import lie
from .field import AnalyticField, SceneSpec, load_scene
from .lie import Pose
from .objective import RgbdFrame
from .optimizer import NumericalAbort, OptimizerConfig, TrialResult, run
from .render import Camera, render_image

logger = logging.getLogger(__name__)

SCENE_DIR = Path(__file__).parent / "scenes"
BASIC_MAGNITUDES = (0.5, 0.8, 1.2)
MULTI_MAGNITUDES = (0.9, 1.7, 3.4)
VALID_DEPTH_OPACITY = 0.5


def builtin_scene_names() -> list[str]:
    return sorted(p.stem for p in SCENE_DIR.glob("*.json"))


def resolve_scene(name_or_path: str) -> SceneSpec:
    """Load a built-in scene by name, or a scene JSON file by path."""
    builtin = SCENE_DIR / f"{name_or_path}.json"
    if builtin.exists():
        return load_scene(builtin)
    return load_scene(name_or_path)


def default_camera() -> Camera:
    return Camera.from_fov(64, 64, 60.0, 2.0, 6.0)


def look_at_pose(position: np.ndarray, target: np.ndarray = np.zeros(3), up: np.ndarray = np.array([0.0, 0.0, 1.0])) -> Pose:
    """Camera pose at ``position`` whose +z axis points at ``target``."""
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    down = -up - np.dot(-up, forward) * forward
    down = down / np.linalg.norm(down)
    right = np.cross(down, forward)
    return Pose(np.stack([right, down, forward], axis=1), position)


def orbit_pose(radius: float, azimuth_deg: float) -> Pose:
    a = math.radians(azimuth_deg)
    return look_at_pose(np.array([radius * math.cos(a), radius * math.sin(a), 0.0]))


@lru_cache(maxsize=512)
def _render_view(scene_json: str, camera: Camera, radius: float, azimuth_deg: float, n_samples: int):
    scene = SceneSpec.from_dict(json.loads(scene_json))
    pose = orbit_pose(radius, azimuth_deg)
    color, depth, opacity = render_image(AnalyticField(scene), camera, pose, n_samples)
    for arr in (color, depth, opacity):
        arr.flags.writeable = False
    return pose, color, depth, opacity


def generate_orbit_frames(
    scene: SceneSpec,
    radius: float,
    n_frames: int,
    step_deg: float,
    camera: Camera,
    azimuth_deg: float = 0.0,
    n_samples: int = 128,
) -> list[RgbdFrame]:
    """Frames on a horizontal circle around the origin, each facing it.

    The last frame sits at ``azimuth_deg``; earlier frames trail it in steps
    of ``step_deg``. Depth is valid where the rendered opacity is at least 0.5.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    key = json.dumps(scene.to_dict(), sort_keys=True)
    views = [
        _render_view(key, camera, float(radius), float(azimuth_deg - (n_frames - 1 - i) * step_deg), n_samples)
        for i in range(n_frames)
    ]
    last_inv = views[-1][0].inverse()
    frames = []
    for i, (pose, color, depth, opacity) in enumerate(views):
        rel = Pose.identity() if i == n_frames - 1 else last_inv @ pose
        valid = opacity >= VALID_DEPTH_OPACITY
        frames.append(RgbdFrame(color.copy(), depth.copy(), valid, camera, rel, pose))
    return frames


@dataclass(frozen=True)
class Variant:
    name: str
    depth: bool = True
    lowpass: bool = False
    wide: bool = False
    n_frames: int = 1

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise ValueError("variant name must be a nonempty string")
        if self.n_frames < 1:
            raise ValueError("variant n_frames must be >= 1")

    def optimizer_config(self, base: OptimizerConfig) -> OptimizerConfig:
        return replace(
            base,
            lambda_depth=base.lambda_depth if self.depth else 0.0,
            use_lowpass=self.lowpass,
            wide=self.wide,
        )


@dataclass
class TrialPlan:
    scenes: list[str] = field(default_factory=lambda: ["three_spheres"])
    trans_lengths: list[float] = field(default_factory=lambda: list(BASIC_MAGNITUDES))
    rot_length_range: tuple[float, float] = (0.2, 1.4)
    trials_per_cell: int = 5
    variants: list[Variant] = field(default_factory=lambda: [Variant("bidnerf")])
    master_seed: int = 0
    orbit_radius: float = 4.0
    orbit_step_deg: float = 15.0
    camera: Camera = field(default_factory=default_camera)
    optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(rays_per_step=512, samples_per_ray=64, stop_on_convergence=True)
    )
    frame_samples: int = 128

    def __post_init__(self):
        if any(m <= 0 for m in self.trans_lengths):
            raise ValueError("translational lengths must be positive")
        lo, hi = self.rot_length_range
        if not (0.0 < lo <= hi < math.pi):
            raise ValueError("rotation length range must lie within (0, pi)")
        if self.trials_per_cell < 0:
            raise ValueError("trials_per_cell must be nonnegative")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ValueError("variant names must be unique")

    @classmethod
    def from_dict(cls, data: dict) -> TrialPlan:
        data = dict(data)
        if "variants" in data:
            data["variants"] = [Variant(**v) for v in data["variants"]]
        if "camera" in data:
            data["camera"] = Camera.from_dict(data["camera"])
        if "optimizer" in data:
            data["optimizer"] = OptimizerConfig.from_dict(
                {**asdict(OptimizerConfig(rays_per_step=512, samples_per_ray=64, stop_on_convergence=True)),
                 **data["optimizer"]}
            )
        if "rot_length_range" in data:
            data["rot_length_range"] = tuple(data["rot_length_range"])
        return cls(**data)

    def to_dict(self) -> dict:
        return {
            "scenes": list(self.scenes),
            "trans_lengths": list(self.trans_lengths),
            "rot_length_range": list(self.rot_length_range),
            "trials_per_cell": self.trials_per_cell,
            "variants": [asdict(v) for v in self.variants],
            "master_seed": self.master_seed,
            "orbit_radius": self.orbit_radius,
            "orbit_step_deg": self.orbit_step_deg,
            "camera": self.camera.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "frame_samples": self.frame_samples,
        }


def load_plan(path: str | Path) -> TrialPlan:
    return TrialPlan.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TrialSpec:
    variant: str
    magnitude: float
    scene: str
    trial: int
    seed: int
    rot_length: float
    azimuth_deg: float
    perturbation: tuple[float, ...]


def trial_seed(master_seed: int, scene_index: int, trial: int) -> int:
    """Variant- and magnitude-independent seed of one trial slot."""
    return int(np.random.SeedSequence([master_seed, scene_index, trial]).generate_state(1)[0])


def plan_trials(plan: TrialPlan) -> list[TrialSpec]:
    """All trials of a plan in canonical order (variant, magnitude, scene, trial)."""
    specs = []
    for variant in plan.variants:
        for magnitude in plan.trans_lengths:
            for s_idx, scene in enumerate(plan.scenes):
                for trial in range(plan.trials_per_cell):
                    seed = trial_seed(plan.master_seed, s_idx, trial)
                    rng = np.random.default_rng(seed)
                    rot_length = float(rng.uniform(*plan.rot_length_range))
                    azimuth = float(rng.uniform(0.0, 360.0))
                    xi = lie.sample_perturbation(magnitude, rot_length, seed)
                    specs.append(TrialSpec(variant.name, float(magnitude), scene, trial, seed, rot_length, azimuth,
                                           tuple(float(x) for x in xi)))
    return specs


@dataclass
class TrialRecord:
    spec: TrialSpec
    result: TrialResult
    initial_trans_err: float
    initial_rot_err: float


def run_trial(plan: TrialPlan, spec: TrialSpec) -> TrialRecord:
    variant = next(v for v in plan.variants if v.name == spec.variant)
    scene = resolve_scene(spec.scene)
    frames = generate_orbit_frames(scene, plan.orbit_radius, variant.n_frames, plan.orbit_step_deg, plan.camera,
                                   spec.azimuth_deg, plan.frame_samples)
    truth = frames[-1].pose
    init = lie.perturb(truth, np.array(spec.perturbation))
    te0, re0 = lie.pose_errors(init, truth)
    config = variant.optimizer_config(plan.optimizer)
    try:
        result = run(AnalyticField(scene), frames, init, truth, config, spec.seed)
    except NumericalAbort as exc:
        result = exc.result
        result.converged = False
        result.convergence_step = None
        result.error = f"abort: {exc}"
        logger.warning("trial %s aborted: %s", spec, exc)
    return TrialRecord(spec, result, te0, re0)


def _run_trial_args(args):
    return run_trial(*args)


def run_plan(plan: TrialPlan, jobs: int = 1) -> list[tuple[tuple[str, float], list[TrialRecord]]]:
    """Run every trial; results grouped by (variant, magnitude) in plan order."""
    specs = plan_trials(plan)
    if jobs > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_trial_args, [(plan, s) for s in specs], chunksize=1))
    else:
        records = [run_trial(plan, s) for s in specs]
    grouped: dict[tuple[str, float], list[TrialRecord]] = {}
    for variant in plan.variants:
        for magnitude in plan.trans_lengths:
            grouped[(variant.name, float(magnitude))] = []
    for rec in records:
        grouped[(rec.spec.variant, rec.spec.magnitude)].append(rec)
    return list(grouped.items())


@dataclass
class CellSummary:
    variant: str
    magnitude: Optional[float]  # None for the row combining all magnitudes
    n_trials: int
    n_converged: int
    convergence_pct: float
    steps_quartiles: Optional[tuple[float, float, float, float, float]]


def quartiles(values: Sequence[float]) -> Optional[tuple[float, float, float, float, float]]:
    if len(values) == 0:
        return None
    q = np.percentile(np.asarray(values, dtype=float), [0, 25, 50, 75, 100])
    return tuple(float(x) for x in q)


def outcome(record) -> tuple[bool, Optional[int]]:
    """(converged, convergence step) of a TrialRecord or of a results.csv row."""
    if isinstance(record, TrialRecord):
        return record.result.converged, record.result.convergence_step
    converged = record["converged"] == "1"
    return converged, int(record["convergence_step"]) if converged else None


def converged_steps(records) -> list[int]:
    return [step for ok, step in map(outcome, records) if ok]


def _summary(variant: str, magnitude: Optional[float], records) -> CellSummary:
    steps = converged_steps(records)
    n = len(records)
    pct = 100.0 * len(steps) / n if n else 0.0
    return CellSummary(variant, magnitude, n, len(steps), pct, quartiles(steps))


def summarize(results) -> list[CellSummary]:
    """Per-cell convergence percentages plus one combined row per variant.

    ``results`` is the output of :func:`run_plan` or :func:`read_results`.
    """
    rows = []
    by_variant: dict[str, list] = {}
    for (variant, magnitude), records in results:
        rows.append(_summary(variant, magnitude, records))
        by_variant.setdefault(variant, []).extend(records)
    for variant, records in by_variant.items():
        rows.append(_summary(variant, None, records))
    return rows


# -- Mann-Whitney U ---------------------------------------------------------

EXACT_LIMIT = 12


def midranks(values: Sequence[float]) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def mann_whitney_u(sample_a: Sequence[float], sample_b: Sequence[float]) -> tuple[float, float]:
    """U statistic of ``sample_a`` and the two-sided p-value.

    Uses the exact permutation distribution of the midrank sum when the pooled
    size is at most 12, otherwise the normal approximation with tie-corrected
    variance and continuity correction.
    """
    na, nb = len(sample_a), len(sample_b)
    if na == 0 or nb == 0:
        raise ValueError("both samples must be nonempty")
    n = na + nb
    ranks = midranks(list(sample_a) + list(sample_b))
    u = float(ranks[:na].sum() - na * (na + 1) / 2.0)
    mean = na * nb / 2.0
    if n <= EXACT_LIMIT:
        offset = na * (na + 1) / 2.0
        observed = abs(u - mean)
        hits = total = 0
        for combo in itertools.combinations(range(n), na):
            total += 1
            uc = ranks[list(combo)].sum() - offset
            if abs(uc - mean) >= observed - 1e-9:
                hits += 1
        return u, hits / total
    _, counts = np.unique(ranks, return_counts=True)
    tie = float(np.sum(counts**3 - counts))
    var = na * nb / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    if var <= 0:
        return u, 1.0
    z = max(abs(u - mean) - 0.5, 0.0) / math.sqrt(var)
    return u, float(min(1.0, 2.0 * norm.sf(z)))


def pairwise_stats(results) -> list[dict]:
    """U and p for every variant pair, per magnitude and pooled, on steps of converged trials."""
    steps: dict[tuple[str, float], list[int]] = {}
    variants: list[str] = []
    magnitudes: list[float] = []
    for (variant, magnitude), records in results:
        steps[(variant, magnitude)] = converged_steps(records)
        if variant not in variants:
            variants.append(variant)
        if magnitude not in magnitudes:
            magnitudes.append(magnitude)
    out = []
    for a, b in itertools.combinations(variants, 2):
        cells = [(m, steps[(a, m)], steps[(b, m)]) for m in magnitudes]
        cells.append(("pooled", [x for m in magnitudes for x in steps[(a, m)]],
                      [x for m in magnitudes for x in steps[(b, m)]]))
        for magnitude, sa, sb in cells:
            entry = {"variant_a": a, "variant_b": b, "magnitude": magnitude, "n_a": len(sa), "n_b": len(sb),
                     "median_a": float(np.median(sa)) if sa else None,
                     "median_b": float(np.median(sb)) if sb else None, "U": None, "p": None}
            if sa and sb:
                entry["U"], entry["p"] = mann_whitney_u(sa, sb)
            out.append(entry)
    return out


# -- output files -----------------------------------------------------------

RESULT_COLUMNS = (
    "variant", "magnitude", "scene", "trial", "seed", "rot_length", "azimuth_deg", "initial_trans_err",
    "initial_rot_err", "converged", "convergence_step", "n_steps", "stop_reason", "final_trans_err",
    "final_rot_err", "final_loss", "error",
)


def trace_name(spec: TrialSpec) -> str:
    return f"{spec.variant}_{spec.magnitude:g}_{spec.scene}_{spec.trial:03d}.csv"


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_results(results, out_dir: str | Path, traces: bool = True) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if traces:
        (out_dir / "traces").mkdir(exist_ok=True)
    with open(out_dir / "results.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for _, records in results:
            for rec in records:
                s, r = rec.spec, rec.result
                last = r.n_steps - 1
                writer.writerow([_fmt(x) for x in (
                    s.variant, s.magnitude, s.scene, s.trial, s.seed, s.rot_length, s.azimuth_deg,
                    rec.initial_trans_err, rec.initial_rot_err, r.converged, r.convergence_step, r.n_steps,
                    r.stop_reason, r.trans_err[last] if last >= 0 else None,
                    r.rot_err[last] if last >= 0 else None, r.loss_total[last] if last >= 0 else None, r.error,
                )])
                if traces:
                    r.write_trace(out_dir / "traces" / trace_name(s))
    write_summary(results, out_dir)


def write_summary(results, out_dir: str | Path) -> None:
    """summary.csv and stats.json for run_plan or read_results output."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("variant", "magnitude", "n_trials", "n_converged", "convergence_pct",
                         "steps_min", "steps_q1", "steps_median", "steps_q3", "steps_max"))
        for row in summarize(results):
            q = row.steps_quartiles or (None,) * 5
            mag = "all" if row.magnitude is None else row.magnitude
            writer.writerow([_fmt(x) for x in (row.variant, mag, row.n_trials, row.n_converged,
                                                row.convergence_pct, *q)])
    (out_dir / "stats.json").write_text(json.dumps(pairwise_stats(results), indent=2) + "\n")


def read_results(path: str | Path) -> list[tuple[tuple[str, float], list[dict]]]:
    """Rows of a results.csv grouped by (variant, magnitude), in file order."""
    grouped: dict[tuple[str, float], list[dict]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            grouped.setdefault((row["variant"], float(row["magnitude"])), []).append(row)
    return list(grouped.items())
