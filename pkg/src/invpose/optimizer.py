"""Adam over the 6-DoF tangent with a loss-based stopping rule."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import lie
from .field import RadianceField, lowpass_field
from .lie import Pose
from .objective import LossConfig, RgbdFrame, evaluate

logger = logging.getLogger(__name__)

CONVERGENCE_RATIO = 0.1
ZERO_ERROR = 1e-6
TRACE_COLUMNS = ("step", "loss_total", "loss_rgb", "loss_depth", "trans_err_m", "rot_err_rad")


@dataclass
class OptimizerConfig:
    max_steps: int = 1000
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rays_per_step: int = 2048
    samples_per_ray: int = 128
    stop_window: int = 50
    stop_loss_threshold: float = 0.0  # 0 disables the heuristic: fixed-length runs
    lambda_depth: float = 0.5
    huber_rgb: float = 0.1
    huber_depth: float = 0.1
    wide: bool = False
    use_lowpass: bool = False
    lowpass_sigma: float = 0.05
    lowpass_taps: int = 8
    # Stop as soon as the ground-truth criterion is met. Converged flag and
    # convergence step are unaffected; only the tail of the trace is skipped.
    stop_on_convergence: bool = False

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.lambda_depth < 0:
            raise ValueError("lambda_depth must be nonnegative")

    @property
    def loss(self) -> LossConfig:
        return LossConfig(
            self.lambda_depth, self.huber_rgb, self.huber_depth, self.rays_per_step, self.samples_per_ray, self.wide
        )

    @classmethod
    def from_dict(cls, data: dict) -> OptimizerConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown optimizer settings: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrialResult:
    loss_total: list[float] = field(default_factory=list)
    loss_rgb: list[float] = field(default_factory=list)
    loss_depth: list[float] = field(default_factory=list)
    trans_err: list[float] = field(default_factory=list)
    rot_err: list[float] = field(default_factory=list)
    converged: bool = False
    convergence_step: Optional[int] = None
    final_pose: Optional[Pose] = None
    stop_reason: str = "max_steps"
    error: str = ""

    @property
    def n_steps(self) -> int:
        return len(self.loss_total)

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            for i in range(self.n_steps):
                row = (self.loss_total[i], self.loss_rgb[i], self.loss_depth[i], self.trans_err[i], self.rot_err[i])
                writer.writerow([i, *(repr(float(x)) for x in row)])


class NumericalAbort(RuntimeError):
    """Non-finite loss or gradient; ``result`` holds the trace up to the last finite step."""

    def __init__(self, message: str, result: TrialResult, last_delta: np.ndarray):
        super().__init__(message)
        self.result = result
        self.last_delta = last_delta


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, dim: int = 6):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        """Return the increment to add to the parameters."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def convergence_heuristic(loss_trace: Sequence[float], config: OptimizerConfig) -> bool:
    """True once the loss has flattened out below ``stop_loss_threshold``.

    Compares the mean of the last ``stop_window`` losses with the window
    before it; fires when the relative improvement is under 1%.
    """
    w = config.stop_window
    if w < 1 or len(loss_trace) < 2 * w:
        return False
    recent = float(np.mean(loss_trace[-w:]))
    previous = float(np.mean(loss_trace[-2 * w : -w]))
    if recent >= config.stop_loss_threshold:
        return False
    if previous <= 0.0:
        return True
    return (previous - recent) / previous < 0.01


def run(
    field: RadianceField,
    frames: Sequence[RgbdFrame],
    pose_init: Pose,
    ground_truth: Optional[Pose],
    config: OptimizerConfig,
    seed: int,
) -> TrialResult:
    """Localize the last frame of ``frames`` starting from ``pose_init``.

    Row k of the trace describes the estimate before the k-th update. The
    run stops after ``max_steps`` rows, when the loss heuristic fires, or
    (with ``stop_on_convergence``) when the ground-truth criterion is met.
    """
    if config.use_lowpass:
        field = lowpass_field(field, config.lowpass_sigma, config.lowpass_taps, seed=0)
    loss_cfg = config.loss
    adam = Adam(config.lr, config.beta1, config.beta2, config.eps)
    delta = np.zeros(6)
    result = TrialResult()
    initial_err = None
    for step in range(config.max_steps):
        pose = lie.oplus(pose_init, delta)
        report = evaluate(field, frames, pose_init, delta, loss_cfg, np.random.default_rng([seed, step]))
        if not (np.isfinite(report.total) and np.all(np.isfinite(report.grad))):
            result.final_pose = pose
            result.stop_reason = "abort"
            raise NumericalAbort(
                f"non-finite loss or gradient at step {step}; last finite delta {delta.tolist()}", result, delta
            )
        result.loss_total.append(report.total)
        result.loss_rgb.append(report.rgb_term)
        result.loss_depth.append(report.depth_term)
        if ground_truth is not None:
            te, re = lie.pose_errors(pose, ground_truth)
            if initial_err is None:
                initial_err = te
            if not result.converged and (initial_err <= ZERO_ERROR or te <= CONVERGENCE_RATIO * initial_err):
                result.converged = True
                result.convergence_step = step
        else:
            te = re = float("nan")
        result.trans_err.append(te)
        result.rot_err.append(re)

        if result.converged and (initial_err <= ZERO_ERROR or config.stop_on_convergence):
            result.stop_reason = "converged"
            result.final_pose = pose
            return result
        if convergence_heuristic(result.loss_total, config):
            result.stop_reason = "heuristic"
            result.final_pose = pose
            logger.debug("loss heuristic stopped the run at step %d", step)
            return result
        delta = delta + adam.step(report.grad)
    result.final_pose = lie.oplus(pose_init, delta)
    return result
