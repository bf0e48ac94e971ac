"""Robust RGB-D localization loss over a window of frames."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .field import RadianceField
from .lie import Pose
from .render import (
    Camera,
    read_pgm16,
    read_ppm,
    render_with_pose_grad,
    sample_stratified,
    write_pgm16,
    write_ppm,
)

logger = logging.getLogger(__name__)

MIN_DEPTH_OPACITY = 0.05


@dataclass
class RgbdFrame:
    """Reference image with metric depth.

    ``rel_pose`` maps this frame's camera coordinates into the camera frame of
    the last frame in the window. ``pose`` is the world pose when known.
    """

    color: np.ndarray
    depth: np.ndarray
    depth_valid: np.ndarray
    camera: Camera
    rel_pose: Pose
    pose: Optional[Pose] = None

    def __post_init__(self):
        h, w = self.camera.height, self.camera.width
        if self.color.shape != (h, w, 3) or self.depth.shape != (h, w) or self.depth_valid.shape != (h, w):
            raise ValueError("frame arrays do not match the camera resolution")
        self.depth_valid = self.depth_valid & (self.depth > 0.0)


@dataclass
class LossConfig:
    lambda_depth: float = 0.5
    huber_rgb: float = 0.1
    huber_depth: float = 0.1
    rays_per_step: int = 2048
    samples_per_ray: int = 128
    wide: bool = False


@dataclass
class LossReport:
    total: float
    rgb_term: float
    depth_term: float
    n_rays: int
    grad: np.ndarray
    n_depth_rays: int = 0
    depth_missing: bool = False


def huber(residual, threshold: float):
    """Huber penalty and its derivative, elementwise."""
    if threshold <= 0:
        raise ValueError("huber threshold must be positive")
    r = np.asarray(residual, dtype=float)
    a = np.abs(r)
    quad = a <= threshold
    value = np.where(quad, 0.5 * r * r, threshold * (a - 0.5 * threshold))
    deriv = np.where(quad, r, threshold * np.sign(r))
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


def split_counts(total: int, n_frames: int) -> list[int]:
    base, extra = divmod(total, n_frames)
    return [base + (1 if i < extra else 0) for i in range(n_frames)]


def sample_pixels(frames: Sequence[RgbdFrame], total_rays: int, rng: np.random.Generator) -> np.ndarray:
    """Rows of (frame index, u, v), spread evenly over the frames."""
    if total_rays < 1:
        raise ValueError("total_rays must be >= 1")
    if not frames:
        raise ValueError("need at least one frame")
    rows = []
    for i, (frame, count) in enumerate(zip(frames, split_counts(total_rays, len(frames)))):
        u = rng.integers(0, frame.camera.width, size=count)
        v = rng.integers(0, frame.camera.height, size=count)
        rows.append(np.stack([np.full(count, i), u, v], axis=1))
    return np.concatenate(rows)


def evaluate(
    field: RadianceField,
    frames: Sequence[RgbdFrame],
    pose_base: Pose,
    delta: np.ndarray,
    config: LossConfig,
    rng: np.random.Generator | int,
) -> LossReport:
    """Loss and its gradient with respect to ``delta`` at ``oplus(pose_base, delta)``.

    Frame i is rendered from ``oplus(pose_base, delta) @ frames[i].rel_pose``.
    The rgb term averages the Huber penalty over rays and channels; the depth
    term averages it over rays whose sensor depth is valid and whose rendered
    opacity is at least ``MIN_DEPTH_OPACITY``.
    """
    rng = np.random.default_rng(rng)
    samples = sample_pixels(frames, config.rays_per_step, rng)
    rgb_res, rgb_jac, d_res, d_jac = [], [], [], []
    for i, frame in enumerate(frames):
        sel = samples[samples[:, 0] == i]
        if len(sel) == 0:
            continue
        pixels = sel[:, 1:]
        cam = frame.camera
        t, dt = sample_stratified(cam.near, cam.far, config.samples_per_ray, config.wide, rng, len(pixels))
        out = render_with_pose_grad(field, cam, pose_base, delta, pixels, t, dt, frame.rel_pose)
        u, v = pixels[:, 0], pixels[:, 1]
        rgb_res.append(out.color - frame.color[v, u])
        rgb_jac.append(out.d_color_ddelta)
        mask = frame.depth_valid[v, u] & (out.opacity >= MIN_DEPTH_OPACITY)
        d_res.append((out.depth - frame.depth[v, u])[mask])
        d_jac.append(out.d_depth_ddelta[mask])
    n_rays = len(samples)
    if n_rays == 0:
        raise ValueError("no rays sampled")

    rgb_res = np.concatenate(rgb_res)
    value, deriv = huber(rgb_res, config.huber_rgb)
    rgb_term = float(value.mean())
    grad = np.einsum("rc,rcj->j", deriv, np.concatenate(rgb_jac)) / rgb_res.size

    d_res = np.concatenate(d_res)
    n_depth = len(d_res)
    depth_term = 0.0
    depth_missing = False
    if n_depth:
        value, deriv = huber(d_res, config.huber_depth)
        depth_term = float(value.mean())
        if config.lambda_depth:
            grad = grad + config.lambda_depth * (deriv @ np.concatenate(d_jac)) / n_depth
    elif config.lambda_depth > 0:
        depth_missing = True
    total = rgb_term + config.lambda_depth * depth_term
    return LossReport(total, rgb_term, depth_term, n_rays, grad, n_depth, depth_missing)


# -- frame files ------------------------------------------------------------

DEPTH_UNITS_PER_METER = 1000.0


def save_frames(frames: Sequence[RgbdFrame], directory: str | Path) -> None:
    """Write ``frame_XXX.ppm``, ``frame_XXX_depth.pgm`` and ``frame_XXX.json``.

    Depth is stored in millimeters along the ray; 0 marks invalid pixels.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        stem = directory / f"frame_{i:03d}"
        write_ppm(stem.with_suffix(".ppm"), frame.color)
        mm = np.where(frame.depth_valid, frame.depth * DEPTH_UNITS_PER_METER, 0.0)
        write_pgm16(directory / f"frame_{i:03d}_depth.pgm", mm)
        sidecar = {"camera": frame.camera.to_dict(), "rel_pose": frame.rel_pose.to_dict()}
        if frame.pose is not None:
            sidecar["pose"] = frame.pose.to_dict()
        stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_frames(directory: str | Path) -> tuple[list[RgbdFrame], bool]:
    """Load every frame in ``directory`` in name order.

    Returns the frames and whether every frame had a depth image.
    """
    directory = Path(directory)
    sidecars = sorted(p for p in directory.glob("frame_*.json"))
    if not sidecars:
        raise FileNotFoundError(f"{directory}: no frame_*.json sidecars")
    frames, all_depth = [], True
    for side in sidecars:
        meta = json.loads(side.read_text())
        camera = Camera.from_dict(meta["camera"])
        color = read_ppm(side.with_suffix(".ppm"))
        depth_path = side.with_name(side.stem + "_depth.pgm")
        if depth_path.exists():
            depth = read_pgm16(depth_path) / DEPTH_UNITS_PER_METER
            valid = depth > 0.0
        else:
            logger.warning("%s: no depth image", side.stem)
            all_depth = False
            depth = np.zeros((camera.height, camera.width))
            valid = np.zeros_like(depth, dtype=bool)
        pose = Pose.from_dict(meta["pose"]) if "pose" in meta else None
        frames.append(RgbdFrame(color, depth, valid, camera, Pose.from_dict(meta["rel_pose"]), pose))
    return frames, all_depth
