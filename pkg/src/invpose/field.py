"""Differentiable radiance fields with closed-form spatial gradients.

Every field exposes ``query(points)`` returning a :class:`FieldSample` whose
arrays carry a leading batch axis, and a ``background`` color used by the
renderer for light that passes through the volume.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.stats import norm, qmc

CUBE_HALF_EXTENT = 1.0
DEFAULT_EDGE_SOFTNESS = 0.05


class SceneError(ValueError):
    """Invalid scene description; the message names the offending field."""


@dataclass
class FieldSample:
    """Density, color and their spatial derivatives.

    Shapes for a batch of N points: sigma (N,), color (N, 3),
    d_sigma_dx (N, 3), d_color_dx (N, 3, 3) with ``d_color_dx[n, c, k]``
    the derivative of channel c along axis k. Single-point queries drop the
    leading axis.
    """

    sigma: np.ndarray
    color: np.ndarray
    d_sigma_dx: np.ndarray
    d_color_dx: np.ndarray

    def __getitem__(self, idx) -> FieldSample:
        return FieldSample(self.sigma[idx], self.color[idx], self.d_sigma_dx[idx], self.d_color_dx[idx])


class RadianceField(Protocol):
    background: np.ndarray

    def query(self, points: np.ndarray) -> FieldSample: ...

    def bounds(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Axis-aligned box outside which the field is empty, or None."""


def empty_sample(n: int, background: np.ndarray) -> FieldSample:
    return FieldSample(
        np.zeros(n),
        np.broadcast_to(background, (n, 3)).copy(),
        np.zeros((n, 3)),
        np.zeros((n, 3, 3)),
    )


def smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def smoothstep_slope(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return 6.0 * u * (1.0 - u)


def soft_occupancy(signed_distance: np.ndarray, edge_softness: float) -> tuple[np.ndarray, np.ndarray]:
    """Occupancy in [0, 1] falling from 1 at -edge to 0 at +edge, and its slope."""
    u = (edge_softness - signed_distance) / (2.0 * edge_softness)
    return smoothstep(u), -smoothstep_slope(u) / (2.0 * edge_softness)


@dataclass(frozen=True)
class Primitive:
    shape: str
    center: np.ndarray
    size: np.ndarray
    sigma_max: float
    color: np.ndarray
    edge_softness: float = DEFAULT_EDGE_SOFTNESS

    def signed_distance(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Signed distance (negative inside) and its gradient."""
        p = points - self.center
        if self.shape == "sphere":
            r = np.linalg.norm(p, axis=-1)
            safe = np.where(r > 0.0, r, 1.0)
            grad = np.where((r > 0.0)[:, None], p / safe[:, None], 0.0)
            return r - float(self.size[0]), grad
        # Box with full edge lengths self.size.
        sign = np.where(p < 0.0, -1.0, 1.0)
        q = np.abs(p) - 0.5 * self.size
        outside = np.maximum(q, 0.0)
        out_len = np.linalg.norm(outside, axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        safe = np.where(out_len > 0.0, out_len, 1.0)
        grad_out = sign * outside / safe[:, None]
        axis = np.argmax(q, axis=-1)
        grad_in = np.zeros_like(p)
        grad_in[np.arange(len(p)), axis] = sign[np.arange(len(p)), axis]
        grad = np.where((out_len > 0.0)[:, None], grad_out, grad_in)
        return out_len + inside, grad

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        half = np.full(3, float(self.size[0])) if self.shape == "sphere" else 0.5 * self.size
        return self.center - half, self.center + half


@dataclass
class SceneSpec:
    primitives: list[Primitive]
    background_color: np.ndarray = field(default_factory=lambda: np.zeros(3))
    name: str = "scene"

    def __post_init__(self):
        self.background_color = np.asarray(self.background_color, dtype=float)
        for i, prim in enumerate(self.primitives):
            lo, hi = prim.bounds()
            if np.any(lo < -CUBE_HALF_EXTENT - 1e-12) or np.any(hi > CUBE_HALF_EXTENT + 1e-12):
                raise SceneError(f"primitives[{i}]: extends outside the 2x2x2 m cube")

    @classmethod
    def from_dict(cls, data: dict, name: str = "scene") -> SceneSpec:
        if not isinstance(data, dict):
            raise SceneError("scene: expected a JSON object")
        prims = []
        for i, raw in enumerate(data.get("primitives", [])):
            prims.append(_parse_primitive(raw, f"primitives[{i}]"))
        bg = _vector(data.get("background_color", [0.0, 0.0, 0.0]), 3, "background_color")
        _check_color(bg, "background_color")
        return cls(prims, bg, str(data.get("name", name)))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "background_color": self.background_color.tolist(),
            "primitives": [
                {
                    "shape": p.shape,
                    "center": p.center.tolist(),
                    "size": float(p.size[0]) if p.shape == "sphere" else p.size.tolist(),
                    "sigma_max": p.sigma_max,
                    "edge_softness": p.edge_softness,
                    "color": p.color.tolist(),
                }
                for p in self.primitives
            ],
        }


def _vector(value, n: int, where: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float).reshape(-1)
    except (TypeError, ValueError):
        raise SceneError(f"{where}: expected {n} numbers") from None
    if arr.size != n or not np.all(np.isfinite(arr)):
        raise SceneError(f"{where}: expected {n} finite numbers")
    return arr


def _check_color(c: np.ndarray, where: str) -> None:
    if np.any(c < 0.0) or np.any(c > 1.0):
        raise SceneError(f"{where}: color components must lie in [0, 1]")


def _parse_primitive(raw, where: str) -> Primitive:
    if not isinstance(raw, dict):
        raise SceneError(f"{where}: expected an object")
    for key in ("shape", "center", "size", "sigma_max", "color"):
        if key not in raw:
            raise SceneError(f"{where}.{key}: missing")
    shape = raw["shape"]
    if shape not in ("sphere", "box"):
        raise SceneError(f"{where}.shape: must be 'sphere' or 'box', got {shape!r}")
    center = _vector(raw["center"], 3, f"{where}.center")
    if shape == "sphere":
        size = _vector(raw["size"], 1, f"{where}.size")
    else:
        size = raw["size"]
        size = _vector([size] * 3 if isinstance(size, (int, float)) else size, 3, f"{where}.size")
    if np.any(size <= 0):
        raise SceneError(f"{where}.size: must be positive")
    try:
        sigma_max = float(raw["sigma_max"])
        softness = float(raw.get("edge_softness", DEFAULT_EDGE_SOFTNESS))
    except (TypeError, ValueError):
        raise SceneError(f"{where}: sigma_max and edge_softness must be numbers") from None
    if not sigma_max >= 0:
        raise SceneError(f"{where}.sigma_max: must be nonnegative")
    if not softness > 0:
        raise SceneError(f"{where}.edge_softness: must be positive")
    color = _vector(raw["color"], 3, f"{where}.color")
    _check_color(color, f"{where}.color")
    return Primitive(shape, center, size, sigma_max, color, softness)


def load_scene(path: str | Path) -> SceneSpec:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return SceneSpec.from_dict(data, name=path.stem)


def save_scene(scene: SceneSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2) + "\n")


class AnalyticField:
    """Sum of soft-edged primitives; color is the density-weighted blend."""

    def __init__(self, scene: SceneSpec):
        self.scene = scene
        self.background = np.asarray(scene.background_color, dtype=float)
        if scene.primitives:
            boxes = [p.bounds() for p in scene.primitives]
            pads = [p.edge_softness for p in scene.primitives]
            self._lo = np.min([lo - e for (lo, _), e in zip(boxes, pads)], axis=0)
            self._hi = np.max([hi + e for (_, hi), e in zip(boxes, pads)], axis=0)
        else:
            self._lo = self._hi = np.zeros(3)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Box outside which density and all gradients vanish."""
        return self._lo, self._hi

    def query(self, points: np.ndarray) -> FieldSample:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(points)
        sigma = np.zeros(n)
        d_sigma = np.zeros((n, 3))
        weighted = np.zeros((n, 3))
        parts = []
        for prim in self.scene.primitives:
            # only points within the padded bounding box can have density
            lo, hi = prim.bounds()
            pad = prim.edge_softness
            idx = np.flatnonzero(np.all((points > lo - pad) & (points < hi + pad), axis=1))
            if idx.size == 0 or prim.sigma_max == 0.0:
                continue
            dist, grad = prim.signed_distance(points[idx])
            occ, slope = soft_occupancy(dist, prim.edge_softness)
            s = prim.sigma_max * occ
            ds = (prim.sigma_max * slope)[:, None] * grad
            sigma[idx] += s
            d_sigma[idx] += ds
            weighted[idx] += s[:, None] * prim.color
            parts.append((idx, prim.color, ds))
        occupied = sigma > 0.0
        safe = np.where(occupied, sigma, 1.0)
        color = np.where(occupied[:, None], weighted / safe[:, None], self.background)
        d_color = np.zeros((n, 3, 3))
        # d(sum s_k c_k / s) = sum (c_k - color) ds_k^T / s
        for idx, c, ds in parts:
            d_color[idx] += (c - color[idx])[:, :, None] * (ds / safe[idx, None])[:, None, :]
        return FieldSample(sigma, np.clip(color, 0.0, 1.0), d_sigma, d_color)


def eval_field(scene: SceneSpec, x: Sequence[float]) -> FieldSample:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("query point must be finite")
    return AnalyticField(scene).query(x.reshape(1, 3))[0]


@dataclass
class VoxelGrid:
    """Vertex values on a regular lattice spanning [lower, upper].

    ``values`` has shape (nx, ny, nz, 4) holding (sigma, r, g, b).
    """

    values: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float).reshape(3)
        self.upper = np.asarray(self.upper, dtype=float).reshape(3)
        if self.values.ndim != 4 or self.values.shape[3] != 4:
            raise ValueError("voxel values must have shape (nx, ny, nz, 4)")
        if min(self.values.shape[:3]) < 2:
            raise ValueError("voxel grid needs at least 2 vertices per axis")
        if not np.all(self.upper > self.lower):
            raise ValueError("voxel grid has zero extent")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape[:3])


_VOXEL_HEADER = struct.Struct("<3I6d")


def save_voxel_grid(grid: VoxelGrid, path: str | Path) -> None:
    header = _VOXEL_HEADER.pack(*grid.dims, *grid.lower, *grid.upper)
    Path(path).write_bytes(header + grid.values.astype("<f4").tobytes(order="C"))


def load_voxel_grid(path: str | Path) -> VoxelGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _VOXEL_HEADER.size:
        raise ValueError(f"{path}: truncated voxel header")
    nx, ny, nz, *bounds = _VOXEL_HEADER.unpack_from(raw)
    body = np.frombuffer(raw, dtype="<f4", offset=_VOXEL_HEADER.size)
    if body.size != nx * ny * nz * 4:
        raise ValueError(f"{path}: expected {nx * ny * nz * 4} floats, found {body.size}")
    return VoxelGrid(body.reshape(nx, ny, nz, 4).astype(float), bounds[:3], bounds[3:])


class VoxelField:
    """Trilinear interpolation of a :class:`VoxelGrid`; zero density outside."""

    def __init__(self, grid: VoxelGrid, background: Sequence[float] = (0.0, 0.0, 0.0)):
        self.grid = grid
        self.background = np.asarray(background, dtype=float)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        # closed grid box, widened so boundary vertices are still queried
        pad = 1e-9 * (self.grid.upper - self.grid.lower)
        return self.grid.lower - pad, self.grid.upper + pad

    def query(self, points: np.ndarray) -> FieldSample:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        g = self.grid
        n = len(points)
        out = empty_sample(n, self.background)
        inside = np.all((points >= g.lower) & (points <= g.upper), axis=1)
        if not inside.any():
            return out
        cells = np.array(g.dims) - 1
        scale = cells / (g.upper - g.lower)
        f = (points[inside] - g.lower) * scale
        i0 = np.clip(np.floor(f).astype(int), 0, cells - 1)
        frac = f - i0
        vals = np.zeros((len(f), 4))
        grads = np.zeros((len(f), 4, 3))
        for corner in range(8):
            offs = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
            idx = i0 + offs
            v = g.values[idx[:, 0], idx[:, 1], idx[:, 2]]
            axis_w = np.where(offs == 1, frac, 1.0 - frac)
            axis_dw = np.where(offs == 1, 1.0, -1.0) * scale
            vals += axis_w.prod(axis=1)[:, None] * v
            for k in range(3):
                others = np.prod(np.delete(axis_w, k, axis=1), axis=1)
                grads[:, :, k] += (others * axis_dw[k])[:, None] * v
        out.sigma[inside] = np.maximum(vals[:, 0], 0.0)
        out.color[inside] = np.clip(vals[:, 1:], 0.0, 1.0)
        out.d_sigma_dx[inside] = grads[:, 0, :]
        out.d_color_dx[inside] = grads[:, 1:, :]
        return out


def eval_voxel_field(grid: VoxelGrid, x: Sequence[float]) -> FieldSample:
    return VoxelField(grid).query(np.asarray(x, dtype=float).reshape(1, 3))[0]


def gaussian_offsets(n_taps: int, seed: int) -> np.ndarray:
    """Symmetric standard-normal offsets from a scrambled Halton sequence.

    Offsets come in +/- pairs (plus the origin when ``n_taps`` is odd), so the
    sample mean of every offset is exactly zero.
    """
    if n_taps < 1:
        raise ValueError("n_taps must be >= 1")
    half = n_taps // 2
    parts = []
    if half:
        u = qmc.Halton(d=3, scramble=True, seed=seed).random(half)
        z = norm.ppf(np.clip(u, 1e-12, 1.0 - 1e-12))
        parts += [z, -z]
    if n_taps % 2:
        parts.append(np.zeros((1, 3)))
    return np.concatenate(parts)


class LowpassField:
    """Gaussian-blurred view of another field, standing in for a coarse model."""

    def __init__(self, base: RadianceField, kernel_sigma: float, n_taps: int = 16, seed: int = 0):
        if kernel_sigma < 0:
            raise ValueError("kernel_sigma must be nonnegative")
        self.base = base
        self.kernel_sigma = float(kernel_sigma)
        self.background = base.background
        self.offsets = kernel_sigma * gaussian_offsets(n_taps, seed)
        reach = np.abs(self.offsets).max(axis=0)
        base_bounds = base.bounds()
        self._bounds = None if base_bounds is None else (base_bounds[0] - reach, base_bounds[1] + reach)

    def bounds(self) -> tuple[np.ndarray, np.ndarray] | None:
        return self._bounds

    def query(self, points: np.ndarray) -> FieldSample:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kernel_sigma == 0.0:
            return self.base.query(points)
        n, k = len(points), len(self.offsets)
        shifted = (points[:, None, :] + self.offsets[None, :, :]).reshape(-1, 3)
        s = self.base.query(shifted)
        return FieldSample(
            s.sigma.reshape(n, k).mean(axis=1),
            s.color.reshape(n, k, 3).mean(axis=1),
            s.d_sigma_dx.reshape(n, k, 3).mean(axis=1),
            s.d_color_dx.reshape(n, k, 3, 3).mean(axis=1),
        )


def lowpass_field(base: RadianceField, kernel_sigma: float, n_taps: int = 16, seed: int = 0) -> RadianceField:
    if kernel_sigma == 0.0:
        return base
    return LowpassField(base, kernel_sigma, n_taps, seed)
