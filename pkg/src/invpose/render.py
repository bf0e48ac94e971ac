"""Pinhole rays, stratified sampling and emission-absorption rendering.

Cameras look down their local +z axis with +x right and +y down. Rendering
is batched: ``t`` and ``dt`` have shape (n_rays, n_samples).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import lie
from .field import RadianceField
from .lie import Pose

DEPTH_EPS = 1e-6
WIDE_NEAR_CLIP = 1e-3


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        if not (0.0 < self.near < self.far):
            raise ValueError("camera needs 0 < near < far")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float, near: float, far: float) -> Camera:
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, width, height, near, far)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height", "near", "far")}

    @classmethod
    def from_dict(cls, d: dict) -> Camera:
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]), float(d["near"]), float(d["far"]),
        )

    def all_pixels(self) -> np.ndarray:
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([u.ravel(), v.ravel()], axis=1)


@dataclass
class Rays:
    origins: np.ndarray
    directions: np.ndarray
    pixels: np.ndarray


def local_directions(camera: Camera, pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels).reshape(-1, 2)
    u, v = pixels[:, 0], pixels[:, 1]
    if np.any((u < 0) | (u >= camera.width) | (v < 0) | (v >= camera.height)):
        raise ValueError("pixel outside image bounds")
    d = np.stack(
        [(u + 0.5 - camera.cx) / camera.fx, (v + 0.5 - camera.cy) / camera.fy, np.ones(len(u))], axis=1
    )
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def generate_rays(camera: Camera, pose: Pose, pixels: np.ndarray) -> Rays:
    pixels = np.asarray(pixels, dtype=int).reshape(-1, 2)
    d = local_directions(camera, pixels) @ pose.rotation.T
    o = np.broadcast_to(pose.translation, d.shape).copy()
    return Rays(o, d, pixels)


def sampling_interval(near: float, far: float, wide: bool) -> tuple[float, float]:
    if not wide:
        return near, far
    mid, length = 0.5 * (near + far), far - near
    return max(mid - length, WIDE_NEAR_CLIP), mid + length


def sample_stratified(near: float, far: float, n_samples: int, wide: bool, rng, n_rays: Optional[int] = None):
    """One uniform draw per equal-width bin of the sampling interval.

    ``rng`` needs a ``random(size)`` method. Returns ``(t, dt)``, each of shape
    (n_samples,) or (n_rays, n_samples).
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    lo, hi = sampling_interval(near, far, wide)
    width = (hi - lo) / n_samples
    shape = (n_samples,) if n_rays is None else (n_rays, n_samples)
    u = np.asarray(rng.random(shape), dtype=float)
    t = lo + (np.arange(n_samples) + u) * width
    return t, np.full(shape, width)


def midpoint_samples(near: float, far: float, n_samples: int, n_rays: int, wide: bool = False):
    lo, hi = sampling_interval(near, far, wide)
    width = (hi - lo) / n_samples
    t = lo + (np.arange(n_samples) + 0.5) * width
    return np.broadcast_to(t, (n_rays, n_samples)).copy(), np.full((n_rays, n_samples), width)


@dataclass
class RenderOutput:
    """Per-ray rendering results; Jacobians are None for value-only renders."""

    color: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray
    d_color_ddelta: Optional[np.ndarray] = None
    d_depth_ddelta: Optional[np.ndarray] = None


def _check_sorted(t: np.ndarray) -> None:
    if np.any(np.diff(t, axis=-1) < 0):
        raise ValueError("samples must be sorted ascending along each ray")


def _composite(sigma, color, t, dt, background):
    tau = sigma * dt
    # transmittance before each sample, and after the last
    acc = np.cumsum(tau, axis=1)
    trans_after = np.exp(-acc)
    trans_before = np.concatenate([np.ones((len(t), 1)), trans_after[:, :-1]], axis=1)
    alpha = -np.expm1(-tau)
    w = trans_before * alpha
    final = trans_after[:, -1]
    rgb = np.einsum("rs,rsc->rc", w, color) + final[:, None] * background
    opacity = 1.0 - final
    depth = (w * t).sum(axis=1) / np.maximum(opacity, DEPTH_EPS)
    return rgb, depth, opacity, w, trans_before, trans_after


def _query_sparse(field: RadianceField, pts: np.ndarray):
    """Query only points inside the field's bounding box, if it has one.

    Returns full-length sigma and color arrays, the queried indices and the
    compact :class:`FieldSample` for those indices.
    """
    bounds = field.bounds()
    if bounds is None:
        idx = np.arange(len(pts))
    else:
        lo, hi = bounds
        idx = np.flatnonzero(np.all((pts > lo) & (pts < hi), axis=1))
    fs = field.query(pts[idx])
    sigma = np.zeros(len(pts))
    sigma[idx] = fs.sigma
    color = np.empty((len(pts), 3))
    color[:] = field.background
    color[idx] = fs.color
    return sigma, color, idx, fs


def render_rays(field: RadianceField, origins, directions, t, dt) -> RenderOutput:
    """Emission-absorption quadrature along each ray."""
    origins = np.atleast_2d(origins)
    directions = np.atleast_2d(directions)
    t = np.atleast_2d(t)
    dt = np.broadcast_to(dt, t.shape)
    _check_sorted(t)
    n, s = t.shape
    pts = origins[:, None, :] + t[:, :, None] * directions[:, None, :]
    sigma, color, _, _ = _query_sparse(field, pts.reshape(-1, 3))
    rgb, depth, opacity, w, trans, _ = _composite(
        sigma.reshape(n, s), color.reshape(n, s, 3), t, dt, field.background
    )
    return RenderOutput(rgb, depth, opacity, w, trans)


def render_ray(field: RadianceField, origin, direction, t, dt) -> RenderOutput:
    out = render_rays(field, np.reshape(origin, (1, 3)), np.reshape(direction, (1, 3)),
                      np.reshape(t, (1, -1)), np.reshape(dt, (1, -1)))
    return RenderOutput(out.color[0], out.depth[0], out.opacity[0], out.weights[0], out.transmittance[0])


def pose_point_jacobians(pose_base: Pose, delta: np.ndarray, rel_pose: Pose, local_dirs: np.ndarray):
    """Affine-in-t Jacobians of sample positions with respect to delta.

    The world point at distance t along a ray is
    ``x(t) = pose_base @ exp(delta) @ rel_pose @ (t * local_dir)``, and
    ``dx/d(delta) = A + t * B`` with A of shape (3, 6) shared by all rays and
    B of shape (n_rays, 3, 6).
    """
    delta = np.asarray(delta, dtype=float)
    rho, phi = delta[:3], delta[3:]
    r_exp = lie.so3_exp(phi)
    jr = lie.so3_right_jacobian(phi)
    v = lie.so3_left_jacobian(phi)
    r_be = pose_base.rotation @ r_exp
    a = np.empty((3, 6))
    a[:, :3] = pose_base.rotation @ v
    # d(R_exp y)/d(phi) = -R_exp [y]x J_r with y = rel.t + t * rel.R d
    a[:, 3:] = pose_base.rotation @ lie.left_jacobian_action_derivative(phi, rho)
    a[:, 3:] -= r_be @ lie.hat(rel_pose.translation) @ jr
    d_rel = local_dirs @ rel_pose.rotation.T
    b = np.zeros((len(local_dirs), 3, 6))
    # [d]x @ J_r column k is d x J_r[:, k]
    cross = np.cross(d_rel[:, None, :], jr.T[None, :, :])  # (n, k, 3)
    b[:, :, 3:] = -np.einsum("ij,nkj->nik", r_be, cross)
    return a, b


def render_with_pose_grad(
    field: RadianceField,
    camera: Camera,
    pose_base: Pose,
    delta: np.ndarray,
    pixels: np.ndarray,
    t: np.ndarray,
    dt: np.ndarray,
    rel_pose: Optional[Pose] = None,
) -> RenderOutput:
    """Render pixels at ``oplus(pose_base, delta) @ rel_pose`` with exact
    Jacobians of color and depth with respect to ``delta``.

    Sample distances ``t`` are held fixed while differentiating.
    """
    rel_pose = Pose.identity() if rel_pose is None else rel_pose
    t = np.atleast_2d(t)
    dt = np.broadcast_to(dt, t.shape)
    _check_sorted(t)
    n, s = t.shape
    world = lie.oplus(pose_base, delta) @ rel_pose
    local = local_directions(camera, pixels)
    origins = np.broadcast_to(world.translation, (n, 3))
    dirs = local @ world.rotation.T
    pts = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    sigma, color, idx, fs = _query_sparse(field, pts.reshape(-1, 3))
    rgb, depth, opacity, w, trans_before, trans_after = _composite(
        sigma.reshape(n, s), color.reshape(n, s, 3), t, dt, field.background
    )

    # Only samples with a nonzero spatial gradient move the render. They are
    # gathered in ray-major order and summed per ray, keeping the t^0 and t^1
    # parts of dx/d(delta) apart.
    g = fs.d_sigma_dx
    jc = fs.d_color_dx.reshape(-1, 9)
    keep = np.flatnonzero(np.any(g != 0.0, axis=1) | np.any(jc != 0.0, axis=1))
    active = idx[keep]
    m0 = np.zeros((n, 3, 3))
    m1 = np.zeros((n, 3, 3))
    n0 = np.zeros((n, 3))
    n1 = np.zeros((n, 3))
    if active.size:
        rays = active // s
        wf = w.reshape(-1)
        ta = t.reshape(-1)[active]
        dta = dt.reshape(-1)[active]
        ca = color[active]
        final = trans_after[:, -1]
        # light arriving from strictly behind sample i (including background)
        inclusive_c = np.cumsum(w[:, :, None] * color.reshape(n, s, 3), axis=1).reshape(-1, 3)
        behind_c = rgb[rays] - inclusive_c[active]
        inclusive_t = np.cumsum(w * t, axis=1).reshape(-1)
        behind_t = (w * t).sum(axis=1)[rays] - inclusive_t[active]
        ta_after = trans_after.reshape(-1)[active]

        dc_dsigma = dta[:, None] * (ta_after[:, None] * ca - behind_c)
        dnum_dsigma = dta * (ta_after * ta - behind_t)
        dop_dsigma = dta * final[rays]
        op = opacity[rays]
        dd_dsigma = np.where(
            op > DEPTH_EPS, (dnum_dsigma - depth[rays] * dop_dsigma) / np.maximum(op, DEPTH_EPS),
            dnum_dsigma / DEPTH_EPS,
        )

        ga = g[keep]
        pc = dc_dsigma[:, :, None] * ga[:, None, :] + wf[active][:, None, None] * jc[keep].reshape(-1, 3, 3)
        pd = dd_dsigma[:, None] * ga
        starts = np.flatnonzero(np.r_[True, rays[1:] != rays[:-1]])
        hit = rays[starts]
        m0[hit] = np.add.reduceat(pc, starts, axis=0)
        m1[hit] = np.add.reduceat(pc * ta[:, None, None], starts, axis=0)
        n0[hit] = np.add.reduceat(pd, starts, axis=0)
        n1[hit] = np.add.reduceat(pd * ta[:, None], starts, axis=0)

    a, b = pose_point_jacobians(pose_base, delta, rel_pose, local)
    d_color = m0 @ a + np.einsum("rck,rkj->rcj", m1, b)
    d_depth = n0 @ a + np.einsum("rk,rkj->rj", n1, b)
    return RenderOutput(rgb, depth, opacity, w, trans_before, d_color, d_depth)


def render_image(field: RadianceField, camera: Camera, pose: Pose, n_samples: int = 256,
                 chunk: int = 4096) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic midpoint-sampled render of the full image.

    Returns color (H, W, 3), depth (H, W) and opacity (H, W).
    """
    pixels = camera.all_pixels()
    rays = generate_rays(camera, pose, pixels)
    colors, depths, ops = [], [], []
    for start in range(0, len(pixels), chunk):
        sl = slice(start, start + chunk)
        t, dt = midpoint_samples(camera.near, camera.far, n_samples, len(pixels[sl]))
        out = render_rays(field, rays.origins[sl], rays.directions[sl], t, dt)
        colors.append(out.color)
        depths.append(out.depth)
        ops.append(out.opacity)
    shape = (camera.height, camera.width)
    return (np.concatenate(colors).reshape(*shape, 3), np.concatenate(depths).reshape(shape),
            np.concatenate(ops).reshape(shape))


def write_ppm(path: str | Path, color: np.ndarray) -> None:
    """8-bit binary PPM (P6)."""
    h, w, _ = color.shape
    data = np.clip(np.round(color * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def write_pgm16(path: str | Path, values: np.ndarray) -> None:
    """16-bit big-endian binary PGM (P5), values already in integer units."""
    h, w = values.shape
    data = np.clip(np.round(values), 0, 65535).astype(">u2")
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + data.tobytes())


def _read_netpbm(path: str | Path, magic: bytes):
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} image")
    w, h, maxval = (int(x) for x in tokens[1:])
    return raw[pos + 1 :], w, h, maxval


def read_ppm(path: str | Path) -> np.ndarray:
    body, w, h, maxval = _read_netpbm(path, b"P6")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    return np.frombuffer(body, dtype=dtype, count=w * h * 3).reshape(h, w, 3).astype(float) / maxval


def read_pgm16(path: str | Path) -> np.ndarray:
    body, w, h, maxval = _read_netpbm(path, b"P5")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    return np.frombuffer(body, dtype=dtype, count=w * h).reshape(h, w).astype(float)
