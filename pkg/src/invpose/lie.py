"""SE(3) poses and their se(3) tangent vectors.

Tangents are plain float arrays of shape (6,) laid out as ``[rho, phi]``:
``rho`` is the translational part (meters) and ``phi`` the rotation vector
(radians). Updates use the right (local-frame) convention,
``oplus(T, v) = T @ exp(v)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

# Below these angles the closed forms lose digits to cancellation and the
# truncated series are exact to double precision.
_SERIES_ANGLE = 1e-2
_LOG_PI_MARGIN = 1e-6
_ORTHO_TOL = 1e-9
_I3 = np.eye(3)
_I3.flags.writeable = False


def hat(v: np.ndarray) -> np.ndarray:
    """3-vector -> skew-symmetric matrix."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _coefficients(theta: float) -> tuple[float, float, float]:
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3."""
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        return (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0 - t2**3 / 5040.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0 - t2**3 / 40320.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2**3 / 362880.0,
        )
    s, c = math.sin(theta), math.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def _coefficient_slopes(theta: float) -> tuple[float, float]:
    """Derivatives of the 2nd and 3rd coefficients above, divided by theta."""
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        return (
            -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
            -1.0 / 60.0 + t2 / 1260.0 - t2 * t2 / 60480.0,
        )
    s, c = math.sin(theta), math.cos(theta)
    da = (theta * s - 2.0 * (1.0 - c)) / theta**4
    db = (3.0 * s - 2.0 * theta - theta * c) / theta**5
    return da, db


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula."""
    theta = float(np.linalg.norm(phi))
    sa, a, _ = _coefficients(theta)
    k = hat(phi)
    return _I3 + sa * k + a * (k @ k)


def so3_log(rotation: np.ndarray) -> np.ndarray:
    w = 0.5 * vee(rotation - rotation.T)
    s = float(np.linalg.norm(w))
    c = 0.5 * (float(np.trace(rotation)) - 1.0)
    theta = math.atan2(s, c)
    if theta > math.pi - _LOG_PI_MARGIN:
        raise ValueError("log branch singularity")
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        return w * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0 + 31.0 * t2**3 / 15120.0)
    return w * (theta / s)


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    """Left Jacobian of SO(3); also the translation coupling matrix of exp."""
    _, a, b = _coefficients(float(np.linalg.norm(phi)))
    k = hat(phi)
    return _I3 + a * k + b * (k @ k)


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    _, a, b = _coefficients(float(np.linalg.norm(phi)))
    k = hat(phi)
    return _I3 - a * k + b * (k @ k)


def so3_left_jacobian_inverse(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        c = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / theta**2
    k = hat(phi)
    return _I3 - 0.5 * k + c * (k @ k)


def left_jacobian_action_derivative(phi: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """d(J_l(phi) @ rho)/d(phi) as a 3x3 matrix."""
    theta = float(np.linalg.norm(phi))
    _, a, b = _coefficients(theta)
    da, db = _coefficient_slopes(theta)
    cross = np.cross(phi, rho)
    double = np.cross(phi, cross)
    d_double = float(phi @ rho) * _I3 + np.outer(phi, rho) - 2.0 * np.outer(rho, phi)
    return da * np.outer(cross, phi) - a * hat(rho) + db * np.outer(double, phi) + b * d_double


def _orthonormalize(rotation: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def orthonormality_defect(rotation: np.ndarray) -> float:
    return float(np.max(np.abs(rotation.T @ rotation - _I3)))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform mapping local coordinates into the parent frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Pose:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: Pose) -> Pose:
        r = self.rotation @ other.rotation
        if orthonormality_defect(r) > _ORTHO_TOL:
            r = _orthonormalize(r)
        return Pose(r, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: Pose) -> Pose:
        return self.compose(other)

    def inverse(self) -> Pose:
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def allclose(self, other: Pose, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0.0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0.0, atol=atol)
        )

    def to_dict(self) -> dict[str, list[float]]:
        return {
            "rotation": [float(x) for x in self.rotation.reshape(-1)],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Pose:
        rot = data["rotation"]
        trans = data["translation"]
        if len(rot) != 9 or len(trans) != 3:
            raise ValueError("pose needs 9 rotation and 3 translation numbers")
        return cls(np.array(rot, dtype=float).reshape(3, 3), np.array(trans, dtype=float))

    def __repr__(self) -> str:
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def tangent(rho: Sequence[float] = (0.0, 0.0, 0.0), phi: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    return np.concatenate([np.asarray(rho, dtype=float), np.asarray(phi, dtype=float)])


def exp(v: np.ndarray) -> Pose:
    v = np.asarray(v, dtype=float).reshape(6)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite tangent")
    rho, phi = v[:3], v[3:]
    # so3_exp and so3_left_jacobian share the coefficients and hat(phi)
    sa, a, b = _coefficients(math.sqrt(float(phi @ phi)))
    k = hat(phi)
    kk = k @ k
    return Pose(_I3 + sa * k + a * kk, (_I3 + a * k + b * kk) @ rho)


def log(pose: Pose) -> np.ndarray:
    phi = so3_log(pose.rotation)
    rho = so3_left_jacobian_inverse(phi) @ pose.translation
    return np.concatenate([rho, phi])


def oplus(pose: Pose, v: np.ndarray) -> Pose:
    return pose.compose(exp(v))


def perturb(pose: Pose, v: np.ndarray) -> Pose:
    """Apply a perturbation to the rotation and translation separately.

    Unlike ``oplus`` the translation offset is not coupled to the rotation,
    so the translational error of the result is exactly ``norm(v[:3])``.
    """
    v = np.asarray(v, dtype=float).reshape(6)
    return Pose(pose.rotation @ so3_exp(v[3:]), pose.translation + pose.rotation @ v[:3])


def rotation_angle(rotation: np.ndarray) -> float:
    s = float(np.linalg.norm(0.5 * vee(rotation - rotation.T)))
    c = 0.5 * (float(np.trace(rotation)) - 1.0)
    return math.atan2(s, c)


def pose_errors(estimate: Pose, ground_truth: Pose) -> tuple[float, float]:
    """Translational error in meters and geodesic rotation error in radians."""
    trans = float(np.linalg.norm(estimate.translation - ground_truth.translation))
    rot = rotation_angle(ground_truth.rotation.T @ estimate.rotation)
    return trans, rot


def _unit_vector(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.standard_normal(3)
        n = float(np.linalg.norm(v))
        if n > 1e-12:
            return v / n


def sample_perturbation(trans_len: float, rot_len: float, rng_seed: int) -> np.ndarray:
    """Tangent with uniformly random directions and the requested lengths."""
    if trans_len < 0 or rot_len < 0:
        raise ValueError("perturbation lengths must be nonnegative")
    rng = np.random.default_rng(rng_seed)
    rho = _unit_vector(rng) * trans_len
    phi = _unit_vector(rng) * rot_len
    return np.concatenate([rho, phi])
