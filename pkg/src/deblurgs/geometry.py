"""Rigid camera poses, screw-axis exponential map and pinhole projection.

Poses are camera-to-world: ``x_world = R @ x_cam + t``.  Camera space
follows the OpenCV convention (x right, y down, z forward).  Everything
here works in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

SMALL_ANGLE = 1e-8
# Below this angle the derivative coefficients use their Taylor series;
# the closed forms lose digits to cancellation much earlier than the
# values themselves do.
SMALL_ANGLE_GRAD = 1e-2
NEAR_PLANE = 1e-4


class BehindCamera(ValueError):
    """Raised when a point does not lie in front of the near plane."""


def skew(w: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


_GENERATORS = np.array([skew(e) for e in np.eye(3)])


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def flat12(self) -> np.ndarray:
        """Top 3x4 block of the homogeneous matrix, row-major."""
        return self.matrix[:3].reshape(12)

    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        rt = self.rotation.T
        return rt, -rt @ self.translation

    def is_valid(self, tol: float = 1e-6) -> bool:
        r = self.rotation
        return (
            bool(np.all(np.isfinite(r)) and np.all(np.isfinite(self.translation)))
            and np.allclose(r.T @ r, np.eye(3), atol=tol)
            and abs(np.linalg.det(r) - 1.0) < tol
        )

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }


@dataclass(frozen=True)
class ScrewAxis:
    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=np.float64).reshape(3))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=np.float64).reshape(3))

    @classmethod
    def from_vector(cls, xi) -> "ScrewAxis":
        xi = np.asarray(xi, dtype=np.float64)
        return cls(xi[:3], xi[3:6])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])


def _coefficients(theta: float) -> tuple[float, float, float]:
    """A = sin/θ, B = (1-cos)/θ², C = (θ-sin)/θ³."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def _coefficient_slopes(theta: float) -> tuple[float, float, float]:
    """(1/θ) d/dθ of A, B and C."""
    t2 = theta * theta
    if theta < SMALL_ANGLE_GRAD:
        return (
            -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
            -1.0 / 60.0 + t2 / 1260.0 - t2 * t2 / 60480.0,
        )
    s, c = np.sin(theta), np.cos(theta)
    return (
        (theta * c - s) / theta**3,
        (theta * s - 2.0 * (1.0 - c)) / theta**4,
        (3.0 * s - 2.0 * theta - theta * c) / theta**5,
    )


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    a, b, _ = _coefficients(float(np.linalg.norm(omega)))
    k = skew(omega)
    return np.eye(3) + a * k + b * (k @ k)


def left_jacobian(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    _, b, c = _coefficients(float(np.linalg.norm(omega)))
    k = skew(omega)
    return np.eye(3) + b * k + c * (k @ k)


def screw_exp(axis: ScrewAxis) -> Pose:
    """SE(3) exponential: Rodrigues rotation, left Jacobian on ``v``."""
    k = skew(axis.omega)
    k2 = k @ k
    a, b, c = _coefficients(float(np.linalg.norm(axis.omega)))
    rot = np.eye(3) + a * k + b * k2
    jac = np.eye(3) + b * k + c * k2
    return Pose(rot, jac @ axis.v)


def screw_exp_backward(
    axis: ScrewAxis, grad_rotation: np.ndarray, grad_translation: np.ndarray
) -> np.ndarray:
    """Pull gradients on the output pose back to the 6-vector (omega, v)."""
    omega, v = axis.omega, axis.v
    theta = float(np.linalg.norm(omega))
    k = skew(omega)
    k2 = k @ k
    a, b, c = _coefficients(theta)
    da, db, dc = _coefficient_slopes(theta)
    jac = np.eye(3) + b * k + c * k2
    grad_jac = np.outer(grad_translation, v)

    g_omega = np.empty(3)
    for i in range(3):
        e = _GENERATORS[i]
        sym = e @ k + k @ e
        d_rot = da * omega[i] * k + a * e + db * omega[i] * k2 + b * sym
        d_jac = db * omega[i] * k + b * e + dc * omega[i] * k2 + c * sym
        g_omega[i] = np.sum(grad_rotation * d_rot) + np.sum(grad_jac * d_jac)
    return np.concatenate([g_omega, jac.T @ grad_translation])


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def pose_inverse(a: Pose) -> Pose:
    rt = a.rotation.T
    return Pose(rt, -rt @ a.translation)


def project(pose: Pose, intr: Intrinsics, x, near: float = NEAR_PLANE):
    """Pixel coordinates and camera-space depth of world point ``x``."""
    rt = pose.rotation.T
    X, Y, Z = rt @ (np.asarray(x, dtype=np.float64) - pose.translation)
    if Z <= near:
        raise BehindCamera(f"camera-space depth {Z:g} <= near plane {near:g}")
    return np.array([intr.fx * X / Z + intr.cx, intr.fy * Y / Z + intr.cy]), Z


def project_points(pose: Pose, intr: Intrinsics, points: np.ndarray):
    """Vectorized projection; no near-plane check.  Returns (pixels, depth)."""
    cam = (np.asarray(points, dtype=np.float64) - pose.translation) @ pose.rotation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = np.stack(
            [intr.fx * cam[:, 0] / z + intr.cx, intr.fy * cam[:, 1] / z + intr.cy],
            axis=1,
        )
    return px, z


def interpolate_pose(a: Pose, b: Pose, w: float) -> Pose:
    """Slerp on rotation, linear on translation; ``w`` in [0, 1]."""
    rots = Rotation.from_matrix(np.stack([a.rotation, b.rotation]))
    rot = Slerp([0.0, 1.0], rots)([w]).as_matrix()[0]
    return Pose(rot, (1.0 - w) * a.translation + w * b.translation)


def rotation_about(axis: str, angle: float) -> np.ndarray:
    return Rotation.from_euler(axis, angle).as_matrix()
