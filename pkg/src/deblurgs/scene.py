"""Static and dynamic 3D Gaussians and spline deformation of dynamic means."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .geometry import Intrinsics
from .grad import ParamStore


class Kind(str, Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


class MissingControlPoints(ValueError):
    pass


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# --- quaternions (w, x, y, z) --------------------------------------------

def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for an ``(n, 4)`` or ``(4,)`` array; normalizes first."""
    q = np.asarray(q, dtype=np.float64)
    qn = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(qn, -1, 0)
    r = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return r.reshape(q.shape[:-1] + (3, 3))


def quat_to_rotmat_backward(q: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the unnormalized quaternion ``q`` of shape (n, 4)."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn.T
    g = grad_r.reshape(-1, 9).T
    gw = 2 * (-z * g[1] + y * g[2] + z * g[3] - x * g[5] - y * g[6] + x * g[7])
    gx = 2 * (y * g[1] + z * g[2] + y * g[3] - 2 * x * g[4] - w * g[5]
              + z * g[6] + w * g[7] - 2 * x * g[8])
    gy = 2 * (-2 * y * g[0] + x * g[1] + w * g[2] + x * g[3] + z * g[5]
              - w * g[6] + z * g[7] - 2 * y * g[8])
    gz = 2 * (-2 * z * g[0] - w * g[1] + x * g[2] + w * g[3] - 2 * z * g[4]
              + y * g[5] + x * g[6] + y * g[7])
    gn = np.stack([gw, gx, gy, gz], axis=-1)
    return (gn - qn * np.sum(gn * qn, axis=-1, keepdims=True)) / norm


# --- Hermite spline ------------------------------------------------------

def tangent_matrix(n_ctrl: int) -> np.ndarray:
    """Linear map from control points to tangents.

    Central differences inside, one-sided differences at both ends.
    """
    t = np.zeros((n_ctrl, n_ctrl))
    t[0, 0], t[0, 1] = -1.0, 1.0
    t[-1, -2], t[-1, -1] = -1.0, 1.0
    for j in range(1, n_ctrl - 1):
        t[j, j - 1], t[j, j + 1] = -0.5, 0.5
    return t


def spline_weights(t: float, n_frames: int, n_ctrl: int) -> tuple[np.ndarray, np.ndarray]:
    """Weights ``w`` with ``S(t, P) = w @ P`` and their derivative in ``t``.

    ``t`` is frame time, clamped to ``[0, n_frames - 1]``; the derivative
    is zero outside that interval.
    """
    if n_ctrl < 4:
        raise ValueError("need at least 4 control points")
    t_max = n_frames - 1
    inside = 0.0 <= t <= t_max
    tc = min(max(float(t), 0.0), float(t_max))
    ts = tc / t_max * (n_ctrl - 1)
    i = min(int(np.floor(ts)), n_ctrl - 2)
    r = ts - i
    r2, r3 = r * r, r * r * r
    h = (2 * r3 - 3 * r2 + 1, r3 - 2 * r2 + r, -2 * r3 + 3 * r2, r3 - r2)
    dh = (6 * r2 - 6 * r, 3 * r2 - 4 * r + 1, -6 * r2 + 6 * r, 3 * r2 - 2 * r)
    tan = tangent_matrix(n_ctrl)
    w = h[1] * tan[i] + h[3] * tan[i + 1]
    w[i] += h[0]
    w[i + 1] += h[2]
    dw = dh[1] * tan[i] + dh[3] * tan[i + 1]
    dw[i] += dh[0]
    dw[i + 1] += dh[2]
    dw *= (n_ctrl - 1) / t_max if inside else 0.0
    return w, dw


@dataclass(frozen=True)
class ControlPoints:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 4:
            raise ValueError("control points must be an (N_c >= 4, 3) array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("control points must be finite")
        object.__setattr__(self, "points", pts)


def spline_eval(ctrl: ControlPoints, t: float, n_frames: int) -> np.ndarray:
    w, _ = spline_weights(t, n_frames, len(ctrl.points))
    return w @ ctrl.points


# --- Gaussians -----------------------------------------------------------

@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray
    rot_quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    log_scale: np.ndarray = field(default_factory=lambda: np.zeros(3))
    logit_opacity: float = 0.0
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    kind: Kind = Kind.STATIC

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.logit_opacity))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)


def covariance_3d(g: Gaussian) -> np.ndarray:
    """Σ = R S Sᵀ Rᵀ."""
    m = quat_to_rotmat(g.rot_quat) * np.exp(g.log_scale)[None, :]
    return m @ m.T


def gaussian_at_time(g: Gaussian, ctrl: ControlPoints | None, t: float,
                     n_frames: int) -> Gaussian:
    if g.kind is Kind.STATIC:
        return g
    if ctrl is None:
        raise MissingControlPoints("dynamic Gaussian without control points")
    return replace(g, mean=spline_eval(ctrl, t, n_frames))


@dataclass
class GaussianArrays:
    """Struct-of-arrays view of Gaussians at one instant, as the rasterizer wants them."""

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    logit_opacities: np.ndarray
    colors: np.ndarray
    dynamic: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.means)

    @classmethod
    def empty(cls) -> "GaussianArrays":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                   np.zeros(0), np.zeros((0, 3)), np.zeros(0, bool))

    @classmethod
    def from_gaussians(cls, gs: list[Gaussian]) -> "GaussianArrays":
        if not gs:
            return cls.empty()
        return cls(
            np.array([g.mean for g in gs], dtype=np.float64),
            np.array([g.rot_quat for g in gs], dtype=np.float64),
            np.array([g.log_scale for g in gs], dtype=np.float64),
            np.array([g.logit_opacity for g in gs], dtype=np.float64),
            np.array([g.color for g in gs], dtype=np.float64),
            np.array([g.kind is Kind.DYNAMIC for g in gs]),
        )

    @staticmethod
    def concat(parts: list["GaussianArrays"]) -> "GaussianArrays":
        dyn = [p.dynamic if p.dynamic is not None else np.zeros(len(p), bool) for p in parts]
        return GaussianArrays(
            np.concatenate([p.means for p in parts]),
            np.concatenate([p.quats for p in parts]),
            np.concatenate([p.log_scales for p in parts]),
            np.concatenate([p.logit_opacities for p in parts]),
            np.concatenate([p.colors for p in parts]),
            np.concatenate(dyn),
        )

    def subset(self, idx) -> "GaussianArrays":
        return GaussianArrays(
            self.means[idx], self.quats[idx], self.log_scales[idx],
            self.logit_opacities[idx], self.colors[idx],
            None if self.dynamic is None else self.dynamic[idx],
        )


_FIELDS = ("quats", "log_scales", "logit_opacities", "colors")


class SceneModel:
    """Static and dynamic Gaussians whose attributes live in a ParamStore.

    Slots: ``static.{means,quats,log_scales,logit_opacities,colors}`` and
    ``dynamic.{ctrl,quats,log_scales,logit_opacities,colors}``, with
    ``dynamic.ctrl`` shaped ``(n_dynamic, n_ctrl, 3)``.
    """

    def __init__(self, store: ParamStore, intrinsics: Intrinsics, n_frames: int):
        self.store = store
        self.intrinsics = intrinsics
        self.n_frames = int(n_frames)
        if self.n_frames < 3:
            raise ValueError("need at least 3 frames")
        if self.n_static < 1:
            raise ValueError("need at least one static Gaussian")

    @classmethod
    def create(cls, store: ParamStore, intrinsics: Intrinsics, n_frames: int,
               static: GaussianArrays, dynamic: GaussianArrays, ctrl: np.ndarray) -> "SceneModel":
        store.add("static.means", static.means)
        for f in _FIELDS:
            store.add(f"static.{f}", getattr(static, f))
        store.add("dynamic.ctrl", np.asarray(ctrl, dtype=np.float64).reshape(len(dynamic), -1, 3))
        for f in _FIELDS:
            store.add(f"dynamic.{f}", getattr(dynamic, f))
        return cls(store, intrinsics, n_frames)

    @property
    def n_static(self) -> int:
        return self.store.shape("static.means")[0]

    @property
    def n_dynamic(self) -> int:
        return self.store.shape("dynamic.ctrl")[0]

    @property
    def n_ctrl(self) -> int:
        return self.store.shape("dynamic.ctrl")[1]

    def static_means(self) -> np.ndarray:
        return self.store.view("static.means")

    def dynamic_means(self, t: float) -> np.ndarray:
        w, _ = spline_weights(t, self.n_frames, self.n_ctrl)
        return np.einsum("j,njk->nk", w, self.store.view("dynamic.ctrl"))

    def arrays_at_time(self, t: float) -> GaussianArrays:
        s, v = self.store.view, "dynamic."
        return GaussianArrays(
            np.concatenate([s("static.means"), self.dynamic_means(t)]),
            *(np.concatenate([s(f"static.{f}"), s(v + f)]) for f in _FIELDS),
            dynamic=np.r_[np.zeros(self.n_static, bool), np.ones(self.n_dynamic, bool)],
        )

    def accumulate_grads(self, t: float, grads: GaussianArrays, grad_t: list | None = None) -> None:
        """Add gradients taken w.r.t. ``arrays_at_time(t)`` into the store.

        When ``grad_t`` is a list, dL/dt through the spline is appended to it.
        """
        ns = self.n_static
        g = self.store.grad
        g("static.means")[:] += grads.means[:ns]
        w, dw = spline_weights(t, self.n_frames, self.n_ctrl)
        g("dynamic.ctrl")[:] += w[None, :, None] * grads.means[ns:, None, :]
        for f in _FIELDS:
            arr = getattr(grads, f)
            g(f"static.{f}")[:] += arr[:ns]
            g(f"dynamic.{f}")[:] += arr[ns:]
        if grad_t is not None:
            vel = np.einsum("j,njk->nk", dw, self.store.view("dynamic.ctrl"))
            grad_t.append(float(np.sum(vel * grads.means[ns:])))

    def static_gaussians(self) -> list[Gaussian]:
        s = self.store.view
        return [
            Gaussian(s("static.means")[i].copy(), s("static.quats")[i].copy(),
                     s("static.log_scales")[i].copy(), float(s("static.logit_opacities")[i]),
                     s("static.colors")[i].copy(), Kind.STATIC)
            for i in range(self.n_static)
        ]

    def dynamic_gaussians(self, t: float = 0.0) -> list[tuple[Gaussian, ControlPoints]]:
        s = self.store.view
        means = self.dynamic_means(t)
        return [
            (Gaussian(means[i], s("dynamic.quats")[i].copy(), s("dynamic.log_scales")[i].copy(),
                      float(s("dynamic.logit_opacities")[i]), s("dynamic.colors")[i].copy(),
                      Kind.DYNAMIC),
             ControlPoints(s("dynamic.ctrl")[i].copy()))
            for i in range(self.n_dynamic)
        ]

    def project_constraints(self) -> None:
        """Renormalize quaternions and clip colors to [0, 1] after an update."""
        for part in ("static", "dynamic"):
            q = self.store.view(f"{part}.quats")
            q /= np.linalg.norm(q, axis=1, keepdims=True)
            np.clip(self.store.view(f"{part}.colors"), 0.0, 1.0,
                    out=self.store.view(f"{part}.colors"))
