"""CPU Gaussian splatting with analytic gradients.

Forward: project every Gaussian to a 2D splat (EWA with the pinhole
Jacobian), sort by camera depth and alpha-blend front to back.  The
backward pass returns gradients for every Gaussian attribute and for the
camera-to-world pose.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import NEAR_PLANE, Intrinsics, Pose
from .scene import GaussianArrays, SceneModel, quat_to_rotmat, quat_to_rotmat_backward, sigmoid

COV2D_BLUR = 0.3
MIN_ALPHA = 1.0 / 255.0
MIN_TRANSMITTANCE = 1e-4

# feature channels blended per pixel
_RGB = slice(0, 3)
_DEPTH = 3
_DYN = 4
_ONE = 5  # constant 1, so its blend is the accumulated alpha
_N_FEATS = 6


@dataclass
class Splat2D:
    pixel_mean: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    source_index: int


@dataclass
class RenderedImage:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    dynamic_alpha: np.ndarray

    @classmethod
    def mean(cls, images: list["RenderedImage"]) -> "RenderedImage":
        n = len(images)
        return cls(*(sum(getattr(im, f) for im in images) / n
                     for f in ("color", "depth", "alpha", "dynamic_alpha")))

    @property
    def expected_depth(self) -> np.ndarray:
        return normalized_depth(self.depth, self.alpha)


def normalized_depth(depth: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Blended depth divided by accumulated alpha (0 where nothing was hit)."""
    return np.where(alpha > 0.0, depth / np.where(alpha > 0.0, alpha, 1.0), 0.0)


@dataclass
class PoseGrad:
    rotation: np.ndarray
    translation: np.ndarray


class _Projection:
    """Vectorized projection of all Gaussians with everything backward needs."""

    def __init__(self, g: GaussianArrays, pose: Pose, intr: Intrinsics, near: float):
        self.g, self.pose, self.intr = g, pose, intr
        n = len(g)
        self.W = pose.rotation.T
        self.rel = g.means - pose.translation
        self.pc = self.rel @ pose.rotation  # rows are W @ (mu - t)
        X, Y, Z = self.pc.T
        self.visible = Z > near
        Zs = np.where(self.visible, Z, 1.0)
        self.Zs = Zs
        fx, fy = intr.fx, intr.fy
        self.J = np.zeros((n, 2, 3))
        self.J[:, 0, 0] = fx / Zs
        self.J[:, 0, 2] = -fx * X / Zs**2
        self.J[:, 1, 1] = fy / Zs
        self.J[:, 1, 2] = -fy * Y / Zs**2
        self.rq = quat_to_rotmat(g.quats) if n else np.zeros((0, 3, 3))
        self.scale = np.exp(g.log_scales)
        self.M = self.rq * self.scale[:, None, :]
        self.sigma = self.M @ np.transpose(self.M, (0, 2, 1))
        self.sigma_c = self.W @ self.sigma @ self.W.T
        cov = self.J @ self.sigma_c @ np.transpose(self.J, (0, 2, 1))
        cov[:, 0, 0] += COV2D_BLUR
        cov[:, 1, 1] += COV2D_BLUR
        self.cov2d = cov
        det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
        self.conic = np.stack([cov[:, 1, 1], -cov[:, 0, 1], cov[:, 0, 0]], axis=1) / det[:, None]
        self.mean2d = np.stack([fx * X / Zs + intr.cx, fy * Y / Zs + intr.cy], axis=1)
        self.opacity = sigmoid(g.logit_opacities)
        self.depth = Z

        # Box that holds every pixel whose alpha can reach MIN_ALPHA.
        mid = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
        lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
        reach = 2.0 * np.log(np.maximum(self.opacity / MIN_ALPHA, 1.0))
        radius = np.sqrt(reach * lam)
        mx, my = self.mean2d.T
        rect = np.stack([
            np.ceil(mx - radius), np.floor(mx + radius),
            np.ceil(my - radius), np.floor(my + radius),
        ], axis=1)
        rect[:, 0:2] = np.clip(rect[:, 0:2], -1, intr.width)
        rect[:, 2:4] = np.clip(rect[:, 2:4], -1, intr.height)
        rect = np.nan_to_num(rect, nan=-1.0)
        rect[:, 0] = np.maximum(rect[:, 0], 0)
        rect[:, 1] = np.minimum(rect[:, 1], intr.width - 1)
        rect[:, 2] = np.maximum(rect[:, 2], 0)
        rect[:, 3] = np.minimum(rect[:, 3], intr.height - 1)
        self.rect = rect.astype(np.int64)
        on_image = (self.rect[:, 0] <= self.rect[:, 1]) & (self.rect[:, 2] <= self.rect[:, 3])
        finite = np.isfinite(self.mean2d).all(axis=1) & np.isfinite(self.conic).all(axis=1)
        self.kept = self.visible & on_image & finite & (self.opacity > MIN_ALPHA)

    def backward(self, g_mean2d, g_conic, g_opac, g_depth, g_color):
        g, n = self.g, len(self.g)
        fx, fy = self.intr.fx, self.intr.fy
        X, Y, _ = self.pc.T
        Z = self.Zs
        keep = self.kept.astype(np.float64)
        g_mean2d = g_mean2d * keep[:, None]
        g_conic = g_conic * keep[:, None]
        g_depth = g_depth * keep

        # conic = cov^-1
        a, b, c = g_conic.T
        gq = np.empty((n, 2, 2))
        gq[:, 0, 0], gq[:, 0, 1], gq[:, 1, 0], gq[:, 1, 1] = a, 0.5 * b, 0.5 * b, c
        Q = np.empty((n, 2, 2))
        Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = (
            self.conic[:, 0], self.conic[:, 1], self.conic[:, 1], self.conic[:, 2])
        g_cov = -Q @ gq @ Q

        Jt = np.transpose(self.J, (0, 2, 1))
        g_sigma_c = Jt @ g_cov @ self.J
        g_J = 2.0 * g_cov @ self.J @ self.sigma_c
        g_sigma = self.W.T @ g_sigma_c @ self.W
        g_W = 2.0 * np.einsum("nij,jk,nkl->il", g_sigma_c, self.W, self.sigma)
        g_M = 2.0 * g_sigma @ self.M
        g_rq = g_M * self.scale[:, None, :]
        g_scale = np.sum(g_M * self.rq, axis=1)
        g_quat = quat_to_rotmat_backward(g.quats, g_rq) if n else np.zeros((0, 4))

        gu, gv = g_mean2d.T
        gX = gu * fx / Z + g_J[:, 0, 2] * (-fx / Z**2)
        gY = gv * fy / Z + g_J[:, 1, 2] * (-fy / Z**2)
        gZ = (g_depth
              - gu * fx * X / Z**2 - gv * fy * Y / Z**2
              - g_J[:, 0, 0] * fx / Z**2 - g_J[:, 1, 1] * fy / Z**2
              + g_J[:, 0, 2] * 2 * fx * X / Z**3 + g_J[:, 1, 2] * 2 * fy * Y / Z**3)
        g_pc = np.stack([gX, gY, gZ], axis=1)
        g_means = g_pc @ self.W
        g_W = g_W + g_pc.T @ self.rel

        op = self.opacity
        grads = GaussianArrays(
            means=g_means,
            quats=g_quat,
            log_scales=g_scale * self.scale,
            logit_opacities=g_opac * op * (1.0 - op),
            colors=g_color,
        )
        return grads, PoseGrad(rotation=g_W.T, translation=-g_means.sum(axis=0))


class Rasterization:
    """One forward render; call ``backward`` with adjoints of its outputs."""

    def __init__(self, g: GaussianArrays, pose: Pose, intr: Intrinsics,
                 near: float = NEAR_PLANE, min_alpha: float = MIN_ALPHA):
        self.proj = p = _Projection(g, pose, intr, near)
        n = len(g)
        idx = np.flatnonzero(p.kept)
        self.order = idx[np.argsort(p.depth[idx], kind="stable")].astype(np.int64)
        self.feats = np.zeros((n, _N_FEATS))
        self.feats[:, _ONE] = 1.0
        self.feats[:, _RGB] = g.colors
        self.feats[:, _DEPTH] = p.depth
        if g.dynamic is not None:
            self.feats[:, _DYN] = g.dynamic
        r = p.rect[self.order]
        areas = (r[:, 1] - r[:, 0] + 1) * (r[:, 3] - r[:, 2] + 1)
        self.offsets = np.concatenate([[0], np.cumsum(areas)]).astype(np.int64)
        img, alpha, self._t, self._a = _kernels.blend_forward(
            self.order, p.mean2d, p.conic, p.opacity, self.feats, p.rect, self.offsets,
            intr.height, intr.width, min_alpha, MIN_TRANSMITTANCE)
        self.image = RenderedImage(
            color=img[..., _RGB], depth=img[..., _DEPTH], alpha=alpha,
            dynamic_alpha=img[..., _DYN])

    def backward(self, grad_color: np.ndarray | None = None,
                 grad_depth: np.ndarray | None = None,
                 grad_alpha: np.ndarray | None = None) -> tuple[GaussianArrays, PoseGrad]:
        p = self.proj
        h, w = p.intr.height, p.intr.width
        g_img = np.zeros((h, w, _N_FEATS))
        if grad_color is not None:
            g_img[..., _RGB] = grad_color
        if grad_depth is not None:
            g_img[..., _DEPTH] = grad_depth
        if grad_alpha is not None:
            g_img[..., _ONE] = grad_alpha
        g_mean, g_conic, g_opac, g_feat = _kernels.blend_backward(
            self.order, p.mean2d, p.conic, p.opacity, self.feats, p.rect, self.offsets,
            self._t, self._a, g_img)
        return p.backward(g_mean, g_conic, g_opac, g_feat[:, _DEPTH], g_feat[:, _RGB])


def rasterize(g: GaussianArrays, pose: Pose, intr: Intrinsics, **kw) -> Rasterization:
    return Rasterization(g, pose, intr, **kw)


def project_gaussian(g, pose: Pose, intr: Intrinsics, near: float = NEAR_PLANE,
                     index: int = 0) -> Splat2D | None:
    """Project a single Gaussian; ``None`` when culled."""
    arr = GaussianArrays.from_gaussians([g]) if not isinstance(g, GaussianArrays) else g
    p = _Projection(arr, pose, intr, near)
    if not p.kept[0]:
        return None
    return Splat2D(p.mean2d[0], p.cov2d[0], float(p.depth[0]), arr.colors[0].copy(),
                   float(p.opacity[0]), index)


def render(scene: SceneModel, pose: Pose, t: float) -> RenderedImage:
    return rasterize(scene.arrays_at_time(t), pose, scene.intrinsics).image


def render_with_grads(scene: SceneModel, pose: Pose, t: float, loss_adjoint: np.ndarray,
                      depth_adjoint: np.ndarray | None = None) -> PoseGrad:
    """Render, backpropagate ``loss_adjoint`` (dL/dcolor) into ``scene.store.grads``.

    Returns the gradient on the camera pose.
    """
    r = rasterize(scene.arrays_at_time(t), pose, scene.intrinsics)
    grads, pose_grad = r.backward(loss_adjoint, depth_adjoint)
    scene.accumulate_grads(t, grads)
    return pose_grad
