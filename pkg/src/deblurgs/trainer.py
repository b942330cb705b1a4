"""Per-scene optimization: latent cameras -> exposure -> blurry render -> L1 losses -> Adam."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .blce import BlceConfig, BlurScore, LatentCameraNet, LatentMode, blur_score
from .blursynth import (BlurRenderResult, Dataset, blurry_backward, pose_from_rows,
                        pose_rows, render_blurry)
from .geometry import Intrinsics, Pose
from .grad import Adam, ParamStore, ShapeMismatch
from .lcee import NoUsableStatics, estimate_exposure, latent_timestamps
from .rasterizer import RenderedImage, rasterize
from .scene import GaussianArrays, SceneModel, logit


class EmptyMask(ValueError):
    pass


class Divergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n_iters: int = 10000
    lcee_start: int = 2000
    n_latent: int = 9
    s: int = 20
    lambda_rgb: float = 1.0
    lambda_depth: float = 0.2
    n_ctrl: int = 12
    lr_network: float = 1e-3
    lr_means: float = 1.6e-4
    lr_quats: float = 1e-3
    lr_scales: float = 5e-3
    lr_opacity: float = 5e-2
    lr_colors: float = 2.5e-3
    lr_exposure: float = 1e-2
    lr_spline_axes: float = 1e-3
    seed: int = 0
    fixed_exposure: Optional[float] = None
    learnable_exposure: bool = False
    latent_mode: str = "blur_adaptive"
    init_stride: int = 3
    init_opacity: float = 0.7
    max_dynamic: int = 64
    epsilon: float = 1e-6
    max_exposure: float = 10.0

    def __post_init__(self):
        if self.n_iters < 0 or self.n_latent < 1 or self.n_ctrl < 4 or self.s < 1:
            raise ValueError("counts must be positive (n_ctrl >= 4)")
        if self.lambda_rgb < 0 or self.lambda_depth < 0:
            raise ValueError("loss weights must be non-negative")
        if self.fixed_exposure is not None and self.learnable_exposure:
            raise ValueError("fixed_exposure and learnable_exposure are mutually exclusive")
        LatentMode(self.latent_mode)

    @property
    def exposure_mode(self) -> str:
        if self.fixed_exposure is not None:
            return "fixed"
        return "learnable" if self.learnable_exposure else "lcee"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key = value")
            key, value = (p.strip() for p in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            kw[key] = _parse_value(value, types[key])
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in asdict(self).items())


def _parse_value(value: str, typ: str):
    low = value.lower()
    if "bool" in typ:
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {value!r}")
        return low in ("true", "1", "yes")
    if low in ("none", ""):
        if "Optional" in typ:
            return None
        raise ValueError("value required")
    if "int" in typ:
        return int(value)
    if "float" in typ:
        return float(value)
    return value


@dataclass
class LossReport:
    l_rgb: float
    l_depth: float
    total: float
    frame: int = 0
    beta: float = float("nan")
    t_hat: float = 0.0


# --- losses --------------------------------------------------------------

def loss_rgb(rendered: np.ndarray, observed: np.ndarray, with_grad: bool = False):
    """Mean absolute difference over all pixels and channels."""
    if rendered.shape != observed.shape:
        raise ShapeMismatch(f"{rendered.shape} vs {observed.shape}")
    diff = rendered - observed
    value = float(np.mean(np.abs(diff)))
    if not with_grad:
        return value
    return value, np.sign(diff) / diff.size


def loss_depth(rendered: np.ndarray, gt: np.ndarray, valid: np.ndarray, with_grad: bool = False):
    """Mean absolute depth error over ``valid`` pixels with finite ground truth."""
    if rendered.shape != gt.shape or valid.shape != gt.shape:
        raise ShapeMismatch(f"{rendered.shape} vs {gt.shape} vs {valid.shape}")
    mask = valid & np.isfinite(gt)
    count = int(mask.sum())
    if count == 0:
        raise EmptyMask("no valid depth pixels")
    diff = np.where(mask, rendered - np.where(mask, gt, 0.0), 0.0)
    value = float(np.abs(diff).sum() / count)
    if not with_grad:
        return value
    return value, np.sign(diff) / count


# --- initialization from a dataset ---------------------------------------

def _backproject(depth: np.ndarray, pose: Pose, intr: Intrinsics, ys, xs) -> np.ndarray:
    d = depth[ys, xs]
    cam = np.stack([(xs - intr.cx) / intr.fx * d, (ys - intr.cy) / intr.fy * d, d], axis=1)
    return cam @ pose.rotation.T + pose.translation


def _inside_any(points: np.ndarray, poses: list[Pose], intr: Intrinsics) -> np.ndarray:
    hit = np.zeros(len(points), bool)
    for p in poses:
        cam = (points - p.translation) @ p.rotation
        z = cam[:, 2]
        u = intr.fx * cam[:, 0] / z + intr.cx
        v = intr.fy * cam[:, 1] / z + intr.cy
        hit |= (z > 0) & (u >= -0.5) & (u <= intr.width - 0.5) & (v >= -0.5) & (v <= intr.height - 0.5)
    return hit


def initial_gaussians(ds: Dataset, cfg: TrainConfig):
    """Static Gaussians back-projected from ground-truth depth on a pixel grid
    (each frame only adds points no earlier frame sees), dynamic Gaussians from
    the mask of the frame where the object is largest, with control points
    following the back-projected mask centroid over time.
    """
    intr = ds.intrinsics
    rng = np.random.default_rng(cfg.seed)
    stride = cfg.init_stride
    pts, cols, depths, used = [], [], [], []
    for t in range(0, ds.n_frames, 2):
        ys, xs = np.mgrid[(t // 2) % stride:intr.height:stride, (t // 2) % stride:intr.width:stride]
        ys, xs = ys.ravel(), xs.ravel()
        keep = ~ds.masks[t][ys, xs] & (ds.depth[t][ys, xs] > 0)
        ys, xs = ys[keep], xs[keep]
        p = _backproject(ds.depth[t], ds.poses[t], intr, ys, xs)
        new = ~_inside_any(p, used, intr) if used else np.ones(len(p), bool)
        pts.append(p[new])
        cols.append(ds.blurry[t][ys[new], xs[new]])
        depths.append(ds.depth[t][ys[new], xs[new]])
        used.append(ds.poses[t])
    means = np.vstack(pts)
    n = len(means)
    sigma = 0.5 * stride * np.concatenate(depths) / intr.fx
    static = GaussianArrays(
        means, np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.log(sigma)[:, None] * np.ones((1, 3)), np.full(n, logit(cfg.init_opacity)),
        np.clip(np.vstack(cols), 0.0, 1.0))

    centroids = np.full((ds.n_frames, 3), np.nan)
    for t in range(ds.n_frames):
        ys, xs = np.nonzero(ds.masks[t])
        if len(ys):
            centroids[t] = _backproject(ds.depth[t], ds.poses[t], intr, ys, xs).mean(axis=0)
    seen = np.flatnonzero(~np.isnan(centroids[:, 0]))
    if len(seen) == 0:
        return static, GaussianArrays.empty(), np.zeros((0, cfg.n_ctrl, 3))
    frames = np.arange(ds.n_frames)
    for k in range(3):
        centroids[:, k] = np.interp(frames, seen, centroids[seen, k])
    best = int(max(seen, key=lambda t: ds.masks[t].sum()))
    ys, xs = np.nonzero(ds.masks[best])
    if len(ys) > cfg.max_dynamic:
        pick = np.sort(rng.choice(len(ys), cfg.max_dynamic, replace=False))
        ys, xs = ys[pick], xs[pick]
    dyn_pts = _backproject(ds.depth[best], ds.poses[best], intr, ys, xs)
    m = len(dyn_pts)
    knots = np.linspace(0.0, ds.n_frames - 1, cfg.n_ctrl)
    path = np.stack([np.interp(knots, frames, centroids[:, k]) for k in range(3)], axis=1)
    ctrl = (dyn_pts - centroids[best])[:, None, :] + path[None, :, :]
    dsig = 0.5 * ds.depth[best][ys, xs] / intr.fx * 1.5
    dynamic = GaussianArrays(
        dyn_pts, np.tile([1.0, 0.0, 0.0, 0.0], (m, 1)),
        np.log(dsig)[:, None] * np.ones((1, 3)), np.full(m, logit(cfg.init_opacity)),
        np.clip(ds.blurry[best][ys, xs], 0.0, 1.0))
    return static, dynamic, ctrl


# --- model ---------------------------------------------------------------

def _softplus(x: float) -> float:
    return float(np.logaddexp(0.0, x))


class Model:
    """Everything needed to render: Gaussians, latent-camera networks, poses, blur scores."""

    def __init__(self, store: ParamStore, config: TrainConfig, intrinsics: Intrinsics,
                 poses: list[Pose], betas: np.ndarray, pose_center=None, pose_scale=None,
                 extent: float | None = None):
        self.store = store
        self.config = config
        self.intrinsics = intrinsics
        self.poses = list(poses)
        self.betas = np.asarray(betas, dtype=np.float64)
        self.scene = SceneModel(store, intrinsics, len(poses))
        n_f = len(poses)
        if pose_center is None:
            flat = np.stack([p.flat12() for p in poses])
            pose_center = flat.mean(axis=0)
            pose_scale = np.maximum(flat.std(axis=0), 1e-3)
        self.net = LatentCameraNet(
            store, BlceConfig(n_latent=config.n_latent, mode=LatentMode(config.latent_mode)),
            np.random.default_rng(config.seed + 7), n_f, pose_center, pose_scale)
        if config.learnable_exposure and "exposure.raw" not in store:
            store.add("exposure.raw", np.full(n_f, math.log(math.expm1(0.5))))
        self.t_hats = np.zeros(n_f)
        if extent is None:
            means = self.scene.static_means()
            extent = float(np.sqrt(np.mean(np.sum((means - means.mean(axis=0)) ** 2, axis=1))))
        # RMS spread of the initial static means; scales the position learning rate
        self.extent = extent

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    def trajectory(self, t: int):
        return self.net.forward(self.poses[t], BlurScore(float(self.betas[t]), t))

    def frame_pose(self, t: int) -> Pose:
        """Middle latent camera of frame ``t``: the camera at the frame time itself."""
        traj = self.trajectory(t).trajectory
        return traj.poses[math.ceil(len(traj) / 2) - 1]

    def lcee_exposure(self, t: int, traj) -> float:
        n = self.n_frames
        prev = self.poses[t - 1] if t > 0 else None
        nxt = self.poses[t + 1] if t < n - 1 else None
        return estimate_exposure(traj, prev, nxt, self.scene.static_means().copy(),
                                 self.intrinsics, self.config.epsilon,
                                 frame_pose=self.poses[t]).t_hat

    def exposure(self, t: int, traj, iteration: int) -> float:
        cfg = self.config
        if iteration < cfg.lcee_start:
            return 0.0
        if cfg.fixed_exposure is not None:
            return float(cfg.fixed_exposure)
        if cfg.learnable_exposure:
            return _softplus(self.store.view("exposure.raw")[t])
        return self.lcee_exposure(t, traj)

    def render_sharp(self, t: float, pose: Pose | None = None) -> RenderedImage:
        if pose is None:
            pose = self.poses[int(round(t))]
        return rasterize(self.scene.arrays_at_time(float(t)), pose, self.intrinsics).image

    def render_blurry(self, t: int, t_hat: float | None = None) -> BlurRenderResult:
        tp = self.trajectory(t)
        if t_hat is None:
            t_hat = self.exposure(t, tp.trajectory, iteration=self.config.lcee_start)
        taus = latent_timestamps(t, t_hat, self.config.n_latent)
        return render_blurry(self.scene, t, tp.trajectory, taus)

    # serialization
    def meta(self) -> dict:
        return {
            "config": asdict(self.config),
            "intrinsics": self.intrinsics.to_dict(),
            "poses": [pose_rows(p) for p in self.poses],
            "betas": self.betas.tolist(),
            "t_hats": self.t_hats.tolist(),
            "pose_center": self.net.pose_center.tolist(),
            "pose_scale": self.net.pose_scale.tolist(),
            "extent": self.extent,
        }

    @classmethod
    def from_meta(cls, store: ParamStore, meta: dict) -> "Model":
        m = cls(store, TrainConfig(**meta["config"]), Intrinsics(**meta["intrinsics"]),
                [pose_from_rows(r) for r in meta["poses"]], np.array(meta["betas"]),
                np.array(meta["pose_center"]), np.array(meta["pose_scale"]), meta["extent"])
        m.t_hats = np.array(meta["t_hats"])
        return m


def build_model(ds: Dataset, cfg: TrainConfig) -> Model:
    store = ParamStore()
    static, dynamic, ctrl = initial_gaussians(ds, cfg)
    SceneModel.create(store, ds.intrinsics, ds.n_frames, static, dynamic, ctrl)
    betas = np.array([blur_score(ds.blurry[t], cfg.s, t).beta for t in range(ds.n_frames)])
    return Model(store, cfg, ds.intrinsics, ds.poses, betas)


def learning_rates(model: Model) -> dict[str, float]:
    cfg = model.config
    extent = model.extent
    lr = {"default": cfg.lr_network}
    for part in ("static", "dynamic"):
        lr[f"{part}.quats"] = cfg.lr_quats
        lr[f"{part}.log_scales"] = cfg.lr_scales
        lr[f"{part}.logit_opacities"] = cfg.lr_opacity
        lr[f"{part}.colors"] = cfg.lr_colors
    lr["static.means"] = cfg.lr_means * extent
    lr["dynamic.ctrl"] = cfg.lr_means * extent
    lr["exposure.raw"] = cfg.lr_exposure
    lr["blce.spline_axes"] = cfg.lr_spline_axes
    return lr


# --- training ------------------------------------------------------------

LOG_HEADER = "iter,l_rgb,l_depth,total,mean_t_hat"


class Trainer:
    def __init__(self, model: Model, dataset: Dataset):
        self.model = model
        self.dataset = dataset
        self.config = model.config
        self.adam = Adam(model.store, learning_rates(model))
        self.iteration = 0
        self.rng = np.random.default_rng(self.config.seed)
        self.order: list[int] = []
        self.log: list[str] = []

    @classmethod
    def create(cls, dataset: Dataset, config: TrainConfig) -> "Trainer":
        return cls(build_model(dataset, config), dataset)

    def next_frame(self) -> int:
        if not self.order:
            self.order = [int(i) for i in self.rng.permutation(self.model.n_frames)]
        return self.order.pop(0)

    def compute_loss(self, t: int, t_hat: float | None = None, backward: bool = True) -> LossReport:
        """Loss for frame ``t``; with ``backward`` gradients are added to the store.

        ``t_hat=None`` derives the exposure from the current parameters as a
        constant (no gradient flows through the exposure estimate).
        """
        m, cfg, ds = self.model, self.config, self.dataset
        tp = m.trajectory(t)
        if t_hat is None:
            t_hat = m.exposure(t, tp.trajectory, self.iteration)
        if not np.isfinite(t_hat) or t_hat > cfg.max_exposure:
            raise Divergence(f"latent exposure {t_hat} at frame {t}")
        m.t_hats[t] = t_hat
        taus = latent_timestamps(t, t_hat, cfg.n_latent)
        res = render_blurry(m.scene, t, tp.trajectory, taus)
        l_rgb, g_rgb = loss_rgb(res.blurry.color, ds.blurry[t], with_grad=True)
        alpha = res.blurry.alpha
        valid = alpha > 0.5
        try:
            l_depth, g_depth = loss_depth(res.blurry.expected_depth, ds.depth[t], valid,
                                          with_grad=True)
        except EmptyMask:
            l_depth, g_depth = 0.0, np.zeros_like(ds.depth[t])
        # expected depth = blended depth / alpha
        safe = np.where(valid, alpha, 1.0)
        g_alpha = -g_depth * res.blurry.depth / safe**2
        g_depth = g_depth / safe
        total = cfg.lambda_rgb * l_rgb + cfg.lambda_depth * l_depth
        if backward:
            learn_t = cfg.learnable_exposure and self.iteration >= cfg.lcee_start
            grad_taus = [] if learn_t else None
            pose_grads = blurry_backward(m.scene, res, cfg.lambda_rgb * g_rgb,
                                         cfg.lambda_depth * g_depth, grad_taus,
                                         cfg.lambda_depth * g_alpha)
            m.net.backward(tp, pose_grads)
            if learn_t:
                k = np.arange(1, cfg.n_latent + 1)
                g_that = float(np.dot(grad_taus, (k - math.ceil(cfg.n_latent / 2)) / cfg.n_latent))
                raw = m.store.view("exposure.raw")[t]
                m.store.grad("exposure.raw")[t] += g_that / (1.0 + math.exp(-raw))
        return LossReport(l_rgb, l_depth, total, t, float(m.betas[t]), float(t_hat))

    def train_step(self, t: int | None = None) -> LossReport:
        t = self.next_frame() if t is None else t
        self.model.store.zero_grad()
        report = self.compute_loss(t)
        if not np.isfinite(report.total):
            raise Divergence(f"non-finite loss at iteration {self.iteration}")
        self.adam.step()
        self.model.scene.project_constraints()
        self.iteration += 1
        self.log.append(
            f"{self.iteration},{report.l_rgb!r},{report.l_depth!r},{report.total!r},"
            f"{float(np.mean(self.model.t_hats))!r}")
        return report

    def train(self, n_iters: int | None = None, progress=None) -> list[str]:
        n_iters = self.config.n_iters - self.iteration if n_iters is None else n_iters
        for _ in range(n_iters):
            rep = self.train_step()
            if progress is not None:
                progress(self.iteration, rep)
        return self.log

    # checkpoints
    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.model.store.save(d)
        self.adam.m.astype("<f8").tofile(d / "adam_m.bin")
        self.adam.v.astype("<f8").tofile(d / "adam_v.bin")
        state = self.model.meta()
        state.update({
            "iteration": self.iteration,
            "adam_step": self.adam.step_index,
            "rng": self.rng.bit_generator.state,
            "order": self.order,
        })
        (d / "state.json").write_text(json.dumps(state, indent=1))
        (d / "metrics.csv").write_text("\n".join([LOG_HEADER, *self.log]) + "\n")
        return d

    @classmethod
    def load(cls, directory: str | Path, dataset: Dataset) -> "Trainer":
        d = Path(directory)
        model = load_model(d)
        tr = cls(model, dataset)
        state = json.loads((d / "state.json").read_text())
        tr.iteration = state["iteration"]
        tr.adam.load_state(np.fromfile(d / "adam_m.bin", "<f8"),
                           np.fromfile(d / "adam_v.bin", "<f8"), state["adam_step"])
        tr.rng.bit_generator.state = state["rng"]
        tr.order = list(state["order"])
        lines = (d / "metrics.csv").read_text().splitlines()
        tr.log = lines[1:]
        return tr


def load_model(directory: str | Path) -> Model:
    d = Path(directory)
    store = ParamStore.load(d)
    return Model.from_meta(store, json.loads((d / "state.json").read_text()))


def train(dataset: Dataset, config: TrainConfig, out_dir: str | Path | None = None,
          progress=None) -> Trainer:
    tr = Trainer.create(dataset, config)
    tr.train(progress=progress)
    if out_dir is not None:
        tr.save(out_dir)
    return tr
