"""Blur formation by averaging latent sharp renders, plus the synthetic
ground-truth scene used to generate and check datasets.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Intrinsics, Pose, rotation_about
from .lcee import LatentTimestamps
from .rasterizer import Rasterization, RenderedImage, rasterize
from .scene import GaussianArrays, SceneModel, logit


@dataclass
class BlurRenderResult:
    blurry: RenderedImage
    latents: list[RenderedImage]
    timestamps: LatentTimestamps
    trajectory: object
    passes: list[Rasterization] = field(default_factory=list, repr=False)


def render_blurry(scene: SceneModel, t: int, traj, taus: LatentTimestamps) -> BlurRenderResult:
    """Render each latent frame at its own (time, pose) and average them."""
    if len(traj.poses) != len(taus.taus):
        raise ValueError("trajectory and timestamps differ in length")
    passes = [
        rasterize(scene.arrays_at_time(float(tau)), pose, scene.intrinsics)
        for tau, pose in zip(taus.taus, traj.poses)
    ]
    latents = [p.image for p in passes]
    return BlurRenderResult(RenderedImage.mean(latents), latents, taus, traj, passes)


def blurry_backward(scene: SceneModel, result: BlurRenderResult, grad_color: np.ndarray,
                    grad_depth: np.ndarray | None = None, grad_taus: list | None = None,
                    grad_alpha: np.ndarray | None = None):
    """Backpropagate adjoints of the averaged image; returns per-latent pose grads."""
    n = len(result.passes)
    pose_grads = []
    for tau, p in zip(result.timestamps.taus, result.passes):
        g, pg = p.backward(grad_color / n, None if grad_depth is None else grad_depth / n,
                           None if grad_alpha is None else grad_alpha / n)
        scene.accumulate_grads(float(tau), g, grad_taus)
        pose_grads.append(pg)
    return pose_grads


# --- synthetic scene -----------------------------------------------------

@dataclass
class SyntheticSceneSpec:
    """Analytic scene: textured back wall, a few static blobs, one moving
    object, and a camera shaking on a circle in yaw/pitch while drifting
    sideways.  Times are in frame units; exposures in inter-frame units.
    """

    width: int = 64
    height: int = 64
    focal: float = 64.0
    n_frames: int = 24
    seed: int = 0
    exposures: list[float] = field(default_factory=lambda: [0.6])
    oversample: int = 64
    # static layout
    wall_depth: float = 6.0
    wall_half_extent: float = 5.4
    wall_spacing: float = 0.35
    wall_sigma: float = 0.15
    wall_contrast: float = 1.0
    n_blobs: int = 6
    blob_depth: tuple[float, float] = (3.0, 4.5)
    blob_sigma: float = 0.2
    # moving object
    object_depth: float = 3.5
    object_grid: int = 3
    object_spacing: float = 0.13
    object_sigma: float = 0.08
    object_amplitude: tuple[float, float] = (0.9, 0.25)
    object_cycles: float = 1.0
    # camera
    shake_amplitude: float = 0.22
    shake_period: float = 8.0
    drift: float = 0.02

    def __post_init__(self):
        if np.isscalar(self.exposures):
            self.exposures = [float(self.exposures)]
        self.exposures = [float(e) for e in self.exposures]
        if any(e < 0 for e in self.exposures):
            raise ValueError("exposures must be non-negative")
        if self.oversample < 16:
            raise ValueError("oversample must be at least 16")
        self.blob_depth = tuple(self.blob_depth)
        self.object_amplitude = tuple(self.object_amplitude)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticSceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, (self.width - 1) / 2,
                          (self.height - 1) / 2, self.width, self.height)

    def exposure(self, frame: int) -> float:
        return self.exposures[frame % len(self.exposures)]

    def camera_pose(self, t: float) -> Pose:
        phase = 2 * np.pi * t / self.shake_period
        yaw = self.shake_amplitude * np.cos(phase)
        pitch = self.shake_amplitude * np.sin(phase)
        rot = rotation_about("y", yaw) @ rotation_about("x", pitch)
        x = self.drift * (t - (self.n_frames - 1) / 2)
        return Pose(rot, [x, 0.0, 0.0])

    def object_offset(self, t: float) -> np.ndarray:
        phase = 2 * np.pi * self.object_cycles * t / (self.n_frames - 1)
        ax, ay = self.object_amplitude
        return np.array([ax * np.sin(phase), ay * np.sin(2 * phase), 0.0])

    def static_gaussians(self) -> GaussianArrays:
        rng = np.random.default_rng(self.seed)
        ticks = np.arange(-self.wall_half_extent, self.wall_half_extent + 1e-9, self.wall_spacing)
        gx, gy = np.meshgrid(ticks, ticks)
        wall = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, self.wall_depth)], axis=1)
        n_wall = len(wall)
        # smooth colour field plus per-Gaussian jitter gives texture at several scales
        base = 0.5 + 0.3 * np.stack([
            np.sin(1.3 * wall[:, 0] + 0.7 * wall[:, 1]),
            np.sin(0.9 * wall[:, 1] - 1.1 * wall[:, 0] + 1.0),
            np.cos(1.7 * wall[:, 0] * 0.5 + 1.2 * wall[:, 1]),
        ], axis=1)
        wall_colors = np.clip((1 - self.wall_contrast) * base
                              + self.wall_contrast * rng.uniform(0.0, 1.0, (n_wall, 3)), 0.0, 1.0)
        lo, hi = self.blob_depth
        bz = rng.uniform(lo, hi, self.n_blobs)
        half = 0.8 * self.width / 2 / self.focal
        bxy = rng.uniform(-half, half, (self.n_blobs, 2)) * bz[:, None]
        blobs = np.column_stack([bxy, bz])
        means = np.vstack([wall, blobs])
        n = len(means)
        sig = np.r_[np.full(n_wall, self.wall_sigma), np.full(self.n_blobs, self.blob_sigma)]
        log_scales = np.log(sig)[:, None] * np.ones((1, 3))
        log_scales[n_wall:] += rng.uniform(-0.3, 0.3, (self.n_blobs, 3))
        quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        quats[n_wall:] = rng.normal(size=(self.n_blobs, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        colors = np.vstack([wall_colors, rng.uniform(0.0, 1.0, (self.n_blobs, 3))])
        opac = np.r_[np.full(n_wall, 0.95), np.full(self.n_blobs, 0.9)]
        return GaussianArrays(means, quats, log_scales, logit(opac), colors, np.zeros(n, bool))

    def object_gaussians(self, t: float) -> GaussianArrays:
        rng = np.random.default_rng(self.seed + 1)
        k = self.object_grid
        ticks = (np.arange(k) - (k - 1) / 2) * self.object_spacing
        gx, gy = np.meshgrid(ticks, ticks)
        local = np.stack([gx.ravel(), gy.ravel(), np.zeros(k * k)], axis=1)
        means = local + np.array([0.0, 0.0, self.object_depth]) + self.object_offset(t)
        n = len(means)
        colors = rng.uniform(0.0, 1.0, (n, 3))
        colors[:, rng.integers(0, 3)] = 1.0
        return GaussianArrays(
            means, np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
            np.full((n, 3), np.log(self.object_sigma)), logit(np.full(n, 0.97)),
            colors, np.ones(n, bool))

    def gaussians_at(self, t: float) -> GaussianArrays:
        return GaussianArrays.concat([self.static_gaussians(), self.object_gaussians(t)])

    def render_sharp(self, t: float, pose: Pose | None = None) -> RenderedImage:
        pose = self.camera_pose(t) if pose is None else pose
        return rasterize(self.gaussians_at(t), pose, self.intrinsics).image


@dataclass
class OracleFrame:
    sharp: np.ndarray
    blurry: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    pose: Pose
    exposure: float
    sharp_depth: np.ndarray | None = None


def oracle_blur(spec: SyntheticSceneSpec, t: int, oversample: int | None = None) -> OracleFrame:
    """Ground truth for frame ``t``: midpoint-rule average of ``oversample``
    sharp renders over the exposure window centred at ``t``.

    Depths are expected depths (blended depth over accumulated alpha), as
    a range sensor reports them.  ``depth`` is integrated over the same
    window, so it lines up with the blurry image; the depth of the
    instantaneous render is kept in ``sharp_depth``.
    """
    m = spec.oversample if oversample is None else oversample
    e = spec.exposure(t)
    sharp = spec.render_sharp(t)
    if e == 0.0:
        blurry, depth = sharp.color.copy(), sharp.expected_depth
    else:
        times = t - e / 2 + e * (np.arange(m) + 0.5) / m
        subs = [spec.render_sharp(float(s)) for s in times]
        blurry = sum(r.color for r in subs) / m
        depth = RenderedImage.mean(subs).expected_depth
    return OracleFrame(sharp.color, blurry, depth, sharp.dynamic_alpha > 0.5,
                       spec.camera_pose(t), e, sharp.expected_depth)


# --- files ---------------------------------------------------------------

def write_f32(path: str | Path, data: np.ndarray) -> None:
    """8-byte header (width, height as uint32 LE) then row-major float32 LE."""
    data = np.asarray(data)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_f32(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h = struct.unpack("<II", raw[:8])
    arr = np.frombuffer(raw[8:], dtype="<f4")
    ch = arr.size // (w * h)
    shape = (h, w) if ch == 1 else (h, w, ch)
    return arr.reshape(shape).astype(np.float64)


def write_png(path: str | Path, data: np.ndarray) -> None:
    img = np.round(np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def read_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def pose_rows(pose: Pose) -> list[list[float]]:
    return pose.matrix[:3].tolist()


def pose_from_rows(rows) -> Pose:
    m = np.asarray(rows, dtype=np.float64)
    return Pose(m[:, :3], m[:, 3])


def write_dataset(spec: SyntheticSceneSpec, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    poses = []
    for t in range(spec.n_frames):
        fr = oracle_blur(spec, t)
        for name, img in (("blur", fr.blurry), ("sharp", fr.sharp)):
            write_png(out / "frames" / f"{name}_{t:04d}.png", img)
            write_f32(out / "frames" / f"{name}_{t:04d}.f32", img)
        write_f32(out / f"depth_{t:04d}.f32", fr.depth)
        write_png(out / f"mask_{t:04d}.png", fr.mask.astype(np.float64))
        poses.append(pose_rows(fr.pose))
    manifest = {
        "n_frames": spec.n_frames,
        "width": spec.width,
        "height": spec.height,
        "intrinsics": spec.intrinsics.to_dict(),
        "poses": poses,
        "exposures": [spec.exposure(t) for t in range(spec.n_frames)],
        "scene": spec.to_dict(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


@dataclass
class Dataset:
    root: Path
    intrinsics: Intrinsics
    poses: list[Pose]
    blurry: list[np.ndarray]
    sharp: list[np.ndarray]
    depth: list[np.ndarray]
    masks: list[np.ndarray]
    exposures: list[float]
    scene: SyntheticSceneSpec | None = None

    @property
    def n_frames(self) -> int:
        return len(self.poses)


def read_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    man = json.loads((root / "manifest.json").read_text())
    n = man["n_frames"]
    intr = Intrinsics(**man["intrinsics"])
    return Dataset(
        root, intr,
        [pose_from_rows(r) for r in man["poses"]],
        [read_f32(root / "frames" / f"blur_{t:04d}.f32") for t in range(n)],
        [read_f32(root / "frames" / f"sharp_{t:04d}.f32") for t in range(n)],
        [read_f32(root / f"depth_{t:04d}.f32") for t in range(n)],
        [read_png(root / f"mask_{t:04d}.png") > 0.5 for t in range(n)],
        list(man["exposures"]),
        SyntheticSceneSpec.from_dict(man["scene"]) if "scene" in man else None,
    )
