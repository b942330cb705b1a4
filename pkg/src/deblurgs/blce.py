"""Blur-adaptive latent camera estimation.

A frame's blur score (low-frequency share of its spectrum) is encoded
into a feature that conditions a neural ODE.  The ODE state starts from
an encoding of the frame's camera pose; integrating it over the exposure
and decoding each state to a screw axis gives the latent camera poses.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import Pose, ScrewAxis, compose, screw_exp, screw_exp_backward
from .grad import Mlp, MlpSpec, ParamStore, positional_encoding

LUMA = np.array([0.299, 0.587, 0.114])


class ImageSmallerThanCrop(ValueError):
    pass


class LatentMode(str, Enum):
    SPLINE = "spline"
    NEURAL_ODE = "neural_ode"
    BLUR_ADAPTIVE = "blur_adaptive"


@dataclass(frozen=True)
class BlurScore:
    beta: float
    frame_index: int = 0


@dataclass(frozen=True)
class BlurFeature:
    phi: np.ndarray


@dataclass(frozen=True)
class LatentState:
    z: np.ndarray
    u: float


@dataclass
class LatentTrajectory:
    poses: list[Pose]
    screw_axes: list[ScrewAxis]
    frame_index: int = 0

    def __len__(self) -> int:
        return len(self.poses)


def luminance(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    return frame @ LUMA if frame.ndim == 3 else frame


def low_frequency_window(shape: tuple[int, int], s: int) -> tuple[slice, slice]:
    """Rows/columns of the centered s-by-s block of an fftshift-ed spectrum."""
    h, w = shape
    return (slice(h // 2 - s // 2, h // 2 - s // 2 + s),
            slice(w // 2 - s // 2, w // 2 - s // 2 + s))


def blur_score(frame: np.ndarray, s: int = 20, frame_index: int = 0) -> BlurScore:
    """Share of spectral magnitude inside the centered s-by-s low-frequency block."""
    lum = luminance(frame)
    if lum.shape[0] < s or lum.shape[1] < s:
        raise ImageSmallerThanCrop(f"image {lum.shape} smaller than crop side {s}")
    mag = np.abs(np.fft.fftshift(np.fft.fft2(lum)))
    rows, cols = low_frequency_window(lum.shape, s)
    return BlurScore(float(mag[rows, cols].sum() / mag.sum()), frame_index)


# --- squashing of screw axes ------------------------------------------------

def bound_axis(raw: np.ndarray, max_norm: float) -> np.ndarray:
    """Radially squash 6-vectors so their norm stays below ``max_norm``."""
    r = np.linalg.norm(raw, axis=-1, keepdims=True)
    x = r / max_norm
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(x < 1e-3, 1.0 - x * x / 3.0, np.tanh(x) / np.where(x == 0, 1.0, x))
    return raw * s


def bound_axis_backward(raw: np.ndarray, max_norm: float, grad: np.ndarray) -> np.ndarray:
    r = np.linalg.norm(raw, axis=-1, keepdims=True)
    x = r / max_norm
    safe = np.where(x == 0, 1.0, x)
    s = np.where(x < 1e-3, 1.0 - x * x / 3.0, np.tanh(x) / safe)
    slope = np.where(
        x < 1e-3,
        -2.0 / 3.0 + 8.0 * x * x / 15.0,
        (1.0 / np.cosh(safe) ** 2 - np.tanh(safe) / safe) / safe**2,
    ) / max_norm**2
    return s * grad + slope * np.sum(raw * grad, axis=-1, keepdims=True) * raw


# --- networks -------------------------------------------------------------

@dataclass(frozen=True)
class BlceConfig:
    n_latent: int = 9
    bands: int = 6
    feature_dim: int = 32
    latent_dim: int = 64
    feature_hidden: tuple[int, ...] = (64, 64)
    encoder_hidden: tuple[int, ...] = (64, 64)
    field_hidden: tuple[int, ...] = (128, 128)
    decoder_hidden: tuple[int, ...] = (64,)
    substeps: int = 4
    max_axis: float = 1.0
    mode: LatentMode = LatentMode.BLUR_ADAPTIVE


def latent_times(n_latent: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n_latent) if n_latent > 1 else np.zeros(1)


@dataclass
class _OdeTape:
    steps: list = field(default_factory=list)  # per interval: list of (h, caches)


@dataclass
class TrajectoryPass:
    """Forward results of one frame, kept for the backward pass."""

    pose: Pose
    trajectory: LatentTrajectory
    raw_axes: np.ndarray
    feature: BlurFeature | None = None
    states: list[LatentState] | None = None
    caches: dict = field(default_factory=dict)


class LatentCameraNet:
    """Latent camera trajectories for every mode in ``LatentMode``.

    Parameter slots: ``blce.feature``, ``blce.encoder``, ``blce.field``,
    ``blce.decoder`` (ODE modes) or ``blce.spline_axes`` (spline mode).
    """

    def __init__(self, store: ParamStore, config: BlceConfig = BlceConfig(),
                 rng: np.random.Generator | None = None, n_frames: int = 1,
                 pose_center: np.ndarray | None = None, pose_scale: np.ndarray | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.store = store
        self.config = c = config
        self.pose_center = np.zeros(12) if pose_center is None else np.asarray(pose_center, float)
        self.pose_scale = np.ones(12) if pose_scale is None else np.asarray(pose_scale, float)
        if c.mode is LatentMode.SPLINE:
            if "blce.spline_axes" not in store:
                store.add("blce.spline_axes", np.zeros((n_frames, 2, 6)))
            return
        self.feature_spec = MlpSpec((2 * c.bands, *c.feature_hidden, c.feature_dim))
        self.encoder_spec = MlpSpec((12, *c.encoder_hidden, c.latent_dim))
        self.field_spec = MlpSpec((c.latent_dim + 1 + c.feature_dim, *c.field_hidden, c.latent_dim))
        self.decoder_spec = MlpSpec((c.latent_dim, *c.decoder_hidden, 6))
        self.feature_net = Mlp(self.feature_spec, store, "blce.feature", rng)
        self.encoder = Mlp(self.encoder_spec, store, "blce.encoder", rng)
        self.field = Mlp(self.field_spec, store, "blce.field", rng)
        self.decoder = Mlp(self.decoder_spec, store, "blce.decoder", rng, zero_last=True)

    # forward pieces, usable on their own
    def blur_feature(self, score: BlurScore):
        enc = positional_encoding(score.beta, self.config.bands)
        phi, cache = self.feature_net(enc)
        return BlurFeature(phi), cache

    def encode_pose(self, pose: Pose):
        return self.encoder((pose.flat12() - self.pose_center) / self.pose_scale)

    def integrate_latents(self, z0: np.ndarray, feature: BlurFeature, n_latent: int | None = None):
        """Fixed-step RK4 from u=0 to u=1, recording the state at each latent time."""
        n_latent = n_latent or self.config.n_latent
        us = latent_times(n_latent)
        phi = feature.phi
        n_sub = self.config.substeps

        def f(z, u):
            return self.field(np.concatenate([z, [u], phi]))

        z = np.asarray(z0, dtype=np.float64)
        states = [LatentState(z.copy(), float(us[0]))]
        tape = _OdeTape()
        for k in range(1, n_latent):
            u = us[k - 1]
            h = (us[k] - us[k - 1]) / n_sub
            interval = []
            for _ in range(n_sub):
                k1, c1 = f(z, u)
                k2, c2 = f(z + 0.5 * h * k1, u + 0.5 * h)
                k3, c3 = f(z + 0.5 * h * k2, u + 0.5 * h)
                k4, c4 = f(z + h * k3, u + h)
                z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                interval.append((h, (c1, c2, c3, c4)))
                u += h
            tape.steps.append(interval)
            states.append(LatentState(z.copy(), float(us[k])))
        return states, tape

    def integrate_backward(self, tape: _OdeTape, grad_states: list[np.ndarray]):
        """Reverse sweep through the RK4 steps; returns (dL/dz0, dL/dphi)."""
        dz = self.config.latent_dim
        gz = np.array(grad_states[-1], dtype=np.float64)
        g_phi = np.zeros(self.config.feature_dim)

        def back(cache, g):
            gin = self.field.backward(cache, g)
            return gin[:dz], gin[dz + 1:]

        for k in range(len(tape.steps) - 1, -1, -1):
            for h, (c1, c2, c3, c4) in reversed(tape.steps[k]):
                acc = gz.copy()
                gk1, gk2, gk3, gk4 = (h / 6.0) * gz, (h / 3.0) * gz, (h / 3.0) * gz, (h / 6.0) * gz
                gi, gp = back(c4, gk4)
                acc += gi
                gk3 = gk3 + h * gi
                g_phi += gp
                gi, gp = back(c3, gk3)
                acc += gi
                gk2 = gk2 + 0.5 * h * gi
                g_phi += gp
                gi, gp = back(c2, gk2)
                acc += gi
                gk1 = gk1 + 0.5 * h * gi
                g_phi += gp
                gi, gp = back(c1, gk1)
                acc += gi
                g_phi += gp
                gz = acc
            gz = gz + grad_states[k]
        return gz, g_phi

    def decode_latent_poses(self, states: list[LatentState], pose: Pose, frame_index: int = 0):
        zs = np.stack([s.z for s in states])
        raw, cache = self.decoder(zs)
        traj = self._compose(raw, pose, frame_index)
        return traj, raw, cache

    def _compose(self, raw: np.ndarray, pose: Pose, frame_index: int) -> LatentTrajectory:
        axes = bound_axis(raw, self.config.max_axis)
        screws = [ScrewAxis.from_vector(a) for a in axes]
        return LatentTrajectory([compose(pose, screw_exp(s)) for s in screws], screws, frame_index)

    # whole chain
    def forward(self, pose: Pose, score: BlurScore) -> TrajectoryPass:
        c = self.config
        t = score.frame_index
        if c.mode is LatentMode.SPLINE:
            ends = self.store.view("blce.spline_axes")[t]
            u = latent_times(c.n_latent)[:, None]
            raw = (1.0 - u) * ends[0] + u * ends[1]
            return TrajectoryPass(pose, self._compose(raw, pose, t), raw)
        if c.mode is LatentMode.BLUR_ADAPTIVE:
            feature, fcache = self.blur_feature(score)
        else:
            feature, fcache = BlurFeature(np.zeros(c.feature_dim)), None
        z0, ecache = self.encode_pose(pose)
        states, tape = self.integrate_latents(z0, feature)
        traj, raw, dcache = self.decode_latent_poses(states, pose, t)
        return TrajectoryPass(pose, traj, raw, feature, states,
                              {"feature": fcache, "encoder": ecache, "tape": tape, "decoder": dcache})

    def backward(self, tp: TrajectoryPass, pose_grads) -> None:
        """Accumulate parameter gradients given dL/d(latent pose) for each k.

        ``pose_grads`` holds objects with ``rotation`` (3x3) and
        ``translation`` (3,) gradients of the camera-to-world latent poses.
        """
        c = self.config
        rt = tp.pose.rotation.T
        g_axes = np.stack([
            screw_exp_backward(s, rt @ pg.rotation, rt @ pg.translation)
            for s, pg in zip(tp.trajectory.screw_axes, pose_grads)
        ])
        g_raw = bound_axis_backward(tp.raw_axes, c.max_axis, g_axes)
        if c.mode is LatentMode.SPLINE:
            u = latent_times(c.n_latent)[:, None]
            g = self.store.grad("blce.spline_axes")[tp.trajectory.frame_index]
            g[0] += np.sum((1.0 - u) * g_raw, axis=0)
            g[1] += np.sum(u * g_raw, axis=0)
            return
        g_states = self.decoder.backward(tp.caches["decoder"], g_raw)
        g_z0, g_phi = self.integrate_backward(tp.caches["tape"], list(g_states))
        self.encoder.backward(tp.caches["encoder"], g_z0)
        if c.mode is LatentMode.BLUR_ADAPTIVE:
            self.feature_net.backward(tp.caches["feature"], g_phi)


def blur_feature(score: BlurScore, net: LatentCameraNet) -> BlurFeature:
    return net.blur_feature(score)[0]


def integrate_latents(pose: Pose, feature: BlurFeature, net: LatentCameraNet,
                      n_latent: int | None = None) -> list[LatentState]:
    z0, _ = net.encode_pose(pose)
    return net.integrate_latents(z0, feature, n_latent)[0]


def decode_latent_poses(states: list[LatentState], pose: Pose, net: LatentCameraNet,
                        frame_index: int = 0) -> LatentTrajectory:
    return net.decode_latent_poses(states, pose, frame_index)[0]
