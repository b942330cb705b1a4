"""Desk-scale metrics: PSNR (full and masked), correlations, per-frame report."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .blursynth import Dataset
from .trainer import EmptyMask, Model

PSNR_CAP = 99.0


class DegenerateVariance(ValueError):
    pass


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical inputs give ``PSNR_CAP``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask, bool)
        if not mask.any():
            raise EmptyMask("mask selects no pixels")
        sq = sq[mask]
    mse = float(np.mean(sq))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need two equal-length sequences of at least 2 values")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.sum(dx * dx)), np.sqrt(np.sum(dy * dy))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateVariance("constant input")
    return float(np.clip(np.sum(dx * dy) / (sx * sy), -1.0, 1.0))


def _safe_pearson(xs, ys) -> float:
    try:
        return pearson(xs, ys)
    except DegenerateVariance:
        return float("nan")


@dataclass
class FrameRow:
    """Metrics of one training frame.

    ``psnr`` and ``psnr_dynamic`` score the sharp render at the frame time
    from the dataset camera.  The ``*_latent`` columns render from the
    middle latent camera of the frame instead, the model's own estimate
    of where the camera was at the frame time.
    """

    frame: int
    psnr: float
    psnr_dynamic: float
    blurry_psnr: float
    blurry_psnr_dynamic: float
    beta: float
    t_hat: float
    exposure: float
    psnr_latent: float = float("nan")
    psnr_dynamic_latent: float = float("nan")


@dataclass
class EvalReport:
    rows: list[FrameRow]
    novel: list[tuple[float, float]] = field(default_factory=list)

    COLUMNS = ("frame", "psnr", "psnr_dynamic", "blurry_psnr", "blurry_psnr_dynamic",
               "beta", "t_hat", "exposure", "psnr_latent", "psnr_dynamic_latent")

    def _mean(self, attr: str) -> float:
        vals = [getattr(r, attr) for r in self.rows]
        vals = [v for v in vals if np.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_psnr(self) -> float:
        return self._mean("psnr")

    @property
    def mean_psnr_dynamic(self) -> float:
        return self._mean("psnr_dynamic")

    @property
    def mean_blurry_psnr(self) -> float:
        return self._mean("blurry_psnr")

    @property
    def mean_blurry_psnr_dynamic(self) -> float:
        return self._mean("blurry_psnr_dynamic")

    @property
    def mean_psnr_latent(self) -> float:
        return self._mean("psnr_latent")

    @property
    def mean_psnr_dynamic_latent(self) -> float:
        return self._mean("psnr_dynamic_latent")

    @property
    def mean_novel_psnr(self) -> float:
        return float(np.mean([p for _, p in self.novel])) if self.novel else float("nan")

    @property
    def beta_t_hat_correlation(self) -> float:
        return _safe_pearson([r.beta for r in self.rows], [r.t_hat for r in self.rows])

    @property
    def t_hat_exposure_correlation(self) -> float:
        return _safe_pearson([r.t_hat for r in self.rows], [r.exposure for r in self.rows])

    def summary(self) -> dict[str, float]:
        return {
            "mean_psnr": self.mean_psnr,
            "mean_psnr_dynamic": self.mean_psnr_dynamic,
            "mean_blurry_psnr": self.mean_blurry_psnr,
            "mean_blurry_psnr_dynamic": self.mean_blurry_psnr_dynamic,
            "mean_psnr_latent": self.mean_psnr_latent,
            "mean_psnr_dynamic_latent": self.mean_psnr_dynamic_latent,
            "mean_novel_psnr": self.mean_novel_psnr,
            "pearson_beta_t_hat": self.beta_t_hat_correlation,
            "pearson_t_hat_exposure": self.t_hat_exposure_correlation,
        }

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(",".join(self.COLUMNS) + "\n")
        for r in self.rows:
            out.write(",".join(repr(getattr(r, c)) for c in self.COLUMNS) + "\n")
        if self.novel:
            out.write("\nnovel_time,psnr\n")
            for t, p in self.novel:
                out.write(f"{t!r},{p!r}\n")
        out.write("\n")
        for k, v in self.summary().items():
            out.write(f"{k},{v!r}\n")
        return out.getvalue()

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path

    def scatter_png(self, path: str | Path, size: int = 256) -> Path:
        """Standardized blur score against standardized exposure, one dot per frame."""
        b = np.array([r.beta for r in self.rows])
        t = np.array([r.t_hat for r in self.rows])

        def z(v):
            s = v.std()
            return (v - v.mean()) / s if s > 0 else np.zeros_like(v)

        img = Image.new("RGB", (size, size), "white")
        draw = ImageDraw.Draw(img)
        pad, lim = 16, 3.0
        to_px = lambda v: pad + (np.clip(v, -lim, lim) + lim) / (2 * lim) * (size - 2 * pad)
        draw.line([(pad, size / 2), (size - pad, size / 2)], fill=(200, 200, 200))
        draw.line([(size / 2, pad), (size / 2, size - pad)], fill=(200, 200, 200))
        for x, y in zip(to_px(z(b)), to_px(z(t))):
            y = size - y
            draw.ellipse([x - 3, y - 3, x + 3, y + 3], fill=(30, 90, 200))
        img.save(path)
        return Path(path)


def current_exposures(model: Model) -> np.ndarray:
    """Exposure each frame would use now, past the warm-up."""
    it = model.config.lcee_start
    return np.array([model.exposure(t, model.trajectory(t).trajectory, it)
                     for t in range(model.n_frames)])


def _scores(img: np.ndarray, ref: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    return psnr(img, ref), (psnr(img, ref, mask) if mask.any() else float("nan"))


def evaluate(model: Model, ds: Dataset, novel_views: bool = True) -> EvalReport:
    t_hats = current_exposures(model)
    rows = []
    for t in range(ds.n_frames):
        ref, mask = ds.sharp[t], ds.masks[t]
        sharp = _scores(model.render_sharp(t, ds.poses[t]).color, ref, mask)
        latent = _scores(model.render_sharp(t, model.frame_pose(t)).color, ref, mask)
        blurry = _scores(ds.blurry[t], ref, mask)
        rows.append(FrameRow(t, *sharp, *blurry, float(model.betas[t]), float(t_hats[t]),
                             float(ds.exposures[t]), *latent))
    novel = []
    if novel_views and ds.scene is not None:
        for t in range(ds.n_frames - 1):
            tm = t + 0.5
            pose = ds.scene.camera_pose(tm)
            novel.append((tm, psnr(model.render_sharp(tm, pose).color,
                                   ds.scene.render_sharp(tm).color)))
    return EvalReport(rows, novel)
