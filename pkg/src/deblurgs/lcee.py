"""Latent exposure from projected displacement of static Gaussians.

The exposure of frame t is the average, over static points, of how far a
point moves on screen between the first and last latent camera versus
how far it moves between the neighbouring training cameras, scaled to
inter-frame units.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import NEAR_PLANE, Intrinsics, Pose, project, project_points

EPSILON = 1e-6


class NoUsableStatics(ValueError):
    pass


@dataclass(frozen=True)
class ExposureEstimate:
    t_hat: float
    frame_index: int = 0
    epsilon: float = EPSILON
    n_used: int = 0
    n_skipped: int = 0


@dataclass(frozen=True)
class LatentTimestamps:
    taus: np.ndarray

    def __len__(self) -> int:
        return len(self.taus)


def displacement(p1: Pose, p2: Pose, intr: Intrinsics, mu) -> float:
    """Pixel distance between the projections of ``mu`` under two cameras."""
    a, _ = project(p1, intr, mu)
    b, _ = project(p2, intr, mu)
    return float(np.linalg.norm(a - b))


def _usable(pixels: np.ndarray, depth: np.ndarray, intr: Intrinsics) -> np.ndarray:
    return (
        (depth > NEAR_PLANE)
        & (pixels[:, 0] >= 0) & (pixels[:, 0] <= intr.width - 1)
        & (pixels[:, 1] >= 0) & (pixels[:, 1] <= intr.height - 1)
    )


def displacement_ratio_mean(lat_first: Pose, lat_last: Pose, nbr_a: Pose, nbr_b: Pose,
                            statics: np.ndarray, intr: Intrinsics,
                            epsilon: float = EPSILON) -> tuple[float, int, int]:
    """Mean of (D_latent + eps) / (D_neighbour + eps) over usable points."""
    statics = np.asarray(statics, dtype=np.float64).reshape(-1, 3)
    proj = [project_points(p, intr, statics) for p in (lat_first, lat_last, nbr_a, nbr_b)]
    ok = np.ones(len(statics), bool)
    for px, z in proj:
        ok &= _usable(px, z, intr)
    n_ok = int(ok.sum())
    if n_ok == 0:
        raise NoUsableStatics("no static Gaussian projects validly into all four cameras")
    d_lat = np.linalg.norm(proj[0][0][ok] - proj[1][0][ok], axis=1)
    d_nbr = np.linalg.norm(proj[2][0][ok] - proj[3][0][ok], axis=1)
    return float(np.mean((d_lat + epsilon) / (d_nbr + epsilon))), n_ok, len(statics) - n_ok


def estimate_exposure(traj, prev: Pose | None, nxt: Pose | None, statics: np.ndarray,
                      intr: Intrinsics, epsilon: float = EPSILON,
                      frame_pose: Pose | None = None) -> ExposureEstimate:
    """Latent exposure of one frame in inter-frame units.

    With both neighbours the reference span covers two intervals (factor
    2).  At a sequence end pass ``None`` for the missing neighbour and the
    frame's own pose as ``frame_pose``; the span is then one interval.
    """
    if prev is not None and nxt is not None:
        a, b, factor = prev, nxt, 2.0
    else:
        if frame_pose is None:
            raise ValueError("boundary frames need frame_pose")
        a, b = (frame_pose, nxt) if prev is None else (prev, frame_pose)
        if a is None or b is None:
            raise ValueError("need at least one neighbouring pose")
        factor = 1.0
    ratio, n_ok, n_skip = displacement_ratio_mean(
        traj.poses[0], traj.poses[-1], a, b, statics, intr, epsilon)
    return ExposureEstimate(factor * ratio, traj.frame_index, epsilon, n_ok, n_skip)


def latent_timestamps(t: float, t_hat: float, n_latent: int) -> LatentTimestamps:
    """Timestamps t + T (k - ceil(N/2)) / N for k = 1..N."""
    if n_latent < 1:
        raise ValueError("need at least one latent frame")
    k = np.arange(1, n_latent + 1)
    return LatentTimestamps(t + t_hat * (k - math.ceil(n_latent / 2)) / n_latent)
