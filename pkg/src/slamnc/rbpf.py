"""Particle set, motion model, weighting and resampling.

The particle set is stored column-wise: poses are an ``(n, 3)`` array of
``[x, y, theta]``, weights are kept in log space, and the per-particle bias
filters and maps are batched objects reindexed together on resampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .bias_kf import BiasKf
from .errors import AllZeroWeights, InvalidConfig
from .frames import Pose2, wrap_angle
from .mfmap import MfMap, ParticleMaps

LOG_W_FLOOR = -1e4


@dataclass(frozen=True)
class MotionInput:
    """Body-frame step: translate by ``(dx, dy)``, then turn by ``dtheta``."""

    dx: float
    dy: float
    dtheta: float
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    @property
    def length(self) -> float:
        return math.hypot(self.dx, self.dy)


@dataclass(frozen=True)
class MotionNoise:
    sigma_trans: float = 0.1  # fraction of step length
    sigma_theta: float = 0.01  # rad per step
    sigma_drift: float = 0.05  # rad per meter

    def __post_init__(self):
        if min(self.sigma_trans, self.sigma_theta, self.sigma_drift) < 0:
            raise InvalidConfig("motion noise must be non-negative")

    @classmethod
    def pdr(cls) -> MotionNoise:
        return cls()

    @classmethod
    def odometry(cls) -> MotionNoise:
        return cls(0.05, 0.005, 0.025)


@dataclass
class Particle:
    pose: Pose2
    log_weight: float
    map: MfMap | None
    kf: BiasKf | None


class ParticleSet:
    """``n`` particles with poses, log weights, bias filters and maps."""

    def __init__(self, poses: ArrayLike, log_w: ArrayLike | None = None, kf: BiasKf | None = None,
                 maps: ParticleMaps | None = None):
        self.poses = np.array(poses, dtype=float).reshape(-1, 3)
        n = len(self.poses)
        if n < 1:
            raise ValueError("particle set must not be empty")
        self.log_w = np.full(n, -math.log(n)) if log_w is None else np.array(log_w, dtype=float)
        self.kf = kf
        self.maps = maps
        self.prev_xy = self.poses[:, :2].copy()
        self.ancestors: NDArray | None = None

    @classmethod
    def at_pose(cls, n: int, pose=(0.0, 0.0, 0.0), **kwargs) -> ParticleSet:
        return cls(np.tile(np.asarray(pose, dtype=float), (n, 1)), **kwargs)

    def __len__(self):
        return len(self.poses)

    @property
    def weights(self) -> NDArray:
        w = np.exp(self.log_w - self.log_w.max())
        return w / w.sum()

    @property
    def ess(self) -> float:
        w = self.weights
        return float(1.0 / np.sum(w * w))

    def take(self, idx: ArrayLike) -> ParticleSet:
        """Reindex every per-particle component in place."""
        idx = np.asarray(idx, dtype=np.intp)
        self.poses = self.poses[idx]
        self.prev_xy = self.prev_xy[idx]
        self.log_w = self.log_w[idx]
        if self.kf is not None:
            self.kf = self.kf.take(idx)
        if self.maps is not None:
            self.maps.resample(idx)
        return self

    def particle(self, i: int) -> Particle:
        kf = None
        if self.kf is not None:
            kf = BiasKf(self.kf.b[i].copy(), self.kf.p[i].copy(), bool(np.asarray(self.kf.updated)[i]))
        m = self.maps.extract(i) if self.maps is not None else None
        return Particle(Pose2(*self.poses[i]), float(self.log_w[i]), m, kf)

    def copy(self) -> ParticleSet:
        import copy

        return copy.deepcopy(self)


def predict(ps: ParticleSet, u: MotionInput, noise: MotionNoise, rng: np.random.Generator) -> ParticleSet:
    """Sample new poses from the motion model."""
    n = len(ps)
    step = u.length
    e = rng.standard_normal((n, 3))
    dx = u.dx + e[:, 0] * noise.sigma_trans * step
    dy = u.dy + e[:, 1] * noise.sigma_trans * step
    dth = u.dtheta + e[:, 2] * (noise.sigma_theta + noise.sigma_drift * step)
    th = ps.poses[:, 2]
    c, s = np.cos(th), np.sin(th)
    ps.prev_xy = ps.poses[:, :2].copy()
    new = np.empty_like(ps.poses)
    new[:, 0] = ps.poses[:, 0] + c * dx - s * dy
    new[:, 1] = ps.poses[:, 1] + s * dx + c * dy
    new[:, 2] = wrap_angle(th + dth)
    ps.poses = new
    return ps


def normalize_log_weights(log_w: NDArray) -> NDArray:
    top = np.max(log_w)
    if not np.isfinite(top):
        raise AllZeroWeights("every particle weight is zero")
    out = log_w - (top + math.log(np.sum(np.exp(log_w - top))))
    return np.maximum(out, LOG_W_FLOOR)


def weight_update(ps: ParticleSet, factors: ArrayLike | None = None, *,
                  log_factors: ArrayLike | None = None) -> ParticleSet:
    """Multiply weights by ``factors`` (or add ``log_factors``) and renormalize."""
    if (factors is None) == (log_factors is None):
        raise TypeError("pass exactly one of factors or log_factors")
    if factors is not None:
        f = np.asarray(factors, dtype=float)
        if np.any(~np.isfinite(f)) or np.any(f < 0):
            raise ValueError("weight factors must be finite and non-negative")
        with np.errstate(divide="ignore"):
            lf = np.log(f)
    else:
        lf = np.asarray(log_factors, dtype=float)
        if np.any(np.isnan(lf)) or np.any(lf == np.inf):
            raise ValueError("log factors must not be NaN or +inf")
    ps.log_w = normalize_log_weights(ps.log_w + lf)
    return ps


def systematic_resample(weights: ArrayLike, u0: float) -> NDArray:
    """Low-variance resampling with a single offset ``u0`` in [0, 1)."""
    w = np.asarray(weights, dtype=float)
    n = len(w)
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    positions = (u0 + np.arange(n)) / n
    return np.minimum(np.searchsorted(cdf, positions, side="right"), n - 1)


def resample_if_needed(ps: ParticleSet, ess_threshold_fraction: float, rng: np.random.Generator) -> ParticleSet:
    """Systematic resampling when the effective sample size drops below the threshold.

    Sets ``ps.ancestors`` to the parent indices, or ``None`` when no
    resampling took place.
    """
    if not 0 < ess_threshold_fraction <= 1:
        raise ValueError("ess_threshold_fraction must be in (0, 1]")
    n = len(ps)
    if ps.ess >= ess_threshold_fraction * n:
        ps.ancestors = None
        return ps
    idx = systematic_resample(ps.weights, rng.random())
    ps.take(idx)
    ps.log_w = np.full(n, -math.log(n))
    ps.ancestors = idx
    return ps


def weighted_bias_stats(ps: ParticleSet) -> tuple[NDArray, NDArray]:
    """Weighted mean and spread of the particles' bias means."""
    w = ps.weights
    mean = w @ ps.kf.b
    var = w @ (ps.kf.b - mean) ** 2
    return mean, np.sqrt(np.maximum(var, 0.0))


def estimate(ps: ParticleSet) -> tuple[Pose2, NDArray | None]:
    """Weighted mean position, circular mean heading and weighted mean bias."""
    w = ps.weights
    x, y = w @ ps.poses[:, :2]
    th = math.atan2(w @ np.sin(ps.poses[:, 2]), w @ np.cos(ps.poses[:, 2]))
    bias = None if ps.kf is None else w @ ps.kf.b
    return Pose2(x, y, th), bias
