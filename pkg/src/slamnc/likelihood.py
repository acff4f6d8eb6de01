"""Weight factors for the particle filter.

Factors are unnormalized: the filter renormalizes globally, so Gaussian
normalization constants are dropped. Batch variants return log factors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import InvalidConfig


@dataclass(frozen=True)
class LikelihoodConfig:
    sigma_narrow: float = 10.0  # uT
    sigma_wide: float = 50.0  # uT
    clamp_sigmas: float = 2.0
    gate_narrow: float = 0.25  # m
    gate_wide: float = 2.0  # m
    gate_kf: float = 0.25  # m

    def __post_init__(self):
        if not 0 < self.sigma_narrow < self.sigma_wide:
            raise InvalidConfig("need 0 < sigma_narrow < sigma_wide")
        if min(self.gate_narrow, self.gate_wide, self.gate_kf, self.clamp_sigmas) <= 0:
            raise InvalidConfig("gates and clamp_sigmas must be positive")
        if self.gate_narrow > self.gate_wide:
            raise InvalidConfig("gate_narrow must not exceed gate_wide")


def mf_log_likelihood(y: ArrayLike, closest_dist: ArrayLike, cfg: LikelihoodConfig) -> NDArray:
    """Log of the clamped Gaussian kernel on the residual norm.

    The kernel width follows the distance to the closest map neighbor: narrow
    within ``gate_narrow``, wide within ``gate_wide``, and no information
    (log factor 0) beyond.
    """
    y = np.asarray(y, dtype=float)
    dist = np.asarray(closest_dist, dtype=float)
    sigma = np.where(dist <= cfg.gate_narrow, cfg.sigma_narrow, cfg.sigma_wide)
    informative = dist <= cfg.gate_wide
    norm = np.linalg.norm(np.where(np.isfinite(y), y, 0.0), axis=-1)
    d = np.minimum(norm, cfg.clamp_sigmas * sigma)
    return np.where(informative, -(d**2) / (2.0 * sigma**2), 0.0)


def mf_likelihood(y: ArrayLike, closest_dist: float, cfg: LikelihoodConfig | None = None) -> float:
    """Weight factor in (0, 1] for a single residual ``y`` (uT)."""
    if closest_dist < 0:
        raise ValueError("closest_dist must be non-negative")
    cfg = cfg or LikelihoodConfig()
    return float(np.exp(mf_log_likelihood(y, closest_dist, cfg)))


@dataclass(frozen=True, eq=False)
class FloorPlan:
    """Wall segments ``(x1, y1, x2, y2)`` in meters plus penalty settings."""

    walls: NDArray = field(default_factory=lambda: np.empty((0, 4)))
    near_penalty_factor: float = 0.5
    near_dist: float = 0.2
    cross_penalty_factor: float = 1e-6

    def __post_init__(self):
        walls = np.asarray(self.walls, dtype=float).reshape(-1, 4)
        if np.any(np.hypot(walls[:, 2] - walls[:, 0], walls[:, 3] - walls[:, 1]) == 0):
            raise InvalidConfig("wall segments must have nonzero length")
        for name in ("near_penalty_factor", "cross_penalty_factor"):
            if not 0 < getattr(self, name) <= 1:
                raise InvalidConfig(f"{name} must be in (0, 1]")
        if self.near_dist < 0:
            raise InvalidConfig("near_dist must be non-negative")
        object.__setattr__(self, "walls", walls)

    @classmethod
    def load(cls, path, **kwargs) -> FloorPlan:
        """Read a JSON array of ``[x1, y1, x2, y2]`` segments."""
        with open(path) as fh:
            data = json.load(fh)
        if isinstance(data, dict):
            kwargs = {**{k: v for k, v in data.items() if k != "walls"}, **kwargs}
            data = data["walls"]
        return cls(np.asarray(data, dtype=float), **kwargs)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.walls.tolist(), fh)

    def to_dict(self) -> dict:
        return {
            "walls": self.walls.tolist(),
            "near_penalty_factor": self.near_penalty_factor,
            "near_dist": self.near_dist,
            "cross_penalty_factor": self.cross_penalty_factor,
        }


def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def segments_intersect(p: NDArray, q: NDArray, walls: NDArray) -> NDArray:
    """Whether segments ``p[i] -> q[i]`` touch any wall; ``p``, ``q`` are (n, 2)."""
    p = np.asarray(p, dtype=float)[:, None, :]
    q = np.asarray(q, dtype=float)[:, None, :]
    a = walls[None, :, 0:2]
    b = walls[None, :, 2:4]
    ab, pq = b - a, q - p
    d1 = _cross(ab[..., 0], ab[..., 1], p[..., 0] - a[..., 0], p[..., 1] - a[..., 1])
    d2 = _cross(ab[..., 0], ab[..., 1], q[..., 0] - a[..., 0], q[..., 1] - a[..., 1])
    d3 = _cross(pq[..., 0], pq[..., 1], a[..., 0] - p[..., 0], a[..., 1] - p[..., 1])
    d4 = _cross(pq[..., 0], pq[..., 1], b[..., 0] - p[..., 0], b[..., 1] - p[..., 1])
    hit = (d1 * d2 <= 0) & (d3 * d4 <= 0)
    # collinear pairs pass the sign test even when disjoint; require interval overlap
    collinear = (d1 == 0) & (d2 == 0)
    if np.any(collinear):
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        overlap = np.all((np.maximum(p, q) >= lo) & (np.minimum(p, q) <= hi), axis=-1)
        hit = np.where(collinear, overlap, hit)
    return hit.any(axis=1)


def distance_to_walls(x: NDArray, walls: NDArray) -> NDArray:
    """Distance from each point of ``x`` (n, 2) to the nearest wall."""
    x = np.asarray(x, dtype=float)[:, None, :]
    a = walls[None, :, 0:2]
    ab = walls[None, :, 2:4] - a
    t = np.clip(np.sum((x - a) * ab, axis=-1) / np.sum(ab * ab, axis=-1), 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.min(np.linalg.norm(x - closest, axis=-1), axis=1)


def floorplan_log_likelihood(prev_xy: NDArray, cur_xy: NDArray, plan: FloorPlan) -> NDArray:
    n = len(cur_xy)
    if len(plan.walls) == 0:
        return np.zeros(n)
    out = np.zeros(n)
    near = distance_to_walls(cur_xy, plan.walls) <= plan.near_dist
    out[near] = np.log(plan.near_penalty_factor)
    out[segments_intersect(prev_xy, cur_xy, plan.walls)] = np.log(plan.cross_penalty_factor)
    return out


def floorplan_likelihood(segment: ArrayLike, plan: FloorPlan) -> float:
    """Weight factor for the move ``segment = (x0, y0, x1, y1)``."""
    s = np.asarray(segment, dtype=float).reshape(4)
    return float(np.exp(floorplan_log_likelihood(s[None, :2], s[None, 2:], plan)[0]))
