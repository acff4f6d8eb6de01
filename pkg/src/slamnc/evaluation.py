"""Map-consistency and calibration metrics.

``nne`` measures how well revisits of the same place agree once the
readings are bias-corrected and rotated to the world frame.
``compass_headings`` checks that the corrected horizontal field points the
same way everywhere. ``sphere_fit`` is the classic rotation-based
calibration used as a reference bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DegenerateGeometry, DegenerateHorizontalField, InvalidConfig
from .frames import quat_to_matrix, rz_matrix, wrap_angle
from .mfmap import MfMap

_BLOCK = 512


@dataclass(frozen=True)
class NneConfig:
    t_min: float = 5.0  # s, minimum time separation of a pair
    r_max: float = 7.0  # m, pairs at or beyond this distance are skipped

    def __post_init__(self):
        if self.t_min < 0:
            raise InvalidConfig("t_min must be >= 0")
        if not self.r_max > 0:
            raise InvalidConfig("r_max must be > 0")


@dataclass(frozen=True)
class NneResult:
    median: float | None  # uT, None when no point is eligible
    n_eligible: int
    errors: NDArray  # per eligible point, uT
    neighbor: NDArray  # index of the matched point, -1 where ineligible


@dataclass(frozen=True)
class CompassReport:
    headings: NDArray  # rad
    cauchy_location: float  # rad
    cauchy_scale: float  # rad


def world_fields(m: MfMap, bias: ArrayLike) -> NDArray:
    """Bias-corrected world-frame field of every map point, shape (n, 3)."""
    a = m.arrays()
    b = np.asarray(bias, dtype=float).reshape(3)
    r_sw = rz_matrix(a["pose"][:, 2]) @ quat_to_matrix(a["q"])
    return np.einsum("nij,nj->ni", r_sw, a["z"] - b)


def nearest_eligible(xy: NDArray, t: NDArray, cfg: NneConfig) -> tuple[NDArray, NDArray]:
    """Index of and distance to each point's nearest partner at least ``t_min`` apart in time.

    Ties go to the lowest index; ``-1`` / ``inf`` where no partner exists.
    """
    n = len(xy)
    idx = np.full(n, -1, dtype=np.intp)
    dist = np.full(n, np.inf)
    for lo in range(0, n, _BLOCK):
        hi = min(lo + _BLOCK, n)
        d = np.hypot(xy[lo:hi, None, 0] - xy[None, :, 0], xy[lo:hi, None, 1] - xy[None, :, 1])
        d[np.abs(t[lo:hi, None] - t[None, :]) < cfg.t_min] = np.inf
        d[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        j = np.argmin(d, axis=1)
        dj = d[np.arange(hi - lo), j]
        ok = np.isfinite(dj)
        idx[lo:hi] = np.where(ok, j, -1)
        dist[lo:hi] = dj
    return idx, dist


def nne_details(m: MfMap, bias: ArrayLike, cfg: NneConfig | None = None) -> NneResult:
    """Nearest neighbor error with the per-point breakdown."""
    cfg = cfg or NneConfig()
    if len(m) == 0:
        raise ValueError("map is empty")
    a = m.arrays()
    j, d = nearest_eligible(a["pose"][:, :2], a["t"], cfg)
    eligible = (j >= 0) & (d < cfg.r_max)
    w = world_fields(m, bias)
    err = np.linalg.norm(w[eligible] - w[j[eligible]], axis=1)
    median = float(np.median(err)) if len(err) else None
    return NneResult(median, int(eligible.sum()), err, np.where(eligible, j, -1))


def nne(m: MfMap, bias: ArrayLike, cfg: NneConfig | None = None) -> float | None:
    """Median norm of world-field differences between temporally separated nearest neighbors.

    Returns ``None`` when no point has an eligible partner.
    """
    return nne_details(m, bias, cfg).median


def cauchy_fit(angles: ArrayLike) -> tuple[float, float]:
    """Location (median) and scale (half the interquartile range) of a set of angles.

    Angles are unwrapped around their circular mean first so that a cluster
    straddling +-pi is not split.
    """
    h = np.asarray(angles, dtype=float)
    if h.size == 0:
        raise ValueError("no angles to fit")
    center = np.arctan2(np.mean(np.sin(h)), np.mean(np.cos(h)))
    rel = wrap_angle(h - center)
    q25, q50, q75 = np.percentile(rel, [25, 50, 75], method="weibull")
    return float(wrap_angle(center + q50)), float(0.5 * (q75 - q25))


def compass_headings(m: MfMap, bias: ArrayLike, declared_north: float = 0.0) -> CompassReport:
    """Horizontal heading of the corrected world-frame field at every map point."""
    if len(m) == 0:
        raise ValueError("map is empty")
    w = world_fields(m, bias)
    horiz = np.hypot(w[:, 0], w[:, 1])
    if np.median(horiz) < 1.0:
        raise DegenerateHorizontalField(f"median horizontal field {np.median(horiz):.3g} uT is below 1 uT")
    headings = wrap_angle(np.arctan2(w[:, 1], w[:, 0]) - declared_north)
    loc, scale = cauchy_fit(headings)
    return CompassReport(np.asarray(headings), loc, scale)


def sphere_fit(points: ArrayLike) -> tuple[NDArray, float]:
    """Algebraic least-squares sphere through ``points``; returns ``(center, radius)``.

    Solves ``2 p.c + k = |p|^2`` with ``k = r^2 - |c|^2`` on mean-centered
    data for conditioning.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(p) < 4:
        raise DegenerateGeometry("need at least 4 points")
    mu = p.mean(axis=0)
    q = p - mu
    a = np.column_stack([2.0 * q, np.ones(len(q))])
    rhs = np.sum(q * q, axis=1)
    sol, _, rank, sv = np.linalg.lstsq(a, rhs, rcond=None)
    if rank < 4 or sv[-1] <= 1e-10 * sv[0]:
        raise DegenerateGeometry("points are coplanar or collinear")
    c = sol[:3]
    r2 = sol[3] + c @ c
    if not r2 > 0:
        raise DegenerateGeometry("fitted radius is not real")
    return c + mu, float(np.sqrt(r2))


def sphere_fit_rms(points: ArrayLike, center: ArrayLike, radius: float) -> float:
    """RMS radial residual of ``points`` about a fitted sphere."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    res = np.linalg.norm(p - np.asarray(center, dtype=float), axis=1) - radius
    return float(np.sqrt(np.mean(res**2)))
