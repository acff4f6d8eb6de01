"""Simultaneous localization, mapping and bias calibration.

Each particle carries a trajectory-conditioned field map and a bias Kalman
filter. One ``step`` runs, for every particle: motion sampling, the
neighborhood query at the predicted pose, the gated bias update from the map
residual, the gated field and floor-plan weighting, and the map insertion;
then weights are normalized and the set is resampled when needed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .bias_kf import KfConfig, kf_new, kf_update
from .errors import AllZeroWeights, Divergence, InputOrder, InvalidConfig
from .frames import Pose2, Rotation3, lowpass_accel, planar_rotation_from_gravity
from .likelihood import FloorPlan, LikelihoodConfig, floorplan_log_likelihood, mf_log_likelihood
from .mfmap import MfMap, ParticleMaps
from .rbpf import (
    MotionInput,
    MotionNoise,
    ParticleSet,
    estimate,
    predict,
    resample_if_needed,
    weight_update,
    weighted_bias_stats,
)


@dataclass(frozen=True, eq=False)
class SlamncConfig:
    n_particles: int = 5000
    kf: KfConfig = field(default_factory=KfConfig)
    lik: LikelihoodConfig = field(default_factory=LikelihoodConfig)
    noise: MotionNoise = field(default_factory=MotionNoise)
    k_neighbors: int = 3
    t_excl: float = 5.0  # s
    ess_fraction: float = 0.5
    seed: int = 0
    floor_plan: FloorPlan | None = None
    calibration_enabled: bool = True
    fixed_bias: NDArray | None = None
    initial_pose: tuple[float, float, float] = (0.0, 0.0, 0.0)
    map_mode: str = "cow"
    cell_size: float = 1.0  # m

    def __post_init__(self):
        if self.n_particles < 1:
            raise InvalidConfig("n_particles must be >= 1")
        if self.t_excl < 0:
            raise InvalidConfig("t_excl must be >= 0")
        if self.k_neighbors < 1:
            raise InvalidConfig("k_neighbors must be >= 1")
        if not 0 < self.ess_fraction <= 1:
            raise InvalidConfig("ess_fraction must be in (0, 1]")
        if self.fixed_bias is not None:
            object.__setattr__(self, "fixed_bias", np.asarray(self.fixed_bias, dtype=float).reshape(3))

    @property
    def r_max(self) -> float:
        return self.lik.gate_wide

    def with_(self, **changes) -> SlamncConfig:
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class StepInput:
    u: MotionInput
    z: NDArray  # raw magnetometer, uT
    r_sp: Rotation3
    t: float

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float).reshape(3))


@dataclass
class StepReport:
    t: float
    pose: Pose2
    bias_mean: NDArray
    bias_std: NDArray
    ess: float
    n_kf_updated: int


class SlamState:
    """Particle set plus the random stream and step bookkeeping of one run."""

    def __init__(self, cfg: SlamncConfig):
        self.cfg = cfg
        self.rng = np.random.Generator(np.random.Philox(cfg.seed))
        n = cfg.n_particles
        kf = kf_new(cfg.kf, n)
        if not cfg.calibration_enabled:
            fixed = np.zeros(3) if cfg.fixed_bias is None else cfg.fixed_bias
            kf.b[:] = fixed
            kf.updated[:] = True
        maps = ParticleMaps(n, mode=cfg.map_mode, cell_size=cfg.cell_size)
        self.particles = ParticleSet.at_pose(n, cfg.initial_pose, kf=kf, maps=maps)
        self.t_last = -math.inf
        self.n_steps = 0
        self.kf_update_count = np.zeros(n, dtype=np.int64)
        self.best_index = 0

    @property
    def maps(self) -> ParticleMaps:
        return self.particles.maps


def step(state: SlamState, inp: StepInput, instrument: dict | None = None) -> StepReport:
    """Advance ``state`` by one measurement; returns the step summary.

    ``instrument``, when given, receives per-particle diagnostics of this
    step (closest neighbor distance, KF-update and weighting masks).
    """
    cfg = state.cfg
    if not inp.t > state.t_last:
        raise InputOrder(f"step time {inp.t} does not follow {state.t_last}")
    ps = state.particles
    lik = cfg.lik

    predict(ps, inp.u, cfg.noise, state.rng)
    xy = ps.poses[:, :2]
    nb = ps.maps.neighborhoods(xy, inp.t, k=cfg.k_neighbors, t_excl=cfg.t_excl, r_max=cfg.r_max)
    has_nb = nb.count > 0
    closest = nb.closest

    # residual against the previous bias and previous map
    b_prev = ps.kf.b
    y = np.full((len(ps), 3), np.nan)
    if np.any(has_nb):
        rsp_now = inp.r_sp.as_matrix()
        m = ps.maps.estimate_sensor(nb, b_prev, ps.poses[:, 2], rsp_now)
        y[has_nb] = (inp.z - b_prev[has_nb]) - m[has_nb]

    kf_mask = np.zeros(len(ps), dtype=bool)
    if cfg.calibration_enabled:
        kf_mask = has_nb & (closest <= lik.gate_kf)
        if np.any(kf_mask):
            ps.kf = kf_update(ps.kf, y, cfg.kf, mask=kf_mask)
            state.kf_update_count += kf_mask

    weighted = has_nb & np.asarray(ps.kf.updated, dtype=bool)
    log_f = np.zeros(len(ps))
    if np.any(weighted):
        log_f[weighted] = mf_log_likelihood(y[weighted], closest[weighted], lik)
    if cfg.floor_plan is not None:
        log_f += floorplan_log_likelihood(ps.prev_xy, xy, cfg.floor_plan)

    ps.maps.append(inp.t, inp.z, inp.r_sp, ps.poses)

    try:
        weight_update(ps, log_factors=log_f)
    except AllZeroWeights as exc:
        raise Divergence(f"all particle weights vanished at t={inp.t}", t=inp.t) from exc

    pose, _ = estimate(ps)
    bias_mean, bias_std = weighted_bias_stats(ps)
    report = StepReport(
        t=inp.t,
        pose=pose,
        bias_mean=bias_mean,
        bias_std=bias_std,
        ess=ps.ess,
        n_kf_updated=int(np.count_nonzero(ps.kf.updated)),
    )
    if instrument is not None:
        instrument.update(closest=closest.copy(), kf_mask=kf_mask, weighted=weighted, log_factors=log_f,
                          residual=y)

    best = int(np.argmax(ps.log_w))
    resample_if_needed(ps, cfg.ess_fraction, state.rng)
    if ps.ancestors is not None:
        best = int(np.flatnonzero(ps.ancestors == best)[0])
        state.kf_update_count = state.kf_update_count[ps.ancestors]
    state.best_index = best
    state.t_last = inp.t
    state.n_steps += 1
    return report


@dataclass
class RunResult:
    state: SlamState
    reports: list[StepReport]
    best_map: MfMap
    best_bias: NDArray
    runtime_s: float

    @property
    def particles(self) -> ParticleSet:
        return self.state.particles

    @property
    def final_bias(self) -> NDArray:
        return self.reports[-1].bias_mean


def run(stream: Sequence[StepInput] | Iterable[StepInput], cfg: SlamncConfig) -> RunResult:
    """Fold ``step`` over ``stream`` and return the final state and the best particle's map."""
    t0 = time.perf_counter()
    state = SlamState(cfg)
    reports = []
    for inp in stream:
        try:
            reports.append(step(state, inp, None))
        except Exception as exc:
            if not isinstance(exc, Divergence):
                exc.args = (f"at t={inp.t}: {exc}",) + exc.args[1:]
            raise
    if not reports:
        raise ValueError("empty input stream")
    i = state.best_index
    best_map = state.maps.extract(i)
    return RunResult(state, reports, best_map, state.particles.kf.b[i].copy(), time.perf_counter() - t0)


@dataclass(frozen=True)
class RawSample:
    """One logged sample: body-frame odometry/PDR increment, raw field, acceleration."""

    t: float
    dx: float
    dy: float
    dtheta: float
    mag: tuple[float, float, float]
    accel: tuple[float, float, float]


def downsample(samples: Sequence[RawSample], step_length: float, lowpass_window: float = 0.5,
               eps: float = 1e-9) -> list[StepInput]:
    """Spatially downsample raw samples into steps of ``step_length`` meters of travel.

    Increments are composed in the body frame of the previous emission; each
    emitted step carries the latest field sample and the sensor-to-planar
    rotation from low-passed acceleration.
    """
    if not step_length > 0:
        raise ValueError("step_length must be positive")
    if not samples:
        return []
    t = np.array([s.t for s in samples])
    acc = lowpass_accel(t, np.array([s.accel for s in samples]), lowpass_window)
    out = []
    X = Y = TH = 0.0
    travel = 0.0
    t_prev = samples[0].t
    for s, a in zip(samples, acc):
        c, sn = math.cos(TH), math.sin(TH)
        X += c * s.dx - sn * s.dy
        Y += sn * s.dx + c * s.dy
        TH += s.dtheta
        travel += math.hypot(s.dx, s.dy)
        if travel + eps >= step_length:
            dt = s.t - t_prev if s.t > t_prev else 1e-3
            out.append(StepInput(MotionInput(X, Y, TH, dt), np.array(s.mag), planar_rotation_from_gravity(a), s.t))
            X = Y = TH = 0.0
            travel = 0.0
            t_prev = s.t
    return out


def passthrough(samples: Sequence[RawSample], lowpass_window: float = 0.5) -> list[StepInput]:
    """One step per raw sample, for streams that are already spatially sampled."""
    if not samples:
        return []
    t = np.array([s.t for s in samples])
    acc = lowpass_accel(t, np.array([s.accel for s in samples]), lowpass_window)
    out = []
    t_prev = None
    for s, a in zip(samples, acc):
        dt = s.t - t_prev if t_prev is not None else (s.t if s.t > 0 else 1e-3)
        out.append(StepInput(MotionInput(s.dx, s.dy, s.dtheta, dt), np.array(s.mag),
                             planar_rotation_from_gravity(a), s.t))
        t_prev = s.t
    return out
