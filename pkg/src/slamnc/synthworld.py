"""Synthetic worlds: dipole-superposition fields, floor plans, figure-eight walks and biased sensor streams."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import TooCloseToSource
from .frames import Rotation3, planar_rotation_from_gravity, quat_to_matrix, rz_matrix, wrap_angle
from .likelihood import FloorPlan
from .rbpf import MotionInput, MotionNoise
from .slam import StepInput

MU0_4PI_UT = 0.1  # mu0 / 4pi in uT * m^3 / (A m^2)
GRAVITY = 9.81
DEFAULT_EARTH = (18.0, 0.0, -45.0)  # uT; magnetic north along world +x, field pointing down


@dataclass(frozen=True, eq=False)
class FieldModel:
    """Uniform background plus point dipoles (positions in m, moments in A m^2)."""

    earth_field: NDArray = field(default_factory=lambda: np.array(DEFAULT_EARTH))
    dipole_pos: NDArray = field(default_factory=lambda: np.empty((0, 3)))
    dipole_moment: NDArray = field(default_factory=lambda: np.empty((0, 3)))
    clearance: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "earth_field", np.asarray(self.earth_field, dtype=float).reshape(3))
        object.__setattr__(self, "dipole_pos", np.asarray(self.dipole_pos, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "dipole_moment", np.asarray(self.dipole_moment, dtype=float).reshape(-1, 3))
        if len(self.dipole_pos) != len(self.dipole_moment):
            raise ValueError("dipole positions and moments differ in length")

    def to_dict(self) -> dict:
        return {
            "earth_field": self.earth_field.tolist(),
            "dipole_pos": self.dipole_pos.tolist(),
            "dipole_moment": self.dipole_moment.tolist(),
            "clearance": self.clearance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> FieldModel:
        return cls(np.array(d["earth_field"]), np.array(d["dipole_pos"]), np.array(d["dipole_moment"]),
                   d.get("clearance", 0.3))


def field_at(model: FieldModel, pos: ArrayLike) -> NDArray:
    """Field in uT at position(s) ``pos`` of shape (..., 3) or (..., 2) (height 0)."""
    pos = np.asarray(pos, dtype=float)
    if pos.shape[-1] == 2:
        pos = np.concatenate([pos, np.zeros(pos.shape[:-1] + (1,))], axis=-1)
    out = np.broadcast_to(model.earth_field, pos.shape).copy()
    if len(model.dipole_pos) == 0:
        return out
    r = pos[..., None, :] - model.dipole_pos  # (..., D, 3)
    dist = np.linalg.norm(r, axis=-1)
    if np.any(dist < model.clearance):
        raise TooCloseToSource(f"closer than {model.clearance} m to a dipole")
    rhat = r / dist[..., None]
    mdotr = np.sum(model.dipole_moment * rhat, axis=-1)
    b = MU0_4PI_UT * (3.0 * mdotr[..., None] * rhat - model.dipole_moment) / dist[..., None] ** 3
    return out + b.sum(axis=-2)


def _grid(bounds, spacing=0.25) -> NDArray:
    x0, y0, x1, y1 = bounds
    gx, gy = np.meshgrid(np.arange(x0, x1 + 1e-9, spacing), np.arange(y0, y1 + 1e-9, spacing))
    return np.column_stack([gx.ravel(), gy.ravel()])


def make_field(rng: np.random.Generator, bounds, n_dipoles: int = 20, anomaly_std: float = 15.0,
               earth=DEFAULT_EARTH, depth=(1.5, 3.0), tries: int = 20) -> FieldModel:
    """Random dipole field whose anomaly has standard deviation ``anomaly_std`` over ``bounds``.

    Dipoles sit above or below the walking plane at ``depth`` meters. Draws are
    repeated until the magnitude stays within [10, 200] uT on the region.
    """
    x0, y0, x1, y1 = bounds
    grid = _grid(bounds)
    for _ in range(tries):
        pos = np.column_stack([
            rng.uniform(x0 - 1.0, x1 + 1.0, n_dipoles),
            rng.uniform(y0 - 1.0, y1 + 1.0, n_dipoles),
            rng.choice([-1.0, 1.0], n_dipoles) * rng.uniform(*depth, n_dipoles),
        ])
        mom = rng.standard_normal((n_dipoles, 3)) * rng.lognormal(0.0, 0.5, n_dipoles)[:, None]
        if n_dipoles == 0:
            return FieldModel(np.asarray(earth, float), pos, mom, clearance=0.5 * depth[0])
        unit = FieldModel(np.zeros(3), pos, mom, clearance=0.5 * depth[0])
        anom = field_at(unit, grid)
        scale = anomaly_std / math.sqrt(np.mean(np.var(anom, axis=0)))
        model = FieldModel(np.asarray(earth, float), pos, mom * scale, clearance=0.5 * depth[0])
        mag = np.linalg.norm(field_at(model, grid), axis=-1)
        if mag.min() >= 10.0 and mag.max() <= 200.0:
            return model
    raise RuntimeError("could not draw a field within [10, 200] uT")


def field_lipschitz(model: FieldModel, bounds, spacing: float = 0.05) -> float:
    """Largest finite-difference field gradient (uT/m) over a grid on ``bounds``."""
    x0, y0, x1, y1 = bounds
    xs = np.arange(x0, x1 + 1e-9, spacing)
    ys = np.arange(y0, y1 + 1e-9, spacing)
    gx, gy = np.meshgrid(xs, ys)
    b = field_at(model, np.stack([gx, gy], axis=-1))
    dx = np.linalg.norm(np.diff(b, axis=1), axis=-1) / spacing
    dy = np.linalg.norm(np.diff(b, axis=0), axis=-1) / spacing
    return float(max(dx.max(initial=0.0), dy.max(initial=0.0)))


def make_figure_eight(bounds, step: float, margin: float = 0.5, start: float = 0.5 * np.pi) -> NDArray:
    """One closed figure-eight loop sampled about every ``step`` meters of arc length.

    Returns poses ``[x, y, theta]`` with heading tangent to the path. The
    curve is ``(a sin s, b sin 2s)`` around the bounds center, started at
    parameter ``start`` (default: the tip of the right lobe). The crossing is
    passed twice per loop in two different directions. The step is snapped
    so that a quarter loop holds a whole number of steps.
    """
    x0, y0, x1, y1 = bounds
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    a = 0.5 * (x1 - x0) - margin
    b = 0.5 * (y1 - y0) - margin
    if a <= 0 or b <= 0:
        raise ValueError("bounds too small for a figure-eight")
    s = np.linspace(start, start + 2.0 * np.pi, 20001)
    x = cx + a * np.sin(s)
    y = cy + b * np.sin(2.0 * s)
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(x), np.diff(y)))])
    # whole number of steps per quarter loop, so both crossing passes hit it exactly
    n_quarter = max(1, int(round(arc[-1] / (4.0 * step))))
    targets = np.arange(4 * n_quarter) * (arc[-1] / (4 * n_quarter))
    si = np.interp(targets, arc, s)
    px = cx + a * np.sin(si)
    py = cy + b * np.sin(2.0 * si)
    th = np.arctan2(2.0 * b * np.cos(2.0 * si), a * np.cos(si))
    return np.column_stack([px, py, th])


def make_trajectory(bounds, step: float, loops: int = 2, alternate: bool = True, margin: float = 0.5) -> NDArray:
    """Repeated figure-eight loops; with ``alternate`` every second loop is walked backwards.

    Walking back over the same loop makes every corridor carry data in both
    directions.
    """
    one = make_figure_eight(bounds, step, margin)
    closed = np.vstack([one, one[:1]])
    back = closed[::-1].copy()
    back[:, 2] = wrap_angle(back[:, 2] + np.pi)
    parts = [closed]
    for i in range(1, loops):
        nxt = back if (alternate and i % 2 == 1) else closed
        parts.append(nxt[1:])
    return np.vstack(parts)


def figure_eight_plan(bounds, margin: float = 0.5, **kwargs) -> FloorPlan:
    """Outer walls on ``bounds`` and one rectangular block inside each lobe."""
    x0, y0, x1, y1 = bounds
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    a = 0.5 * (x1 - x0) - margin
    b = 0.5 * (y1 - y0) - margin
    walls = [[x0, y0, x1, y0], [x1, y0, x1, y1], [x1, y1, x0, y1], [x0, y1, x0, y0]]
    for sgn in (-1.0, 1.0):
        bx0, bx1 = sorted((cx + sgn * 0.45 * a, cx + sgn * 0.8 * a))
        by0, by1 = cy - 0.3 * b, cy + 0.3 * b
        walls += [[bx0, by0, bx1, by0], [bx1, by0, bx1, by1], [bx1, by1, bx0, by1], [bx0, by1, bx0, by0]]
    return FloorPlan(np.array(walls), **kwargs)


def draw_bias(nominal: ArrayLike, rng: np.random.Generator, spread: float = 0.1) -> NDArray:
    """Scale each component of ``nominal`` by an independent factor in [1 - spread, 1 + spread]."""
    nominal = np.asarray(nominal, dtype=float)
    return nominal * rng.uniform(1.0 - spread, 1.0 + spread, 3)


def wobble_rotation(t: float, amplitude_deg: float = 10.0, period: float = 30.0,
                    hold_pitch_deg: float = 0.0) -> Rotation3:
    """Sensor-to-planar rotation of a hand-held phone slowly pitching and rolling.

    ``hold_pitch_deg`` is the mean pitch at which the phone is held.
    """
    amp = math.radians(amplitude_deg)
    pitch = math.radians(hold_pitch_deg) + amp * math.sin(2.0 * math.pi * t / period)
    roll = amp * math.sin(2.0 * math.pi * t / period + math.pi / 3.0)
    tilt = Rotation3.from_axis_angle([0, 1, 0], pitch).compose(Rotation3.from_axis_angle([1, 0, 0], roll))
    # gravity as the accelerometer sees it; the levelling rotation is the minimal one
    g_sensor = tilt.inverse().apply([0.0, 0.0, GRAVITY])
    return planar_rotation_from_gravity(g_sensor)


@dataclass(eq=False)
class Scenario:
    field: FieldModel
    plan: FloorPlan
    trajectory: NDArray  # (m, 3) ground-truth poses
    injected_bias: NDArray  # drawn bias actually added to the readings, uT
    noise_mag: float = 0.5  # uT
    noise_odom: MotionNoise = field(default_factory=lambda: MotionNoise(0.02, 0.002, 0.01))
    seed: int = 0
    speed: float = 0.5  # m/s
    phone: bool = False
    bounds: tuple = (0.0, 0.0, 10.0, 6.0)
    step: float = 0.1
    nominal_bias: NDArray | None = None
    hold_pitch: float = 0.0  # deg, mean pitch of a hand-held phone

    def __post_init__(self):
        self.trajectory = np.asarray(self.trajectory, dtype=float)
        self.injected_bias = np.asarray(self.injected_bias, dtype=float).reshape(3)
        if self.nominal_bias is not None:
            self.nominal_bias = np.asarray(self.nominal_bias, dtype=float).reshape(3)

    @property
    def initial_pose(self) -> tuple[float, float, float]:
        return tuple(float(v) for v in self.trajectory[0])

    @property
    def times(self) -> NDArray:
        """Timestamps of trajectory poses (constant walking speed)."""
        seg = np.hypot(*np.diff(self.trajectory[:, :2], axis=0).T)
        seg = np.maximum(seg, 1e-3)
        return np.concatenate([[0.0], np.cumsum(seg / self.speed)])

    def lipschitz(self) -> float:
        return field_lipschitz(self.field, self.bounds)

    def to_dict(self) -> dict:
        return {
            "field": self.field.to_dict(),
            "plan": self.plan.to_dict(),
            "trajectory": self.trajectory.tolist(),
            "injected_bias": self.injected_bias.tolist(),
            "nominal_bias": None if self.nominal_bias is None else self.nominal_bias.tolist(),
            "noise_mag": self.noise_mag,
            "noise_odom": [self.noise_odom.sigma_trans, self.noise_odom.sigma_theta, self.noise_odom.sigma_drift],
            "seed": self.seed,
            "speed": self.speed,
            "phone": self.phone,
            "bounds": list(self.bounds),
            "step": self.step,
            "hold_pitch": self.hold_pitch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Scenario:
        plan = d["plan"]
        return cls(
            field=FieldModel.from_dict(d["field"]),
            plan=FloorPlan(np.array(plan["walls"]), plan["near_penalty_factor"], plan["near_dist"],
                           plan["cross_penalty_factor"]),
            trajectory=np.array(d["trajectory"]),
            injected_bias=np.array(d["injected_bias"]),
            nominal_bias=None if d.get("nominal_bias") is None else np.array(d["nominal_bias"]),
            noise_mag=d["noise_mag"],
            noise_odom=MotionNoise(*d["noise_odom"]),
            seed=d["seed"],
            speed=d["speed"],
            phone=d["phone"],
            bounds=tuple(d["bounds"]),
            step=d["step"],
            hold_pitch=d.get("hold_pitch", 0.0),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> Scenario:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def make_scenario(seed: int = 0, bias=(0.0, 0.0, 0.0), kind: str = "robot", bounds=(0.0, 0.0, 10.0, 6.0),
                  loops: int = 2, step: float | None = None, n_dipoles: int = 20, anomaly_std: float = 15.0,
                  noise_mag: float = 0.5, noise_odom: MotionNoise | None = None, bias_spread: float = 0.1,
                  hold_pitch: float = 0.0) -> Scenario:
    """Figure-eight scenario.

    ``kind="robot"`` keeps the sensor level and walks at 0.5 m/s with 0.1 m
    steps; ``kind="phone"`` holds the sensor pitched by ``hold_pitch``
    degrees with a pitch/roll wobble, at 1.2 m/s and 0.2 m steps. ``bias``
    is the nominal bias; each component is scaled by a uniform factor in
    ``1 +- bias_spread``.
    """
    if kind not in ("robot", "phone"):
        raise ValueError(f"unknown scenario kind {kind!r}")
    rng = np.random.default_rng(seed)
    phone = kind == "phone"
    step = step or (0.2 if phone else 0.1)
    if noise_odom is None:
        noise_odom = MotionNoise(0.05, 0.005, 0.02) if phone else MotionNoise(0.02, 0.002, 0.01)
    fm = make_field(rng, bounds, n_dipoles=n_dipoles, anomaly_std=anomaly_std)
    nominal = np.asarray(bias, dtype=float)
    return Scenario(
        field=fm,
        plan=figure_eight_plan(bounds),
        trajectory=make_trajectory(bounds, step, loops=loops),
        injected_bias=draw_bias(nominal, rng, bias_spread),
        nominal_bias=nominal,
        noise_mag=noise_mag,
        noise_odom=noise_odom,
        seed=seed,
        speed=1.2 if phone else 0.5,
        phone=phone,
        bounds=tuple(bounds),
        step=step,
        hold_pitch=hold_pitch if phone else 0.0,
    )


@dataclass
class GroundTruth:
    t: NDArray  # (m,)
    poses: NDArray  # (m, 3)
    field_world: NDArray  # (m, 3) true world-frame field
    z_clean: NDArray  # (m, 3) sensor-frame field without bias or noise
    r_sp: list[Rotation3]
    bias: NDArray


def sense(scenario: Scenario, include_first: bool = False) -> tuple[list[StepInput], GroundTruth]:
    """Sensor stream along the scenario trajectory.

    Each pose after the first yields one step whose odometry is the true
    relative motion corrupted by ``noise_odom``; readings are the true field
    rotated into the sensor frame, plus the injected bias and white noise.
    With ``include_first`` the initial pose also yields a step with zero
    motion.
    """
    rng = np.random.default_rng([scenario.seed, 1])
    traj = scenario.trajectory
    times = scenario.times
    m = len(traj)
    fw = field_at(scenario.field, traj[:, :2])
    r_sp = [wobble_rotation(t, hold_pitch_deg=scenario.hold_pitch) if scenario.phone else Rotation3.identity()
            for t in times]
    rsp_mat = np.array([r.as_matrix() for r in r_sp])
    r_sw = rz_matrix(traj[:, 2]) @ rsp_mat
    z_clean = np.einsum("mji,mj->mi", r_sw, fw)  # r_sw^T applied per pose
    noise = rng.standard_normal((m, 3)) * scenario.noise_mag
    z = z_clean + scenario.injected_bias + noise

    no = scenario.noise_odom
    steps = []
    first = 0 if include_first else 1
    for i in range(first, m):
        if i == 0:
            u = MotionInput(0.0, 0.0, 0.0, 1e-3)
            t = 1e-3
        else:
            a, b = traj[i - 1], traj[i]
            c, s = math.cos(a[2]), math.sin(a[2])
            dxw, dyw = b[0] - a[0], b[1] - a[1]
            dx, dy = c * dxw + s * dyw, -s * dxw + c * dyw
            dth = wrap_angle(b[2] - a[2])
            length = math.hypot(dx, dy)
            e = rng.standard_normal(3)
            u = MotionInput(dx + e[0] * no.sigma_trans * length, dy + e[1] * no.sigma_trans * length,
                            dth + e[2] * (no.sigma_theta + no.sigma_drift * length), times[i] - times[i - 1])
            t = times[i]
        steps.append(StepInput(u, z[i], r_sp[i], float(t)))
    gt = GroundTruth(times[first:], traj[first:], fw[first:], z_clean[first:], r_sp[first:],
                     scenario.injected_bias.copy())
    return steps, gt


def accel_from_rsp(r_sp: Rotation3) -> NDArray:
    """Accelerometer reading of a static sensor with sensor-to-planar rotation ``r_sp``."""
    return r_sp.inverse().apply([0.0, 0.0, GRAVITY])


def ground_truth_steps(steps: list[StepInput], gt: GroundTruth, initial_pose) -> list[StepInput]:
    """Replace the odometry of ``steps`` with exact relative motion along ``gt.poses``."""
    out = []
    prev = np.asarray(initial_pose, dtype=float)
    for s, pose in zip(steps, gt.poses):
        c, sn = math.cos(prev[2]), math.sin(prev[2])
        dxw, dyw = pose[0] - prev[0], pose[1] - prev[1]
        u = MotionInput(c * dxw + sn * dyw, -sn * dxw + c * dyw, wrap_angle(pose[2] - prev[2]), s.u.dt)
        out.append(StepInput(u, s.z, s.r_sp, s.t))
        prev = pose
    return out
