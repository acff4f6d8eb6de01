"""Rotation and planar pose algebra for the sensor, planar and world frames.

Frames
------
sensor
    Device axes; raw magnetometer and accelerometer readings live here.
planar
    Sensor frame with pitch and roll removed (gravity along +z, yaw-free).
world
    Planar frame rotated by the heading ``theta`` about +z.

Quaternions are stored as ``[w, x, y, z]`` (Hamilton convention) and are
active: ``r.apply(v)`` rotates the vector ``v``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DegenerateGravity

GRAVITY_MIN = 0.5  # m/s^2


def wrap_angle(theta):
    """Wrap angle(s) to the half-open interval (-pi, pi]."""
    w = np.pi - np.mod(np.pi - np.asarray(theta, dtype=float), 2.0 * np.pi)
    if np.ndim(w) == 0:
        return float(w)
    return w


def quat_multiply(p: NDArray, q: NDArray) -> NDArray:
    """Hamilton product ``p * q`` over the last axis."""
    pw, px, py, pz = np.moveaxis(np.asarray(p, dtype=float), -1, 0)
    qw, qx, qy, qz = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    return np.stack(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ],
        axis=-1,
    )


def quat_to_matrix(q: ArrayLike) -> NDArray:
    """Rotation matrices for (..., 4) quaternions; result has shape (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def rz_matrix(theta: ArrayLike) -> NDArray:
    """Yaw rotation matrices, shape (..., 3, 3)."""
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    m = np.zeros(theta.shape + (3, 3))
    m[..., 0, 0] = c
    m[..., 0, 1] = -s
    m[..., 1, 0] = s
    m[..., 1, 1] = c
    m[..., 2, 2] = 1.0
    return m


def _canonical(q: NDArray) -> NDArray:
    q = q / np.linalg.norm(q)
    # q and -q are the same rotation; keep w >= 0 so equal rotations compare equal
    if q[0] < 0:
        q = -q
    return q


@dataclass(frozen=True, eq=False)
class Rotation3:
    """A 3D rotation backed by a unit quaternion ``[w, x, y, z]``."""

    q: NDArray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        if not np.all(np.isfinite(q)) or np.linalg.norm(q) == 0:
            raise ValueError(f"invalid quaternion {q}")
        object.__setattr__(self, "q", _canonical(q))

    @classmethod
    def identity(cls) -> Rotation3:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_axis_angle(cls, axis: ArrayLike, angle: float) -> Rotation3:
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle
        return cls(np.r_[np.cos(half), np.sin(half) * axis])

    @classmethod
    def about_z(cls, theta: float) -> Rotation3:
        half = 0.5 * theta
        return cls(np.array([np.cos(half), 0.0, 0.0, np.sin(half)]))

    @classmethod
    def from_matrix(cls, m: ArrayLike) -> Rotation3:
        m = np.asarray(m, dtype=float)
        tr = np.trace(m)
        # Shepperd's method: branch on the largest diagonal term for stability
        if tr > 0:
            s = 2.0 * np.sqrt(1.0 + tr)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        return cls(np.array(q))

    def as_matrix(self) -> NDArray:
        return quat_to_matrix(self.q)

    def inverse(self) -> Rotation3:
        w, x, y, z = self.q
        return Rotation3(np.array([w, -x, -y, -z]))

    def compose(self, other: Rotation3) -> Rotation3:
        """Rotation applying ``other`` first, then ``self``."""
        return Rotation3(quat_multiply(self.q, other.q))

    __matmul__ = compose

    def apply(self, v: ArrayLike) -> NDArray:
        """Rotate vector(s) of shape (..., 3)."""
        v = np.asarray(v, dtype=float)
        return v @ self.as_matrix().T

    def allclose(self, other: Rotation3, atol: float = 1e-12) -> bool:
        return bool(np.allclose(self.q, other.q, atol=atol, rtol=0.0))

    def __repr__(self):
        w, x, y, z = self.q
        return f"Rotation3(w={w:.6g}, x={x:.6g}, y={y:.6g}, z={z:.6g})"


def rotate(r: Rotation3, v: ArrayLike) -> NDArray:
    return r.apply(v)


@dataclass(frozen=True)
class Pose2:
    """Planar pose; ``theta`` is kept wrapped to (-pi, pi]."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def xy(self) -> NDArray:
        return np.array([self.x, self.y])

    def as_array(self) -> NDArray:
        return np.array([self.x, self.y, self.theta])


def planar_rotation_from_gravity(accel: ArrayLike) -> Rotation3:
    """Sensor-to-planar rotation that levels a gravity-dominated accelerometer sample.

    Returns the minimal rotation taking ``accel`` onto +z, so the result has
    no yaw component beyond what tilt removal requires; heading is supplied
    separately.

    Raises
    ------
    DegenerateGravity
        If ``|accel| <= 0.5`` m/s^2.
    """
    a = np.asarray(accel, dtype=float).reshape(3)
    n = np.linalg.norm(a)
    if not np.isfinite(n) or n <= GRAVITY_MIN:
        raise DegenerateGravity(f"|accel| = {n:.3g} m/s^2 is not gravity dominated")
    a = a / n
    d = a[2]
    if d < -1.0 + 1e-12:
        return Rotation3(np.array([0.0, 1.0, 0.0, 0.0]))
    # half-way quaternion between a and +z: axis a x ez, angle acos(d)
    return Rotation3(np.array([1.0 + d, a[1], -a[0], 0.0]))


def sensor_to_world(r_sp: Rotation3, theta: float) -> Rotation3:
    """``Rz(theta)`` applied after the sensor-to-planar rotation ``r_sp``."""
    if theta == 0:
        return r_sp
    return Rotation3.about_z(theta).compose(r_sp)


def lowpass_accel(t: ArrayLike, accel: ArrayLike, window: float) -> NDArray:
    """Trailing moving average of accelerometer samples over ``window`` seconds.

    ``window <= 0`` returns the input unchanged.
    """
    t = np.asarray(t, dtype=float)
    accel = np.asarray(accel, dtype=float)
    if window <= 0 or len(t) == 0:
        return accel.copy()
    csum = np.vstack([np.zeros((1, 3)), np.cumsum(accel, axis=0)])
    start = np.searchsorted(t, t - window, side="left")
    stop = np.arange(1, len(t) + 1)
    return (csum[stop] - csum[start]) / (stop - start)[:, None]
