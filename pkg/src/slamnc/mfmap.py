"""Magnetic-field maps built from a particle's own trajectory.

Two storage layouts live here:

``MfMap``
    A single map. Points sit in append-only segments; ``fork()`` shares every
    existing segment with the child (copy-on-write tails) and ``copy()`` makes
    a flat deep copy. A uniform grid hash accelerates neighborhood queries.

``ParticleMaps``
    The maps of a whole particle set, stored column-wise so neighborhood
    queries and map estimates run vectorized over particles. Measurements,
    orientations and timestamps are common to all particles at a step; only
    the poses differ. In ``"cow"`` mode each step's poses are written once and
    particles reach their ancestors' poses through a per-epoch ancestry table
    (an epoch ends at each resampling). In ``"full"`` mode every particle owns
    a trajectory array that is copied on resampling.
"""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import EmptyNeighborhood, InvalidDataPoint, NonMonotonicTime
from .frames import Rotation3, quat_to_matrix, sensor_to_world

Z_LIMIT = 5000.0  # uT, per component sanity bound
MAP_CSV_COLUMNS = ["t", "x", "y", "theta", "zx", "zy", "zz", "qw", "qx", "qy", "qz"]


@dataclass(frozen=True, eq=False)
class DataPoint:
    """One map entry: raw sensor-frame field, planar pose, sensor-to-planar rotation, time."""

    z: NDArray
    x: float
    y: float
    theta: float
    r_sp: Rotation3
    t: float

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).reshape(3)
        if not np.all(np.isfinite(z)) or np.any(np.abs(z) > Z_LIMIT):
            raise InvalidDataPoint(f"field sample {z} outside +-{Z_LIMIT} uT")
        if not (math.isfinite(self.t) and self.t >= 0):
            raise InvalidDataPoint(f"timestamp {self.t} must be finite and non-negative")
        if not all(math.isfinite(v) for v in (self.x, self.y, self.theta)):
            raise InvalidDataPoint("pose must be finite")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "t", float(self.t))

    @property
    def pos(self) -> NDArray:
        return np.array([self.x, self.y])

    def r_sw(self) -> Rotation3:
        return sensor_to_world(self.r_sp, self.theta)

    def world_field(self, b: ArrayLike) -> NDArray:
        """Bias-corrected field rotated to the world frame."""
        return self.r_sw().apply(self.z - np.asarray(b, dtype=float))


@dataclass
class Neighborhood:
    points: list[DataPoint] = field(default_factory=list)
    closest_dist: float = math.inf
    distances: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.points)

    @property
    def empty(self) -> bool:
        return not self.points


def _cell(x: float, y: float, size: float) -> tuple[int, int]:
    return (math.floor(x / size), math.floor(y / size))


class _Segment:
    """Append-only columnar storage with its own grid hash."""

    def __init__(self, cell_size: float, capacity: int = 64):
        self.cell_size = cell_size
        self.n = 0
        self.t = np.empty(capacity)
        self.pose = np.empty((capacity, 3))
        self.z = np.empty((capacity, 3))
        self.q = np.empty((capacity, 4))
        self.grid: dict[tuple[int, int], list[int]] = {}

    def _grow(self):
        cap = 2 * len(self.t)
        for name in ("t", "pose", "z", "q"):
            old = getattr(self, name)
            new = np.empty((cap,) + old.shape[1:])
            new[: self.n] = old[: self.n]
            setattr(self, name, new)

    def append(self, d: DataPoint):
        if self.n == len(self.t):
            self._grow()
        i = self.n
        self.t[i] = d.t
        self.pose[i] = (d.x, d.y, d.theta)
        self.z[i] = d.z
        self.q[i] = d.r_sp.q
        self.grid.setdefault(_cell(d.x, d.y, self.cell_size), []).append(i)
        self.n += 1

    def point(self, i: int) -> DataPoint:
        x, y, th = self.pose[i]
        return DataPoint(self.z[i].copy(), x, y, th, Rotation3(self.q[i]), self.t[i])


class MfMap:
    """A particle's magnetic-field map.

    Parameters
    ----------
    cell_size: float
        Grid-hash cell edge in meters.
    """

    # fork chains longer than this are flattened into one segment
    MAX_CHUNKS = 16

    def __init__(self, cell_size: float = 1.0):
        self.cell_size = float(cell_size)
        self._tail = _Segment(self.cell_size)
        # frozen prefixes shared with other maps: (segment, visible length)
        self._shared: list[tuple[_Segment, int]] = []
        self._last_t = -math.inf

    def _chunks(self) -> list[tuple[_Segment, int]]:
        return self._shared + [(self._tail, self._tail.n)]

    def __len__(self):
        return sum(n for _, n in self._shared) + self._tail.n

    @property
    def last_t(self) -> float:
        return self._last_t

    def insert(self, d: DataPoint) -> MfMap:
        """Append ``d``; timestamps must be non-decreasing."""
        if d.t < self._last_t:
            raise NonMonotonicTime(f"t={d.t} earlier than last inserted t={self._last_t}")
        self._tail.append(d)
        self._last_t = d.t
        return self

    def fork(self) -> MfMap:
        """Copy sharing all current points; later inserts on either side stay private."""
        child = MfMap.__new__(MfMap)
        child.cell_size = self.cell_size
        child._shared = [c for c in self._chunks() if c[1] > 0]
        child._tail = _Segment(self.cell_size)
        child._last_t = self._last_t
        if len(child._shared) > self.MAX_CHUNKS:
            child._flatten()
        return child

    def copy(self) -> MfMap:
        """Deep copy with no shared storage."""
        out = MfMap(self.cell_size)
        for d in self:
            out._tail.append(d)
        out._last_t = self._last_t
        return out

    def _flatten(self):
        seg = _Segment(self.cell_size, capacity=max(64, len(self)))
        for d in self:
            seg.append(d)
        self._shared = []
        self._tail = seg

    def __iter__(self):
        for seg, n in self._chunks():
            for i in range(n):
                yield seg.point(i)

    def points(self) -> list[DataPoint]:
        return list(self)

    def arrays(self) -> dict[str, NDArray]:
        """Concatenated columns ``t``, ``pose`` (n, 3), ``z`` (n, 3) and ``q`` (n, 4)."""
        chunks = self._chunks()
        return {
            name: np.concatenate([getattr(s, name)[:n] for s, n in chunks])
            for name in ("t", "pose", "z", "q")
        }

    def neighborhood(
        self,
        x: ArrayLike,
        t_now: float,
        k: int = 3,
        t_excl: float = 5.0,
        r_max: float = 2.0,
    ) -> Neighborhood:
        """Up to ``k`` nearest points within ``r_max`` that are at least ``t_excl`` seconds away in time.

        Ties in distance are broken by insertion order.
        """
        if k < 1 or t_excl < 0 or r_max <= 0:
            raise ValueError("need k >= 1, t_excl >= 0, r_max > 0")
        qx, qy = float(x[0]), float(x[1])
        reach = int(math.ceil(r_max / self.cell_size))
        cx, cy = _cell(qx, qy, self.cell_size)
        found: list[tuple[float, int, _Segment, int]] = []
        offset = 0
        for seg, n in self._chunks():
            local: list[int] = []
            for i in range(cx - reach, cx + reach + 1):
                for j in range(cy - reach, cy + reach + 1):
                    idx = seg.grid.get((i, j))
                    if idx:
                        local.extend(idx[: bisect.bisect_left(idx, n)])
            if local:
                li = np.array(local)
                d = np.hypot(seg.pose[li, 0] - qx, seg.pose[li, 1] - qy)
                ok = (d <= r_max) & (np.abs(t_now - seg.t[li]) >= t_excl)
                for dist, i in zip(d[ok], li[ok]):
                    found.append((float(dist), offset + int(i), seg, int(i)))
            offset += n
        found.sort(key=lambda f: (f[0], f[1]))
        found = found[:k]
        if not found:
            return Neighborhood()
        return Neighborhood(
            points=[seg.point(i) for _, _, seg, i in found],
            closest_dist=found[0][0],
            distances=[f[0] for f in found],
        )


def insert(m: MfMap, d: DataPoint) -> MfMap:
    return m.insert(d)


def neighborhood(m: MfMap, x, t_now, k=3, t_excl=5.0, r_max=2.0) -> Neighborhood:
    return m.neighborhood(x, t_now, k=k, t_excl=t_excl, r_max=r_max)


def map_estimate_world(nbhd: Neighborhood, b: ArrayLike) -> NDArray:
    """Mean of the neighbors' bias-corrected, world-frame field vectors."""
    if nbhd.empty:
        raise EmptyNeighborhood("map estimate needs at least one neighbor")
    b = np.asarray(b, dtype=float)
    return np.mean([d.world_field(b) for d in nbhd.points], axis=0)


def map_estimate_sensor(nbhd: Neighborhood, b: ArrayLike, r_sw_now: Rotation3) -> NDArray:
    """World-frame map estimate expressed in the current sensor frame."""
    return r_sw_now.inverse().apply(map_estimate_world(nbhd, b))


def write_map_csv(path, m: MfMap) -> None:
    a = m.arrays()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MAP_CSV_COLUMNS)
        for t, pose, z, q in zip(a["t"], a["pose"], a["z"], a["q"]):
            w.writerow([repr(float(v)) for v in (t, *pose, *z, *q)])


def read_map_csv(path, cell_size: float = 1.0) -> MfMap:
    from .dataio import read_csv_columns

    cols = read_csv_columns(path, MAP_CSV_COLUMNS)
    m = MfMap(cell_size)
    for row in zip(*(cols[c] for c in MAP_CSV_COLUMNS)):
        t, x, y, th, zx, zy, zz, qw, qx, qy, qz = row
        m.insert(DataPoint(np.array([zx, zy, zz]), x, y, th, Rotation3(np.array([qw, qx, qy, qz])), t))
    return m


# ---------------------------------------------------------------------------
# batched storage for a particle set


@dataclass
class BatchNeighborhood:
    """Neighborhoods of all particles; rows are particles, columns neighbor slots."""

    steps: NDArray  # (n, k) step index, -1 where invalid
    dist: NDArray  # (n, k) planar distance, inf where invalid
    theta: NDArray  # (n, k) heading stored with the neighbor
    closest: NDArray  # (n,)

    @property
    def valid(self) -> NDArray:
        return self.steps >= 0

    @property
    def count(self) -> NDArray:
        return self.valid.sum(axis=1)


class ParticleMaps:
    """Maps of ``n`` particles sharing one measurement stream.

    Parameters
    ----------
    n: int
        Number of particles.
    mode: {"cow", "full"}
        Ancestry-sharing store or naive per-particle trajectory copies.
    cell_size: float
        Grid-hash cell edge in meters.
    """

    MAX_CELLS_PER_STEP = 400

    def __init__(self, n: int, mode: str = "cow", cell_size: float = 1.0, capacity: int = 256):
        if mode not in ("cow", "full"):
            raise ValueError(f"unknown map mode {mode!r}")
        self.n = int(n)
        self.mode = mode
        self.cell_size = float(cell_size)
        self.n_steps = 0
        self.t = np.empty(capacity)
        self.z = np.empty((capacity, 3))
        self.q = np.empty((capacity, 4))
        self.rsp = np.empty((capacity, 3, 3))
        if mode == "cow":
            self._pos = np.empty((capacity, self.n, 3))
            self._epoch_of = np.empty(capacity, dtype=np.intp)
            self._anc = np.arange(self.n, dtype=np.intp)[None, :].copy()
        else:
            self._traj = np.empty((self.n, capacity, 3))
        self._grid: dict[tuple[int, int], list[int]] = {}
        self._wide: list[int] = []

    @property
    def n_epochs(self) -> int:
        return len(self._anc) if self.mode == "cow" else 0

    def _grow(self):
        cap = 2 * len(self.t)
        s = self.n_steps

        def grown(a, axis=0):
            shape = list(a.shape)
            shape[axis] = cap
            out = np.empty(shape, dtype=a.dtype)
            sl = [slice(None)] * a.ndim
            sl[axis] = slice(0, s)
            out[tuple(sl)] = a[tuple(sl)]
            return out

        self.t, self.z, self.q, self.rsp = grown(self.t), grown(self.z), grown(self.q), grown(self.rsp)
        if self.mode == "cow":
            self._pos, self._epoch_of = grown(self._pos), grown(self._epoch_of)
        else:
            self._traj = grown(self._traj, axis=1)

    def append(self, t: float, z: ArrayLike, r_sp: Rotation3, poses: NDArray) -> None:
        """Insert one data point per particle; ``poses`` has shape (n, 3)."""
        if self.n_steps and t < self.t[self.n_steps - 1]:
            raise NonMonotonicTime(f"t={t} earlier than last inserted t={self.t[self.n_steps - 1]}")
        z = np.asarray(z, dtype=float)
        if not np.all(np.isfinite(z)) or np.any(np.abs(z) > Z_LIMIT):
            raise InvalidDataPoint(f"field sample {z} outside +-{Z_LIMIT} uT")
        if self.n_steps == len(self.t):
            self._grow()
        s = self.n_steps
        self.t[s] = t
        self.z[s] = z
        self.q[s] = r_sp.q
        self.rsp[s] = r_sp.as_matrix()
        if self.mode == "cow":
            self._pos[s] = poses
            self._epoch_of[s] = len(self._anc) - 1
        else:
            self._traj[:, s] = poses
        self.n_steps += 1
        self._index_step(s, poses)

    def _index_step(self, s: int, poses: NDArray):
        cs = self.cell_size
        x0, y0 = np.floor(poses[:, :2].min(axis=0) / cs).astype(int)
        x1, y1 = np.floor(poses[:, :2].max(axis=0) / cs).astype(int)
        if (x1 - x0 + 1) * (y1 - y0 + 1) > self.MAX_CELLS_PER_STEP:
            self._wide.append(s)
            return
        for i in range(x0, x1 + 1):
            for j in range(y0, y1 + 1):
                self._grid.setdefault((i, j), []).append(s)

    def resample(self, idx: ArrayLike) -> None:
        """Particle ``i`` inherits the map of former particle ``idx[i]``."""
        idx = np.asarray(idx, dtype=np.intp)
        if self.mode == "cow":
            self._anc = np.vstack([self._anc[:, idx], np.arange(self.n, dtype=np.intp)[None, :]])
        else:
            self._traj = self._traj[idx]

    def positions(self, steps: ArrayLike) -> NDArray:
        """Poses of every particle's map at ``steps``; shape (n, len(steps), 3)."""
        steps = np.asarray(steps, dtype=np.intp)
        if self.mode == "full":
            return self._traj[:, steps]
        slots = self._anc[self._epoch_of[steps]]  # (m, n)
        return self._pos[steps[:, None], slots].transpose(1, 0, 2)

    def _candidates(self, xy: NDArray, t_now: float, t_excl: float, r_max: float) -> NDArray:
        s = self.n_steps
        eligible = np.abs(t_now - self.t[:s]) >= t_excl
        cs = self.cell_size
        x0, y0 = np.floor((xy.min(axis=0) - r_max) / cs).astype(int)
        x1, y1 = np.floor((xy.max(axis=0) + r_max) / cs).astype(int)
        if (x1 - x0 + 1) * (y1 - y0 + 1) > 4 * self.MAX_CELLS_PER_STEP:
            return np.flatnonzero(eligible)
        hits = [self._wide]
        for i in range(x0, x1 + 1):
            for j in range(y0, y1 + 1):
                lst = self._grid.get((i, j))
                if lst:
                    hits.append(lst)
        if len(hits) == 1 and not self._wide:
            return np.empty(0, dtype=np.intp)
        cand = np.unique(np.concatenate([np.asarray(h, dtype=np.intp) for h in hits]))
        return cand[eligible[cand]]

    def neighborhoods(
        self, xy: NDArray, t_now: float, k: int = 3, t_excl: float = 5.0, r_max: float = 2.0
    ) -> BatchNeighborhood:
        """Per-particle neighborhoods with the same semantics as ``MfMap.neighborhood``."""
        if k < 1 or t_excl < 0 or r_max <= 0:
            raise ValueError("need k >= 1, t_excl >= 0, r_max > 0")
        n = self.n
        steps_out = np.full((n, k), -1, dtype=np.intp)
        dist_out = np.full((n, k), np.inf)
        theta_out = np.zeros((n, k))
        cand = self._candidates(xy, t_now, t_excl, r_max) if self.n_steps else np.empty(0, np.intp)
        if len(cand) == 0:
            return BatchNeighborhood(steps_out, dist_out, theta_out, np.full(n, np.inf))
        pos = self.positions(cand)  # (n, m, 3)
        d = np.hypot(pos[..., 0] - xy[:, 0, None], pos[..., 1] - xy[:, 1, None])
        d[d > r_max] = np.inf
        m = len(cand)
        kk = min(k, m)
        if m <= k:
            order = np.argsort(d, axis=1, kind="stable")
        else:
            part = np.argpartition(d, kk - 1, axis=1)[:, :kk]
            dp = np.take_along_axis(d, part, 1)
            # order the selected columns by (distance, step); columns are step-sorted
            o = np.lexsort((part, dp), axis=1)
            order = np.take_along_axis(part, o, 1)
            kth = np.take_along_axis(d, order[:, -1:], 1)[:, 0]
            tied = np.isfinite(kth) & ((d <= kth[:, None]).sum(axis=1) > kk)
            for r in np.flatnonzero(tied):
                order[r] = np.argsort(d[r], kind="stable")[:kk]
        dsel = np.take_along_axis(d, order, 1)
        ok = np.isfinite(dsel)
        steps_out[:, :kk] = np.where(ok, cand[order], -1)
        dist_out[:, :kk] = dsel
        theta_out[:, :kk] = np.where(ok, np.take_along_axis(pos[..., 2], order, 1), 0.0)
        return BatchNeighborhood(steps_out, dist_out, theta_out, dist_out[:, 0].copy())

    def world_fields(self, nb: BatchNeighborhood, b: NDArray) -> NDArray:
        """Bias-corrected world-frame fields of the neighbors; shape (n, k, 3)."""
        s = np.where(nb.valid, nb.steps, 0)
        v = np.einsum("nkij,nkj->nki", self.rsp[s], self.z[s] - b[:, None, :])
        c, sn = np.cos(nb.theta), np.sin(nb.theta)
        out = np.empty_like(v)
        out[..., 0] = c * v[..., 0] - sn * v[..., 1]
        out[..., 1] = sn * v[..., 0] + c * v[..., 1]
        out[..., 2] = v[..., 2]
        return out

    def estimate_world(self, nb: BatchNeighborhood, b: NDArray) -> NDArray:
        """Mean-of-neighbors world estimate per particle; NaN rows where the neighborhood is empty."""
        w = self.world_fields(nb, b)
        valid = nb.valid
        cnt = valid.sum(axis=1)
        tot = np.where(valid[..., None], w, 0.0).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return tot / cnt[:, None]

    def estimate_sensor(self, nb: BatchNeighborhood, b: NDArray, theta_now: NDArray, rsp_now: NDArray) -> NDArray:
        """World estimates rotated into each particle's current sensor frame."""
        w = self.estimate_world(nb, b)
        c, s = np.cos(theta_now), np.sin(theta_now)
        planar = np.column_stack([c * w[:, 0] + s * w[:, 1], -s * w[:, 0] + c * w[:, 1], w[:, 2]])
        return planar @ rsp_now  # rsp_now^T applied to row vectors

    def extract(self, i: int) -> MfMap:
        """Standalone ``MfMap`` of particle ``i``."""
        m = MfMap(self.cell_size)
        if self.n_steps == 0:
            return m
        pose = self.positions(np.arange(self.n_steps))[i]
        for s in range(self.n_steps):
            x, y, th = pose[s]
            m.insert(DataPoint(self.z[s], x, y, th, Rotation3(self.q[s]), self.t[s]))
        return m

    def __len__(self):
        return self.n_steps
