"""Stream, map and configuration files.

Canonical stream CSV columns are ``t, dx, dy, dtheta, zx, zy, zz, ax, ay,
az``: body-frame odometry increment since the previous row, raw
magnetometer reading (uT) and accelerometer reading (m/s^2). Floats are
written with ``repr`` so a write/read round trip is exact.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml
from numpy.typing import NDArray

from .bias_kf import KfConfig
from .errors import InvalidConfig, ParseError, SchemaError
from .frames import wrap_angle
from .likelihood import FloorPlan, LikelihoodConfig
from .rbpf import MotionNoise
from .slam import RawSample, SlamncConfig, StepInput, StepReport
from .synthworld import GRAVITY, accel_from_rsp

CANONICAL_COLUMNS = ("t", "dx", "dy", "dtheta", "zx", "zy", "zz", "ax", "ay", "az")

# Robot log adapter: canonical field -> source column (header name or 0-based index).
# Odometry in robot logs is an absolute pose; it is differenced into body-frame
# increments. Accelerometer columns are optional: a level platform is assumed
# when they are absent.
ROBOT_COLUMNS = {
    "t": "time",
    "x": "odom_x",
    "y": "odom_y",
    "theta": "odom_theta",
    "mx": "mag_x",
    "my": "mag_y",
    "mz": "mag_z",
}
ROBOT_OPTIONAL = ("ax", "ay", "az")


def _parse_float(text: str, line: int, column: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"column {column!r}: cannot parse {text!r} as a number", line) from None
    if not math.isfinite(v):
        raise ParseError(f"column {column!r}: non-finite value {text!r}", line)
    return v


def _reject_non_finite(cells: Sequence[str], header: Sequence[str] | None, line: int) -> None:
    """Any cell that parses as NaN or inf is an error, whether or not its column is used."""
    for i, c in enumerate(cells):
        try:
            v = float(c)
        except ValueError:
            continue
        if not math.isfinite(v):
            name = header[i] if header is not None and i < len(header) else str(i)
            raise ParseError(f"column {name!r}: non-finite value {c!r}", line)


def _sniff_rows(path) -> tuple[list[str] | None, list[tuple[int, list[str]]]]:
    """Header (or None when the first row is numeric) and numbered data rows."""
    rows = []
    with open(path, newline="") as fh:
        text = fh.read()
    delim = "," if "," in text.split("\n", 1)[0] else None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if not s or s.startswith("#"):
            continue
        cells = next(csv.reader([s])) if delim else s.split()
        rows.append((lineno, [c.strip() for c in cells]))
    if not rows:
        return None, []
    try:
        [float(c) for c in rows[0][1]]
    except ValueError:
        header, rows = rows[0][1], rows[1:]
    else:
        header = None
    for lineno, cells in rows:
        _reject_non_finite(cells, header, lineno)
    return header, rows


def read_csv_columns(path, columns: Sequence[str], optional: Sequence[str] = ()) -> dict[str, NDArray]:
    """Read the named numeric columns of a headed CSV file.

    Raises ``SchemaError`` listing required columns absent from the header and
    ``ParseError`` with the line number of any malformed or non-finite cell.
    """
    header, rows = _sniff_rows(path)
    if header is None:
        raise SchemaError(list(columns))
    missing = [c for c in columns if c not in header]
    if missing:
        raise SchemaError(missing)
    wanted = list(columns) + [c for c in optional if c in header]
    pos = {c: header.index(c) for c in wanted}
    out = {c: np.empty(len(rows)) for c in wanted}
    for r, (lineno, cells) in enumerate(rows):
        if len(cells) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(cells)}", lineno)
        for c in wanted:
            out[c][r] = _parse_float(cells[pos[c]], lineno, c)
    out["_lines"] = np.array([ln for ln, _ in rows], dtype=np.int64)
    return out


def _check_increasing(t: NDArray, lines: NDArray) -> None:
    bad = np.flatnonzero(np.diff(t) <= 0)
    if len(bad):
        i = bad[0] + 1
        raise ParseError(f"timestamp {t[i]!r} does not increase over {t[i - 1]!r}", int(lines[i]))


def load_stream(path, format: str = "canonical", mapping: Mapping[str, str | int] | None = None) -> list[RawSample]:
    """Parse a sensor log into validated, strictly time-ordered samples.

    ``format`` is ``"canonical"`` or ``"robot"``; ``mapping`` overrides
    entries of ``ROBOT_COLUMNS`` for the robot adapter.
    """
    if format == "canonical":
        cols = read_csv_columns(path, CANONICAL_COLUMNS)
        _check_increasing(cols["t"], cols["_lines"])
        return [
            RawSample(r[0], r[1], r[2], r[3], (r[4], r[5], r[6]), (r[7], r[8], r[9]))
            for r in zip(*(cols[c].tolist() for c in CANONICAL_COLUMNS))
        ]
    if format == "robot":
        return _load_robot(path, {**ROBOT_COLUMNS, **(mapping or {})})
    raise ValueError(f"unknown stream format {format!r}")


def _load_robot(path, mapping: Mapping[str, str | int]) -> list[RawSample]:
    header, rows = _sniff_rows(path)
    required = list(ROBOT_COLUMNS)
    names = {k: mapping[k] for k in required}
    names.update({k: mapping[k] for k in ROBOT_OPTIONAL if k in mapping})
    if header is None:
        if not all(isinstance(v, int) for v in names.values()):
            raise SchemaError([k for k, v in names.items() if not isinstance(v, int)])
        pos = dict(names)
    else:
        missing = [str(v) for k, v in names.items() if k in required and not isinstance(v, int) and v not in header]
        if missing:
            raise SchemaError(missing)
        pos = {k: (v if isinstance(v, int) else header.index(v)) for k, v in names.items()
               if isinstance(v, int) or v in header}
    n = len(rows)
    data = {k: np.empty(n) for k in pos}
    lines = np.array([ln for ln, _ in rows], dtype=np.int64)
    for r, (lineno, cells) in enumerate(rows):
        for k, p in pos.items():
            if p >= len(cells):
                raise ParseError(f"missing field {k!r}", lineno)
            data[k][r] = _parse_float(cells[p], lineno, k)
    _check_increasing(data["t"], lines)
    has_acc = all(k in data for k in ROBOT_OPTIONAL)
    out = []
    prev = None
    for i in range(n):
        x, y, th = data["x"][i], data["y"][i], data["theta"][i]
        if prev is None:
            dx = dy = dth = 0.0
        else:
            c, s = math.cos(prev[2]), math.sin(prev[2])
            wx, wy = x - prev[0], y - prev[1]
            dx, dy, dth = c * wx + s * wy, -s * wx + c * wy, float(wrap_angle(th - prev[2]))
        prev = (x, y, th)
        acc = (data["ax"][i], data["ay"][i], data["az"][i]) if has_acc else (0.0, 0.0, GRAVITY)
        out.append(RawSample(float(data["t"][i]), dx, dy, dth,
                             (float(data["mx"][i]), float(data["my"][i]), float(data["mz"][i])),
                             tuple(float(a) for a in acc)))
    return out


def write_stream(path, samples: Sequence[RawSample]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CANONICAL_COLUMNS)
        for s in samples:
            w.writerow([repr(float(v)) for v in (s.t, s.dx, s.dy, s.dtheta, *s.mag, *s.accel)])


def steps_to_samples(steps: Sequence[StepInput]) -> list[RawSample]:
    """Raw samples that reproduce ``steps`` (accelerometer synthesized from each step's tilt)."""
    return [
        RawSample(float(s.t), float(s.u.dx), float(s.u.dy), float(s.u.dtheta),
                  tuple(float(v) for v in s.z), tuple(float(v) for v in accel_from_rsp(s.r_sp)))
        for s in steps
    ]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# configuration


def load_yaml(path) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise InvalidConfig(f"{path}: top level must be a mapping")
    return data


def _only(d: Mapping, allowed, where: str) -> None:
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise InvalidConfig(f"unknown {where} keys: {', '.join(extra)}")


_SLAM_KEYS = ("n_particles", "k_neighbors", "t_excl", "ess_fraction", "seed", "calibration_enabled",
              "fixed_bias", "initial_pose", "map_mode", "cell_size", "kf", "lik", "noise", "floor_plan")


def slam_config_from_dict(d: Mapping[str, Any] | None, base_dir: Path | None = None) -> SlamncConfig:
    """Build a ``SlamncConfig``; nested ``kf``, ``lik`` and ``noise`` mappings are optional.

    ``floor_plan`` may be a path to a JSON wall file (relative to
    ``base_dir``) or an inline list of segments.
    """
    d = dict(d or {})
    _only(d, _SLAM_KEYS, "slam")
    kw: dict[str, Any] = {k: d[k] for k in _SLAM_KEYS[:10] if k in d}
    if "initial_pose" in kw:
        kw["initial_pose"] = tuple(float(v) for v in kw["initial_pose"])
    if "kf" in d:
        _only(d["kf"], ("p0_diag", "r_diag", "q_diag", "b0"), "kf")
        kw["kf"] = KfConfig(**d["kf"])
    if "lik" in d:
        _only(d["lik"], LikelihoodConfig.__dataclass_fields__, "lik")
        kw["lik"] = LikelihoodConfig(**d["lik"])
    if "noise" in d:
        _only(d["noise"], MotionNoise.__dataclass_fields__, "noise")
        kw["noise"] = MotionNoise(**d["noise"])
    fp = d.get("floor_plan")
    if isinstance(fp, str):
        p = Path(fp)
        kw["floor_plan"] = FloorPlan.load(p if p.is_absolute() or base_dir is None else base_dir / p)
    elif isinstance(fp, Mapping):
        kw["floor_plan"] = FloorPlan(**fp)
    elif fp is not None:
        kw["floor_plan"] = FloorPlan(np.asarray(fp, dtype=float))
    try:
        return SlamncConfig(**kw)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc


def slam_config_to_dict(cfg: SlamncConfig) -> dict:
    """Plain-data view of ``cfg`` suitable for YAML/JSON."""
    return {
        "n_particles": cfg.n_particles,
        "k_neighbors": cfg.k_neighbors,
        "t_excl": cfg.t_excl,
        "ess_fraction": cfg.ess_fraction,
        "seed": cfg.seed,
        "calibration_enabled": cfg.calibration_enabled,
        "fixed_bias": None if cfg.fixed_bias is None else cfg.fixed_bias.tolist(),
        "initial_pose": list(cfg.initial_pose),
        "map_mode": cfg.map_mode,
        "cell_size": cfg.cell_size,
        "kf": {k: getattr(cfg.kf, k).tolist() for k in ("p0_diag", "r_diag", "q_diag", "b0")},
        "lik": asdict(cfg.lik),
        "noise": asdict(cfg.noise),
        "floor_plan": None if cfg.floor_plan is None else cfg.floor_plan.to_dict(),
    }


SCENARIO_KEYS = ("kind", "seed", "bias", "bounds", "loops", "step", "n_dipoles", "anomaly_std", "noise_mag",
                 "noise_odom", "bias_spread", "hold_pitch")


def scenario_kwargs(d: Mapping[str, Any] | None) -> dict:
    """Keyword arguments for ``synthworld.make_scenario`` from a config mapping."""
    d = dict(d or {})
    _only(d, SCENARIO_KEYS, "scenario")
    if "noise_odom" in d and d["noise_odom"] is not None:
        n = d["noise_odom"]
        d["noise_odom"] = MotionNoise(**n) if isinstance(n, Mapping) else MotionNoise(*n)
    for k in ("bias", "bounds"):
        if k in d:
            d[k] = tuple(float(v) for v in d[k])
    return d


@dataclass
class InputOptions:
    """How a recorded stream is turned into filter steps."""

    format: str = "canonical"
    step_length: float | None = None  # m; None feeds one step per row
    lowpass_window: float = 0.5  # s
    columns: dict = field(default_factory=dict)  # robot adapter overrides

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | None) -> InputOptions:
        d = dict(d or {})
        _only(d, ("format", "step_length", "lowpass_window", "columns"), "input")
        return cls(**d)


# ---------------------------------------------------------------------------
# run outputs


def write_bias_trace(path, reports: Sequence[StepReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t", "bx_mean", "by_mean", "bz_mean", "bx_std", "by_std", "bz_std", "n_kf_updated"))
        for r in reports:
            w.writerow([repr(float(r.t)), *(repr(float(v)) for v in r.bias_mean),
                        *(repr(float(v)) for v in r.bias_std), r.n_kf_updated])


def write_estimate_trace(path, reports: Sequence[StepReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t", "x", "y", "theta", "ess"))
        for r in reports:
            w.writerow([repr(float(v)) for v in (r.t, r.pose.x, r.pose.y, r.pose.theta, r.ess)])


def write_json(path, data: Any) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class RunManifest:
    """What went into a run and what came out of it."""

    config: dict
    input_sha256: str | None
    seed: int
    version: str
    outputs: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)
