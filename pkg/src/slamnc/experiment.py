"""Bias-injection sweep.

For each nominal bias magnitude ``m`` the scenario injects ``(m, m, 0)``
with a per-component spread, and the filter is run in up to three modes:

``slamnc``
    bias estimated from a zero prior;
``off``
    calibration disabled, readings taken as unbiased;
``oracle``
    calibration disabled with the exact injected bias as fixed calibration.

Each cell is scored by the nearest neighbor error of the best particle's map
under that particle's bias. Cells are independent; a failing cell is
recorded and the sweep continues.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import Divergence, SlamncError
from .evaluation import NneConfig, compass_headings, nne_details
from .rbpf import MotionNoise
from .slam import SlamncConfig, run
from .synthworld import make_scenario, sense

MODES = ("slamnc", "off", "oracle")


@dataclass
class SweepConfig:
    magnitudes: Sequence[float] = (0.0, 5.0, 10.0, 50.0, 100.0)
    modes: Sequence[str] = ("slamnc", "off")
    seeds: Sequence[int] = (0, 1, 2, 3, 4)
    scenario: dict = field(default_factory=dict)  # make_scenario keyword arguments
    slam: SlamncConfig = field(default_factory=lambda: SlamncConfig(n_particles=1000, noise=MotionNoise.odometry()))
    nne: NneConfig = field(default_factory=NneConfig)

    def __post_init__(self):
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ValueError(f"unknown modes {bad}; choose from {MODES}")


@dataclass
class CellResult:
    magnitude: float
    mode: str
    seed: int
    nne: float | None = None
    n_eligible: int = 0
    injected_bias: np.ndarray | None = None
    final_bias: np.ndarray | None = None
    best_bias: np.ndarray | None = None
    compass_location: float | None = None  # rad
    compass_scale: float | None = None  # rad
    diverged: bool = False
    error: str = ""
    runtime_s: float = 0.0

    @property
    def ok(self) -> bool:
        return self.nne is not None and not self.error


def run_cell(magnitude: float, mode: str, seed: int, cfg: SweepConfig) -> CellResult:
    """One filter run on the scenario with the given seed and nominal bias magnitude."""
    res = CellResult(magnitude, mode, seed)
    t0 = time.perf_counter()
    try:
        sc = make_scenario(seed=seed, bias=(magnitude, magnitude, 0.0), **cfg.scenario)
        res.injected_bias = sc.injected_bias
        steps, _ = sense(sc)
        slam = cfg.slam.with_(
            seed=seed,
            initial_pose=sc.initial_pose,
            calibration_enabled=(mode == "slamnc"),
            fixed_bias=sc.injected_bias if mode == "oracle" else None,
        )
        out = run(steps, slam)
        res.final_bias = out.final_bias
        res.best_bias = out.best_bias
        det = nne_details(out.best_map, out.best_bias, cfg.nne)
        res.nne, res.n_eligible = det.median, det.n_eligible
        comp = compass_headings(out.best_map, out.best_bias)
        res.compass_location, res.compass_scale = comp.cauchy_location, comp.cauchy_scale
    except Divergence as exc:
        res.diverged, res.error = True, str(exc)
    except SlamncError as exc:
        res.error = f"{type(exc).__name__}: {exc}"
    res.runtime_s = time.perf_counter() - t0
    return res


def sweep(cfg: SweepConfig, progress: Callable[[CellResult], None] | None = None) -> list[CellResult]:
    out = []
    for m in cfg.magnitudes:
        for mode in cfg.modes:
            for seed in cfg.seeds:
                r = run_cell(float(m), mode, int(seed), cfg)
                out.append(r)
                if progress is not None:
                    progress(r)
    return out


@dataclass(frozen=True)
class CellStats:
    magnitude: float
    mode: str
    n_runs: int
    n_ok: int
    n_diverged: int
    nne_mean: float | None
    nne_min: float | None
    nne_max: float | None

    @property
    def nne_range(self) -> float | None:
        return None if self.nne_min is None else self.nne_max - self.nne_min


def aggregate(results: Sequence[CellResult]) -> list[CellStats]:
    """Mean and range of NNE over seeds for every (magnitude, mode) cell."""
    keys = list(dict.fromkeys((r.magnitude, r.mode) for r in results))
    out = []
    for m, mode in keys:
        rs = [r for r in results if r.magnitude == m and r.mode == mode]
        v = np.array([r.nne for r in rs if r.ok])
        out.append(CellStats(
            m, mode, len(rs), len(v), sum(r.diverged for r in rs),
            float(v.mean()) if len(v) else None,
            float(v.min()) if len(v) else None,
            float(v.max()) if len(v) else None,
        ))
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer, str)):
        return str(v)
    return repr(float(v))


RUN_COLUMNS = ("magnitude", "mode", "seed", "nne", "n_eligible", "bx_true", "by_true", "bz_true",
               "bx", "by", "bz", "compass_location_deg", "compass_scale_deg", "diverged", "error")
AGG_COLUMNS = ("magnitude", "mode", "n_runs", "n_ok", "n_diverged", "nne_mean", "nne_min", "nne_max", "nne_range")


def write_runs_csv(path, results: Sequence[CellResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RUN_COLUMNS)
        for r in results:
            tb = r.injected_bias if r.injected_bias is not None else [None] * 3
            fb = r.best_bias if r.best_bias is not None else [None] * 3
            deg = (lambda a: None if a is None else np.degrees(a))
            w.writerow([_fmt(v) for v in (r.magnitude, r.mode, r.seed, r.nne, r.n_eligible, *tb, *fb,
                                          deg(r.compass_location), deg(r.compass_scale), r.diverged, r.error)])


def write_aggregate_csv(path, stats: Sequence[CellStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AGG_COLUMNS)
        for s in stats:
            w.writerow([_fmt(v) for v in (s.magnitude, s.mode, s.n_runs, s.n_ok, s.n_diverged, s.nne_mean,
                                          s.nne_min, s.nne_max, s.nne_range)])


def run_experiment(cfg: SweepConfig, out_dir, progress=None) -> list[CellStats]:
    """Run the sweep and write ``sweep_runs.csv`` and ``sweep_aggregate.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = sweep(cfg, progress)
    stats = aggregate(results)
    write_runs_csv(out_dir / "sweep_runs.csv", results)
    write_aggregate_csv(out_dir / "sweep_aggregate.csv", stats)
    return stats
