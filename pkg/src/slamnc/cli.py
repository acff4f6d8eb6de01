"""Command line entry point: ``slamnc {run,eval,spherefit,synth,sweep}``."""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .dataio import (
    InputOptions,
    RunManifest,
    file_sha256,
    load_stream,
    load_yaml,
    read_csv_columns,
    scenario_kwargs,
    slam_config_from_dict,
    slam_config_to_dict,
    steps_to_samples,
    write_bias_trace,
    write_estimate_trace,
    write_json,
    write_stream,
)
from .errors import Divergence, InvalidConfig, SlamncError
from .evaluation import NneConfig, compass_headings, nne_details, sphere_fit, sphere_fit_rms
from .experiment import SweepConfig, run_experiment
from .likelihood import FloorPlan
from .mfmap import read_map_csv, write_map_csv
from .rbpf import MotionNoise
from .slam import SlamState, downsample, passthrough, step
from .synthworld import make_scenario, sense

_TOP_KEYS = ("slam", "input", "scenario", "sweep", "nne")


def _config(path: str | None) -> tuple[dict, Path | None]:
    if path is None:
        return {}, None
    d = load_yaml(path)
    extra = sorted(set(d) - set(_TOP_KEYS))
    if extra:
        raise InvalidConfig(f"unknown config sections: {', '.join(extra)}")
    return d, Path(path).parent


def _vec3(text: str) -> np.ndarray:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected bx,by,bz, got {text!r}")
    return np.array([float(p) for p in parts])


def _nne_cfg(d: dict) -> NneConfig:
    return NneConfig(**(d.get("nne") or {}))


def cmd_run(args) -> int:
    conf, base = _config(args.config)
    cfg = slam_config_from_dict(conf.get("slam"), base)
    if args.floorplan:
        cfg = cfg.with_(floor_plan=FloorPlan.load(args.floorplan))
    opts = InputOptions.from_dict(conf.get("input"))
    samples = load_stream(args.input, opts.format, opts.columns)
    if opts.step_length:
        steps = downsample(samples, opts.step_length, opts.lowpass_window)
    else:
        steps = passthrough(samples, opts.lowpass_window)
    if not steps:
        raise InvalidConfig("input produced no filter steps")

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = SlamState(cfg)
    reports = []
    diverged_at = None
    t0 = time.perf_counter()
    for s in steps:
        try:
            reports.append(step(state, s))
        except Divergence as exc:
            diverged_at = exc.t
            break
    runtime = time.perf_counter() - t0

    write_bias_trace(out / "bias_trace.csv", reports)
    write_estimate_trace(out / "estimate_trace.csv", reports)
    best = state.best_index
    best_map = state.maps.extract(best)
    best_bias = state.particles.kf.b[best]
    write_map_csv(out / "best_map.csv", best_map)
    nne_val, n_elig = None, 0
    if len(best_map):
        det = nne_details(best_map, best_bias, _nne_cfg(conf))
        nne_val, n_elig = det.median, det.n_eligible
    report = {
        "final_bias": None if not reports else [float(v) for v in reports[-1].bias_mean],
        "final_bias_std": None if not reports else [float(v) for v in reports[-1].bias_std],
        "best_bias": [float(v) for v in best_bias],
        "nne_median": nne_val,
        "n_eligible": n_elig,
        "diverged": diverged_at is not None,
        "divergence_t": diverged_at,
        "n_steps": len(reports),
        "runtime_s": runtime,
    }
    write_json(out / "report.json", report)
    outputs = ["bias_trace.csv", "estimate_trace.csv", "best_map.csv", "report.json", "manifest.json"]
    manifest = RunManifest(
        config={"slam": slam_config_to_dict(cfg), "input": vars(opts)},
        input_sha256=file_sha256(args.input),
        seed=cfg.seed,
        version=__version__,
        outputs=outputs,
    )
    write_json(out / "manifest.json", manifest.to_dict())
    json.dump(report, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 2 if diverged_at is not None else 0


def cmd_eval(args) -> int:
    conf, _ = _config(args.config)
    m = read_map_csv(args.map)
    det = nne_details(m, args.bias, _nne_cfg(conf))
    comp = compass_headings(m, args.bias, math.radians(args.declared_north))
    res = {
        "nne_median": det.median,
        "n_eligible": det.n_eligible,
        "cauchy_location_deg": math.degrees(comp.cauchy_location),
        "cauchy_scale_deg": math.degrees(comp.cauchy_scale),
    }
    json.dump(res, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def cmd_spherefit(args) -> int:
    cols = read_csv_columns(args.input, args.columns.split(","))
    pts = np.column_stack([cols[c] for c in args.columns.split(",")])
    c, r = sphere_fit(pts)
    res = {"center": [float(v) for v in c], "radius": r, "rms": sphere_fit_rms(pts, c, r)}
    json.dump(res, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def cmd_synth(args) -> int:
    conf, _ = _config(args.config)
    kw = scenario_kwargs(conf.get("scenario"))
    for name in ("seed", "kind"):
        if getattr(args, name) is not None:
            kw[name] = getattr(args, name)
    if args.bias is not None:
        kw["bias"] = tuple(args.bias)
    sc = make_scenario(**kw)
    steps, gt = sense(sc)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc.save(out / "scenario.json")
    sc.plan.save(out / "floorplan.json")
    write_stream(out / "stream.csv", steps_to_samples(steps))
    with open(out / "ground_truth.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t", "x", "y", "theta"))
        for t, p in zip(gt.t, gt.poses):
            w.writerow([repr(float(v)) for v in (t, *p)])
    noise = MotionNoise.pdr() if sc.phone else MotionNoise.odometry()
    run_cfg = {
        "slam": {
            "initial_pose": [float(v) for v in sc.initial_pose],
            "noise": {"sigma_trans": noise.sigma_trans, "sigma_theta": noise.sigma_theta,
                      "sigma_drift": noise.sigma_drift},
            "seed": int(sc.seed),
        },
        "input": {"format": "canonical", "step_length": None, "lowpass_window": 0.0},
    }
    with open(out / "run_config.yaml", "w") as fh:
        yaml.safe_dump(run_cfg, fh, sort_keys=False)
    json.dump({"injected_bias": sc.injected_bias.tolist(), "n_steps": len(steps),
               "lipschitz_uT_per_m": sc.lipschitz(), "out_dir": str(out)}, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def cmd_sweep(args) -> int:
    conf, base = _config(args.config)
    sw = dict(conf.get("sweep") or {})
    extra = sorted(set(sw) - {"magnitudes", "modes", "seeds"})
    if extra:
        raise InvalidConfig(f"unknown sweep keys: {', '.join(extra)}")
    slam_d = dict(conf.get("slam") or {})
    slam_d.setdefault("n_particles", 1000)
    if "noise" not in slam_d:
        kind = (conf.get("scenario") or {}).get("kind", "robot")
        n = MotionNoise.pdr() if kind == "phone" else MotionNoise.odometry()
        slam_d["noise"] = {"sigma_trans": n.sigma_trans, "sigma_theta": n.sigma_theta, "sigma_drift": n.sigma_drift}
    kwargs = {k: tuple(v) for k, v in sw.items()}
    if args.seeds is not None:
        kwargs["seeds"] = tuple(range(args.seeds))
    cfg = SweepConfig(scenario=scenario_kwargs(conf.get("scenario")), slam=slam_config_from_dict(slam_d, base),
                      nne=_nne_cfg(conf), **kwargs)

    def progress(r):
        status = "diverged" if r.diverged else (r.error or f"nne={r.nne:.3f}")
        print(f"magnitude={r.magnitude:g} mode={r.mode} seed={r.seed} {status} ({r.runtime_s:.1f} s)",
              file=sys.stderr)

    stats = run_experiment(cfg, args.out_dir, progress=None if args.quiet else progress)
    for s in stats:
        mean = "n/a" if s.nne_mean is None else f"{s.nne_mean:.3f} [{s.nne_min:.3f}, {s.nne_max:.3f}]"
        print(f"{s.magnitude:>6g} {s.mode:<7} nne {mean}  diverged {s.n_diverged}/{s.n_runs}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slamnc", description="Magnetic-field SLAM with bias calibration.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the filter on a recorded stream")
    r.add_argument("--config", help="YAML config (sections slam, input, nne)")
    r.add_argument("--input", required=True, help="stream CSV")
    r.add_argument("--floorplan", help="JSON wall segments")
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="NNE and compass consistency of a map dump")
    e.add_argument("--map", required=True, help="map CSV written by run")
    e.add_argument("--bias", required=True, type=_vec3, help="bx,by,bz in uT")
    e.add_argument("--declared-north", type=float, default=0.0, help="degrees")
    e.add_argument("--config", help="YAML config (section nne)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("spherefit", help="bias from a rotation recording by sphere fitting")
    s.add_argument("--input", required=True, help="CSV with magnetometer columns")
    s.add_argument("--columns", default="zx,zy,zz", help="names of the three field columns")
    s.set_defaults(func=cmd_spherefit)

    g = sub.add_parser("synth", help="generate a synthetic scenario and its sensor stream")
    g.add_argument("--config", help="YAML config (section scenario)")
    g.add_argument("--seed", type=int)
    g.add_argument("--kind", choices=("robot", "phone"))
    g.add_argument("--bias", type=_vec3, help="nominal bias bx,by,bz in uT")
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_synth)

    w = sub.add_parser("sweep", help="bias-injection sweep with calibration on and off")
    w.add_argument("--config", help="YAML config (sections sweep, scenario, slam, nne)")
    w.add_argument("--seeds", type=int, help="use seeds 0..N-1")
    w.add_argument("--out-dir", required=True)
    w.add_argument("--quiet", action="store_true")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SlamncError, OSError) as exc:
        print(f"slamnc: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
