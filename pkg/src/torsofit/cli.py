"""Command-line interface: register / synth / eval / sweep.

Every command writes CSV outputs plus rendered figures into the output
directory, alongside a `resolved.json` snapshot of the fully materialized
configuration. Exit codes: 0 success, 1 input error, 2 non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .energy import EnergyError
from .evaluation import (EvaluationError, LAMBDA_FIELDS, landmark_error,
                         save_pattern_obj, save_pattern_text, surface_error,
                         sweep_blendshapes, sweep_landmarks, sweep_lambda,
                         transfer_patterns)
from .geometry import MeshError, load_mesh, save_mesh
from .manifest import (ManifestError, load_ground_truth, load_landmarks_csv,
                       load_model, pose_from_dict, pose_to_dict, save_model,
                       save_target)
from .plots import plot_residual_histogram, plot_sweep, plot_trace
from .rig import RigError
from .shape import deform, deform_vertices
from .solver import NoOverlapError, SolverError, register
from .spatial import SpatialError
from .synth import (PoseRange, SynthError, SyntheticTarget, TorsoSpec,
                    evaluate_recovery, generate_target, generate_template)

INPUT_ERRORS = (ConfigError, ManifestError, MeshError, SynthError, RigError,
                EnergyError, SpatialError, EvaluationError, OSError,
                ValueError)

LAMBDA_FLAGS = {f"lambda_{k}": f"lambda_{k}"
                for k in ("d", "s", "bs", "j", "l")}


def write_csv(path, rows, columns):
    """Deterministic CSV: fixed column order, floats via repr-stable %.12g."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            out = []
            for c in columns:
                v = row[c] if isinstance(row, dict) else getattr(row, c)
                if isinstance(v, float):
                    out.append(f"{v:.12g}")
                else:
                    out.append(v)
            writer.writerow(out)
    return Path(path)


def write_trace_csv(path, trace):
    cols = ["iteration", "e_data", "e_scale", "e_blendshape", "e_joint",
            "e_landmark", "e_total", "mean_distance", "n_pairs", "millis"]
    return write_csv(path, trace, cols)


def _add_common(parser):
    parser.add_argument("--config", help="run config JSON")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="random seed")
    parser.add_argument("--jobs", type=int, help="parallel sweep cells")
    for flag in LAMBDA_FLAGS:
        parser.add_argument(f"--{flag.replace('_', '-')}", type=float,
                            dest=flag, help=f"override weights.{flag}")
    parser.add_argument("--max-time-s", type=float, dest="max_time_s",
                        help="wall-clock budget per registration")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for attr in ("out", "seed", "jobs"):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg, attr, value)
    for attr in ("model", "scan", "landmarks"):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg, attr, str(value))
    overrides = {flag: getattr(args, flag) for flag in LAMBDA_FLAGS
                 if getattr(args, flag, None) is not None}
    if overrides:
        cfg.weights = replace(cfg.weights, **overrides)
    if getattr(args, "max_time_s", None) is not None:
        cfg.solver = replace(cfg.solver, max_seconds=args.max_time_s)
    return cfg


def _prepare_out(cfg: RunConfig):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "resolved.json")
    return out


def cmd_register(args):
    cfg = _load_config(args)
    if cfg.model is None or cfg.scan is None:
        raise ConfigError("register needs --model and --scan "
                          "(or a config providing them)")
    cfg.validate_paths()
    out = _prepare_out(cfg)

    model = load_model(cfg.model)
    scan, _ = load_mesh(cfg.scan)
    scan_landmarks = (load_landmarks_csv(cfg.landmarks)
                      if cfg.landmarks else None)

    result = register(model, scan, scan_landmarks=scan_landmarks,
                      weights=cfg.weights, filters=cfg.filters,
                      solver_config=cfg.solver)

    save_mesh(deform(model, result.pose, result.alpha),
              out / "registered.obj")
    with open(out / "params.json", "w", encoding="utf-8") as f:
        json.dump({"pose": pose_to_dict(result.pose),
                   "alpha": [float(a) for a in result.alpha],
                   "converged": bool(result.converged),
                   "iterations": len(result.trace)}, f, indent=1)
        f.write("\n")
    write_trace_csv(out / "trace.csv", result.trace)

    stats_rows = []
    surf = surface_error(result)
    stats_rows.append({"metric": "surface", **surf.row()})
    if scan_landmarks is not None and model.landmarks:
        stats_rows.append({"metric": "landmark",
                           **landmark_error(model=model, result=result,
                                            scan_landmarks=scan_landmarks)
                           .row()})
    write_csv(out / "stats.csv", stats_rows,
              ["metric", "mae", "sd", "max", "min", "n"])

    if model.patterns:
        patterns = transfer_patterns(model, result, scan, filters=cfg.filters)
        save_pattern_text(patterns, out / "patterns.txt")
        save_pattern_obj(patterns, out / "patterns.obj")

    plot_trace(result.trace, out / "trace.png")
    plot_residual_histogram(result.correspondences.distances,
                            out / "residuals.png")

    print(f"registered in {len(result.trace)} iterations "
          f"({result.total_seconds:.2f} s), surface MAE {surf.mae:.4f} mm, "
          f"converged={result.converged}")
    return 0 if result.converged else 2


def cmd_synth(args):
    cfg = _load_config(args)
    out = _prepare_out(cfg)

    spec = TorsoSpec(resolution=args.resolution)
    model = generate_template(spec)
    save_model(model, out / "model")

    scan_model = None
    if args.scan_resolution is not None:
        scan_model = generate_template(
            replace(spec, resolution=args.scan_resolution))

    pose_range = PoseRange(max_rotation_deg=args.max_rotation_deg)
    target = generate_target(model, pose_range=pose_range,
                             noise_sigma=args.noise_sigma,
                             hole_fraction=args.hole_fraction,
                             seed=cfg.seed, scan_model=scan_model)
    save_target(target, out / "target")
    print(f"model manifest and target bundle written to {out} "
          f"(scan: {target.scan.n_vertices} vertices)")
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    if cfg.model is None:
        raise ConfigError("eval needs --model")
    result_dir = Path(args.result_dir)
    params_path = result_dir / "params.json"
    if not params_path.is_file():
        raise ConfigError(f"no params.json under {result_dir}")
    cfg.validate_paths()
    out = _prepare_out(cfg)

    model = load_model(cfg.model)
    with open(params_path, encoding="utf-8") as f:
        params = json.load(f)
    pose = pose_from_dict(params["pose"])
    alpha = np.array(params["alpha"], dtype=np.float64)
    truth = load_ground_truth(args.ground_truth)

    # score against the clean surface regenerated from the sidecar params
    clean = model.template.with_vertices(
        deform_vertices(model, truth["pose"], truth["alpha"]))
    target = SyntheticTarget(
        scan=clean, clean_scan=clean, pose=truth["pose"],
        alpha=truth["alpha"], scan_landmarks=truth["scan_landmarks"],
        landmark_names=truth["landmark_names"],
        noise_sigma=truth["noise_sigma"],
        hole_fraction=truth["hole_fraction"], seed=truth["seed"])
    report = evaluate_recovery(model, pose, alpha, target)

    rows = [{"metric": "surface_mae", "value": report.surface_mae},
            {"metric": "landmark_mae", "value": report.landmark_mae},
            {"metric": "max_rotation_error_deg",
             "value": report.max_rotation_error_deg()},
            {"metric": "max_translation_error_mm",
             "value": float(report.translation_errors.max())},
            {"metric": "max_scale_error",
             "value": float(report.scale_errors.max())},
            {"metric": "alpha_error", "value": report.alpha_error}]
    write_csv(out / "recovery.csv", rows, ["metric", "value"])
    print(f"surface MAE {report.surface_mae:.4f} mm, "
          f"landmark MAE {report.landmark_mae:.4f} mm")
    return 0


def _sweep_targets(model, cfg, args):
    targets = []
    for i in range(args.n_targets):
        targets.append(generate_target(
            model, pose_range=PoseRange(max_rotation_deg=args.max_rotation_deg),
            noise_sigma=args.noise_sigma, hole_fraction=args.hole_fraction,
            seed=cfg.seed + i))
    return targets


def cmd_sweep(args):
    cfg = _load_config(args)
    if cfg.model is None:
        raise ConfigError("sweep needs --model")
    cfg.validate_paths()
    out = _prepare_out(cfg)
    model = load_model(cfg.model)
    targets = _sweep_targets(model, cfg, args)

    kw = dict(weights=cfg.weights, filters=cfg.filters,
              solver_config=cfg.solver, jobs=cfg.jobs)
    if args.kind == "landmarks":
        counts = [int(c) for c in args.values.split(",")] if args.values \
            else list(range(len(model.landmarks) + 1))
        rows = sweep_landmarks(model, targets, counts=counts, **kw)
        x_key, log_x = "landmarks", False
    elif args.kind == "blendshapes":
        counts = [int(c) for c in args.values.split(",")] if args.values \
            else [0, 10, 25, 40, model.n_shapes]
        rows = sweep_blendshapes(model, targets, counts=counts, **kw)
        x_key, log_x = "blendshapes", False
    else:
        which = args.which or "lambda_d"
        if which not in LAMBDA_FIELDS:
            raise ConfigError(f"--which must be one of {LAMBDA_FIELDS}")
        values = [float(v) for v in args.values.split(",")] if args.values \
            else list(np.logspace(-5, -1, 5))
        rows = sweep_lambda(model, targets, which, values, **kw)
        x_key, log_x = which, True

    cols = [x_key, "surface_mae", "landmark_mae", "n_targets", "n_converged"]
    write_csv(out / "sweep.csv", rows, cols)
    long_rows = [{"setting": x_key, "value": r[x_key], "metric": m,
                  "mae": r[f"{m}_mae"]}
                 for r in rows for m in ("surface", "landmark")]
    write_csv(out / "sweep_long.csv", long_rows,
              ["setting", "value", "metric", "mae"])
    plot_sweep(rows, x_key, out / "sweep.png", log_x=log_x)

    n_cells = sum(r["n_targets"] for r in rows)
    n_conv = sum(r["n_converged"] for r in rows)
    print(f"swept {x_key} over {len(rows)} settings "
          f"({n_conv}/{n_cells} registrations converged)")
    return 0 if n_conv == n_cells else 2


def build_parser():
    parser = argparse.ArgumentParser(
        prog="torsofit",
        description="Fit an articulated torso template to surface scans "
                    "and transfer surgical pattern curves.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="fit the model to a scan")
    p.add_argument("--model", help="model manifest path")
    p.add_argument("--scan", help="scan mesh path (OBJ/PLY)")
    p.add_argument("--landmarks", help="scan landmark CSV (x,y,z)")
    _add_common(p)
    p.set_defaults(fn=cmd_register)

    p = sub.add_parser("synth", help="generate template model + target scan")
    p.add_argument("--resolution", type=float, default=1.0,
                   help="template resolution scale")
    p.add_argument("--scan-resolution", type=float, dest="scan_resolution",
                   help="optional denser resolution for the scan surface")
    p.add_argument("--noise-sigma", type=float, default=0.0,
                   dest="noise_sigma", help="normal-direction noise, mm")
    p.add_argument("--hole-fraction", type=float, default=0.0,
                   dest="hole_fraction", help="surface area fraction removed")
    p.add_argument("--max-rotation-deg", type=float, default=45.0,
                   dest="max_rotation_deg")
    _add_common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("eval", help="score a registration against ground truth")
    p.add_argument("--model", help="model manifest path")
    p.add_argument("result_dir", help="directory with params.json")
    p.add_argument("ground_truth", help="ground-truth sidecar JSON")
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="vary one setting over synthetic targets")
    p.add_argument("kind", choices=("landmarks", "blendshapes", "lambda"))
    p.add_argument("--model", help="model manifest path")
    p.add_argument("--which", help="lambda field for kind=lambda")
    p.add_argument("--values", help="comma-separated sweep values")
    p.add_argument("--n-targets", type=int, default=3, dest="n_targets")
    p.add_argument("--noise-sigma", type=float, default=1.0,
                   dest="noise_sigma")
    p.add_argument("--hole-fraction", type=float, default=0.3,
                   dest="hole_fraction")
    p.add_argument("--max-rotation-deg", type=float, default=20.0,
                   dest="max_rotation_deg")
    _add_common(p)
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NoOverlapError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SolverError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
