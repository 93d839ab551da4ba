"""Command-line harness: data generation, training, calibration and evaluation.

Exit codes: 0 success, 1 usage or input error, 2 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calib_engine import network as net
from .calib_engine.cascade import (CascadeConfig, EdgeAlignPredictor, IdentityPredictor,
                                   OraclePredictor, RegressorPredictor, cascade_calibrate)
from .calib_engine.train import Dataset, TrainConfig, train
from .dataset import CATEGORIES, dataset_intrinsics, generate_dataset, iter_samples, load_manifest, read_sample, write_sample
from .errors import CalibrationError, DivergenceDetected, EmptyInputError, NoLidarEdgesError
from .event_repr import AccumulationWindow, ReprKind, build_representation, read_events, synchronize
from .geometry import (COARSE_RANGE, FINE_RANGE, DecalibRange, compose, inverse, load_calibration,
                       save_calibration, transform_to_euler)
from .lidar_cam import load_intrinsics, make_calib_input, project_points, read_point_cloud, render_depth_image
from .simulator import generate_sample

REPORT_SCHEMA = "evlcalib.eval_report/1"
RANGES = {"fine": FINE_RANGE, "coarse": COARSE_RANGE}
ABLATION_CONFIGS = (("Event Frame", ReprKind.EVENT_FRAME, 30),
                    ("Event Frame", ReprKind.EVENT_FRAME, 50),
                    ("Event Frame", ReprKind.EVENT_FRAME, 80),
                    ("Voxel Grid", ReprKind.VOXEL_GRID, 50),
                    ("Time Surface", ReprKind.TIME_SURFACE, 50))
AXES = ("tx_cm", "ty_cm", "tz_cm", "roll_deg", "pitch_deg", "yaw_deg")


class UsageError(CalibrationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- errors --------------------------------------------------------------------

def sample_errors(estimate, gt) -> dict:
    """Per-axis absolute errors plus the two norms for one estimate."""
    d = transform_to_euler(compose(estimate, inverse(gt)))
    dt = (estimate.t - gt.t) * 100.0
    rot = np.abs(d.as_array()[3:])
    return {"tx_cm": abs(float(dt[0])), "ty_cm": abs(float(dt[1])), "tz_cm": abs(float(dt[2])),
            "roll_deg": float(rot[0]), "pitch_deg": float(rot[1]), "yaw_deg": float(rot[2]),
            "trans_cm": float(np.linalg.norm(dt)), "rot_deg": float(np.linalg.norm(d.as_array()[3:]))}


def summarize(rows: list[dict]) -> dict:
    """Means (the MAE pair), medians and per-axis means over sample rows."""
    if not rows:
        return {"n": 0}
    t = np.array([r["trans_cm"] for r in rows])
    r = np.array([r_["rot_deg"] for r_ in rows])
    return {"n": len(rows),
            "translation_cm": float(t.mean()), "rotation_deg": float(r.mean()),
            "median_translation_cm": float(np.median(t)), "median_rotation_deg": float(np.median(r)),
            "translation_axes_cm": [float(np.mean([x[a] for x in rows])) for a in AXES[:3]],
            "rotation_axes_deg": [float(np.mean([x[a] for x in rows])) for a in AXES[3:]]}


# -- predictors ----------------------------------------------------------------

def build_cascade(args) -> CascadeConfig:
    kind = ReprKind(args.repr)
    stages = []
    if args.predictor == "oracle":
        stages = [(OraclePredictor(), RANGES[args.range])]
    elif args.predictor == "identity":
        stages = [(IdentityPredictor(), RANGES[args.range])]
    elif args.predictor == "edge-align":
        names = args.stages.split(",") if args.stages else [args.range]
        stages = [(EdgeAlignPredictor(kind), RANGES[n]) for n in names]
    elif args.predictor == "regressor":
        if not args.checkpoint:
            raise UsageError("--predictor regressor needs --checkpoint")
        if args.coarse_checkpoint:
            stages.append((RegressorPredictor(net.load_checkpoint(args.coarse_checkpoint), kind), COARSE_RANGE))
        stages.append((RegressorPredictor(net.load_checkpoint(args.checkpoint), kind), RANGES[args.range]))
    else:
        raise UsageError(f"unknown predictor {args.predictor!r}")
    return CascadeConfig(stages, iterations=args.iterations)


def run_cascade_on(sample, cascade: CascadeConfig, K, window, seed: int):
    """Cascade result, or None when a predictor finds no usable edges."""
    try:
        return cascade_calibrate(sample.cloud, sample.events, sample.decalibrated, cascade, K,
                                 window, sample.gt, seed)
    except NoLidarEdgesError:
        return None


def evaluate_dataset(root, cascade: CascadeConfig, seed: int = 0, window_ms: float | None = None,
                     limit: int | None = None) -> tuple[list[dict], list[list[dict]]]:
    """Per-sample rows (final errors) and per-stage rows, in manifest order.

    A sample on which a predictor raises ``NoLidarEdgesError`` keeps its
    uncorrected hypothesis and is flagged ``failed``.
    """
    K = dataset_intrinsics(root)
    rows, stage_rows = [], [[] for _ in range(len(cascade.stages) * cascade.iterations)]
    for entry, s in iter_samples(root):
        if limit is not None and entry["index"] >= limit:
            break
        window = s.window if window_ms is None else AccumulationWindow(
            s.window.t_end_us, int(round(window_ms * 1000)))
        res = run_cascade_on(s, cascade, K, window, seed * 7919 + entry["index"])
        est = s.decalibrated if res is None else res.estimate
        base = {"index": entry["index"], "sample": entry["name"], "category": s.category,
                "failed": res is None}
        init = sample_errors(s.decalibrated, s.gt)
        rows.append({**base, **sample_errors(est, s.gt),
                     "initial_trans_cm": init["trans_cm"], "initial_rot_deg": init["rot_deg"]})
        for k, acc in enumerate(stage_rows):
            hyp = s.decalibrated if res is None else res.trace[k].estimate
            acc.append({**base, **sample_errors(hyp, s.gt)})
    return rows, stage_rows


def build_report(rows: list[dict], stage_rows, config: dict) -> dict:
    if not rows:
        raise EmptyInputError("dataset is empty")
    cats = [c for c in CATEGORIES if any(r["category"] == c for r in rows)]
    initial = [{"trans_cm": r["initial_trans_cm"], "rot_deg": r["initial_rot_deg"], **{a: 0.0 for a in AXES}}
               for r in rows]
    return {"schema": REPORT_SCHEMA, "N": len(rows),
            "overall": summarize(rows),
            "per_category": {c: summarize([r for r in rows if r["category"] == c]) for c in cats},
            "initial": {k: v for k, v in summarize(initial).items() if "axes" not in k},
            "stages": [summarize(sr) for sr in stage_rows],
            "failures": int(sum(r["failed"] for r in rows)),
            "per_axis_samples": rows,
            "config": config}


def write_boxplot_csv(path: Path, rows: list[dict]) -> None:
    cols = ["index", "sample", "category", *AXES, "trans_cm", "rot_deg", "failed"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in cols])


# -- subcommands ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    out = _out(args)
    record = AccumulationWindow(args.t_end_us, int(round(args.record_ms * 1000)))
    s = generate_sample(args.seed, args.category, decal_range=RANGES[args.range], window=record)
    write_sample(out, s, AccumulationWindow(args.t_end_us, int(round(args.window_ms * 1000))))
    print(f"wrote {args.category} sample (seed {args.seed}) to {out}")
    return 0


def cmd_gen_dataset(args) -> int:
    _need(args, "count")
    cats = [c.strip() for c in args.categories.split(",") if c.strip()]
    bad = [c for c in cats if c not in CATEGORIES]
    if bad:
        raise UsageError(f"unknown categories {bad}; choose from {list(CATEGORIES)}")
    m = generate_dataset(_out(args), args.count, cats, RANGES[args.range], args.window_ms,
                         args.record_ms, args.seed, args.t_end_us)
    print(f"wrote {m['count']} samples to {args.out}")
    return 0


def cmd_bin_events(args) -> int:
    _need(args, "events")
    out = _out(args)
    events = read_events(args.events)
    w = AccumulationWindow(args.t_end_us, int(round(args.window_ms * 1000)))
    rep = build_representation(synchronize(events, w.t_end_us, w.duration_us), w, args.repr, args.bins)
    np.save(out / f"{ReprKind(args.repr).value}.npy", rep.data)
    print(f"{rep.kind.value}: shape {rep.data.shape}, {int(np.count_nonzero(rep.data))} non-zero cells")
    return 0


def cmd_project(args) -> int:
    _need(args, "cloud", "calib")
    out = _out(args)
    cloud = read_point_cloud(args.cloud)
    T = load_calibration(args.calib)
    K = load_intrinsics(args.intrinsics) if args.intrinsics else dataset_intrinsics(Path(args.cloud).parent.parent)
    proj = project_points(cloud, T, K)
    depth = render_depth_image(proj, K)
    np.save(out / "depth.npy", depth.data)
    with open(out / "projection.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "u", "v", "depth_m"])
        for i, u, v, d in zip(proj.index.tolist(), proj.u.tolist(), proj.v.tolist(), proj.depth.tolist()):
            w.writerow([i, repr(u), repr(v), repr(d)])
    print(f"projected {len(proj.u)} of {len(cloud)} points ({proj.culled} culled)")
    return 0


def load_training_set(root, repr_kind, limit: int | None = None) -> Dataset:
    K = dataset_intrinsics(root)
    inputs, labels = [], []
    for entry, s in iter_samples(root):
        if limit is not None and entry["index"] >= limit:
            break
        inputs.append(make_calib_input(s.cloud, s.events, s.decalibrated, K, s.window, repr_kind))
        labels.append(s.label)
    if not inputs:
        raise EmptyInputError(f"dataset {root} has no samples")
    return Dataset.from_pairs(inputs, labels)


def cmd_train(args) -> int:
    _need(args, "dataset")
    out = _out(args)
    manifest = load_manifest(args.dataset)
    rng_used = DecalibRange(**manifest["range"])
    if rng_used != RANGES[args.range]:
        print(f"warning: dataset range {rng_used} differs from --range {args.range}", file=sys.stderr)
    data = load_training_set(args.dataset, args.repr)
    val = load_training_set(args.val_dataset, args.repr) if args.val_dataset else None
    cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                      rng_seed=args.seed)
    model = net.PredictorModel.init(args.seed)
    res = train(model, data, cfg, val)
    net.save_checkpoint(out / f"model_{args.range}.evlm", res.model)
    _dump(out / "train_config.json", json.loads(cfg.to_json()))
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e, tl in enumerate(res.train_loss):
            vl = res.val_loss[e] if res.val_loss else ""
            w.writerow([e, repr(tl), repr(vl) if vl != "" else ""])
    print(f"trained {res.steps} steps; final train loss {res.train_loss[-1]:.6g}")
    return 0


def cmd_calibrate(args) -> int:
    _need(args, "sample")
    out = _out(args)
    s = read_sample(args.sample)
    K = dataset_intrinsics(Path(args.sample).parent)
    cascade = build_cascade(args)
    res = cascade_calibrate(s.cloud, s.events, s.decalibrated, cascade, K, s.window, s.gt, args.seed)
    save_calibration(out / "calib_estimate.json", res.estimate)
    trace = [{"stage": t.stage, "iteration": t.iteration, "predictor": t.predictor,
              "correction": t.correction.to_json_dict(), "error_cm": t.error_cm,
              "error_deg": t.error_deg} for t in res.trace]
    _dump(out / "trace.json", {"initial_error": list(res.initial_error), "stages": trace})
    last = res.trace[-1]
    print(f"final error {last.error_cm:.3f} cm / {last.error_deg:.4f} deg")
    return 0


def cmd_evaluate(args) -> int:
    _need(args, "dataset")
    out = _out(args)
    cascade = build_cascade(args)
    rows, stage_rows = evaluate_dataset(args.dataset, cascade, args.seed, limit=args.limit)
    report = build_report(rows, stage_rows, _config_echo(args))
    _dump(out / "report.json", report)
    write_boxplot_csv(out / "boxplot.csv", rows)
    o = report["overall"]
    print(f"N={report['N']} translation {o['translation_cm']:.3f} cm, rotation {o['rotation_deg']:.4f} deg")
    return 0


def ablation_grid(root, predictor: str = "edge-align", seed: int = 0, limit: int | None = None,
                  search: str = "fine") -> list[dict]:
    grid = []
    for label, kind, ms in ABLATION_CONFIGS:
        cascade = CascadeConfig([(EdgeAlignPredictor(kind), RANGES[search])])
        if predictor != "edge-align":
            raise UsageError("ablate supports --predictor edge-align")
        rows, _ = evaluate_dataset(root, cascade, seed, window_ms=ms, limit=limit)
        s = summarize(rows)
        grid.append({"representation": label, "accumulation_ms": ms,
                     "trans_error_cm": s["translation_cm"], "rot_error_deg": s["rotation_deg"],
                     "median_trans_cm": s["median_translation_cm"],
                     "median_rot_deg": s["median_rotation_deg"], "n": s["n"]})
    return grid


def cmd_ablate(args) -> int:
    _need(args, "dataset")
    out = _out(args)
    manifest = load_manifest(args.dataset)
    if manifest["record_ms"] < max(ms for _, _, ms in ABLATION_CONFIGS):
        raise UsageError("dataset stream is shorter than the longest ablation window")
    grid = ablation_grid(args.dataset, args.predictor, args.seed, args.limit, args.range)
    cols = ["representation", "accumulation_ms", "trans_error_cm", "rot_error_deg",
            "median_trans_cm", "median_rot_deg", "n"]
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in grid:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    _dump(out / "ablation.json", {"rows": grid, "config": _config_echo(args)})
    for r in grid:
        print(f"{r['representation']} ({r['accumulation_ms']} ms): "
              f"{r['trans_error_cm']:.3f} cm, {r['rot_error_deg']:.4f} deg")
    return 0


def _need(args, *names) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command} requires {' '.join(missing)}")


def _config_echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="evlcalib", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file of option defaults for the subcommand")
    common.add_argument("--out", default="out")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    def window_opts(sp):
        sp.add_argument("--window-ms", type=float, default=50.0)
        sp.add_argument("--t-end-us", type=int, default=1_000_000)

    sp = add("simulate", cmd_simulate, "simulate one sample")
    sp.add_argument("--category", choices=CATEGORIES, default="Urban")
    sp.add_argument("--range", choices=sorted(RANGES), default="fine")
    sp.add_argument("--record-ms", type=float, default=80.0)
    window_opts(sp)

    sp = add("gen-dataset", cmd_gen_dataset, "write a simulator dataset")
    sp.add_argument("--count", type=int)
    sp.add_argument("--categories", default=",".join(CATEGORIES))
    sp.add_argument("--range", choices=sorted(RANGES), default="fine")
    sp.add_argument("--record-ms", type=float, default=80.0)
    window_opts(sp)

    sp = add("bin-events", cmd_bin_events, "build an event representation")
    sp.add_argument("--events")
    sp.add_argument("--repr", choices=[k.value for k in ReprKind], default="frame")
    sp.add_argument("--bins", type=int, default=5)
    window_opts(sp)

    sp = add("project", cmd_project, "project a point cloud into a depth image")
    sp.add_argument("--cloud")
    sp.add_argument("--calib")
    sp.add_argument("--intrinsics")

    def predictor_opts(sp):
        sp.add_argument("--predictor", choices=["edge-align", "oracle", "identity", "regressor"],
                        default="edge-align")
        sp.add_argument("--range", choices=sorted(RANGES), default="fine")
        sp.add_argument("--stages", help="comma list of ranges for edge-align, e.g. coarse,fine")
        sp.add_argument("--checkpoint")
        sp.add_argument("--coarse-checkpoint")
        sp.add_argument("--iterations", type=int, default=1)
        sp.add_argument("--repr", choices=[k.value for k in ReprKind], default="frame")

    sp = add("train", cmd_train, "train the regressor")
    sp.add_argument("--dataset")
    sp.add_argument("--val-dataset")
    sp.add_argument("--range", choices=sorted(RANGES), default="fine")
    sp.add_argument("--repr", choices=[k.value for k in ReprKind], default="frame")
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--lr", type=float, default=1e-4)

    sp = add("calibrate", cmd_calibrate, "calibrate one stored sample")
    sp.add_argument("--sample")
    predictor_opts(sp)

    sp = add("evaluate", cmd_evaluate, "evaluate a predictor on a dataset")
    sp.add_argument("--dataset")
    sp.add_argument("--limit", type=int)
    predictor_opts(sp)

    sp = add("ablate", cmd_ablate, "representation / window ablation grid")
    sp.add_argument("--dataset")
    sp.add_argument("--predictor", choices=["edge-align"], default="edge-align")
    sp.add_argument("--range", choices=sorted(RANGES), default="fine")
    sp.add_argument("--limit", type=int)
    return p


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required")
    if args.config:
        cfg = json.loads(Path(args.config).read_text())
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(k for k in (key.replace("-", "_") for key in cfg) if k not in known)
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        return args.func(args)
    except DivergenceDetected as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 2
    except (CalibrationError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
