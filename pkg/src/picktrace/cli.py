"""Command-line pipeline orchestration.

Every subcommand is a thin wrapper over the library: it loads inputs,
calls the corresponding module functions, writes the declared file
formats, and records a ``manifest.json`` (inputs, effective parameters,
seed, artifact versions, and any skipped sessions) in the output
directory so the run can be reproduced.

Exit codes: 0 on success (skipped sessions are listed, never silent),
1 for pipeline errors, 2 for usage and missing-input errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, config, plots
from .annotate import (
    DbscanParams,
    LabelSequence,
    MassBounds,
    annotate_session,
    load_boundary_csv,
    save_boundary_csv,
)
from .efficiency import (
    EFFICIENCY,
    TRAY_FILL,
    compute_reports,
    load_report_csv,
    save_report_csv,
    season_summary,
)
from .errors import BreakCountUnsatisfiable, EmptyFile, PicktraceError
from .evaluate import confusion, estimation_accuracy, ground_truth_efficiency, precision_recall_f1
from .ingest import (
    PICK,
    UNLABELED,
    format_float,
    load_break_log,
    load_session_csv,
    load_tray_counts,
    save_break_log,
    save_session_csv,
    save_tray_counts,
)
from .model import (
    FORMAT_VERSION,
    ModelConfig,
    TrainConfig,
    build_model,
    classify_session,
    feature_channels,
    load_model,
    loocv,
    normalize_feature_set,
    save_model,
    train,
)
from .synth import SynthConfig, corrupt, generate_season, save_truth_json

log = logging.getLogger("picktrace")


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = config.resolve(args.config, args.set)
        return args.func(args, cfg)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except PicktraceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="picktrace",
        description="Annotate, train on, classify, and summarize picking-cart telemetry.",
    )
    parser.add_argument("--version", action="version", version=f"picktrace {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="YAML or JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("-v", "--verbose", action="count", default=0)

    p = sub.add_parser("annotate", help="label telemetry Pick/NoPick with the unsupervised pipeline")
    p.add_argument("--telemetry", required=True, help="telemetry CSV file or directory")
    p.add_argument("--boundary", required=True, help="field boundary CSV")
    common(p)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("train", help="train the activity segmenter on labeled telemetry")
    p.add_argument("--telemetry", required=True)
    p.add_argument("--features", default="mass+accel",
                   help="velocity | accel | mass | mass+accel | all (comma or plus separated)")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", help="predict Pick/NoPick labels with a trained model")
    p.add_argument("--model", required=True, help="model artifact file")
    p.add_argument("--telemetry", required=True)
    common(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("loocv", help="leave-one-day-out cross-validation")
    p.add_argument("--telemetry", required=True)
    p.add_argument("--features", default="mass+accel")
    p.add_argument("--held-out-dates", required=True,
                   help="comma-separated harvest dates, or 'all'")
    common(p)
    p.set_defaults(func=cmd_loocv)

    p = sub.add_parser("evaluate", help="score predictions against ground-truth labels")
    p.add_argument("--pred", required=True, help="predicted-label telemetry CSV")
    p.add_argument("--truth", required=True, help="ground-truth telemetry CSV")
    p.add_argument("--pred-report", help="efficiency report CSV from predictions")
    p.add_argument("--truth-report", help="efficiency report CSV from ground truth")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("efficiency", help="per-cart efficiency and tray-fill reports")
    p.add_argument("--telemetry", required=True, help="labeled telemetry CSV file or directory")
    p.add_argument("--break-log", help="break-log CSV file or directory")
    p.add_argument("--tray-counts", help="tray-count CSV file or directory")
    common(p)
    p.set_defaults(func=cmd_efficiency)

    p = sub.add_parser("season", help="season statistics and plots from a report CSV")
    p.add_argument("--report", required=True, help="efficiency report CSV")
    p.add_argument("--metric", choices=["efficiency", "tray_fill", "both"], default="both")
    p.add_argument("--iqr", choices=["on", "off"], default="on")
    common(p)
    p.set_defaults(func=cmd_season)

    p = sub.add_parser("synth", help="generate synthetic labeled cart-days")
    p.add_argument("--severity", type=float, default=0.0, help="anomaly injection severity in [0, 1]")
    p.add_argument("--unlabeled", action="store_true", help="emit telemetry without activity labels")
    common(p)
    p.set_defaults(func=cmd_synth)

    return parser


def _require(path, what):
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_sessions(path):
    """Load telemetry from a CSV file or every telemetry CSV in a directory."""
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*train-ready*.csv")) or sorted(p.glob("*.csv"))
        if not files:
            raise EmptyFile(f"{p}: no telemetry CSVs in directory")
        sessions = []
        for f in files:
            sessions.extend(load_session_csv(f))
        return sessions
    return load_session_csv(p)


def _write_manifest(out_dir, args, cfg, inputs, outputs, extra=None):
    manifest = {
        "command": args.command,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "package_version": __version__,
        "model_format_version": FORMAT_VERSION,
        "seed": getattr(args, "seed", None),
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": [str(o) for o in outputs],
        "config": cfg,
    }
    manifest.update(extra or {})
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    return path


def _dbscan_params(cfg) -> DbscanParams:
    return DbscanParams(
        eps=cfg["dbscan.eps"], min_pts=cfg["dbscan.min_pts"], time_scale=cfg["dbscan.time_scale"]
    )


def _mass_bounds(cfg) -> MassBounds:
    return MassBounds(m_min=cfg["mass.min"], m_max=cfg["mass.max"])


def _train_config(args, cfg, features) -> TrainConfig:
    return TrainConfig(
        feature_set=features,
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        learning_rate=cfg["train.learning_rate"],
        val_fraction=cfg["train.val_fraction"],
        class_weighting=cfg["train.class_weighting"],
        seed=args.seed,
    )


def _model_config(cfg, features) -> ModelConfig:
    return ModelConfig(in_channels=len(feature_channels(features)), seq_len=cfg["model.seq_len"])


# --- subcommands -------------------------------------------------------------


def cmd_annotate(args, cfg) -> int:
    telemetry = _require(args.telemetry, "telemetry")
    boundary_path = _require(args.boundary, "boundary file")
    out = _out_dir(args)

    boundary = load_boundary_csv(boundary_path)
    sessions = _load_sessions(telemetry)
    params, bounds = _dbscan_params(cfg), _mass_bounds(cfg)
    for s in sessions:
        s.activity = annotate_session(s, boundary, params, bounds).labels
    out_csv = out / "annotated.csv"
    save_session_csv(sessions, out_csv)
    log.info("annotated %d sessions -> %s", len(sessions), out_csv)
    _write_manifest(out, args, cfg, {"telemetry": telemetry, "boundary": boundary_path}, [out_csv])
    return 0


def cmd_train(args, cfg) -> int:
    telemetry = _require(args.telemetry, "telemetry")
    out = _out_dir(args)
    features = normalize_feature_set(args.features)

    sessions = _load_sessions(telemetry)
    model = build_model(_model_config(cfg, features), seed=args.seed)
    trained, history = train(
        model, sessions, _train_config(args, cfg, features),
        speed_window=cfg["speed.window"], speed_vmax=cfg["speed.vmax"],
    )
    model_path = out / "model.pt"
    save_model(trained, model_path)
    report_path = out / "training_report.csv"
    with open(report_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("epoch,train_loss,val_loss,val_f1\n")
        for h in history:
            f.write(f"{h.epoch},{h.train_loss:.6f},{h.val_loss:.6f},{h.val_f1:.6f}\n")
    log.info("trained %s model (%d epochs) -> %s", features, len(history), model_path)
    _write_manifest(
        out, args, cfg, {"telemetry": telemetry}, [model_path, report_path],
        {"features": features, "final_val_f1": history[-1].val_f1 if history else None},
    )
    return 0


def cmd_classify(args, cfg) -> int:
    model_path = _require(args.model, "model artifact")
    telemetry = _require(args.telemetry, "telemetry")
    out = _out_dir(args)

    model = load_model(model_path)
    sessions = _load_sessions(telemetry)
    probs_path = out / "probabilities.csv"
    with open(probs_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("date_cartID,GPS_TOW,pick_probability\n")
        for s in sessions:
            labels, pick_prob = classify_session(
                model, s, overlap=cfg["classify.overlap"],
                speed_window=cfg["speed.window"], speed_vmax=cfg["speed.vmax"],
            )
            s.activity = labels.labels
            for tow, p in zip(s.gps_tow, pick_prob):
                f.write(f"{s.session_id},{int(tow)},{format_float(float(p))}\n")
    pred_path = out / "predictions.csv"
    save_session_csv(sessions, pred_path)
    log.info("classified %d sessions -> %s", len(sessions), pred_path)
    _write_manifest(
        out, args, cfg, {"model": model_path, "telemetry": telemetry}, [pred_path, probs_path]
    )
    return 0


def cmd_loocv(args, cfg) -> int:
    telemetry = _require(args.telemetry, "telemetry")
    out = _out_dir(args)
    features = normalize_feature_set(args.features)

    sessions = _load_sessions(telemetry)
    dates = sorted({s.harvest_date for s in sessions})
    held_out = dates if args.held_out_dates == "all" else [
        d.strip() for d in args.held_out_dates.split(",") if d.strip()
    ]
    result = loocv(
        sessions, held_out, _model_config(cfg, features), _train_config(args, cfg, features),
        speed_window=cfg["speed.window"], speed_vmax=cfg["speed.vmax"],
    )
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("fold,held_out_date,precision,recall,f1\n")
        for i, fold in enumerate(result.folds, start=1):
            s = fold.scores
            f.write(f"{i},{fold.held_out_date},{s.precision:.6f},{s.recall:.6f},{s.f1:.6f}\n")
        m = result.macro
        f.write(f"mean,,{m.precision:.6f},{m.recall:.6f},{m.f1:.6f}\n")
    log.info("loocv over %d folds: mean F1 %.4f", len(result.folds), result.macro.f1)
    _write_manifest(
        out, args, cfg, {"telemetry": telemetry}, [metrics_path],
        {
            "features": features,
            "held_out_dates": held_out,
            "macro": {"precision": result.macro.precision, "recall": result.macro.recall, "f1": result.macro.f1},
            "micro": {"precision": result.micro.precision, "recall": result.micro.recall, "f1": result.micro.f1},
        },
    )
    return 0


def cmd_evaluate(args, cfg) -> int:
    pred_path = _require(args.pred, "predictions")
    truth_path = _require(args.truth, "ground truth")
    out = _out_dir(args)

    pred = {s.session_id: s for s in _load_sessions(pred_path)}
    truth = {s.session_id: s for s in _load_sessions(truth_path)}
    shared = [sid for sid in truth if sid in pred]
    if not shared:
        raise EmptyFile("no session ids shared between predictions and ground truth")

    rows, pooled = [], None
    for sid in shared:
        c = confusion(
            LabelSequence(sid, pred[sid].activity), LabelSequence(sid, truth[sid].activity)
        )
        pooled = c if pooled is None else pooled + c
        rows.append((sid, c, precision_recall_f1(c)))
    overall = precision_recall_f1(pooled)

    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("session_id,tp,fp,fn,tn,precision,recall,f1\n")
        for sid, c, s in rows:
            f.write(f"{sid},{c.tp},{c.fp},{c.fn},{c.tn},{s.precision:.6f},{s.recall:.6f},{s.f1:.6f}\n")
        f.write(
            f"overall,{pooled.tp},{pooled.fp},{pooled.fn},{pooled.tn},"
            f"{overall.precision:.6f},{overall.recall:.6f},{overall.f1:.6f}\n"
        )
    outputs = [metrics_path]

    extra = {
        "overall": {"precision": overall.precision, "recall": overall.recall, "f1": overall.f1},
        "sessions_compared": len(shared),
    }
    if args.pred_report and args.truth_report:
        accuracy_path = out / "accuracy.json"
        _estimation_accuracy_json(
            _require(args.pred_report, "prediction report"),
            _require(args.truth_report, "ground-truth report"),
            accuracy_path,
        )
        outputs.append(accuracy_path)
    _write_manifest(
        out, args, cfg, {"pred": pred_path, "truth": truth_path}, outputs, extra
    )
    return 0


def _estimation_accuracy_json(pred_report_path, truth_report_path, out_path):
    pred = {r.session_id: r for r in load_report_csv(pred_report_path)}
    truth = {r.session_id: r for r in load_report_csv(truth_report_path)}
    shared = [sid for sid in truth if sid in pred]
    payload = {"sessions": shared}
    for name, attr in (("efficiency", "efficiency"), ("tray_fill", "tray_fill_time")):
        gt = [getattr(truth[sid], attr) for sid in shared]
        est = [getattr(pred[sid], attr) for sid in shared]
        report = estimation_accuracy(gt, est)
        payload[name] = {
            "mean_accuracy_pct": report.mean,
            "median_accuracy_pct": report.median,
            "range_pct": [report.vmin, report.vmax],
            "sd_pct": report.sd,
            "per_cart_accuracy_pct": report.per_cart_accuracy.tolist(),
            "per_cart_relative_error": report.relative_errors.tolist(),
        }
    with open(out_path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1)


def cmd_efficiency(args, cfg) -> int:
    telemetry = _require(args.telemetry, "telemetry")
    break_log = _require(args.break_log, "break log")
    tray_counts = _require(args.tray_counts, "tray counts")
    out = _out_dir(args)

    sessions = _load_sessions(telemetry)
    unlabeled = [s.session_id for s in sessions if not s.labeled]
    if unlabeled:
        raise EmptyFile(f"sessions without labels cannot be scored: {', '.join(unlabeled[:5])}")
    labels = [LabelSequence(s.session_id, s.activity) for s in sessions]
    break_records = load_break_log(break_log) if break_log else []
    tray_records = load_tray_counts(tray_counts) if tray_counts else []

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", BreakCountUnsatisfiable)
        reports, skipped = compute_reports(
            sessions, labels, break_records, tray_records,
            idle_fraction=cfg["breaks.idle_fraction"],
            min_break_s=cfg["breaks.min_break_s"],
            tray_kwargs={
                "full_kg": cfg["trays.full_kg"],
                "empty_kg": cfg["trays.empty_kg"],
                "sustain_s": cfg["trays.sustain_s"],
                "median_window": cfg["trays.median_window"],
            },
        )
    warning_messages = [str(w.message) for w in caught]

    report_path = out / "report.csv"
    save_report_csv(reports, report_path)
    for sid, reason in skipped:
        print(f"skipped {sid}: {reason}", file=sys.stderr)
    log.info("%d reports, %d skipped -> %s", len(reports), len(skipped), report_path)
    _write_manifest(
        out, args, cfg,
        {"telemetry": telemetry, "break_log": break_log, "tray_counts": tray_counts},
        [report_path],
        {"skipped_sessions": [{"session_id": sid, "reason": r} for sid, r in skipped],
         "warnings": warning_messages},
    )
    if not reports:
        print("error: no session produced a report", file=sys.stderr)
        return 1
    return 0


def cmd_season(args, cfg) -> int:
    report_path = _require(args.report, "report CSV")
    out = _out_dir(args)

    reports = load_report_csv(report_path)
    use_iqr = args.iqr == "on"
    metrics = {"efficiency": EFFICIENCY, "tray_fill": TRAY_FILL}
    if args.metric != "both":
        metrics = {args.metric: metrics[args.metric]}

    payload = {"iqr": use_iqr, "n_reports": len(reports), "metrics": {}}
    for name, key in metrics.items():
        s = season_summary(reports, metric=key, use_iqr=use_iqr)
        payload["metrics"][name] = {
            "mean": s.mean,
            "median": s.median,
            "range": [s.vmin, s.vmax],
            "sd": s.sd,
            "ci95": [s.ci_low, s.ci_high],
            "n_in": s.n_in,
            "n_outliers": s.n_outliers,
            "conventions": s.conventions,
        }
    summary_path = out / "summary.json"
    with open(summary_path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1)

    plot_paths = plots.season_plots(reports, out)
    log.info("season summary over %d reports -> %s", len(reports), summary_path)
    _write_manifest(
        out, args, cfg, {"report": report_path}, [summary_path, *plot_paths]
    )
    return 0


def cmd_synth(args, cfg) -> int:
    out = _out_dir(args)
    synth_cfg = SynthConfig(
        n_carts=cfg["synth.n_carts"],
        day_length_s=cfg["synth.day_length_s"],
        breaks=config.parse_breaks(cfg["synth.breaks"]),
        seed=args.seed,
    )
    days = generate_season(
        synth_cfg, n_days=cfg["synth.days"], seed=args.seed, start=cfg["synth.start_date"]
    )

    (out / "break_log").mkdir(exist_ok=True)
    outputs = []
    all_trays = []
    for day in days:
        sessions = day.sessions
        if args.severity > 0:
            sessions, injections = corrupt(sessions, args.severity, seed=args.seed)
            day.truth.injections.extend(injections)
        if args.unlabeled:
            for s in sessions:
                s.activity = np.full(len(s), UNLABELED, dtype=np.int8)
        date = day.truth.harvest_date
        telemetry_path = out / f"{date}_train-ready_all_carts.csv"
        save_session_csv(sessions, telemetry_path)
        break_path = out / "break_log" / f"{date}_break_log.csv"
        save_break_log(day.break_records, break_path)
        truth_path = out / f"{date}_truth.json"
        save_truth_json(day.truth, truth_path)
        all_trays.extend(day.tray_records)
        outputs += [telemetry_path, break_path, truth_path]

    trays_path = out / "harvested_trays.csv"
    save_tray_counts(all_trays, trays_path)
    boundary_path = out / "boundary.csv"
    save_boundary_csv(days[0].boundary, boundary_path)
    outputs += [trays_path, boundary_path]
    log.info("synthesized %d day(s) -> %s", len(days), out)
    _write_manifest(out, args, cfg, {}, outputs, {"severity": args.severity})
    return 0


if __name__ == "__main__":
    sys.exit(main())
