"""``disease-atlas`` command line: simulate, prepare, train, predict, evaluate, benchmark, search.

Exit codes: 0 success, 2 I/O or configuration, 3 preparation/training,
4 unknown patient, 5 every benchmark cell failed.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_manifest, load_synthetic_config
from .data import (ChannelStats, IngestionError, PreparationError, SplitSpec, discretize, encode,
                   generate_synthetic, impute, ingest_csv, make_labels, make_windows, prepare, read_manifest,
                   write_csv, write_manifest)
from .evaluation import (HORIZONS, MetricError, auprc, auroc, benchmark, forecast_comparator, group_map,
                         longitudinal_mse,
                         score_labels, summary_text, write_report)
from .model import load_checkpoint, save_checkpoint
from .pipeline import (Z90, ForecastRequest, SearchData, TrainingError, default_tasks, event_risk,
                       forecast_rows, mc_forecast, mc_predict, random_search, read_forecast_csv, train,
                       write_forecast, write_forecast_csv)

EXIT_OK, EXIT_IO, EXIT_TRAIN, EXIT_QUERY, EXIT_BENCHMARK = 0, 2, 3, 4, 5


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _channels_path(out: Path) -> Path:
    return out.with_suffix(".channels")


def _ensure_parent(path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot create {path.parent}: {exc}") from exc


def _load_run(manifest_path):
    try:
        manifest = load_manifest(manifest_path)
        cfg = manifest.run_config()
    except ConfigError as exc:
        raise CommandError(EXIT_IO, str(exc)) from exc
    for label, path in (("cohort", manifest.cohort), ("channels", manifest.channels)):
        if not path.is_file():
            raise CommandError(EXIT_IO, f"{label} file {path} does not exist")
    try:
        spec = read_manifest(manifest.channels)
        cohort = ingest_csv(manifest.cohort, spec)
    except IngestionError as exc:
        raise CommandError(EXIT_IO, str(exc)) from exc
    except (OSError, ValueError) as exc:
        raise CommandError(EXIT_IO, f"cannot read inputs: {exc}") from exc
    return manifest, cfg, cohort


def _horizons(text: str | None, default) -> tuple[float, ...]:
    if text is None:
        return tuple(default)
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise CommandError(EXIT_IO, f"bad --horizons {text!r}") from exc


def _checkpoint_path(manifest, partition: int) -> Path:
    return manifest.checkpoint_dir / f"checkpoint_p{partition}.json"


def _prepared(cohort, cfg: RunConfig, partition: int):
    try:
        return prepare(cohort, SplitSpec(partition_seed=cfg.partition_seed, partition_index=partition))
    except (PreparationError, ValueError) as exc:
        raise CommandError(EXIT_TRAIN, f"preparation failed: {exc}") from exc


# -- commands ----------------------------------------------------------------------

def cmd_simulate(args) -> int:
    try:
        config = load_synthetic_config(args.config)
    except ConfigError as exc:
        raise CommandError(EXIT_IO, str(exc)) from exc
    out = Path(args.out)
    cohort = generate_synthetic(config)
    _ensure_parent(out)
    try:
        write_csv(cohort, out)
        write_manifest(cohort.spec, _channels_path(out))
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write {out}: {exc}") from exc
    events = int(sum(r.events.sum() for r in cohort.records))
    print(f"patients={len(cohort)} events={events} rows={sum(len(r) for r in cohort.records)}")
    print(f"wrote {out} and {_channels_path(out)}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    manifest, cfg, cohort = _load_run(args.manifest)
    p = args.partition
    prepared = _prepared(cohort, cfg, p)
    out = Path(args.out) if args.out else manifest.report_dir / f"prepared_p{p}"
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "splits.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "split"])
            for name in ("train", "validation", "test"):
                for pid in getattr(prepared, name).patient_ids:
                    w.writerow([pid, name])
        for name in ("train", "validation", "test"):
            write_csv(getattr(prepared, name), out / f"{name}.csv")
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write {out}: {exc}") from exc
    try:
        train_rec = encode(prepared.train, prepared.stats)
        windows = make_windows(train_rec, cfg.rho_max, cfg.horizons)
    except (PreparationError, ValueError) as exc:
        raise CommandError(EXIT_TRAIN, f"preparation failed: {exc}") from exc
    print(f"train={len(prepared.train)} validation={len(prepared.validation)} test={len(prepared.test)} "
          f"training_windows={len(windows)}")
    return EXIT_OK


def _train_partition(cohort, cfg: RunConfig, partition: int):
    prepared = _prepared(cohort, cfg, partition)
    spec = cohort.spec
    model_config = cfg.model_config(spec)
    try:
        windows = make_windows(encode(prepared.train, prepared.stats), cfg.rho_max, cfg.horizons)
        tasks = default_tasks(model_config, cfg.task_grouping, group_map(spec))
        result = train(windows, cfg.train_config(partition), model_config, tasks)
    except (PreparationError, TrainingError, ValueError) as exc:
        raise CommandError(EXIT_TRAIN, f"training failed: {exc}") from exc
    return prepared, result


def cmd_train(args) -> int:
    manifest, cfg, cohort = _load_run(args.manifest)
    p = args.partition
    prepared, result = _train_partition(cohort, cfg, p)
    ckpt = Path(args.out) if args.out else _checkpoint_path(manifest, p)
    trace = ckpt.with_name(ckpt.stem + "_loss.csv")
    extra = {"channels": asdict(cohort.spec), "stats": prepared.stats.to_dict(), "rho_max": cfg.rho_max,
             "horizons": list(cfg.horizons), "partition": p, "partition_seed": cfg.partition_seed,
             "train_config": asdict(cfg.train_config(p))}
    _ensure_parent(ckpt)
    try:
        save_checkpoint(ckpt, result.weights, extra)
        with open(trace, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "task", "task_loss", "total_loss"])
            for row in result.trace:
                w.writerow([row.iteration, row.task, repr(row.task_loss), repr(row.total_loss)])
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write {ckpt}: {exc}") from exc
    print(f"iterations={len(result.trace)} final_total_loss={result.trace[-1].total_loss:.4f}")
    print(f"wrote {ckpt} and {trace}")
    return EXIT_OK


def _load_model(manifest, partition: int):
    path = _checkpoint_path(manifest, partition)
    if not path.is_file():
        raise CommandError(EXIT_IO, f"checkpoint {path} does not exist; run train first")
    try:
        weights, extra = load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CommandError(EXIT_IO, f"cannot load {path}: {exc}") from exc
    return weights, extra, ChannelStats.from_dict(extra["stats"])


def cmd_predict(args) -> int:
    manifest, cfg, cohort = _load_run(args.manifest)
    weights, extra, stats = _load_model(manifest, args.partition)
    if args.patient not in set(cohort.patient_ids):
        raise CommandError(EXIT_QUERY, f"unknown patient {args.patient!r}")
    horizons = _horizons(args.horizons, cfg.horizons)
    single = discretize(cohort.subset([args.patient]))
    try:
        rec = encode(impute(single, stats), stats)[0]
        request = ForecastRequest(rec, horizons, args.mc_samples or cfg.mc_samples,
                                  rho_max=int(extra.get("rho_max", cfg.rho_max)), seed=cfg.seed)
        result = mc_forecast(request, weights, stats.continuous_std, stats.continuous_mean)
    except ValueError as exc:
        raise CommandError(EXIT_QUERY, str(exc)) from exc
    spec = cohort.spec
    rows = forecast_rows(result, spec.continuous, spec.binary, spec.events)
    if args.out:
        out = Path(args.out)
        _ensure_parent(out)
        try:
            write_forecast_csv(out, rows)
        except OSError as exc:
            raise CommandError(EXIT_IO, f"cannot write {out}: {exc}") from exc
        print(f"wrote {len(rows)} forecast rows to {out}")
    else:
        write_forecast(sys.stdout, rows)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest, cfg, cohort = _load_run(args.manifest)
    p = args.partition
    weights, extra, _ = _load_model(manifest, p)
    prepared = _prepared(cohort, cfg, p)
    J = args.mc_samples or cfg.mc_samples
    horizons = _horizons(args.horizons, cfg.horizons)
    rho_max = int(extra.get("rho_max", cfg.rho_max))
    try:
        test_rec = encode(prepared.test, prepared.stats)
        labels = make_labels(test_rec, rho_max, horizons)
        windows = make_windows(test_rec, rho_max, horizons)
    except (PreparationError, ValueError) as exc:
        raise CommandError(EXIT_TRAIN, f"preparation failed: {exc}") from exc
    rows = []
    lam = mc_predict(weights, labels, 0.0, J, seed=cfg.seed).lam_mean[:, 0]
    risk = event_risk(lam, labels.horizons)
    for j, tau in enumerate(labels.horizons):
        s, y = score_labels(risk[:, j], labels.labels[:, j])
        for name, fn in (("AUROC", auroc), ("AUPRC", auprc)):
            try:
                rows.append([name, "", repr(tau), repr(fn(s, y))])
            except MetricError:
                rows.append([name, "", repr(tau), ""])
    mc = mc_predict(weights, windows, windows.tau, J, seed=cfg.seed)
    tb = windows.targets(np.arange(len(windows)))
    scale = prepared.stats.continuous_std
    table = longitudinal_mse(mc.mu_mean * scale, tb.y * scale, tb.y_obs, windows.tau, cohort.spec.continuous,
                             horizons)
    for (channel, tau), val in table.items():
        rows.append(["MSE", channel, repr(float(tau)), "" if val is None else repr(val)])
    for tau in horizons:
        sel = np.isclose(windows.tau, tau)
        obs = tb.y_obs[sel]
        if obs.any():
            z = np.abs(tb.y[sel] - mc.mu_mean[sel]) / mc.predictive_std[sel]
            rows.append(["coverage90", "", repr(float(tau)), repr(float((z[obs] <= Z90).mean()))])
    out = Path(args.out) if args.out else manifest.report_dir / f"evaluation_p{p}.csv"
    _ensure_parent(out)
    try:
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "channel", "tau", "value"])
            w.writerows(rows)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write {out}: {exc}") from exc
    print(f"wrote {out}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    manifest, cfg, cohort = _load_run(args.manifest)
    external = None
    if cfg.comparator_csv:
        path = Path(cfg.comparator_csv)
        path = path if path.is_absolute() else manifest.config.parent / path
        try:
            external = {"comparator": forecast_comparator(read_forecast_csv(path), cohort.spec)}
        except (OSError, ValueError) as exc:
            raise CommandError(EXIT_IO, f"cannot read comparator scores: {exc}") from exc
    report = benchmark(cohort, cfg.benchmark_settings(), external=external,
                       progress=lambda msg: print(msg, file=sys.stderr))
    out = Path(args.out) if args.out else manifest.report_dir
    try:
        files = write_report(report, out)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write report to {out}: {exc}") from exc
    for msg in report.failures:
        print(f"failed: {msg}", file=sys.stderr)
    print(summary_text(report))
    print("wrote " + ", ".join(str(f) for f in files))
    if not report.any_success:
        raise CommandError(EXIT_BENCHMARK, "every benchmark cell failed")
    return EXIT_OK


def cmd_search(args) -> int:
    manifest, cfg, cohort = _load_run(args.manifest)
    if not cfg.search_space:
        raise CommandError(EXIT_IO, "run configuration declares no search_* ranges")
    data = []
    for p in range(cfg.partitions):
        prepared = _prepared(cohort, cfg, p)
        try:
            tr = encode(prepared.train, prepared.stats)
            va = encode(prepared.validation, prepared.stats)
            data.append(SearchData(make_windows(tr, cfg.rho_max, cfg.horizons),
                                   make_labels(va, cfg.rho_max, cfg.horizons),
                                   make_windows(va, cfg.rho_max, cfg.horizons)))
        except (PreparationError, ValueError) as exc:
            raise CommandError(EXIT_TRAIN, f"preparation failed: {exc}") from exc
    model_config = cfg.model_config(cohort.spec)
    try:
        result = random_search(cfg.search_space, data, cfg.search_iterations, cfg.train_config(), model_config,
                               cfg.search_seed, cfg.search_mc_samples,
                               default_tasks(model_config, cfg.task_grouping, group_map(cohort.spec)))
    except (TrainingError, ValueError) as exc:
        raise CommandError(EXIT_TRAIN, f"search failed: {exc}") from exc
    out = Path(args.out) if args.out else manifest.report_dir / "search.csv"
    _ensure_parent(out)
    dims = sorted(cfg.search_space)
    try:
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration"] + dims + ["val_auroc", "val_loss"])
            for i, c in enumerate(result.candidates):
                vals = {**asdict(c.train_config), **asdict(c.model_config)}
                w.writerow([i] + [repr(vals[d]) for d in dims] + [repr(c.val_auroc), repr(c.val_loss)])
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write {out}: {exc}") from exc
    best = {**asdict(result.best.train_config), **asdict(result.best.model_config)}
    print("best: " + ", ".join(f"{d}={best[d]!r}" for d in dims))
    print(f"wrote {out}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disease-atlas", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write a seeded synthetic cohort CSV and its channel manifest")
    sim.add_argument("config", help="synthetic cohort configuration file")
    sim.add_argument("--out", required=True, help="cohort CSV path; the manifest goes next to it (.channels)")
    sim.set_defaults(func=cmd_simulate)

    def run_parser(name, func, help_text, out_help):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--manifest", required=True, help="run manifest")
        p.add_argument("--out", help=out_help)
        p.set_defaults(func=func)
        return p

    def partition_arg(p):
        p.add_argument("--partition", type=int, choices=(0, 1, 2), default=0)

    prep = run_parser("prepare", cmd_prepare, "split, impute and export a partition", "output directory")
    partition_arg(prep)
    tr = run_parser("train", cmd_train, "train on a partition; writes checkpoint and loss CSV", "checkpoint path")
    partition_arg(tr)
    pr = run_parser("predict", cmd_predict, "forecast one patient", "forecast CSV (default: stdout)")
    pr.add_argument("--patient", required=True)
    pr.add_argument("--horizons", help=f"comma-separated years (default {','.join(map(str, HORIZONS))})")
    pr.add_argument("--mc-samples", type=int, dest="mc_samples")
    partition_arg(pr)
    ev = run_parser("evaluate", cmd_evaluate, "score a checkpoint on its test split", "metrics CSV")
    ev.add_argument("--horizons")
    ev.add_argument("--mc-samples", type=int, dest="mc_samples")
    partition_arg(ev)
    run_parser("benchmark", cmd_benchmark, "three-partition comparison against the baselines", "report directory")
    run_parser("search", cmd_search, "random hyperparameter search", "candidate CSV")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
