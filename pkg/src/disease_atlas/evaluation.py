"""Discrimination and longitudinal-error metrics, the two baselines, and the
three-partition benchmark report."""
from __future__ import annotations

import csv
import logging
import math
import statistics
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from . import numerics as nx
from .data.cohort import Cohort, SplitSpec, prepare
from .data.windows import EXCLUDED, EncodedRecord, LabelSet, WindowSet, encode, make_labels, make_windows
from .model import ModelConfig, ModelWeights, glorot, sample_masks, unroll
from .pipeline import (SequencePlan, TrainConfig, TrainingError, default_tasks, event_risk,
                       hidden_at_entries, mc_predict, train)

log = logging.getLogger(__name__)

HORIZONS = (0.5, 1.0, 1.5, 2.0)
MODELS = ("disease_atlas", "lstm", "landmarking")


class MetricError(ValueError):
    pass


# -- metrics --------------------------------------------------------------------------

def score_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """Drop EXCLUDED entries; returns (scores, 0/1 labels)."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    keep = labels != EXCLUDED
    return scores[keep], labels[keep].astype(np.int64)


def auroc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counted one half."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    pos = labels == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise MetricError("AUROC needs at least one positive and one negative")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def auprc(scores, labels) -> float:
    """Average precision over positives in descending-score order.

    Tied scores keep their input order, so the value depends on row order
    when positives and negatives tie.
    """
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    if not (labels == 1).any():
        raise MetricError("AUPRC needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = (labels[order] == 1).astype(np.float64)
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float((precision * hits).sum() / hits.sum())


def mse(pred, target) -> float | None:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.size == 0:
        return None
    return float(np.mean((pred - target) ** 2))


def pct_decrease(mse_this: float, mse_other: float) -> float:
    """Percent decrease in error of ``this`` relative to ``other``."""
    return 100.0 * (mse_other - mse_this) / mse_other


def longitudinal_mse(pred: np.ndarray, target: np.ndarray, observed: np.ndarray, tau: np.ndarray,
                     channels: Sequence[str], horizons: Sequence[float] = HORIZONS) -> dict[tuple[str, float], float | None]:
    """MSE per (channel, tau) over observed targets only; absent cells are None."""
    out = {}
    for c, name in enumerate(channels):
        for h in horizons:
            sel = observed[:, c] & np.isclose(tau, h)
            out[(name, float(h))] = mse(pred[sel, c], target[sel, c])
    return out


# -- LSTM baseline ------------------------------------------------------------------------

@dataclass
class LSTMBaseline:
    config: ModelConfig
    horizons: tuple[float, ...]
    params: dict[str, np.ndarray]


def _lstm_init(config: ModelConfig, n_out: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    H = config.hidden_size
    return {
        "lstm_W": glorot((4 * H, config.input_size), rng),
        "lstm_U": glorot((4 * H, H), rng),
        "lstm_b": np.zeros(4 * H),
        "out_W": glorot((n_out, H), rng),
        "out_b": np.zeros(n_out),
    }


def train_lstm_baseline(labels: LabelSet, config: TrainConfig, model_config: ModelConfig) -> LSTMBaseline:
    """LSTM trunk with one sigmoid output per horizon, fitted on event-within-tau labels."""
    if len(labels) == 0:
        raise TrainingError("no labelled histories for the LSTM baseline")
    model_config = replace(model_config, dropout_rate=config.dropout_rate)
    n_out = len(labels.horizons)
    params_np = _lstm_init(model_config, n_out, config.seed)
    rng = np.random.default_rng([config.seed, 4])
    state = nx.AdamState(learning_rate=config.learning_rate)
    for _ in range(config.max_iterations):
        idx = rng.integers(0, len(labels), size=config.minibatch_size)
        inputs, active = labels.inputs(idx)
        y = labels.labels[idx]
        obs = (y != EXCLUDED).astype(float)
        target = np.where(y == 1, 1.0, 0.0)
        masks = sample_masks(model_config, rng, batch=len(idx))
        params = nx.parameters(params_np)
        with nx.Graph():
            h = unroll(params, inputs, masks, active)[-1]
            z = nx.affine(h * masks.output_mask, params["out_W"], params["out_b"])
            loss = ((nx.softplus(-z) * target + nx.softplus(z) * (1.0 - target)) * obs).sum()
        grads = nx.backward(loss)
        params_np, state = nx.adam_step(params_np, {k: grads[p] for k, p in params.items()}, state)
    return LSTMBaseline(model_config, labels.horizons, params_np)


def lstm_scores(model: LSTMBaseline, labels: LabelSet) -> np.ndarray:
    """Deterministic event-within-tau probabilities, shape (n, horizons)."""
    params = {k: nx.Tensor(v) for k, v in model.params.items()}
    plan = SequencePlan.build(labels)
    masks = sample_masks(model.config, 0, batch=len(plan.seq_patient), rate=0.0)
    h = hidden_at_entries(params, plan, plan.inputs(labels.records), masks)
    return nx.sigmoid_np(h @ model.params["out_W"].T + model.params["out_b"])


def lstm_baseline(train_labels: LabelSet, eval_labels: LabelSet, config: TrainConfig,
                  model_config: ModelConfig) -> np.ndarray:
    return lstm_scores(train_lstm_baseline(train_labels, config, model_config), eval_labels)


# -- landmarking -------------------------------------------------------------------------

@dataclass
class LogisticFit:
    coef: np.ndarray        # on the original feature scale, NaN for dropped columns
    intercept: float
    kept: np.ndarray

    def decision(self, X: np.ndarray) -> np.ndarray:
        return X[:, self.kept] @ self.coef[self.kept] + self.intercept

    def predict(self, X: np.ndarray) -> np.ndarray:
        return nx.sigmoid_np(self.decision(X))


def fit_logistic(X: np.ndarray, y: np.ndarray, iterations: int = 1500, learning_rate: float = 0.05,
                 seed: int = 0, names: Sequence[str] | None = None) -> LogisticFit:
    """Logistic regression by full-batch Adam on the summed binary NLL.

    Features are standardised internally; constant columns are dropped with a
    warning. The fit is deterministic; ``seed`` is accepted for interface symmetry.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sd = X.std(axis=0)
    kept = sd > 1e-12
    for j in np.flatnonzero(~kept):
        label = names[j] if names is not None else f"column {j}"
        warnings.warn(f"landmarking: dropping constant feature {label}", RuntimeWarning, stacklevel=2)
    mean = X.mean(axis=0)
    Z = (X[:, kept] - mean[kept]) / sd[kept]
    A = np.hstack([Z, np.ones((len(Z), 1))])
    w = {"w": np.zeros(A.shape[1])}
    state = nx.AdamState(learning_rate=learning_rate)
    n = len(A)
    for _ in range(iterations):
        p = nx.sigmoid_np(A @ w["w"])
        w, state = nx.adam_step(w, {"w": A.T @ (p - y) / n}, state)
    beta = w["w"][:-1] / sd[kept]
    coef = np.full(X.shape[1], np.nan)
    coef[kept] = beta
    intercept = float(w["w"][-1] - np.sum(beta * mean[kept]))
    return LogisticFit(coef, intercept, kept)


def landmark_features(labels: LabelSet) -> np.ndarray:
    rows = [np.append(labels.records[p].inputs[k], labels.records[p].times[k])
            for p, k in zip(labels.patient, labels.end)]
    return np.array(rows).reshape(len(labels), -1)


def landmarking_baseline(train_labels: LabelSet, eval_labels: LabelSet, iterations: int = 1500,
                         seed: int = 0) -> np.ndarray:
    """Pooled landmark logistic regression per horizon, on the current vector plus t."""
    X_train, X_eval = landmark_features(train_labels), landmark_features(eval_labels)
    out = np.zeros((len(eval_labels), len(eval_labels.horizons)))
    for j, h in enumerate(eval_labels.horizons):
        col = train_labels.horizons.index(h)
        keep = train_labels.labels[:, col] != EXCLUDED
        fit = fit_logistic(X_train[keep], train_labels.labels[keep, col] == 1, iterations, seed=seed)
        out[:, j] = fit.predict(X_eval)
    return out


# -- benchmark ---------------------------------------------------------------------------

@dataclass
class BenchmarkSettings:
    train: TrainConfig = TrainConfig()
    model_hidden: int = 32
    model_task: int = 16
    lstm_iterations: int | None = None
    landmark_iterations: int = 1500
    horizons: tuple[float, ...] = HORIZONS
    rho_max: int = 20
    mc_samples: int = 100
    partition_seed: int = 0
    partitions: int = 3
    task_grouping: str = "kind"


@dataclass
class MetricReport:
    """Per-partition values keyed by (metric, tau, model) for discrimination
    and (channel, tau) for the MSE decrease."""

    partitions: int
    discrimination: dict[tuple[str, float, str], list[float | None]] = field(default_factory=dict)
    mse: dict[tuple[str, float, str], list[float | None]] = field(default_factory=dict)
    pct_decrease: dict[tuple[str, float], list[float | None]] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)
    comparator: str = "locf"
    coverage: dict[float, list[float | None]] = field(default_factory=dict)
    models: dict[int, ModelWeights] = field(default_factory=dict)  # trained disease_atlas weights

    @staticmethod
    def summarize(values: Sequence[float | None]) -> tuple[float, float] | None:
        vals = [v for v in values if v is not None and math.isfinite(v)]
        if not vals:
            return None
        # statistics works in exact arithmetic, so identical runs give SD 0
        sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
        return float(statistics.mean(vals)), float(sd)

    @property
    def any_success(self) -> bool:
        return any(self.summarize(v) is not None for v in self.discrimination.values())

    def discrimination_rows(self) -> list[list]:
        rows = []
        for (metric, tau, model), vals in self.discrimination.items():
            s = self.summarize(vals)
            ok = [v for v in vals if v is not None]
            rows.append([metric, tau, model, "" if s is None else s[0], "" if s is None else s[1],
                         len(ok), "failed" if s is None else "ok"])
        return rows

    def decrease_rows(self) -> list[list]:
        rows = []
        for (channel, tau), vals in self.pct_decrease.items():
            s = self.summarize(vals)
            rows.append([channel, tau, "" if s is None else s[0], "" if s is None else s[1],
                         len([v for v in vals if v is not None])])
        return rows


def fmt_cell(mean: float, sd: float, digits: int = 3) -> str:
    return f"{mean:.{digits}f} (± {sd:.{digits}f})"


def fmt_pct(mean: float, sd: float) -> str:
    return f"{mean:.0f}% (±{sd:.0f}%)"


def _record_discrimination(report: MetricReport, model: str, scores: np.ndarray, labels: LabelSet, p: int):
    for j, tau in enumerate(labels.horizons):
        s, y = score_labels(scores[:, j], labels.labels[:, j])
        for metric, fn in (("AUROC", auroc), ("AUPRC", auprc)):
            try:
                val = fn(s, y)
            except MetricError:
                val = None
            report.discrimination[(metric, tau, model)][p] = val


def _test_windows(records: list[EncodedRecord], settings: BenchmarkSettings) -> WindowSet:
    return make_windows(records, settings.rho_max, settings.horizons)


def _longitudinal_arrays(weights: ModelWeights, windows: WindowSet, mc_samples: int, seed: int):
    mc = mc_predict(weights, windows, windows.tau, mc_samples, seed)
    tb = windows.targets(np.arange(len(windows)))
    locf = np.array([windows.records[p].y[k] for p, k in zip(windows.patient, windows.end)])
    return mc, tb, locf.reshape(len(windows), -1)


def benchmark(cohort: Cohort, settings: BenchmarkSettings = BenchmarkSettings(),
              models: Sequence[str] = MODELS, external: Mapping[str, Callable] | None = None,
              progress: Callable[[str], None] | None = None) -> MetricReport:
    """Train and score every model on each partition; failures mark cells, never abort.

    ``external`` maps a model name to ``fn(test_labels, test_windows, partition, stats)``
    returning ``(risk scores (n, horizons), standardised continuous predictions or None)``.
    """
    say = progress or (lambda msg: log.info(msg))
    P = settings.partitions
    report = MetricReport(P)
    all_models = list(models) + list(external or {})
    for metric in ("AUROC", "AUPRC"):
        for tau in settings.horizons:
            for m in all_models:
                report.discrimination[(metric, float(tau), m)] = [None] * P
    for p in range(P):
        try:
            prepared = prepare(cohort, SplitSpec(partition_seed=settings.partition_seed, partition_index=p))
            train_rec = encode(prepared.train, prepared.stats)
            test_rec = encode(prepared.test, prepared.stats)
            train_windows = make_windows(train_rec, settings.rho_max, settings.horizons)
            train_labels = make_labels(train_rec, settings.rho_max, settings.horizons)
            test_labels = make_labels(test_rec, settings.rho_max, settings.horizons)
            test_windows = _test_windows(test_rec, settings)
        except Exception as exc:  # noqa: BLE001 - recorded in the report
            report.failures.append(f"partition {p}: preparation failed: {exc}")
            continue
        spec = cohort.spec
        cfg = ModelConfig(len(spec.continuous), len(spec.binary), len(spec.events), len(spec.covariates),
                          settings.model_hidden, settings.model_task, settings.train.dropout_rate)
        tc = replace(settings.train, seed=settings.train.seed + p)
        scale = prepared.stats.continuous_std
        preds: dict[str, np.ndarray] = {}
        tb = None
        if "disease_atlas" in models:
            try:
                say(f"partition {p}: training disease_atlas")
                groups = group_map(spec)
                tasks = default_tasks(cfg, settings.task_grouping, groups)
                result = train(train_windows, tc, cfg, tasks)
                report.models[p] = result.weights
                lam = mc_predict(result.weights, test_labels, 0.0, settings.mc_samples, seed=tc.seed).lam_mean[:, 0]
                _record_discrimination(report, "disease_atlas", event_risk(lam, test_labels.horizons),
                                       test_labels, p)
                mc, tb, locf = _longitudinal_arrays(result.weights, test_windows, settings.mc_samples, tc.seed)
                preds["disease_atlas"] = mc.mu_mean
                preds["locf"] = locf
                for tau in settings.horizons:
                    sel = np.isclose(test_windows.tau, tau)
                    obs = tb.y_obs[sel]
                    if obs.any():
                        z = np.abs(tb.y[sel] - mc.mu_mean[sel]) / mc.predictive_std[sel]
                        report.coverage.setdefault(float(tau), [None] * P)[p] = float((z[obs] <= 1.6448536269514722).mean())
            except Exception as exc:  # noqa: BLE001
                report.failures.append(f"partition {p}: disease_atlas failed: {exc}")
        if "lstm" in models:
            try:
                say(f"partition {p}: training lstm baseline")
                lc = tc if settings.lstm_iterations is None else replace(tc, max_iterations=settings.lstm_iterations)
                scores = lstm_baseline(train_labels, test_labels, lc, cfg)
                _record_discrimination(report, "lstm", scores, test_labels, p)
            except Exception as exc:  # noqa: BLE001
                report.failures.append(f"partition {p}: lstm failed: {exc}")
        if "landmarking" in models:
            try:
                say(f"partition {p}: fitting landmarking")
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    scores = landmarking_baseline(train_labels, test_labels, settings.landmark_iterations, tc.seed)
                _record_discrimination(report, "landmarking", scores, test_labels, p)
            except Exception as exc:  # noqa: BLE001
                report.failures.append(f"partition {p}: landmarking failed: {exc}")
        for name, fn in (external or {}).items():
            try:
                scores, cont = fn(test_labels, test_windows, p, prepared.stats)
                _record_discrimination(report, name, scores, test_labels, p)
                if cont is not None:
                    preds[name] = cont
                    report.comparator = name
            except Exception as exc:  # noqa: BLE001
                report.failures.append(f"partition {p}: {name} failed: {exc}")
        if tb is not None and "disease_atlas" in preds:
            _record_mse(report, preds, tb, test_windows.tau, spec.continuous, settings.horizons, scale, p)
    return report


def forecast_comparator(rows: Sequence[Mapping], spec, event: int = 0) -> Callable:
    """An ``external`` benchmark entry backed by forecast-export rows, e.g. a joint-model fit.

    Risk scores come from the rows of ``spec.events[event]``; continuous means are
    used for the MSE table only if every test window has one.
    """
    event_name = spec.events[event]
    risk = {}
    means = {}
    for r in rows:
        key = (r["patient_id"], round(r["t"] / 0.5), round(r["tau"] / 0.5))
        if r["channel"] == event_name:
            risk[key] = r["risk"] if r["risk"] is not None else r["mean"]
        elif r["channel"] in spec.continuous:
            means[key + (spec.continuous.index(r["channel"]),)] = r["mean"]

    def score(labels: LabelSet, windows: WindowSet, partition: int, stats):
        ids = [labels.records[p].patient_id for p in labels.patient]
        steps = [round(h / 0.5) for h in labels.horizons]
        scores = np.full(labels.labels.shape, np.nan)
        for i, (pid, k) in enumerate(zip(ids, labels.end)):
            for j, s in enumerate(steps):
                v = risk.get((pid, int(k), s))
                if v is not None:
                    scores[i, j] = v
        needed = (labels.labels != EXCLUDED) & np.isnan(scores)
        if needed.any():
            raise MetricError(f"{int(needed.sum())} labelled windows have no {event_name} risk row")
        C = len(spec.continuous)
        cont = np.full((len(windows), C), np.nan)
        for i, (p, k, tau) in enumerate(zip(windows.patient, windows.end, windows.tau)):
            pid = windows.records[p].patient_id
            for c in range(C):
                v = means.get((pid, int(k), round(tau / 0.5), c))
                if v is not None:
                    cont[i, c] = (v - stats.continuous_mean[c]) / stats.continuous_std[c]
        return np.nan_to_num(scores, nan=0.0), (None if np.isnan(cont).any() else cont)

    return score


def _record_mse(report, preds, tb, tau, channels, horizons, scale, p):
    P = report.partitions
    comparator = report.comparator if report.comparator in preds else "locf"
    tables = {}
    for name, pred in preds.items():
        # back to original units: squared error scales with std^2
        tables[name] = longitudinal_mse(pred * scale, tb.y * scale, tb.y_obs, tau, channels, horizons)
        for key, val in tables[name].items():
            report.mse.setdefault((key[0], key[1], name), [None] * P)[p] = val
    for key, this in tables["disease_atlas"].items():
        other = tables[comparator][key]
        val = None if this is None or other is None or other == 0 else pct_decrease(this, other)
        report.pct_decrease.setdefault(key, [None] * P)[p] = val


def group_map(spec) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for c, name in enumerate(spec.continuous):
        groups.setdefault(f"continuous:{spec.group_of(name)}", []).append(c)
    for d, name in enumerate(spec.binary):
        groups.setdefault(f"binary:{spec.group_of(name)}", []).append(d)
    return groups


def _num(v) -> str:
    return "" if v == "" or v is None else repr(float(v))


def write_report(report: MetricReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t1, t2, tm, summary = out / "discrimination.csv", out / "mse_decrease.csv", out / "mse.csv", out / "summary.txt"
    with open(t1, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "tau", "model", "mean", "sd", "partitions", "status"])
        for row in report.discrimination_rows():
            w.writerow([row[0], repr(row[1]), row[2], _num(row[3]), _num(row[4]), row[5], row[6]])
    with open(t2, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "tau", "pct_decrease_mean", "pct_decrease_sd", "partitions"])
        for row in report.decrease_rows():
            w.writerow([row[0], repr(row[1]), _num(row[2]), _num(row[3]), row[4]])
    with open(tm, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "tau", "model", "mse_mean", "mse_sd", "partitions"])
        for (channel, tau, model), vals in report.mse.items():
            s = report.summarize(vals)
            w.writerow([channel, repr(tau), model, _num(s and s[0]), _num(s and s[1]),
                        len([v for v in vals if v is not None])])
    summary.write_text(summary_text(report))
    return [t1, t2, tm, summary]


def summary_text(report: MetricReport) -> str:
    lines = [f"Cross-validated event prediction over {report.partitions} partitions (mean (± SD)).",
             "AUPRC is average precision (mean precision at the rank of each positive).", ""]
    models = sorted({k[2] for k in report.discrimination}, key=lambda m: (m not in MODELS, MODELS.index(m) if m in MODELS else 0, m))
    taus = sorted({k[1] for k in report.discrimination})
    for metric in ("AUROC", "AUPRC"):
        lines.append(f"{metric:<6} {'tau':>4}  " + "  ".join(f"{m:>20}" for m in models))
        for tau in taus:
            cells = []
            for m in models:
                s = report.summarize(report.discrimination.get((metric, tau, m), []))
                cells.append(f"{'failed' if s is None else fmt_cell(*s):>20}")
            lines.append(f"{'':<6} {tau:>4g}  " + "  ".join(cells))
        lines.append("")
    if report.pct_decrease:
        lines.append(f"% decrease in MSE, disease_atlas vs {report.comparator}:")
        for (channel, tau), vals in report.pct_decrease.items():
            s = report.summarize(vals)
            lines.append(f"  {channel:<16} tau={tau:g}  {'absent' if s is None else fmt_pct(*s)}")
        lines.append("")
    if report.coverage:
        lines.append("Empirical coverage of 90% intervals (disease_atlas):")
        for tau, vals in sorted(report.coverage.items()):
            s = report.summarize(vals)
            lines.append(f"  tau={tau:g}  {'absent' if s is None else fmt_cell(*s)}")
        lines.append("")
    for f in report.failures:
        lines.append(f"FAILED: {f}")
    return "\n".join(lines).rstrip() + "\n"
