"""Training loop, Monte-Carlo dropout forecasts, survival curves and random search."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .data.windows import EncodedRecord, Histories, LabelSet, WindowSet
from .likelihood import LossWeights, Task, task_loss, total_loss
from .model import (DropoutMasks, ModelConfig, ModelWeights, init_weights, output_heads,
                    sample_masks, task_forward, unroll, forward)

log = logging.getLogger(__name__)

Z90 = 1.6448536269514722
MAX_BATCH_RETRIES = 20


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    minibatch_size: int = 128
    max_iterations: int = 3000
    learning_rate: float = 3e-3
    alpha_T: float = 1.0
    dropout_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.minibatch_size < 1 or self.max_iterations < 1:
            raise ValueError("minibatch_size and max_iterations must be positive")
        if self.learning_rate <= 0 or self.alpha_T <= 0:
            raise ValueError("learning_rate and alpha_T must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


@dataclass
class TraceRow:
    iteration: int
    task: str
    task_loss: float
    total_loss: float


@dataclass
class TrainResult:
    weights: ModelWeights
    trace: list[TraceRow]


def default_tasks(config: ModelConfig, grouping: str = "kind",
                  groups: Mapping[str, Sequence[int]] | None = None) -> list[Task]:
    """Task list for training.

    ``kind``: one task per output type. ``group``: one longitudinal task per
    measurement group in ``groups`` (kind-prefixed names mapping to channel
    indices). ``channel``: every longitudinal variable is its own task.
    """
    C, D, M = config.num_continuous, config.num_binary, config.num_events
    event = Task("event", tuple(range(M)), "event")
    if grouping == "kind":
        tasks = [Task("continuous", tuple(range(C)), "continuous")]
        if D:
            tasks.append(Task("binary", tuple(range(D)), "binary"))
        return tasks + [event]
    if grouping == "channel":
        tasks = [Task("continuous", (c,), f"continuous:{c}") for c in range(C)]
        tasks += [Task("binary", (d,), f"binary:{d}") for d in range(D)]
        return tasks + [event]
    if grouping == "group":
        if not groups:
            raise ValueError("group task grouping needs a channel group map")
        tasks = []
        for name, cols in groups.items():
            kind = name.split(":", 1)[0]
            tasks.append(Task(kind, tuple(cols), name))
        return tasks + [event]
    raise ValueError(f"unknown task grouping {grouping!r}")


def train(windows: WindowSet, config: TrainConfig, model_config: ModelConfig,
          tasks: Sequence[Task] | None = None, init: ModelWeights | None = None) -> TrainResult:
    """Minibatch multitask training: each iteration samples one task loss.

    Every window in a minibatch gets freshly sampled dropout masks that stay
    fixed across its time steps. The run's dropout rate comes from ``config``.
    """
    if len(windows) == 0:
        raise TrainingError("no training windows")
    model_config = replace(model_config, dropout_rate=config.dropout_rate)
    tasks = list(tasks) if tasks is not None else default_tasks(model_config)
    if not tasks:
        raise TrainingError("no tasks to train")
    weights = init.copy() if init is not None else init_weights(model_config, config.seed)
    loss_weights = LossWeights(alpha_T=config.alpha_T)
    rng = np.random.default_rng([config.seed, 1])
    state = nx.AdamState(learning_rate=config.learning_rate)
    params_np = weights.params
    trace: list[TraceRow] = []
    for it in range(config.max_iterations):
        task = tasks[int(rng.integers(len(tasks)))]
        for _ in range(MAX_BATCH_RETRIES):
            idx = rng.integers(0, len(windows), size=config.minibatch_size)
            targets = windows.targets(idx)
            if targets.has_targets(task):
                break
        else:
            raise TrainingError(f"task {task.name or task.kind} found no targets in "
                                f"{MAX_BATCH_RETRIES} minibatches")
        inputs, active = windows.inputs(idx)
        masks = sample_masks(model_config, rng, batch=len(idx))
        params = nx.parameters(params_np)
        with nx.Graph():
            heads = forward(params, inputs, active, windows.tau[idx], masks)
            loss = task_loss(targets, heads, task, loss_weights)
        grads = nx.backward(loss)
        grad_map = {k: grads.get(p, np.zeros_like(p.value)) for k, p in params.items()}
        params_np, state = nx.adam_step(params_np, grad_map, state)
        total = total_loss(targets, _detach(heads), loss_weights).item()
        trace.append(TraceRow(it + 1, task.name or task.kind, loss.item(), total))
        if not math.isfinite(loss.item()):
            raise TrainingError(f"loss diverged at iteration {it + 1}")
    return TrainResult(ModelWeights(model_config, params_np), trace)


def _detach(heads):
    return type(heads)(*(None if t is None else nx.Tensor(t.value) for t in
                         (heads.mu, heads.sigma_pre, heads.p_logit, heads.lambda_pre)))


# -- batched inference over shared patient prefixes ----------------------------------

@dataclass
class SequencePlan:
    """Groups history entries that share a (patient, start) prefix into one sequence."""

    seq_patient: np.ndarray
    seq_start: np.ndarray
    seq_length: np.ndarray
    entry_seq: np.ndarray
    entry_offset: np.ndarray

    @classmethod
    def build(cls, hist: Histories) -> "SequencePlan":
        start = hist.end - hist.rho + 1
        keys = {}
        entry_seq = np.empty(len(hist), dtype=np.int64)
        lengths: list[int] = []
        for i, (p, s, e) in enumerate(zip(hist.patient, start, hist.end)):
            key = (int(p), int(s))
            j = keys.get(key)
            if j is None:
                j = keys[key] = len(lengths)
                lengths.append(0)
            lengths[j] = max(lengths[j], int(e - s + 1))
            entry_seq[i] = j
        order = list(keys)
        return cls(np.array([k[0] for k in order], dtype=np.int64), np.array([k[1] for k in order], dtype=np.int64),
                   np.array(lengths, dtype=np.int64), entry_seq, (hist.end - start).astype(np.int64))

    def inputs(self, records: list[EncodedRecord]) -> np.ndarray:
        steps = int(self.seq_length.max())
        width = records[0].inputs.shape[1]
        arr = np.zeros((steps, len(self.seq_patient), width))
        for j, (p, s, n) in enumerate(zip(self.seq_patient, self.seq_start, self.seq_length)):
            arr[:n, j] = records[p].inputs[s:s + n]
        return arr


def hidden_at_entries(params, plan: SequencePlan, inputs: np.ndarray, masks: DropoutMasks) -> np.ndarray:
    """Unmasked trunk output for every entry, from left-aligned sequences."""
    hs = np.stack([h.value for h in unroll(params, inputs, masks)])
    return hs[plan.entry_offset, plan.entry_seq]


@dataclass
class MCSummary:
    """Moments of J stochastic passes, one row per history entry."""

    mu_mean: np.ndarray
    predictive_var: np.ndarray
    sigma2_mean: np.ndarray
    mu_var: np.ndarray
    p_mean: np.ndarray
    lam_samples: np.ndarray  # (J, n, M)
    p_samples: np.ndarray    # (J, n, D)

    @property
    def predictive_std(self) -> np.ndarray:
        return np.sqrt(self.predictive_var)

    @property
    def lam_mean(self) -> np.ndarray:
        return self.lam_samples.mean(axis=0)


def mc_predict(weights: ModelWeights, hist: Histories, tau, mc_samples: int = 100,
               seed: int = 0, dropout_rate: float | None = None) -> MCSummary:
    """Monte-Carlo dropout passes for every history entry with per-entry horizon ``tau``.

    Entries from the same patient prefix share one mask set per sample.
    Predictive variance is mean(sigma^2) + var(mu) across samples.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be at least 1")
    if len(hist) == 0:
        raise ValueError("no history entries to forecast")
    cfg = weights.config
    rate = cfg.dropout_rate if dropout_rate is None else dropout_rate
    params = {k: nx.Tensor(v) for k, v in weights.params.items()}
    plan = SequencePlan.build(hist)
    inputs = plan.inputs(hist.records)
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (len(hist),))
    rng = np.random.default_rng([seed, 2])
    n, C = len(hist), cfg.num_continuous
    # Welford running moments: identical samples give exactly zero variance
    mu_mean, mu_m2, s2_sum = np.zeros((n, C)), np.zeros((n, C)), np.zeros((n, C))
    lam_samples = np.zeros((mc_samples, n, cfg.num_events))
    p_samples = np.zeros((mc_samples, n, cfg.num_binary))
    for j in range(mc_samples):
        masks = sample_masks(cfg, rng, batch=len(plan.seq_patient), rate=rate)
        h = hidden_at_entries(params, plan, inputs, masks)
        em = masks.rows(plan.entry_seq)
        z_c, z_b, z_e = task_forward(params, h * em.output_mask, tau, em)
        sub = output_heads(params, z_c, z_b, z_e).submodel()
        delta = sub.mu - mu_mean
        mu_mean = mu_mean + delta / (j + 1)
        mu_m2 += delta * (sub.mu - mu_mean)
        s2_sum += sub.sigma * sub.sigma
        lam_samples[j] = sub.lam
        p_samples[j] = sub.p
    mu_var = mu_m2 / mc_samples
    s2 = s2_sum / mc_samples
    return MCSummary(mu_mean, s2 + mu_var, s2, mu_var, p_samples.mean(axis=0), lam_samples, p_samples)


def survival_curve(lam, grid) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if np.any(lam <= 0):
        raise ValueError("hazard must be positive")
    if np.any(grid < 0) or np.any(np.diff(grid) < 0):
        raise ValueError("survival grid must be sorted and non-negative")
    return np.exp(-np.multiply.outer(lam, grid))


def event_risk(lam, tau) -> np.ndarray:
    """Probability of the event within ``tau`` under a constant hazard."""
    return -np.expm1(-np.multiply.outer(np.asarray(lam, dtype=np.float64), np.asarray(tau, dtype=np.float64)))


# -- single-patient forecast ---------------------------------------------------------

@dataclass
class ForecastRequest:
    record: EncodedRecord
    horizons: tuple[float, ...]
    mc_samples: int = 100
    end_index: int | None = None
    rho_max: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")
        if len(self.record) == 0:
            raise ValueError("forecast history is empty")


@dataclass
class ForecastResult:
    patient_id: str
    t: float
    horizons: tuple[float, ...]
    continuous_mean: np.ndarray   # (H, C)
    continuous_std: np.ndarray
    lo90: np.ndarray
    hi90: np.ndarray
    binary_prob: np.ndarray       # (H, D)
    binary_std: np.ndarray
    hazard_mean: np.ndarray       # (M,)
    hazard_std: np.ndarray
    risk: np.ndarray              # (H, M)
    risk_std: np.ndarray
    survival_grid: np.ndarray
    survival: np.ndarray          # (M, G)
    sigma_mean: np.ndarray        # (H, C) mean sigma head output, before mixing


def mc_forecast(request: ForecastRequest, weights: ModelWeights, scale: np.ndarray | None = None,
                offset: np.ndarray | None = None, survival_grid: Sequence[float] | None = None) -> ForecastResult:
    """Forecast one patient from its history; ``scale``/``offset`` undo target standardisation."""
    rec = request.record
    k = rec.last_index if request.end_index is None else request.end_index
    k = min(k, len(rec) - 1)
    H = len(request.horizons)
    rho = min(k + 1, request.rho_max)
    hist = Histories([rec], np.zeros(H, dtype=np.int64), np.full(H, k), np.full(H, rho))
    mc = mc_predict(weights, hist, np.array(request.horizons), request.mc_samples, request.seed)
    C = weights.config.num_continuous
    scale = np.ones(C) if scale is None else np.asarray(scale)
    offset = np.zeros(C) if offset is None else np.asarray(offset)
    mean = mc.mu_mean * scale + offset
    std = mc.predictive_std * scale
    lam = mc.lam_samples[:, 0, :]
    lam_bar = lam.mean(axis=0)
    taus = np.array(request.horizons)
    risk = event_risk(lam_bar, taus).T
    risk_std = event_risk(lam, taus).std(axis=0).T
    grid = np.arange(0.0, 5.0001, 0.25) if survival_grid is None else np.asarray(survival_grid, dtype=float)
    return ForecastResult(
        rec.patient_id, float(rec.times[k]), tuple(request.horizons), mean, std,
        mean - Z90 * std, mean + Z90 * std,
        mc.p_mean, mc.p_samples.std(axis=0), lam_bar, lam.std(axis=0), risk, risk_std,
        grid, survival_curve(lam_bar, grid), np.sqrt(mc.sigma2_mean) * scale)


FORECAST_COLUMNS = ("patient_id", "t", "tau", "channel", "mean", "std", "lo90", "hi90", "hazard", "risk")


def forecast_rows(result: ForecastResult, continuous: Sequence[str], binary: Sequence[str] = (),
                  events: Sequence[str] = ()) -> list[dict]:
    """Flatten a forecast into export rows, horizon-major.

    Continuous rows carry the predictive mean and 90% interval. Binary rows
    carry the MC-mean probability and event rows the risk R(tau); their
    intervals are mean +/- 1.645 std clipped to [0, 1]. ``hazard``/``risk``
    are only filled on event rows.
    """
    rows = []

    def row(tau, channel, mean, std, lo, hi, hazard=None, risk=None):
        rows.append(dict(patient_id=result.patient_id, t=result.t, tau=float(tau), channel=channel,
                         mean=float(mean), std=float(std), lo90=float(lo), hi90=float(hi),
                         hazard=None if hazard is None else float(hazard),
                         risk=None if risk is None else float(risk)))

    for h, tau in enumerate(result.horizons):
        for c, name in enumerate(continuous):
            row(tau, name, result.continuous_mean[h, c], result.continuous_std[h, c],
                result.lo90[h, c], result.hi90[h, c])
        for d, name in enumerate(binary):
            m, sd = result.binary_prob[h, d], result.binary_std[h, d]
            row(tau, name, m, sd, max(0.0, m - Z90 * sd), min(1.0, m + Z90 * sd))
        for e, name in enumerate(events):
            m, sd = result.risk[h, e], result.risk_std[h, e]
            row(tau, name, m, sd, max(0.0, m - Z90 * sd), min(1.0, m + Z90 * sd),
                result.hazard_mean[e], m)
    return rows


def write_forecast(fh, rows: Sequence[Mapping]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(FORECAST_COLUMNS)
    for r in rows:
        w.writerow([r["patient_id"], repr(float(r["t"])), repr(float(r["tau"])), r["channel"]]
                   + ["" if r[k] is None else repr(float(r[k])) for k in FORECAST_COLUMNS[4:]])


def write_forecast_csv(path, rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="") as fh:
        write_forecast(fh, rows)


def read_forecast_csv(path) -> list[dict]:
    """Parse a forecast-export file; numeric blanks become None."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(FORECAST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {', '.join(sorted(missing))}")
        out = []
        for line, rec in enumerate(reader, start=2):
            try:
                row = {k: (None if rec[k] in ("", None) else float(rec[k])) for k in FORECAST_COLUMNS
                       if k not in ("patient_id", "channel")}
            except ValueError as exc:
                raise ValueError(f"{path}:{line}: {exc}") from exc
            row["patient_id"], row["channel"] = rec["patient_id"], rec["channel"]
            out.append(row)
    return out


# -- random search -------------------------------------------------------------------

LOG_DIMS = {"learning_rate", "alpha_T"}
INT_DIMS = {"hidden_size", "task_layer_size", "minibatch_size"}
SEARCH_DIMS = INT_DIMS | LOG_DIMS | {"dropout_rate"}


@dataclass
class SearchData:
    train: WindowSet
    val_labels: LabelSet
    val_windows: WindowSet


@dataclass
class SearchCandidate:
    train_config: TrainConfig
    model_config: ModelConfig
    val_auroc: float
    val_loss: float


@dataclass
class SearchResult:
    best: SearchCandidate
    candidates: list[SearchCandidate] = field(default_factory=list)


def sample_config(space: Mapping[str, tuple], rng: np.random.Generator,
                  base_train: TrainConfig, base_model: ModelConfig) -> tuple[TrainConfig, ModelConfig]:
    values = {}
    for name in sorted(space):
        lo, hi = space[name]
        if name in INT_DIMS:
            values[name] = int(rng.integers(int(lo), int(hi) + 1))
        elif name in LOG_DIMS:
            values[name] = float(np.exp(rng.uniform(np.log(lo), np.log(hi)))) if hi > lo else float(lo)
        else:
            values[name] = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    train_keys = {"minibatch_size", "learning_rate", "alpha_T", "dropout_rate"}
    tc = replace(base_train, **{k: v for k, v in values.items() if k in train_keys})
    mc = replace(base_model, **{k: v for k, v in values.items() if k in {"hidden_size", "task_layer_size"}},
                 dropout_rate=tc.dropout_rate)
    return tc, mc


def validation_loss(weights: ModelWeights, windows: WindowSet, batch: int = 512) -> float:
    """Summed joint loss with dropout off on a window set."""
    params = {k: nx.Tensor(v) for k, v in weights.params.items()}
    cfg = replace(weights.config, dropout_rate=0.0)
    total = 0.0
    for lo in range(0, len(windows), batch):
        idx = np.arange(lo, min(lo + batch, len(windows)))
        inputs, active = windows.inputs(idx)
        masks = sample_masks(cfg, 0, batch=len(idx))
        heads = forward(params, inputs, active, windows.tau[idx], masks)
        total += total_loss(windows.targets(idx), heads).item()
    return total


def random_search(space: Mapping[str, tuple], partitions: Sequence[SearchData], iterations: int = 20,
                  base_train: TrainConfig = TrainConfig(), base_model: ModelConfig | None = None,
                  seed: int = 0, mc_samples: int = 20, tasks: Sequence[Task] | None = None) -> SearchResult:
    """Uniform random search; picks the best mean validation AUROC at the shortest horizon."""
    from .evaluation import auroc, score_labels

    if not space:
        raise ValueError("search space is empty")
    unknown = set(space) - SEARCH_DIMS
    if unknown:
        raise ValueError(f"unknown search dimensions: {', '.join(sorted(unknown))}")
    if not partitions:
        raise ValueError("random search needs at least one data partition")
    if iterations < 1:
        raise ValueError("iterations must be positive")
    if base_model is None:
        rec = partitions[0].train.records[0]
        base_model = ModelConfig(rec.y.shape[1], rec.b.shape[1], rec.events.shape[1],
                                 rec.inputs.shape[1] - rec.y.shape[1] - rec.b.shape[1])
    rng = np.random.default_rng([seed, 3])
    candidates = []
    for i in range(iterations):
        tc, mc = sample_config(space, rng, base_train, base_model)
        tc = replace(tc, seed=base_train.seed + i)
        aurocs, losses = [], []
        for data in partitions:
            result = train(data.train, tc, mc, tasks)
            lam = mc_predict(result.weights, data.val_labels, 0.0, mc_samples, seed=tc.seed).lam_mean[:, 0]
            risk = event_risk(lam, data.val_labels.horizons[0])
            scores, labels = score_labels(risk, data.val_labels.labels[:, 0])
            try:
                aurocs.append(auroc(scores, labels))
            except ValueError:
                aurocs.append(float("nan"))
            losses.append(validation_loss(result.weights, data.val_windows))
        cand = SearchCandidate(tc, mc, float(np.mean(aurocs)), float(np.mean(losses)))
        log.info("search %d/%d: auroc=%.4f loss=%.2f", i + 1, iterations, cand.val_auroc, cand.val_loss)
        candidates.append(cand)

    def rank(c: SearchCandidate):
        a = c.val_auroc if math.isfinite(c.val_auroc) else -math.inf
        return (-a, c.val_loss)

    best = min(candidates, key=rank)
    return SearchResult(best, candidates)
