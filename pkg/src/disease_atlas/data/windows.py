"""Training windows, evaluation labels, and batch assembly for the network."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..likelihood import TargetBatch
from .cohort import GRID_STEP, ChannelStats, Cohort, PreparationError

DEFAULT_RHO_MAX = 20
POSITIVE, NEGATIVE, EXCLUDED = 1, 0, -1


@dataclass
class EncodedRecord:
    """A patient in model space: standardised inputs and targets on the grid."""

    patient_id: str
    times: np.ndarray
    inputs: np.ndarray  # (n, L + C + D): covariates, continuous, binary
    y: np.ndarray
    y_obs: np.ndarray
    b: np.ndarray
    b_obs: np.ndarray
    events: np.ndarray
    t_max: float
    last_index: int

    def __len__(self) -> int:
        return len(self.times)


def encode(cohort: Cohort, stats: ChannelStats) -> list[EncodedRecord]:
    out = []
    for r in cohort.records:
        x = (r.covariates - stats.covariate_mean) / stats.covariate_std
        y = (r.continuous - stats.continuous_mean) / stats.continuous_std
        inputs = np.concatenate([x, y, r.binary], axis=1)
        if np.isnan(inputs).any():
            raise PreparationError(f"patient {r.patient_id} still has missing inputs; impute first")
        out.append(EncodedRecord(r.patient_id, r.times, inputs, y, r.continuous_observed.copy(),
                                 r.binary.copy(), r.binary_observed.copy(), r.events, r.t_max,
                                 r.last_index))
    return out


def horizon_steps(horizons: Sequence[float], step: float = GRID_STEP) -> np.ndarray:
    steps = []
    for tau in horizons:
        s = round(tau / step)
        if tau <= 0 or abs(s * step - tau) > 1e-9:
            raise ValueError(f"horizon {tau} is not a positive multiple of the {step}-year grid")
        steps.append(s)
    return np.array(steps, dtype=np.int64)


def event_target(rec, k: int, m: int, step: float = GRID_STEP) -> tuple[float, int]:
    """(time to first event strictly after grid index k, indicator)."""
    last = rec.last_index
    hits = np.flatnonzero(rec.events[k + 1:last + 1, m] > 0)
    if hits.size:
        return float((hits[0] + 1) * step), 1
    return float(rec.t_max - rec.times[k]), 0


def event_label(rec, t: float, tau: float, m: int = 0, step: float = GRID_STEP) -> int:
    """POSITIVE if the event first occurs in (t, t+tau], NEGATIVE if the patient
    is seen event-free through t+tau, else EXCLUDED (censored first)."""
    k = int(round(t / step))
    last = rec.last_index
    s = int(round(tau / step))
    hits = np.flatnonzero(rec.events[k + 1:min(k + s, last) + 1, m] > 0)
    if hits.size:
        return POSITIVE
    if rec.t_max >= t + tau - 1e-9:
        return NEGATIVE
    return EXCLUDED


@dataclass
class Histories:
    """Index arrays (patient, end step, history length) over a record list."""

    records: list[EncodedRecord]
    patient: np.ndarray
    end: np.ndarray
    rho: np.ndarray

    def __len__(self) -> int:
        return len(self.patient)

    def inputs(self, index) -> tuple[np.ndarray, np.ndarray]:
        """Right-aligned inputs (steps, batch, width) and the activity mask."""
        index = np.asarray(index)
        rho = self.rho[index]
        steps = int(rho.max())
        width = self.records[0].inputs.shape[1]
        arr = np.zeros((steps, len(index), width))
        active = np.zeros((steps, len(index)), dtype=bool)
        for j, w in enumerate(index):
            rec = self.records[self.patient[w]]
            r, k = int(self.rho[w]), int(self.end[w])
            arr[steps - r:, j] = rec.inputs[k - r + 1:k + 1]
            active[steps - r:, j] = True
        return arr, active


@dataclass
class WindowSet(Histories):
    """The training set: one entry per (patient, history end, horizon)."""

    tau: np.ndarray
    time_to_event: np.ndarray
    delta: np.ndarray
    step: float = GRID_STEP

    def targets(self, index) -> TargetBatch:
        index = np.asarray(index)
        C = self.records[0].y.shape[1]
        D = self.records[0].b.shape[1]
        y, y_obs = np.zeros((len(index), C)), np.zeros((len(index), C), dtype=bool)
        b, b_obs = np.zeros((len(index), D)), np.zeros((len(index), D), dtype=bool)
        for j, w in enumerate(index):
            rec = self.records[self.patient[w]]
            s = self.end[w] + int(round(self.tau[w] / self.step))
            y[j], b[j] = rec.y[s], rec.b[s]
            if s <= rec.last_index:
                y_obs[j], b_obs[j] = rec.y_obs[s], rec.b_obs[s]
        return TargetBatch(y, y_obs, b, b_obs, self.time_to_event[index], self.delta[index])

    def window(self, i: int) -> "TrainingWindow":
        rec = self.records[self.patient[i]]
        k, r = int(self.end[i]), int(self.rho[i])
        tb = self.targets([i])
        return TrainingWindow(rec.patient_id, float(rec.times[k]), r, float(self.tau[i]),
                              rec.inputs[k - r + 1:k + 1], tb.y[0], tb.y_obs[0], tb.b[0], tb.b_obs[0],
                              self.time_to_event[i], self.delta[i])


@dataclass
class TrainingWindow:
    patient_id: str
    t: float
    rho: int
    tau: float
    history: np.ndarray
    y: np.ndarray
    y_obs: np.ndarray
    b: np.ndarray
    b_obs: np.ndarray
    time_to_event: np.ndarray
    delta: np.ndarray


def make_windows(records: list[EncodedRecord], rho_max: int = DEFAULT_RHO_MAX,
                 horizons: Sequence[float] = (0.5, 1.0, 1.5, 2.0), step: float = GRID_STEP) -> WindowSet:
    """Enumerate every valid (patient, t, tau) in patient, then t, then tau order."""
    if rho_max < 1:
        raise ValueError("rho_max must be at least 1")
    h_steps = horizon_steps(horizons, step)
    cols = {k: [] for k in ("patient", "end", "rho", "tau", "tte", "delta")}
    for p, rec in enumerate(records):
        n = len(rec)
        M = rec.events.shape[1]
        for k in range(min(rec.last_index, n - 1) + 1):
            targets = [event_target(rec, k, m, step) for m in range(M)]
            for s, tau in zip(h_steps, horizons):
                if k + s > n - 1:
                    continue
                cols["patient"].append(p)
                cols["end"].append(k)
                cols["rho"].append(min(k + 1, rho_max))
                cols["tau"].append(float(tau))
                cols["tte"].append([t for t, _ in targets])
                cols["delta"].append([d for _, d in targets])
    if not cols["patient"]:
        raise PreparationError("no training windows could be formed")
    M = records[0].events.shape[1]
    return WindowSet(records, np.array(cols["patient"]), np.array(cols["end"]), np.array(cols["rho"]),
                     np.array(cols["tau"]), np.array(cols["tte"], dtype=np.float64).reshape(-1, M),
                     np.array(cols["delta"], dtype=np.float64).reshape(-1, M), step)


@dataclass
class LabelSet(Histories):
    """Evaluation points: every grid time up to t_max with per-horizon labels."""

    horizons: tuple[float, ...]
    labels: np.ndarray  # (n, len(horizons)) of POSITIVE / NEGATIVE / EXCLUDED
    step: float = GRID_STEP

    def times(self) -> np.ndarray:
        return np.array([self.records[p].times[k] for p, k in zip(self.patient, self.end)])


def make_labels(records: list[EncodedRecord], rho_max: int = DEFAULT_RHO_MAX,
                horizons: Sequence[float] = (0.5, 1.0, 1.5, 2.0), event: int = 0,
                step: float = GRID_STEP) -> LabelSet:
    horizon_steps(horizons, step)
    patient, end, rho, labels = [], [], [], []
    for p, rec in enumerate(records):
        for k in range(min(rec.last_index, len(rec) - 1) + 1):
            row = [event_label(rec, rec.times[k], tau, event, step) for tau in horizons]
            if all(v == EXCLUDED for v in row):
                continue
            patient.append(p)
            end.append(k)
            rho.append(min(k + 1, rho_max))
            labels.append(row)
    return LabelSet(records, np.array(patient, dtype=np.int64), np.array(end, dtype=np.int64),
                    np.array(rho, dtype=np.int64), tuple(float(h) for h in horizons),
                    np.array(labels, dtype=np.int64).reshape(-1, len(horizons)), step)
