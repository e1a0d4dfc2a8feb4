"""Cohort records, CSV/manifest I/O, discretisation, imputation and patient splits."""
from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

GRID_STEP = 0.5
ROLES = ("continuous", "binary", "covariate", "event")


class IngestionError(ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class PreparationError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelSpec:
    continuous: tuple[str, ...]
    binary: tuple[str, ...] = ()
    covariates: tuple[str, ...] = ()
    events: tuple[str, ...] = ()
    groups: tuple[tuple[str, str], ...] = ()
    censoring: tuple[str, ...] = ()

    @property
    def columns(self) -> tuple[str, ...]:
        return self.continuous + self.binary + self.covariates + self.events

    def group_of(self, name: str) -> str:
        return dict(self.groups).get(name, name)

    def role_of(self, name: str) -> str:
        for role, names in zip(ROLES, (self.continuous, self.binary, self.covariates, self.events)):
            if name in names:
                return role
        raise KeyError(name)


def read_manifest(path) -> ChannelSpec:
    """Parse ``name = role[, group]`` lines. For events the group ``censoring``
    marks an event that ends observation."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    if not text.lstrip().startswith("["):
        text = "[channels]\n" + text
    parser.read_string(text)
    section = parser[parser.sections()[0]]
    roles: dict[str, list[str]] = {r: [] for r in ROLES}
    groups, censoring = [], []
    for name, raw in section.items():
        parts = [p.strip() for p in raw.split(",")]
        role = parts[0]
        if role not in ROLES:
            raise IngestionError([f"channel {name}: unknown role {role!r}"])
        roles[role].append(name)
        if len(parts) > 1 and parts[1]:
            if role == "event" and parts[1] == "censoring":
                censoring.append(name)
            else:
                groups.append((name, parts[1]))
    return ChannelSpec(tuple(roles["continuous"]), tuple(roles["binary"]), tuple(roles["covariate"]),
                       tuple(roles["event"]), tuple(groups), tuple(censoring))


def write_manifest(spec: ChannelSpec, path) -> None:
    lines = ["[channels]"]
    for name in spec.columns:
        role = spec.role_of(name)
        extra = ""
        if role == "event" and name in spec.censoring:
            extra = ", censoring"
        elif name in dict(spec.groups):
            extra = f", {spec.group_of(name)}"
        lines.append(f"{name} = {role}{extra}")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class PatientRecord:
    """One subject. Missing entries hold NaN until imputed; the ``*_observed``
    flags always record what was actually measured."""

    patient_id: str
    times: np.ndarray
    continuous: np.ndarray
    continuous_observed: np.ndarray
    binary: np.ndarray
    binary_observed: np.ndarray
    covariates: np.ndarray
    covariates_observed: np.ndarray
    events: np.ndarray
    t_max: float

    def __len__(self) -> int:
        return len(self.times)

    @property
    def last_index(self) -> int:
        """Index of the last grid point at or before ``t_max``."""
        return int(np.searchsorted(self.times, self.t_max + 1e-9, side="right")) - 1

    def copy(self) -> "PatientRecord":
        return PatientRecord(self.patient_id, self.times.copy(), self.continuous.copy(),
                             self.continuous_observed.copy(), self.binary.copy(),
                             self.binary_observed.copy(), self.covariates.copy(),
                             self.covariates_observed.copy(), self.events.copy(), self.t_max)


@dataclass
class Cohort:
    spec: ChannelSpec
    records: list[PatientRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def patient_ids(self) -> list[str]:
        return [r.patient_id for r in self.records]

    def get(self, patient_id: str) -> PatientRecord:
        for r in self.records:
            if r.patient_id == patient_id:
                return r
        raise KeyError(patient_id)

    def subset(self, ids: Iterable[str]) -> "Cohort":
        wanted = set(ids)
        return Cohort(self.spec, [r for r in self.records if r.patient_id in wanted])


def _observation_end(times: np.ndarray, events: np.ndarray, spec: ChannelSpec) -> float:
    end = float(times[-1])
    for j, name in enumerate(spec.events):
        if name in spec.censoring:
            hits = np.flatnonzero(events[:, j] > 0)
            if hits.size:
                end = min(end, float(times[hits[0]]))
    return end


# -- CSV -------------------------------------------------------------------------

def ingest_csv(path, spec: ChannelSpec) -> Cohort:
    problems: list[str] = []
    rows: dict[str, list[tuple[float, dict[str, float]]]] = {}
    seen: dict[tuple[str, float], int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(["file is empty"]) from None
        header = [h.strip() for h in header]
        if header[:2] != ["patient_id", "time_years"]:
            raise IngestionError(["header must start with patient_id,time_years"])
        columns = header[2:]
        unknown = [c for c in columns if c not in spec.columns]
        if unknown:
            problems.append(f"unknown columns: {', '.join(unknown)}")
        absent = [c for c in spec.columns if c not in columns]
        if absent:
            problems.append(f"declared channels missing from header: {', '.join(absent)}")
        if problems:
            raise IngestionError(problems)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                problems.append(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
                continue
            pid = row[0].strip()
            try:
                t = float(row[1])
            except ValueError:
                problems.append(f"line {lineno}: non-numeric time {row[1]!r}")
                continue
            if not math.isfinite(t) or t < 0:
                problems.append(f"line {lineno}: time must be finite and non-negative")
                continue
            values = {}
            for name, cell in zip(columns, row[2:]):
                cell = cell.strip()
                if cell == "":
                    values[name] = math.nan
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    problems.append(f"line {lineno}: non-numeric value {cell!r} in {name}")
                    continue
                if (name in spec.binary or name in spec.events) and v not in (0.0, 1.0):
                    problems.append(f"line {lineno}: {name} must be 0 or 1, got {cell!r}")
                    continue
                values[name] = v
            key = (pid, t)
            if key in seen:
                problems.append(f"line {lineno}: duplicate row for patient {pid} at time {t:g} "
                                f"(first at line {seen[key]})")
                continue
            seen[key] = lineno
            rows.setdefault(pid, []).append((t, values))
    if problems:
        raise IngestionError(problems)
    records = [_record_from_rows(pid, sorted(obs, key=lambda o: o[0]), spec) for pid, obs in rows.items()]
    return Cohort(spec, records)


def _record_from_rows(pid: str, obs, spec: ChannelSpec) -> PatientRecord:
    times = np.array([t for t, _ in obs], dtype=np.float64)

    def block(names):
        arr = np.array([[vals[n] for n in names] for _, vals in obs], dtype=np.float64).reshape(len(obs), len(names))
        return arr, ~np.isnan(arr)

    y, y_obs = block(spec.continuous)
    b, b_obs = block(spec.binary)
    x, x_obs = block(spec.covariates)
    e, _ = block(spec.events)
    e = np.nan_to_num(e, nan=0.0).astype(np.int64)
    return PatientRecord(pid, times, y, y_obs, b, b_obs, x, x_obs, e, _observation_end(times, e, spec))


def _fmt(v: float) -> str:
    if math.isnan(v):
        return ""
    return repr(float(v))


def write_csv(cohort: Cohort, path) -> None:
    spec = cohort.spec
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "time_years", *spec.columns])
        for r in cohort.records:
            for k in range(len(r)):
                y = np.where(r.continuous_observed[k], r.continuous[k], np.nan)
                b = np.where(r.binary_observed[k], r.binary[k], np.nan)
                x = np.where(r.covariates_observed[k], r.covariates[k], np.nan)
                cells = [_fmt(v) for v in y]
                cells += ["" if math.isnan(v) else str(int(v)) for v in b]
                cells += [_fmt(v) for v in x]
                cells += [str(int(v)) for v in r.events[k]]
                w.writerow([r.patient_id, _fmt(r.times[k]), *cells])


# -- discretisation and imputation --------------------------------------------------

def grid_index(t, step: float = GRID_STEP):
    """Nearest grid index; exact midpoints go up."""
    return np.floor(np.asarray(t, dtype=np.float64) / step + 0.5).astype(np.int64)


def discretize(cohort: Cohort, step: float = GRID_STEP) -> Cohort:
    """Snap observations onto a regular grid of width ``step`` years.

    Continuous values and covariates sharing a bin are averaged; binary values
    and event indicators take the maximum.
    """
    out = []
    for r in cohort.records:
        idx = grid_index(r.times, step)
        n = int(idx.max()) + 1
        times = np.arange(n) * step

        unique_bins = len(np.unique(idx)) == len(idx)

        def reduce(values, observed, how):
            width = values.shape[1]
            res = np.full((n, width), np.nan)
            if unique_bins:
                res[idx] = np.where(observed, values, np.nan)
                return res, ~np.isnan(res)
            for k in np.unique(idx):
                rows = idx == k
                for c in range(width):
                    sel = values[rows, c][observed[rows, c]]
                    if sel.size:
                        res[k, c] = sel.mean() if how == "mean" else sel.max()
            return res, ~np.isnan(res)

        y, y_obs = reduce(r.continuous, r.continuous_observed, "mean")
        b, b_obs = reduce(r.binary, r.binary_observed, "max")
        x, x_obs = reduce(r.covariates, r.covariates_observed, "mean")
        e = np.zeros((n, r.events.shape[1]), dtype=np.int64)
        for k, row in zip(idx, r.events):
            e[k] = np.maximum(e[k], row)
        t_end = _observation_end(times, e, cohort.spec)
        t_end = min(t_end, float(grid_index(r.t_max, step) * step))
        out.append(PatientRecord(r.patient_id, times, y, y_obs, b, b_obs, x, x_obs, e, t_end))
    return Cohort(cohort.spec, out)


@dataclass(frozen=True)
class ChannelStats:
    """Population statistics from the training split only."""

    continuous_mean: np.ndarray
    continuous_std: np.ndarray
    binary_mean: np.ndarray
    covariate_mean: np.ndarray
    covariate_std: np.ndarray

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, blob: dict) -> "ChannelStats":
        return cls(**{k: np.array(v, dtype=np.float64) for k, v in blob.items()})


def fit_stats(train: Cohort) -> ChannelStats:
    if not len(train):
        raise PreparationError("training split is empty")
    spec = train.spec

    def moments(attr, names):
        vals = np.concatenate([getattr(r, attr) for r in train.records], axis=0)
        obs = np.concatenate([getattr(r, attr + "_observed") for r in train.records], axis=0)
        means, stds = np.zeros(len(names)), np.ones(len(names))
        for c, name in enumerate(names):
            v = vals[obs[:, c], c]
            if v.size == 0:
                raise PreparationError(f"channel {name} has no observations in the training split")
            means[c] = v.mean()
            sd = v.std()
            stds[c] = sd if sd > 0 else 1.0
        return means, stds

    ym, ys = moments("continuous", spec.continuous)
    bm, _ = moments("binary", spec.binary)
    xm, xs = moments("covariates", spec.covariates)
    return ChannelStats(ym, ys, bm, xm, xs)


def locf(values: np.ndarray, observed: np.ndarray, fill: np.ndarray) -> np.ndarray:
    """Carry the last observed value forward; leading gaps take ``fill``."""
    n, width = values.shape
    last = np.where(observed, np.arange(n)[:, None], -1)
    last = np.maximum.accumulate(last, axis=0) if n else last
    carried = values[np.maximum(last, 0), np.arange(width)[None, :]]
    return np.where(last >= 0, carried, np.broadcast_to(fill, (n, width)))


def impute(cohort: Cohort, stats: ChannelStats) -> Cohort:
    out = []
    for r in cohort.records:
        r2 = r.copy()
        r2.continuous = locf(r.continuous, r.continuous_observed, stats.continuous_mean)
        r2.binary = locf(r.binary, r.binary_observed, stats.binary_mean)
        r2.covariates = locf(r.covariates, r.covariates_observed, stats.covariate_mean)
        out.append(r2)
    return Cohort(cohort.spec, out)


# -- splits ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    partition_seed: int = 0
    partition_index: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) < 0:
            raise ValueError("split fractions must be three non-negative numbers summing to 1")
        if self.partition_index < 0:
            raise ValueError("partition_index must be non-negative")


def split(cohort: Cohort, spec: SplitSpec = SplitSpec()) -> tuple[Cohort, Cohort, Cohort]:
    """Disjoint patient-level train/validation/test partition."""
    n = len(cohort)
    if n < 5:
        raise PreparationError(f"need at least 5 patients to split, got {n}")
    n_val = int(math.floor(spec.fractions[1] * n + 0.5))
    n_test = int(math.floor(spec.fractions[2] * n + 0.5))
    rng = np.random.default_rng([spec.partition_seed, spec.partition_index])
    order = rng.permutation(n)
    ids = cohort.patient_ids
    val_ids = {ids[i] for i in order[:n_val]}
    test_ids = {ids[i] for i in order[n_val:n_val + n_test]}
    train = [r for r in cohort.records if r.patient_id not in val_ids and r.patient_id not in test_ids]
    val = [r for r in cohort.records if r.patient_id in val_ids]
    test = [r for r in cohort.records if r.patient_id in test_ids]
    return Cohort(cohort.spec, train), Cohort(cohort.spec, val), Cohort(cohort.spec, test)


@dataclass
class PreparedSplits:
    train: Cohort
    validation: Cohort
    test: Cohort
    stats: ChannelStats


def prepare(cohort: Cohort, split_spec: SplitSpec = SplitSpec(), step: float = GRID_STEP) -> PreparedSplits:
    """Discretise, split by patient, then impute every split with training statistics."""
    gridded = discretize(cohort, step)
    train, val, test = split(gridded, split_spec)
    stats = fit_stats(train)
    return PreparedSplits(impute(train, stats), impute(val, stats), impute(test, stats), stats)
