"""Seeded synthetic cohort with a latent severity driving biomarkers and transitions.

Each patient carries a severity ``s(t)`` that starts near ``severity_init_mean``
and drifts upward at a patient-specific non-negative rate plus Gaussian walk
noise. Over each grid interval the transition probability is
``1 - exp(-step * exp(a + b * s))`` with ``s`` taken at the start of the
interval. A transition censors the record at the visit where it is flagged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cohort import GRID_STEP, ChannelSpec, Cohort, PatientRecord


@dataclass
class SyntheticConfig:
    num_patients: int = 5000
    grid_length: int = 21
    step: float = GRID_STEP
    severity_init_mean: float = -1.0
    severity_init_sd: float = 1.0
    drift_mean: float = 0.25
    drift_sd: float = 0.15
    walk_sd: float = 0.15
    hazard_intercept: float = -3.0
    hazard_slope: float = 2.0
    followup_loss: float = 0.02
    continuous: tuple[str, ...] = ("Hippocampus", "Ventricles", "WholeBrain", "MMSE", "CDRSB", "ADAS13")
    continuous_groups: tuple[str, ...] = ("mri", "mri", "mri", "cognitive", "cognitive", "cognitive")
    continuous_loading: tuple[float, ...] = (-1.0, 1.0, -0.8, -1.0, 1.0, 1.0)
    continuous_intercept: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    noise_scale: tuple[float, ...] = (0.3, 0.3, 0.3, 0.3, 0.3, 0.3)
    binary: tuple[str, ...] = ("AmyloidPositive", "MemoryComplaint")
    binary_groups: tuple[str, ...] = ("clinical", "clinical")
    binary_loading: tuple[float, ...] = (1.5, 1.0)
    binary_intercept: tuple[float, ...] = (0.0, -0.5)
    covariates: tuple[str, ...] = ("Age", "APOE4")
    age_effect: float = 0.3
    apoe_effect: float = 0.15
    apoe_prevalence: float = 0.3
    event: str = "AD"
    missing_rates: dict[str, float] = field(default_factory=lambda: {"mri": 0.3, "cognitive": 0.1,
                                                                    "clinical": 0.2})
    seed: int = 0

    def __post_init__(self):
        for name in ("continuous_groups", "continuous_loading", "continuous_intercept", "noise_scale"):
            if len(getattr(self, name)) != len(self.continuous):
                raise ValueError(f"{name} must have one entry per continuous channel")
        for name in ("binary_groups", "binary_loading", "binary_intercept"):
            if len(getattr(self, name)) != len(self.binary):
                raise ValueError(f"{name} must have one entry per binary channel")
        if any(s < 0 for s in self.noise_scale) or self.walk_sd < 0 or self.drift_sd < 0:
            raise ValueError("noise scales must be non-negative")
        rates = list(self.missing_rates.values()) + [self.followup_loss, self.apoe_prevalence]
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ValueError("rates must lie in [0, 1]")
        if len(self.covariates) > 2:
            raise ValueError("the generator models at most two covariates (age, APOE4)")
        if self.grid_length < 2 or self.num_patients < 1:
            raise ValueError("need at least one patient and two grid points")

    def channel_spec(self) -> ChannelSpec:
        groups = tuple(zip(self.continuous, self.continuous_groups)) + tuple(zip(self.binary, self.binary_groups))
        return ChannelSpec(tuple(self.continuous), tuple(self.binary), tuple(self.covariates),
                           (self.event,), groups, (self.event,))


def reference_config(**overrides) -> SyntheticConfig:
    """The seeded 5000-patient reference cohort with a strong hazard signal (b = 2)."""
    base = dict(num_patients=5000, hazard_slope=2.0, seed=20240601)
    base.update(overrides)
    return SyntheticConfig(**base)


def generate_synthetic(config: SyntheticConfig, return_severity: bool = False):
    """Draw the cohort; with ``return_severity`` also return each patient's latent path."""
    rng = np.random.default_rng(config.seed)
    spec = config.channel_spec()
    C, D = len(config.continuous), len(config.binary)
    y_load = np.array(config.continuous_loading)
    y_int = np.array(config.continuous_intercept)
    noise = np.array(config.noise_scale)
    b_load = np.array(config.binary_loading)
    b_int = np.array(config.binary_intercept)
    groups = sorted(set(config.continuous_groups) | set(config.binary_groups))
    y_group = np.array([groups.index(g) for g in config.continuous_groups], dtype=np.int64)
    b_group = np.array([groups.index(g) for g in config.binary_groups], dtype=np.int64)
    miss = np.array([config.missing_rates.get(g, 0.0) for g in groups])
    dt = config.step
    width = len(str(config.num_patients - 1))
    records, paths = [], []
    for i in range(config.num_patients):
        age = rng.standard_normal()
        apoe = float(rng.random() < config.apoe_prevalence)
        s = config.severity_init_mean + config.severity_init_sd * rng.standard_normal() + config.age_effect * age
        drift = max(0.0, config.drift_mean + config.drift_sd * rng.standard_normal() + config.apoe_effect * apoe)
        severity = [s]
        event_at = None
        for k in range(1, config.grid_length):
            if rng.random() < config.followup_loss:
                break
            hazard = math.exp(config.hazard_intercept + config.hazard_slope * severity[-1])
            transition = rng.random() < 1.0 - math.exp(-dt * hazard)
            s = severity[-1] + drift * dt + config.walk_sd * math.sqrt(dt) * rng.standard_normal()
            severity.append(s)
            if transition:
                event_at = k
                break
        sev = np.array(severity)
        paths.append(sev)
        n = len(sev)
        y = y_int + np.outer(sev, y_load) + noise * rng.standard_normal((n, C))
        b = (rng.random((n, D)) < 1.0 / (1.0 + np.exp(-(b_int + np.outer(sev, b_load))))).astype(float)
        seen = rng.random((n, len(groups))) >= miss
        y_obs, b_obs = seen[:, y_group], seen[:, b_group]
        x = np.tile([age, apoe], (n, 1))[:, :len(config.covariates)]
        events = np.zeros((n, 1), dtype=np.int64)
        if event_at is not None:
            events[event_at, 0] = 1
        times = np.arange(n) * dt
        records.append(PatientRecord(
            f"P{i:0{width}d}", times, np.where(y_obs, y, np.nan), y_obs, np.where(b_obs, b, np.nan), b_obs,
            x, np.ones_like(x, dtype=bool), events, float(times[-1])))
    cohort = Cohort(spec, records)
    return (cohort, paths) if return_severity else cohort


def transition_probability(config: SyntheticConfig, nodes: int = 64) -> float:
    """Closed-form P(any transition) when the walk is deterministic given s(0).

    Valid for ``walk_sd = drift_sd = followup_loss = age_effect = apoe_effect = 0``;
    integrates over the Gaussian initial severity with Gauss-Hermite quadrature.
    """
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    dt = config.step
    k = np.arange(config.grid_length - 1)
    s0 = config.severity_init_mean + config.severity_init_sd * x
    path = s0[:, None] + config.drift_mean * dt * k[None, :]
    cum_hazard = dt * np.exp(config.hazard_intercept + config.hazard_slope * path).sum(axis=1)
    return float(np.sum(w * (1.0 - np.exp(-cum_hazard))))
