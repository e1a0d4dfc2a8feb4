"""Plain-text ``key = value`` files: run configuration, run manifest, synthetic cohort."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data.synthetic import SyntheticConfig
from .evaluation import BenchmarkSettings
from .model import ModelConfig
from .pipeline import SEARCH_DIMS, TrainConfig


class ConfigError(ValueError):
    pass


def read_key_values(path) -> dict[str, str]:
    """All keys from every section (or a bare file with no section header)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    if not text.lstrip().startswith("["):
        text = "[default]\n" + text
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        out.update(parser[section])
    return out


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _strings(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


@dataclass
class RunConfig:
    hidden_size: int = 32
    task_layer_size: int = 16
    minibatch_size: int = 128
    max_iterations: int = 3000
    learning_rate: float = 3e-3
    alpha_T: float = 1.0
    dropout_rate: float = 0.05
    seed: int = 0
    rho_max: int = 20
    horizons: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0)
    task_grouping: str = "kind"
    partition_seed: int = 0
    partitions: int = 3
    mc_samples: int = 100
    lstm_iterations: int | None = None
    landmark_iterations: int = 1500
    search_iterations: int = 20
    search_seed: int = 0
    search_mc_samples: int = 20
    search_space: dict[str, tuple[float, float]] = field(default_factory=dict)
    comparator_csv: str | None = None

    def train_config(self, partition: int = 0) -> TrainConfig:
        return TrainConfig(self.minibatch_size, self.max_iterations, self.learning_rate, self.alpha_T,
                           self.dropout_rate, self.seed + partition)

    def model_config(self, spec) -> ModelConfig:
        return ModelConfig(len(spec.continuous), len(spec.binary), len(spec.events), len(spec.covariates),
                           self.hidden_size, self.task_layer_size, self.dropout_rate)

    def benchmark_settings(self) -> BenchmarkSettings:
        return BenchmarkSettings(self.train_config(), self.hidden_size, self.task_layer_size,
                                 self.lstm_iterations, self.landmark_iterations, self.horizons, self.rho_max,
                                 self.mc_samples, self.partition_seed, self.partitions, self.task_grouping)


def parse_run_config(values: dict[str, str]) -> RunConfig:
    cfg = RunConfig()
    kinds = {f.name: f.type for f in fields(RunConfig)}
    updates, space = {}, {}
    for key, raw in values.items():
        if key.startswith("search_") and key[7:] in SEARCH_DIMS:
            bounds = _floats(raw)
            if len(bounds) == 1:
                bounds = (bounds[0], bounds[0])
            if len(bounds) != 2 or bounds[0] > bounds[1]:
                raise ConfigError(f"{key}: expected 'low, high'")
            space[key[7:]] = bounds
            continue
        if key not in kinds or key == "search_space":
            raise ConfigError(f"unknown run configuration key {key!r}")
        kind = kinds[key]
        try:
            if key == "horizons":
                updates[key] = _floats(raw)
            elif raw.strip().lower() in ("", "none") and "None" in str(kind):
                updates[key] = None
            elif "int" in str(kind):
                updates[key] = int(raw)
            elif "float" in str(kind):
                updates[key] = float(raw)
            else:
                updates[key] = raw.strip()
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    cfg = replace(cfg, **updates)
    cfg.search_space = space
    return cfg


def load_run_config(path) -> RunConfig:
    return parse_run_config(read_key_values(path))


@dataclass
class RunManifest:
    cohort: Path
    channels: Path
    config: Path
    checkpoint_dir: Path
    report_dir: Path
    seed: int | None = None
    partition_seed: int | None = None

    def run_config(self) -> RunConfig:
        cfg = load_run_config(self.config)
        if self.seed is not None:
            cfg = replace(cfg, seed=self.seed)
        if self.partition_seed is not None:
            cfg = replace(cfg, partition_seed=self.partition_seed)
        return cfg


def load_manifest(path) -> RunManifest:
    """Paths in the manifest are resolved relative to the manifest's directory."""
    values = read_key_values(path)
    base = Path(path).resolve().parent

    def resolve(key, required=True):
        if key not in values:
            if required:
                raise ConfigError(f"manifest {path} is missing {key!r}")
            return None
        p = Path(values[key].strip())
        return p if p.is_absolute() else base / p

    known = {"cohort", "channels", "config", "checkpoint_dir", "report_dir", "seed", "partition_seed"}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown manifest keys: {', '.join(sorted(unknown))}")
    seed = int(values["seed"]) if "seed" in values else None
    pseed = int(values["partition_seed"]) if "partition_seed" in values else None
    return RunManifest(resolve("cohort"), resolve("channels"), resolve("config"),
                       resolve("checkpoint_dir"), resolve("report_dir"), seed, pseed)


def parse_synthetic_config(values: dict[str, str]) -> SyntheticConfig:
    kinds = {f.name: str(f.type) for f in fields(SyntheticConfig)}
    updates, missing = {}, {}
    for key, raw in values.items():
        if key.startswith("missing_"):
            missing[key[8:]] = float(raw)
            continue
        if key not in kinds or key == "missing_rates":
            raise ConfigError(f"unknown synthetic configuration key {key!r}")
        kind = kinds[key]
        try:
            if kind.startswith("tuple[float"):
                updates[key] = _floats(raw)
            elif kind.startswith("tuple[str"):
                updates[key] = _strings(raw)
            elif kind == "int":
                updates[key] = int(raw)
            elif kind == "float":
                updates[key] = float(raw)
            else:
                updates[key] = raw.strip()
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    if missing:
        updates["missing_rates"] = missing
    try:
        return SyntheticConfig(**updates)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_synthetic_config(path) -> SyntheticConfig:
    return parse_synthetic_config(read_key_values(path))
