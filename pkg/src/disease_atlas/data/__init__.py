"""Cohort ingestion, preparation, synthetic generation and windowing."""
from .cohort import (GRID_STEP, ChannelSpec, ChannelStats, Cohort, IngestionError, PatientRecord,
                     PreparationError, PreparedSplits, SplitSpec, discretize, fit_stats, impute,
                     ingest_csv, prepare, read_manifest, split, write_csv, write_manifest)
from .synthetic import SyntheticConfig, generate_synthetic, reference_config, transition_probability
from .windows import (DEFAULT_RHO_MAX, EXCLUDED, NEGATIVE, POSITIVE, EncodedRecord, LabelSet,
                      TrainingWindow, WindowSet, encode, event_label, event_target, make_labels,
                      make_windows)

__all__ = [
    "GRID_STEP",
    "ChannelSpec",
    "ChannelStats",
    "Cohort",
    "IngestionError",
    "PatientRecord",
    "PreparationError",
    "PreparedSplits",
    "SplitSpec",
    "discretize",
    "fit_stats",
    "impute",
    "ingest_csv",
    "prepare",
    "read_manifest",
    "split",
    "write_csv",
    "write_manifest",
    "SyntheticConfig",
    "generate_synthetic",
    "reference_config",
    "transition_probability",
    "DEFAULT_RHO_MAX",
    "EXCLUDED",
    "NEGATIVE",
    "POSITIVE",
    "EncodedRecord",
    "LabelSet",
    "TrainingWindow",
    "WindowSet",
    "encode",
    "event_label",
    "event_target",
    "make_labels",
    "make_windows",
]
