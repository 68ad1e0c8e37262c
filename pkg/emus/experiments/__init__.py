from emus.experiments.config import (
    ExperimentConfig, load_config, load_preset, with_overrides, check_config,
)
from emus.experiments.runner import (
    RunSummary, ReplicateReport, ComparisonReport, build_setup, run, compare_direct,
)

__all__ = [
    "ExperimentConfig",
    "load_config",
    "load_preset",
    "with_overrides",
    "check_config",
    "RunSummary",
    "ReplicateReport",
    "ComparisonReport",
    "build_setup",
    "run",
    "compare_direct",
]
