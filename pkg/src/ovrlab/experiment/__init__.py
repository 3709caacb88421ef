"""MUSHRA listening-experiment service: config, crash-safe storage, HTTP API."""

from .config import (
    ExperimentConfig,
    ScreenSpec,
    StimulusSpec,
    UiOptions,
    load_experiment_config,
)
from .service import create_app
from .store import RecordStore

__all__ = [
    "ExperimentConfig",
    "ScreenSpec",
    "StimulusSpec",
    "UiOptions",
    "load_experiment_config",
    "create_app",
    "RecordStore",
]
