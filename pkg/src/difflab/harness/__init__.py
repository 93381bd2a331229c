"""Datasets, configuration, stage orchestration, reports and sweeps."""

from .config import Config, ConfigError, load_config, parse_config_text
from .datasets import DatasetSpec, LabeledData, make_dataset
from .pipeline import StageError, artifact_key, run_pipeline, run_stage, sensitivity_sweep
from .report import ExperimentReport, load_report

__all__ = ["Config", "ConfigError", "load_config", "parse_config_text", "DatasetSpec", "LabeledData",
           "make_dataset", "StageError", "artifact_key", "run_pipeline", "run_stage", "sensitivity_sweep",
           "ExperimentReport", "load_report"]
