"""Config loading, experiment dispatch and report emission."""
from .config import ExperimentConfig, build, load_config, schema
from .experiments import run_experiment
from .report import ReportBundle, emit_report

__all__ = ["ExperimentConfig", "ReportBundle", "build", "emit_report", "load_config", "run_experiment", "schema"]
