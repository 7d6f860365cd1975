"""Experiment harness, metrics reports and the ``sim`` command line."""
from .experiments import EXPERIMENTS, Experiment, run_experiment
from .report import MetricsReport, compare_report

__all__ = ["EXPERIMENTS", "Experiment", "MetricsReport", "compare_report", "run_experiment"]
