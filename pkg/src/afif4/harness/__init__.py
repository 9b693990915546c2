"""Evaluation protocol, pipeline orchestration and reporting."""

from .config import ConfigError, PipelineConfig, load_config
from .metrics import DetectionCounts, detection_metrics, f_measure, match_detections
from .pipeline import (
    ModelBundle,
    PipelineError,
    load_bundle,
    run_cross_dataset,
    run_crossval,
    run_evaluation,
    run_training,
    save_bundle,
)
from .protocol import FoldPlan, ProtocolError, SplitPlan, make_folds, make_splits
from .report import RunReport, emit_report

__all__ = [
    "ConfigError", "PipelineConfig", "load_config",
    "DetectionCounts", "detection_metrics", "f_measure", "match_detections",
    "ModelBundle", "PipelineError", "load_bundle", "run_cross_dataset", "run_crossval",
    "run_evaluation", "run_training", "save_bundle",
    "FoldPlan", "ProtocolError", "SplitPlan", "make_folds", "make_splits",
    "RunReport", "emit_report",
]
