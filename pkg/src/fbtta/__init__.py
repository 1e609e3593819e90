"""Desk-scale lab for test-time adaptation driven by binary feedback."""

from .engine import AdaptConfig, AdaptReport, FeedbackSchedule, adapt_batch, adapt_stream
from .harness import ExperimentConfig, MetricsRow, ablation_grid, pretrain, run_experiment
from .memory import FeedbackRecord, ReplayMemory
from .nn import Architecture, ForwardMode, GradientVector, ModelState
from .policy import PolicyEstimate, SelectionResult, estimate_policy, expected_calibration_error
from .streams import OracleSpec, SegmentSpec, StreamBatch, StreamSpec, default_stream_spec

__all__ = [
    "AdaptConfig", "AdaptReport", "FeedbackSchedule", "adapt_batch", "adapt_stream",
    "ExperimentConfig", "MetricsRow", "ablation_grid", "pretrain", "run_experiment",
    "FeedbackRecord", "ReplayMemory",
    "Architecture", "ForwardMode", "GradientVector", "ModelState",
    "PolicyEstimate", "SelectionResult", "estimate_policy", "expected_calibration_error",
    "OracleSpec", "SegmentSpec", "StreamBatch", "StreamSpec", "default_stream_spec",
]

__version__ = "0.1.0"
