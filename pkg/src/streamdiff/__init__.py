"""Streaming denoising pipeline engine over desk-scale denoiser backends."""

from .core import Condition, ConfigError, EngineConfig, Frame, make_rng, sample_gaussian, validate_config
from .runtime import MetricsReport, run_pipeline
from .scheduler import LcmParams, NoiseSchedule, ScheduleStep, build_schedule
from .stream_batch import StreamBatchEngine, run_sequential_reference, run_wait_and_batch_reference

__version__ = "0.1.0"

__all__ = [
    "Condition",
    "ConfigError",
    "EngineConfig",
    "Frame",
    "LcmParams",
    "MetricsReport",
    "NoiseSchedule",
    "ScheduleStep",
    "StreamBatchEngine",
    "build_schedule",
    "make_rng",
    "run_pipeline",
    "run_sequential_reference",
    "run_wait_and_batch_reference",
    "sample_gaussian",
    "validate_config",
]
