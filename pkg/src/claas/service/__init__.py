"""Interface tier: experiment lifecycle, scheduling and the REST API."""

from .config import ExperimentConfig, TriggerRule, parse_config
from .core import ApiError, Service, TrainingJob, open_service

__all__ = ["ApiError", "ExperimentConfig", "Service", "TrainingJob", "TriggerRule", "open_service", "parse_config"]
