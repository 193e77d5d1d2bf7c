from .base import (
    AttentionController,
    AttentionRecord,
    Backend,
    BackendOutput,
    LatentCode,
    NoiseSchedule,
    TextEmbeddingSequence,
)
from .synthetic import SyntheticBackend, linear_signal_schedule

__all__ = [
    "AttentionController",
    "AttentionRecord",
    "Backend",
    "BackendOutput",
    "LatentCode",
    "NoiseSchedule",
    "SyntheticBackend",
    "TextEmbeddingSequence",
    "linear_signal_schedule",
]
