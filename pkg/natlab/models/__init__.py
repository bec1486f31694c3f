"""
Pydantic models for natlab entities.
"""
from .config import DecodeConfig, EmaConfig, ExperimentConfig, LossConfig, ModelConfig, TrainConfig
from .corpus import Batch, SentencePair, Vocab
from .hypothesis import Hypothesis
from .metrics import BleuReport, EvalRecord, GradCheckReport, LossBreakdown, MetricsRecord
from .views import DualViewBatch, MaskedView

__all__ = [
    'DecodeConfig', 'EmaConfig', 'ExperimentConfig', 'LossConfig', 'ModelConfig', 'TrainConfig',
    'Batch', 'SentencePair', 'Vocab', 'Hypothesis',
    'BleuReport', 'EvalRecord', 'GradCheckReport', 'LossBreakdown', 'MetricsRecord',
    'DualViewBatch', 'MaskedView',
]
