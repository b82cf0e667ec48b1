"""External evaluator for transformer sequence-classification checkpoints."""

from .adapter import AdapterConfig, CheckpointMismatch, SequenceClassifierEvaluator
from .server import serve

__version__ = "0.1.0"
