"""Text classifier built on siamese encoding of documents and label names,
interactive double attentions, and weighted similarity features."""

from .autodiff import (
    DegenerateSliceError,
    GradCheckReport,
    ShapeError,
    Tensor,
    backward,
    grad_check,
)
from .data import Batch, Document, LabelSet, Vocab
from .encoder import EncoderConfig, EncoderOutput
from .head import AblationConfig, AttentionParams, IdeaFeatures
from .model import IdeaModel
from .training import Metrics, RunResult, TrainConfig, evaluate, train, welch_t_test

__all__ = [
    "AblationConfig",
    "AttentionParams",
    "Batch",
    "DegenerateSliceError",
    "Document",
    "EncoderConfig",
    "EncoderOutput",
    "GradCheckReport",
    "IdeaFeatures",
    "IdeaModel",
    "LabelSet",
    "Metrics",
    "RunResult",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "Vocab",
    "backward",
    "evaluate",
    "grad_check",
    "train",
    "welch_t_test",
]
