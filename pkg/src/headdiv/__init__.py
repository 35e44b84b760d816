"""Attention-head diversity: measurement, diversity-regularized training and analysis."""

from .attention import (
    Favor,
    HeadParams,
    HeadTrace,
    LayerParams,
    SoftmaxFull,
    SoftmaxWindow,
    build_context_mask,
    layer_backward,
    layer_forward,
)
from .diversity import (
    DiversityKind,
    DiversityReport,
    diversity_loss,
    grad_similarity_loss,
    layer_diversity,
    pairwise_correlation,
)
from .training import SyntheticTaskSpec, TrainConfig, train

__version__ = "0.1.0"
