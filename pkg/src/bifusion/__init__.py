"""Multimodal fusion at desk scale: an orthogonal multi-glimpse bilinear
attention network, a transformer co-attention baseline, and a computational
cost model, all built on a small taped-autodiff tensor engine."""

from .tensor import (
    FlopMeter,
    ShapeMismatchError,
    Tape,
    Tensor,
    backward,
    bce_with_logits,
    parameter,
    softmax,
)
from .config import (
    ExperimentConfig,
    FusionConfig,
    SyntheticTaskSpec,
    TrainConfig,
    load_config,
)

__version__ = "0.1.0"
