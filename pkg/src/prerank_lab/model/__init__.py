"""Two-tower pre-ranking model: parameters, layers, and tower wiring."""

from .params import (
    BEHAVIOR_PARTITIONS,
    VocabSpec,
    feature_widths,
    init_params,
    load_checkpoint,
    params_to_vector,
    save_checkpoint,
    tensor_shapes,
    vector_to_params,
    zeros_like_params,
)
from .tower import Features, backward, featurize, forward, score_items

__all__ = [
    "BEHAVIOR_PARTITIONS",
    "Features",
    "VocabSpec",
    "backward",
    "feature_widths",
    "featurize",
    "forward",
    "init_params",
    "load_checkpoint",
    "params_to_vector",
    "save_checkpoint",
    "score_items",
    "tensor_shapes",
    "vector_to_params",
    "zeros_like_params",
]
