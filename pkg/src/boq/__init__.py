"""Bag-of-Queries global descriptor aggregation.

A self-contained implementation of learned-query cross-attention pooling
for place recognition: a double-precision autodiff core, the descriptor
network, metric-learning training, and an exact retrieval/evaluation
harness.
"""

from .attention import COUNTER, EncoderParams, MHAParams, encoder_forward, multi_head_attention
from .data import (
    DatasetManifest,
    PlaceDataset,
    SyntheticPlaceConfig,
    generate_synthetic,
    load_image,
    load_manifest,
    read_tensor_file,
    write_tensor_file,
)
from .model import (
    BoQBlockParams,
    BoQModelParams,
    ModelConfig,
    boq_block_forward,
    export_attention,
    feature_stem,
    init_model_params,
    load_checkpoint,
    model_forward,
    precompute_query_context,
    reduce_channels,
    save_checkpoint,
)
from .retrieval import (
    DescriptorIndex,
    EvalResult,
    GroundTruth,
    evaluate,
    haversine_m,
    match_by_distance,
    match_by_frame,
    recall_at_k,
    top_k,
)
from .tensor import Tape, Tensor, backward, finite_difference_check
from .training import (
    BatchSpec,
    LRSchedule,
    MSLossParams,
    OptimizerState,
    adamw_step,
    lr_at,
    multi_similarity_loss,
    sample_batch,
    train,
)

__version__ = "0.1.0"
