"""Siamese change detection with dual attention and a double-margin loss.

A small, fully testable pipeline for pixel-wise change detection on
bitemporal image pairs: a shared-weight convolutional encoder, spatial and
channel attention with learned residual scales, a weighted double-margin
contrastive loss with deep supervision, distance-map decisioning, and the
usual precision/recall/F1/OA metrics.  Built on an in-package float64
autodiff core with a finite-difference oracle.
"""

from .attention import AttentionOut, ChannelAttention, DualAttention, SpatialAttention, fuse
from .autodiff import (
    GradError,
    ShapeError,
    Tensor,
    conv2d,
    finite_difference_grad,
    matmul,
    maxpool2,
    relu,
    softmax_rows,
)
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .data import (
    DatasetManifest,
    ImagePair,
    IngestionError,
    ManifestEntry,
    SyntheticConfig,
    dataset_stats,
    generate_pair,
    load_pair,
    parse_manifest,
    save_image,
    stats_table,
    synthetic_dataset,
    write_manifest,
)
from .encoder import EncoderConfig, FeaturePair, SiamConvEncoder
from .losses import (
    LossConfig,
    class_weights,
    contrastive_loss,
    downsample_labels,
    pixel_distance,
    total_loss,
    wdmc_loss,
)
from .metrics import MetricsReport, confusion, metrics, threshold, threshold_sweep
from .training import (
    AdamState,
    Checkpoint,
    RunConfig,
    SiameseChangeNet,
    TrainingError,
    adam_step,
    evaluate,
    evaluate_pairs,
    gradcheck,
    load_checkpoint,
    model_from_checkpoint,
    predict_pair,
    save_checkpoint,
    sweep_pairs,
    train,
)

__version__ = "0.1.0"
