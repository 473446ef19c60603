"""Shuffled-video auxiliary training for span-based temporal grounding."""

__version__ = "0.1.0"

from .data import (
    DatasetSplit,
    FrameFeatures,
    GroundingSample,
    MomentSpan,
    TokenSequence,
    load_annotations,
    load_dataset_dir,
    load_features,
    split_statistics,
    timestamp_to_frame,
)
from .evaluation import (
    BiasHistogram,
    MetricsReport,
    ModelPredictor,
    SanityCheckResult,
    bias_histogram,
    distribution_divergence,
    evaluate_predictions,
    evaluate_predictor,
    randomized_video_test,
    select_span,
    temporal_iou,
)
from .losses import LossBundle, total_loss
from .model import GroundingNet, ModelConfig, Vocabulary, load_checkpoint, save_checkpoint
from .pseudo import TrainingTriplet, enumerate_insertion_points, generate_pseudo_video, make_triplet
from .synth import BenchConfig, generate_benchmark, make_oracle, run_oracle, write_benchmark
from .training import TrainConfig, build_model, fit

__all__ = [
    "BenchConfig",
    "BiasHistogram",
    "DatasetSplit",
    "FrameFeatures",
    "GroundingNet",
    "GroundingSample",
    "LossBundle",
    "MetricsReport",
    "ModelConfig",
    "ModelPredictor",
    "MomentSpan",
    "SanityCheckResult",
    "TokenSequence",
    "TrainConfig",
    "TrainingTriplet",
    "Vocabulary",
    "bias_histogram",
    "build_model",
    "distribution_divergence",
    "enumerate_insertion_points",
    "evaluate_predictions",
    "evaluate_predictor",
    "fit",
    "generate_benchmark",
    "generate_pseudo_video",
    "load_annotations",
    "load_checkpoint",
    "load_dataset_dir",
    "load_features",
    "make_oracle",
    "make_triplet",
    "randomized_video_test",
    "run_oracle",
    "save_checkpoint",
    "select_span",
    "split_statistics",
    "temporal_iou",
    "timestamp_to_frame",
    "total_loss",
    "write_benchmark",
]
