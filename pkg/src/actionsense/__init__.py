"""Violent-action (kick / punch / slap) video classification.

Frames sampled once per second are passed through a frozen backbone, the
resulting features are classified by a small fully connected head, and the
per-frame predictions are majority-voted into a video label.
"""

from .backbone import (
    BackboneSpec,
    FeatureVector,
    NormStats,
    apply_feature_normalizer,
    extract_features,
    fit_feature_normalizer,
    load_backbone,
)
from .dataset import DatasetManifest, LabelVocabulary, VideoRecord, load_manifest, one_hot, split_dataset
from .evaluator import (
    EvaluationReport,
    classify_video,
    confusion_matrix,
    per_class_metrics,
    predict_frame,
    render_report,
)
from .framepipe import FrameTensor, RawFrame, decode_frames, normalize_pixels, resize_frame, sample_frames
from .mlp import HeadConfig, HeadModel, backward, cross_entropy_loss, forward, init_head, load_model, optimizer_step, save_model
from .trainer import TrainConfig, TrainHistory, evaluate_epoch, train

__version__ = "0.1.0"

__all__ = [
    "BackboneSpec",
    "DatasetManifest",
    "EvaluationReport",
    "FeatureVector",
    "FrameTensor",
    "HeadConfig",
    "HeadModel",
    "LabelVocabulary",
    "NormStats",
    "RawFrame",
    "TrainConfig",
    "TrainHistory",
    "VideoRecord",
    "apply_feature_normalizer",
    "backward",
    "classify_video",
    "confusion_matrix",
    "cross_entropy_loss",
    "decode_frames",
    "evaluate_epoch",
    "extract_features",
    "fit_feature_normalizer",
    "forward",
    "init_head",
    "load_backbone",
    "load_manifest",
    "load_model",
    "normalize_pixels",
    "one_hot",
    "optimizer_step",
    "per_class_metrics",
    "predict_frame",
    "render_report",
    "resize_frame",
    "sample_frames",
    "save_model",
    "split_dataset",
    "train",
]
