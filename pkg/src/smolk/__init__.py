"""Sparse mixtures of learned kernels for biosignal segmentation and classification."""

from .compress import PruneConfig, absorb_weights, prune
from .estimators import SignalPreprocessor, SMoLKClassifier, SMoLKSegmenter
from .evaluation import auc_roc, dice, kfold, macro_f1
from .exceptions import SmolkError
from .model import (
    ClassificationModel,
    KernelBank,
    KernelGroup,
    SegmentationModel,
    count_flops,
    count_params,
    forward_classify,
    forward_segment,
    load_model,
    quantize,
    save_model,
)
from .postprocess import PostConfig, postprocess
from .preprocess import PreprocessConfig
from .signal_io import LabelMap, Signal
from .train import TrainConfig, fit, init_params

__version__ = "0.1.0"

__all__ = [
    "ClassificationModel", "KernelBank", "KernelGroup", "PostConfig", "PreprocessConfig",
    "PruneConfig", "SMoLKClassifier", "SMoLKSegmenter", "SegmentationModel", "Signal",
    "SignalPreprocessor", "LabelMap", "SmolkError", "TrainConfig", "absorb_weights", "auc_roc",
    "count_flops", "count_params", "dice", "fit", "forward_classify", "forward_segment",
    "init_params", "kfold", "load_model", "macro_f1", "postprocess", "prune", "quantize",
    "save_model",
]
