"""scikit-learn style front end.

``SMoLKSegmenter`` works on 2D arrays of normalized chunks (one chunk per
row) and per-sample artifact labels; ``SMoLKClassifier`` works on sequences
of normalized signals, which may differ in length.  Both follow the usual
``fit`` / ``predict`` / ``get_params`` contract, so they drop into pipelines,
``clone`` and grid searches.
"""

from __future__ import annotations

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import model as core
from .exceptions import LengthMismatch
from .model import group_lengths_for
from .postprocess import PostConfig, postprocess
from .preprocess import bandpass, resample, znorm
from .signal_io import Signal
from .train import TrainConfig, fit, init_params


def _check_chunks(X):
    return check_array(X, dtype=np.float64, ensure_2d=True)


def _check_signal_list(X):
    if isinstance(X, np.ndarray) and X.ndim == 2:
        return list(check_array(X, dtype=np.float64))
    out = []
    for s in X:
        arr = np.asarray(s.samples if hasattr(s, "samples") else s, dtype=np.float64).reshape(-1)
        if arr.size == 0 or not np.all(np.isfinite(arr)):
            raise ValueError("signals must be non-empty and finite")
        out.append(arr)
    return out


class SMoLKSegmenter(BaseEstimator):
    """Artifact segmentation with a sparse mixture of learned kernels.

    ``predict_proba`` returns the per-sample signal-quality score;
    ``predict`` smooths and thresholds it into an artifact map (1 = artifact).
    """

    def __init__(self, n_kernels=12, sample_rate_hz=64.0, group_seconds=None, iterations=512,
                 lr_start=0.01, lr_end=0.002, optimizer="adam", weight_decay=1e-4,
                 grad_accum_chunks=1, train_dtype="f64", smooth="savgol", window=51,
                 polyorder=3, threshold=0.5, random_state=0):
        self.n_kernels = n_kernels
        self.sample_rate_hz = sample_rate_hz
        self.group_seconds = group_seconds
        self.iterations = iterations
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.optimizer = optimizer
        self.weight_decay = weight_decay
        self.grad_accum_chunks = grad_accum_chunks
        self.train_dtype = train_dtype
        self.smooth = smooth
        self.window = window
        self.polyorder = polyorder
        self.threshold = threshold
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        return TrainConfig.segmentation(
            iterations=self.iterations, lr_start=self.lr_start, lr_end=self.lr_end,
            optimizer=self.optimizer, weight_decay=self.weight_decay,
            grad_accum_chunks=self.grad_accum_chunks, seed=self.random_state,
            dtype=self.train_dtype)

    def post_config(self) -> PostConfig:
        return PostConfig(self.smooth, self.window, self.polyorder, self.threshold)

    def fit(self, X, y):
        X = _check_chunks(X)
        y = np.asarray(y)
        if y.shape != X.shape:
            raise LengthMismatch(f"labels {y.shape} do not match chunks {X.shape}")
        lengths = group_lengths_for(self.sample_rate_hz, self.group_seconds)
        init = init_params("segmentation", self.n_kernels, lengths, seed=self.random_state,
                           sample_rate_hz=self.sample_rate_hz)
        result = fit(init, X, y, self.train_config())
        self.model_ = result.model
        self.trace_ = result.trace
        self.loss_curve_ = [row.loss for row in result.trace]
        return self

    @classmethod
    def from_model(cls, model, **params):
        est = cls(n_kernels=model.n_kernels, sample_rate_hz=model.bank.sample_rate_hz, **params)
        est.model_ = model
        return est

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return core.segment_logits(self.model_, _check_chunks(X))

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return core.forward_segment(self.model_, _check_chunks(X))

    def predict(self, X):
        return postprocess(self.predict_proba(X), self.post_config())

    def score(self, X, y):
        from .evaluation import dice

        return dice(self.predict(X), y)


class SMoLKClassifier(ClassifierMixin, BaseEstimator):
    """Rhythm classification from mean kernel activations plus a banded power spectrum."""

    def __init__(self, n_kernels=12, sample_rate_hz=300.0, group_seconds=None, n_bands=64,
                 f_max_hz=30.0, iterations=512, lr_start=0.1, lr_end=0.0, optimizer="adamw",
                 weight_decay=1e-2, batch_size=1024, class_weighting="none", train_dtype="f64",
                 random_state=0):
        self.n_kernels = n_kernels
        self.sample_rate_hz = sample_rate_hz
        self.group_seconds = group_seconds
        self.n_bands = n_bands
        self.f_max_hz = f_max_hz
        self.iterations = iterations
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.optimizer = optimizer
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.class_weighting = class_weighting
        self.train_dtype = train_dtype
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        return TrainConfig.classification(
            iterations=self.iterations, lr_start=self.lr_start, lr_end=self.lr_end,
            optimizer=self.optimizer, weight_decay=self.weight_decay,
            batch=self.batch_size if self.batch_size else "full", seed=self.random_state,
            class_weighting=self.class_weighting, dtype=self.train_dtype)

    def fit(self, X, y):
        X = _check_signal_list(X)
        self.classes_, codes = np.unique(np.asarray(y), return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        lengths = group_lengths_for(self.sample_rate_hz, self.group_seconds)
        init = init_params("classification", self.n_kernels, lengths, seed=self.random_state,
                           sample_rate_hz=self.sample_rate_hz, n_classes=self.classes_.size,
                           n_bands=self.n_bands, f_max_hz=self.f_max_hz,
                           class_names=[str(c) for c in self.classes_])
        result = fit(init, X, codes, self.train_config())
        self.model_ = result.model
        self.trace_ = result.trace
        self.loss_curve_ = [row.loss for row in result.trace]
        return self

    @classmethod
    def from_model(cls, model, **params):
        est = cls(n_kernels=model.n_kernels, sample_rate_hz=model.bank.sample_rate_hz,
                  n_bands=model.n_bands, f_max_hz=model.f_max_hz, **params)
        est.model_ = model
        est.classes_ = np.arange(model.n_classes)
        return est

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return core.classify_logits(self.model_, _check_signal_list(X)).astype(np.float64)

    def predict_proba(self, X):
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


class SignalPreprocessor(TransformerMixin, BaseEstimator):
    """Bandpass, resample and z-score each row of a 2D array of chunks."""

    def __init__(self, band_low_hz=0.9, band_high_hz=5.0, sample_rate_hz=64.0,
                 target_rate_hz=64.0):
        self.band_low_hz = band_low_hz
        self.band_high_hz = band_high_hz
        self.sample_rate_hz = sample_rate_hz
        self.target_rate_hz = target_rate_hz

    def fit(self, X, y=None):
        _check_chunks(X)
        return self

    def transform(self, X):
        X = _check_chunks(X)
        rows = []
        for row in X:
            s = bandpass(Signal(row, self.sample_rate_hz), self.band_low_hz, self.band_high_hz)
            rows.append(znorm(resample(s, self.target_rate_hz)).samples)
        return np.asarray(rows)
