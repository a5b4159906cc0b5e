"""Smoothing and thresholding of segmentation quality scores.

The model outputs signal *quality*, so a sample is labelled artifact (1) when
its score falls below the threshold; a score exactly at the threshold is clean.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import savgol_filter

from .exceptions import BadWindow, WindowTooLarge


@dataclass(frozen=True)
class PostConfig:
    smooth: str = "savgol"  # or "none"
    window: int = 51  # ~0.8 s at 64 Hz
    polyorder: int = 3
    threshold: float = 0.5

    def __post_init__(self):
        if self.smooth not in ("savgol", "none"):
            raise ValueError(f"unknown smoother {self.smooth!r}")
        if self.smooth == "savgol":
            _check_window(self.window, self.polyorder)
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")

    def to_dict(self):
        return asdict(self)


def _check_window(window, polyorder):
    if window % 2 == 0 or window <= polyorder or polyorder < 0:
        raise BadWindow(f"window must be odd and > polyorder (got {window}, {polyorder})")


def savgol(scores, window: int = 51, polyorder: int = 3, mode: str = "mirror"):
    """Savitzky-Golay smoothing along the last axis.

    ``mode='mirror'`` reflects the signal about its end samples; ``'interp'``
    fits the edge windows directly, reproducing polynomials of degree
    ``polyorder`` everywhere.
    """
    _check_window(window, polyorder)
    x = np.asarray(scores, dtype=np.float64)
    if x.shape[-1] < window:
        raise WindowTooLarge(f"window {window} longer than {x.shape[-1]} samples")
    return savgol_filter(x, window, polyorder, axis=-1, mode=mode)


def binarize(scores, threshold: float = 0.5) -> np.ndarray:
    """1 (artifact) where the quality score is below ``threshold``."""
    return (np.asarray(scores) < threshold).astype(np.uint8)


def postprocess(scores, config: PostConfig = PostConfig()) -> np.ndarray:
    x = np.asarray(scores, dtype=np.float64)
    if config.smooth == "savgol":
        x = savgol(x, config.window, config.polyorder)
    return binarize(x, config.threshold)
