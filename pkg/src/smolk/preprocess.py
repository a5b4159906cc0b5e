"""Signal conditioning: bandpass, resampling, chunking and per-chunk z-scoring.

The recipe is filter -> chunk -> resample -> normalize.  PPG uses a
0.9-5 Hz band, 30 s chunks at 64 Hz; ECG uses 1-10 Hz and 10 s chunks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import signal as sps

from .exceptions import ChunkTooShort, CutoffOutOfRange, DegenerateChunk, LengthMismatch
from .signal_io import LabelMap, Signal

FILTER_ORDER = 4


@dataclass(frozen=True)
class PreprocessConfig:
    band_low_hz: float = 0.9
    band_high_hz: float = 5.0
    target_rate_hz: float = 64.0
    chunk_s: float = 30.0
    normalize: str = "per_chunk_znorm"

    def __post_init__(self):
        if not 0 < self.band_low_hz < self.band_high_hz < self.target_rate_hz / 2:
            raise CutoffOutOfRange(
                f"need 0 < {self.band_low_hz} < {self.band_high_hz} < {self.target_rate_hz / 2}"
            )
        if not self.chunk_s > 0:
            raise ValueError("chunk_s must be positive")
        if self.normalize != "per_chunk_znorm":
            raise ValueError(f"unknown normalization {self.normalize!r}")

    @classmethod
    def ppg(cls):
        return cls(0.9, 5.0, 64.0, 30.0)

    @classmethod
    def ecg(cls, target_rate_hz: float = 300.0):
        return cls(1.0, 10.0, target_rate_hz, 10.0)

    def to_dict(self):
        return asdict(self)


def _butter_sos(low_hz, high_hz, fs):
    if not 0 < low_hz < high_hz < fs / 2:
        raise CutoffOutOfRange(f"cutoffs ({low_hz}, {high_hz}) invalid at {fs} Hz")
    return sps.butter(FILTER_ORDER, [low_hz, high_hz], btype="bandpass", fs=fs, output="sos")


def bandpass(signal: Signal, low_hz: float, high_hz: float) -> Signal:
    """Zero-phase Butterworth bandpass (biquad cascade run forward and backward)."""
    sos = _butter_sos(low_hz, high_hz, signal.sample_rate_hz)
    x = signal.samples
    # sosfiltfilt's default pad length can exceed short inputs
    padlen = min(3 * (2 * len(sos) + 1), len(x) - 1)
    return signal.replace(samples=sps.sosfiltfilt(sos, x, padlen=max(padlen, 0)))


def resample(signal: Signal, target_rate_hz: float) -> Signal:
    """Linear-interpolation resampling to ``round(L * target / source)`` samples."""
    if not target_rate_hz > 0:
        raise ValueError("target rate must be positive")
    src = signal.sample_rate_hz
    if target_rate_hz == src:
        return signal.replace(samples=signal.samples.copy())
    n_out = int(round(len(signal) * target_rate_hz / src))
    if n_out < 1:
        raise ChunkTooShort("resampled signal would be empty")
    t_out = np.arange(n_out) / target_rate_hz
    t_in = np.arange(len(signal)) / src
    return Signal(np.interp(t_out, t_in, signal.samples), target_rate_hz, signal.id)


def resample_labels(labels: LabelMap, n_out: int) -> LabelMap:
    """Nearest-neighbour resampling of a 0/1 map onto ``n_out`` samples."""
    if not labels.is_segmentation:
        return labels
    n_in = len(labels)
    idx = np.minimum(np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(int), n_in - 1)
    return LabelMap(labels.values[idx])


def chunk(signal: Signal, labels: LabelMap | None, chunk_s: float, min_samples: int = 1):
    """Split into non-overlapping ``chunk_s`` pieces; the short remainder is dropped.

    ``min_samples`` is the longest kernel length the chunks must accommodate.
    """
    size = int(round(chunk_s * signal.sample_rate_hz))
    if size < min_samples:
        raise ChunkTooShort(f"{size}-sample chunks are shorter than a {min_samples}-tap kernel")
    if labels is not None and labels.is_segmentation and len(labels) != len(signal):
        raise LengthMismatch(f"{len(signal)} samples vs {len(labels)} labels")
    out = []
    for i in range(len(signal) // size):
        sl = slice(i * size, (i + 1) * size)
        piece = signal.replace(samples=signal.samples[sl], id=f"{signal.id}#{i}")
        if labels is None:
            lab = None
        elif labels.is_segmentation:
            lab = LabelMap(labels.values[sl])
        else:
            lab = LabelMap(class_index=labels.class_index)
        out.append((piece, lab))
    return out


def znorm_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean()
    centered = x - mean
    std = np.sqrt(np.mean(centered ** 2))
    if not std > 1e-12 * max(1.0, abs(mean)):
        raise DegenerateChunk("chunk has zero variance")
    return centered / std


def znorm(signal: Signal) -> Signal:
    """Subtract the mean and divide by the population standard deviation."""
    return signal.replace(samples=znorm_array(signal.samples))


def preprocess_record(signal: Signal, labels: LabelMap | None, config: PreprocessConfig,
                      min_samples: int = 1):
    """Full recipe for one recording; returns normalized (Signal, LabelMap) chunks."""
    filtered = bandpass(signal, config.band_low_hz, config.band_high_hz)
    pieces = chunk(filtered, labels, config.chunk_s, min_samples=1)
    out = []
    for piece, lab in pieces:
        if piece.sample_rate_hz != config.target_rate_hz:
            piece = resample(piece, config.target_rate_hz)
            if lab is not None:
                lab = resample_labels(lab, len(piece))
        if len(piece) < min_samples:
            raise ChunkTooShort(f"chunk of {len(piece)} samples < kernel length {min_samples}")
        out.append((znorm(piece), lab))
    return out


def preprocess_corpus(pairs, config: PreprocessConfig, min_samples: int = 1):
    out = []
    for signal, labels in pairs:
        out.extend(preprocess_record(signal, labels, config, min_samples))
    return out
