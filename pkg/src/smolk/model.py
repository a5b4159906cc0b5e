"""SMoLK model definitions, forward passes and the binary model format.

A model is a bank of 1D kernels in three length groups (short, moderate,
long) plus a head.  The segmentation head weights each rectified feature map
and sums them into a quality logit::

    score[t] = sigmoid( sum_m max(0, (x * k_m)[t] + b_m) * w_m )

The classification head averages each rectified feature map and feeds the
means, together with banded power-spectrum features, to a linear layer::

    z_j = sum_m w_mj * mean(f_m) + sum_f w_fj * P_f + b_j

``*`` is cross-correlation (no kernel flip).  Segmentation uses SAME
alignment so every feature map has the input length; classification uses
VALID alignment.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sfft
from scipy.special import expit, softmax

from .exceptions import (
    BadClass,
    BadMagic,
    BandOutOfRange,
    ChecksumMismatch,
    IoError,
    MissingFile,
    OverflowOnCast,
    SignalTooShort,
    VersionUnsupported,
)

GROUP_NAMES = ("short", "moderate", "long")
DEFAULT_GROUP_SECONDS = {"short": 1.0, "moderate": 1.5, "long": 3.0}
SIZE_PRESETS = {"small": 12, "medium": 72, "large": 384}

F16_MAX = float(np.finfo(np.float16).max)
DTYPES = {"f32": np.float32, "f16": np.float16, "f64": np.float64}
_DTYPE_TAGS = {"f32": 0, "f16": 1, "f64": 2}
_TASK_TAGS = {"segmentation": 0, "classification": 1}

# rows of the unfolded (samples x taps) matrix processed per matmul
BLOCK_ROWS = 1 << 15


def dtype_name(dtype) -> str:
    dt = np.dtype(dtype)
    for name, candidate in DTYPES.items():
        if dt == candidate:
            return name
    raise ValueError(f"unsupported parameter dtype {dt}")


def compute_dtype(param_dtype):
    """float16 parameters are evaluated in float32; otherwise keep the dtype."""
    return np.float64 if np.dtype(param_dtype) == np.float64 else np.float32


class Kernel(NamedTuple):
    taps: np.ndarray
    bias: float
    group: str


@dataclass
class KernelGroup:
    name: str
    taps: np.ndarray  # (n, K)
    biases: np.ndarray  # (n,)

    def __post_init__(self):
        if self.name not in GROUP_NAMES:
            raise ValueError(f"unknown kernel group {self.name!r}")
        self.taps = np.atleast_2d(np.asarray(self.taps))
        self.biases = np.asarray(self.biases).reshape(-1)
        if self.taps.shape[0] != self.biases.shape[0]:
            raise ValueError("one bias per kernel required")
        if self.taps.shape[1] < 1:
            raise ValueError("kernels need at least one tap")
        if not (np.all(np.isfinite(self.taps)) and np.all(np.isfinite(self.biases))):
            raise ValueError("kernel parameters must be finite")

    @property
    def length(self) -> int:
        return self.taps.shape[1]

    @property
    def size(self) -> int:
        return self.taps.shape[0]


@dataclass
class KernelBank:
    """Kernels in group order short, moderate, long.

    Global kernel index ``m`` runs over the groups in that order; head
    parameters are indexed the same way.
    """

    groups: list
    sample_rate_hz: float = 64.0

    def __post_init__(self):
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise ValueError("duplicate kernel group")
        self.groups = sorted(self.groups, key=lambda g: GROUP_NAMES.index(g.name))

    @property
    def n_kernels(self) -> int:
        return sum(g.size for g in self.groups)

    @property
    def group_lengths(self) -> dict:
        return {g.name: g.length for g in self.groups}

    @property
    def max_length(self) -> int:
        return max((g.length for g in self.groups if g.size), default=0)

    @property
    def dtype(self):
        return self.groups[0].taps.dtype if self.groups else np.dtype(np.float64)

    def group_slices(self) -> dict:
        out, start = {}, 0
        for g in self.groups:
            out[g.name] = slice(start, start + g.size)
            start += g.size
        return out

    def group(self, name: str) -> KernelGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def kernels(self) -> list:
        return [Kernel(g.taps[i], float(g.biases[i]), g.name)
                for g in self.groups for i in range(g.size)]

    def group_of(self) -> list:
        return [g.name for g in self.groups for _ in range(g.size)]

    def astype(self, dtype) -> "KernelBank":
        return KernelBank([KernelGroup(g.name, g.taps.astype(dtype), g.biases.astype(dtype))
                           for g in self.groups], self.sample_rate_hz)

    def copy(self) -> "KernelBank":
        return self.astype(self.dtype)

    @classmethod
    def from_kernels(cls, kernels: Sequence[Kernel], sample_rate_hz: float, dtype=np.float64):
        by_group = {}
        for k in kernels:
            by_group.setdefault(k.group, []).append(k)
        groups = []
        for name, ks in by_group.items():
            lengths = {len(k.taps) for k in ks}
            if len(lengths) != 1:
                raise ValueError(f"group {name!r} mixes kernel lengths {sorted(lengths)}")
            groups.append(KernelGroup(name, np.array([k.taps for k in ks], dtype=dtype),
                                      np.array([k.bias for k in ks], dtype=dtype)))
        return cls(groups, sample_rate_hz)


def group_lengths_for(sample_rate_hz: float, group_seconds=None) -> dict:
    """Taps per group; ``group_seconds`` is a dict or a (short, moderate, long) triple."""
    secs = DEFAULT_GROUP_SECONDS if group_seconds is None else group_seconds
    if not isinstance(secs, dict):
        secs = dict(zip(GROUP_NAMES, secs))
    return {name: max(1, int(round(s * sample_rate_hz))) for name, s in secs.items()}


def split_counts(n_kernels: int, n_groups: int = 3) -> list:
    if n_kernels < n_groups or n_kernels % n_groups:
        raise ValueError(f"kernel count {n_kernels} must be a positive multiple of {n_groups}")
    return [n_kernels // n_groups] * n_groups


@dataclass
class SegmentationModel:
    bank: KernelBank
    weights: Optional[np.ndarray]  # (M,), None once absorbed
    absorbed: bool = False
    signs: Optional[np.ndarray] = None  # (M,) of +1/-1 once absorbed

    task = "segmentation"

    def __post_init__(self):
        m = self.bank.n_kernels
        if self.absorbed:
            if self.signs is None or self.weights is not None:
                raise ValueError("absorbed models carry signs instead of weights")
            self.signs = np.asarray(self.signs, dtype=np.int8).reshape(-1)
            if self.signs.shape != (m,) or not np.isin(self.signs, (-1, 1)).all():
                raise ValueError("signs must be +1/-1, one per kernel")
        else:
            if self.weights is None:
                raise ValueError("weights required")
            self.weights = np.asarray(self.weights).reshape(-1)
            if self.weights.shape != (m,):
                raise ValueError(f"expected {m} weights, got {self.weights.shape}")

    @property
    def n_kernels(self) -> int:
        return self.bank.n_kernels

    @property
    def dtype(self):
        return self.bank.dtype

    def head_weights(self) -> np.ndarray:
        """Per-kernel output multipliers (weights, or signs when absorbed)."""
        if self.absorbed:
            return self.signs.astype(self.dtype)
        return self.weights

    def copy(self) -> "SegmentationModel":
        return SegmentationModel(self.bank.copy(),
                                 None if self.weights is None else self.weights.copy(),
                                 self.absorbed,
                                 None if self.signs is None else self.signs.copy())


@dataclass
class ClassificationModel:
    bank: KernelBank
    class_weights: np.ndarray  # (M, J)
    spectrum_weights: np.ndarray  # (F, J)
    class_bias: np.ndarray  # (J,)
    f_max_hz: float = 30.0
    class_names: list = field(default_factory=list)

    task = "classification"

    def __post_init__(self):
        self.class_weights = np.atleast_2d(np.asarray(self.class_weights))
        self.class_bias = np.asarray(self.class_bias).reshape(-1)
        j = self.class_bias.size
        self.spectrum_weights = np.asarray(self.spectrum_weights).reshape(-1, j)
        if j < 2:
            raise ValueError("need at least two classes")
        if self.class_weights.shape != (self.bank.n_kernels, j):
            raise ValueError(f"class_weights must be ({self.bank.n_kernels}, {j})")
        if self.class_names and len(self.class_names) != j:
            raise ValueError("class_names length must match the number of classes")

    @property
    def n_kernels(self) -> int:
        return self.bank.n_kernels

    @property
    def n_classes(self) -> int:
        return self.class_bias.size

    @property
    def n_bands(self) -> int:
        return self.spectrum_weights.shape[0]

    @property
    def dtype(self):
        return self.bank.dtype

    def copy(self) -> "ClassificationModel":
        return ClassificationModel(self.bank.copy(), self.class_weights.copy(),
                                   self.spectrum_weights.copy(), self.class_bias.copy(),
                                   self.f_max_hz, list(self.class_names))


# --------------------------------------------------------------------------
# convolution engine


def same_padding(k: int):
    """Left/right zero padding so a K-tap kernel keeps the input length."""
    return (k - 1) // 2, k // 2


def _as_2d(x, dtype):
    if hasattr(x, "samples"):
        x = x.samples
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError("expected a 1D signal or a 2D batch of equal-length signals")
    return arr


def iter_blocks(n_rows: int, n_cols: int, block_rows: int = BLOCK_ROWS):
    """Yield (row slice, column slice) tiles of about ``block_rows`` outputs each."""
    if n_cols >= block_rows:
        for r in range(n_rows):
            for c in range(0, n_cols, block_rows):
                yield slice(r, r + 1), slice(c, min(c + block_rows, n_cols))
    else:
        per = max(1, block_rows // n_cols)
        for r in range(0, n_rows, per):
            yield slice(r, min(r + per, n_rows)), slice(0, n_cols)


def unfold(xpad: np.ndarray, rows: slice, cols: slice, k: int) -> np.ndarray:
    """Contiguous (n_rows * n_cols, K) matrix of sliding windows of ``xpad``."""
    seg = xpad[rows, cols.start:cols.stop + k - 1]
    win = sliding_window_view(seg, k, axis=1)
    return np.ascontiguousarray(win).reshape(-1, k)


def prefers_fft(group) -> bool:
    """FFT correlation wins when a group has few kernels relative to its length."""
    return group.size <= group.length // 2


class Tile:
    """Sliding K-sample windows of one (rows, cols) block of a padded batch.

    Correlations come back as a ``(n_rows * n_cols, n_kernels)`` matrix,
    either from an explicit im2col matrix times the taps (one GEMM) or from
    the FFT of each padded row segment.  ``taps_grad`` is the adjoint:
    ``dh.T @ windows`` for an upstream gradient ``dh`` of the same layout.
    """

    def __init__(self, xpad: np.ndarray, rows: slice, cols: slice, k: int, use_fft: bool = False):
        self.k = k
        self.n_rows = rows.stop - rows.start
        self.n_cols = cols.stop - cols.start
        seg = xpad[rows, cols.start:cols.stop + k - 1]
        self.dtype = seg.dtype
        if use_fft:
            self.nfft = sfft.next_fast_len(seg.shape[1], real=True)
            self.seg_f = sfft.rfft(seg, self.nfft, axis=1)
            self.u = None
        else:
            self.u = unfold(xpad, rows, cols, k)

    def correlate(self, taps: np.ndarray) -> np.ndarray:
        if self.u is not None:
            return self.u @ taps.T
        kf = np.conj(sfft.rfft(taps, self.nfft, axis=1))
        h = sfft.irfft(self.seg_f[:, None, :] * kf[None], self.nfft, axis=2)[..., :self.n_cols]
        out = np.ascontiguousarray(h.transpose(0, 2, 1), dtype=self.dtype)
        return out.reshape(-1, taps.shape[0])

    def taps_grad(self, dh: np.ndarray) -> np.ndarray:
        if self.u is not None:
            return dh.T @ self.u
        m = dh.shape[1]
        d = dh.reshape(self.n_rows, self.n_cols, m).transpose(0, 2, 1)
        df = np.conj(sfft.rfft(d, self.nfft, axis=2))
        acc = np.einsum("nf,nmf->mf", self.seg_f, df)
        return sfft.irfft(acc, self.nfft, axis=1)[:, :self.k]


def segment_logits(model: SegmentationModel, x, groups: Optional[Sequence[str]] = None):
    """Pre-sigmoid quality score with SAME alignment, shape (B, L) or (L,).

    ``groups`` restricts the sum to the named kernel groups.
    """
    cdt = compute_dtype(model.dtype)
    squeeze = np.ndim(x.samples if hasattr(x, "samples") else x) == 1
    X = _as_2d(x, cdt)
    n, length = X.shape
    if length < model.bank.max_length:
        raise SignalTooShort(f"signal of {length} samples < kernel of {model.bank.max_length}")
    head = model.head_weights().astype(cdt)
    slices = model.bank.group_slices()
    out = np.zeros((n, length), dtype=cdt)
    for g in model.bank.groups:
        if g.size == 0 or (groups is not None and g.name not in groups):
            continue
        taps = g.taps.astype(cdt)
        bias = g.biases.astype(cdt)
        w = head[slices[g.name]]
        xpad = np.pad(X, ((0, 0), same_padding(g.length)))
        fft = prefers_fft(g)
        for rows, cols in iter_blocks(n, length):
            h = Tile(xpad, rows, cols, g.length, fft).correlate(taps)
            h += bias
            np.maximum(h, 0, out=h)
            out[rows, cols] += (h @ w).reshape(rows.stop - rows.start, -1)
    return out[0] if squeeze else out


def forward_segment(model: SegmentationModel, x):
    """Per-sample quality score in (0, 1); same shape as ``x``."""
    return expit(segment_logits(model, x))


@dataclass
class FeatureMaps:
    maps: list  # per kernel, 1D arrays
    alignment: str
    groups: list


def feature_maps(bank: KernelBank, x, alignment: str = "valid") -> FeatureMaps:
    """Rectified correlation output ``max(0, x * k_m + b_m)`` for every kernel."""
    if alignment not in ("valid", "same"):
        raise ValueError("alignment must be 'valid' or 'same'")
    cdt = compute_dtype(bank.dtype)
    X = _as_2d(x, cdt)
    if X.shape[0] != 1:
        raise ValueError("feature_maps takes a single signal")
    length = X.shape[1]
    if length < bank.max_length:
        raise SignalTooShort(f"signal of {length} samples < kernel of {bank.max_length}")
    maps, groups = [], []
    for g in bank.groups:
        if g.size == 0:
            continue
        xp = np.pad(X, ((0, 0), same_padding(g.length))) if alignment == "same" else X
        n_out = length if alignment == "same" else length - g.length + 1
        h = np.zeros((n_out, g.size), dtype=cdt)
        fft = prefers_fft(g)
        for rows, cols in iter_blocks(1, n_out):
            h[cols] = Tile(xp, rows, cols, g.length, fft).correlate(g.taps.astype(cdt))
        h += g.biases.astype(cdt)
        np.maximum(h, 0, out=h)
        maps.extend(h.T)
        groups.extend([g.name] * g.size)
    return FeatureMaps(maps, alignment, groups)


def power_spectrum(x, n_bands: int = 64, f_max_hz: float = 30.0,
                   sample_rate_hz: Optional[float] = None) -> np.ndarray:
    """Banded one-sided power spectral density.

    Band ``b`` is the mean periodogram value over bins with frequency in
    ``[b * f_max / n_bands, (b + 1) * f_max / n_bands)`` (the last band also
    takes ``f_max`` itself).  With ``df = fs / L`` the bins satisfy
    ``sum(psd) * df == mean(x**2)``.  Bands with no bins are 0.
    """
    if hasattr(x, "samples"):
        fs = x.sample_rate_hz if sample_rate_hz is None else sample_rate_hz
        x = x.samples
    else:
        fs = sample_rate_hz
    if fs is None:
        raise ValueError("sample_rate_hz required for raw arrays")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if n_bands < 1 or not 0 < f_max_hz <= fs / 2 + 1e-12:
        raise BandOutOfRange(f"{n_bands} bands up to {f_max_hz} Hz invalid at {fs} Hz")
    length = x.size
    spec = np.fft.rfft(x)
    psd = (spec.real ** 2 + spec.imag ** 2) / (fs * length)
    if length % 2 == 0:
        psd[1:-1] *= 2
    else:
        psd[1:] *= 2
    freqs = np.fft.rfftfreq(length, 1.0 / fs)
    width = f_max_hz / n_bands
    band = np.floor(freqs / width + 1e-9).astype(int)
    band[np.isclose(freqs, f_max_hz)] = n_bands - 1
    keep = band < n_bands
    sums = np.bincount(band[keep], weights=psd[keep], minlength=n_bands)
    counts = np.bincount(band[keep], minlength=n_bands)
    return np.divide(sums, counts, out=np.zeros(n_bands), where=counts > 0)


def _as_list(x) -> list:
    if hasattr(x, "samples"):
        return [x.samples]
    if isinstance(x, np.ndarray) and x.ndim == 1:
        return [x]
    if isinstance(x, np.ndarray) and x.ndim == 2:
        return list(x)
    return [s.samples if hasattr(s, "samples") else np.asarray(s) for s in x]


def kernel_means(bank: KernelBank, signals) -> np.ndarray:
    """Mean of every VALID feature map, shape (N, M); signals may differ in length."""
    signals = _as_list(signals)
    cdt = compute_dtype(bank.dtype)
    out = np.zeros((len(signals), bank.n_kernels), dtype=cdt)
    by_len = {}
    for i, s in enumerate(signals):
        by_len.setdefault(len(s), []).append(i)
    slices = bank.group_slices()
    for length, idx in by_len.items():
        if length < bank.max_length:
            raise SignalTooShort(f"signal of {length} samples < kernel of {bank.max_length}")
        X = np.asarray([signals[i] for i in idx], dtype=cdt)
        for g in bank.groups:
            if g.size == 0:
                continue
            n_out = length - g.length + 1
            taps = g.taps.astype(cdt)
            fft = prefers_fft(g)
            acc = np.zeros((len(idx), g.size), dtype=cdt)
            for rows, cols in iter_blocks(len(idx), n_out):
                h = Tile(X, rows, cols, g.length, fft).correlate(taps)
                h += g.biases.astype(cdt)
                np.maximum(h, 0, out=h)
                acc[rows] += h.reshape(rows.stop - rows.start, -1, g.size).sum(axis=1)
            out[idx, slices[g.name]] = acc / n_out
    return out


def spectrum_features(model: ClassificationModel, signals, sample_rate_hz=None) -> np.ndarray:
    fs = model.bank.sample_rate_hz if sample_rate_hz is None else sample_rate_hz
    return np.array([power_spectrum(s, model.n_bands, model.f_max_hz, fs)
                     for s in _as_list(signals)]).reshape(-1, model.n_bands)


def classify_logits(model: ClassificationModel, signals) -> np.ndarray:
    """Logits (N, J) for one signal or a list of signals of any lengths."""
    cdt = compute_dtype(model.dtype)
    phi = kernel_means(model.bank, signals)
    spec = spectrum_features(model, signals).astype(cdt)
    return (phi @ model.class_weights.astype(cdt)
            + spec @ model.spectrum_weights.astype(cdt)
            + model.class_bias.astype(cdt))


def forward_classify(model: ClassificationModel, x):
    """``(logits, probabilities)`` for a single signal."""
    z = classify_logits(model, [x.samples if hasattr(x, "samples") else np.asarray(x)])[0]
    return z, softmax(z.astype(np.float64))


# --------------------------------------------------------------------------
# accounting


def count_params(model) -> int:
    """Taps + biases + head weights (+ class biases).  Signs of an absorbed
    model are single bits and are not counted."""
    bank = model.bank
    n = sum(g.taps.size + g.size for g in bank.groups)
    if model.task == "segmentation":
        return n + (0 if model.absorbed else bank.n_kernels)
    return n + model.class_weights.size + model.spectrum_weights.size + model.class_bias.size


def count_flops(model, length: int) -> int:
    """Floating-point operations for one forward pass over ``length`` samples.

    Segmentation: ``2*K`` per tap product-sum, plus bias add and weighted
    accumulate (3 per output; 2 when absorbed since the sign is an add or a
    subtract) for each kernel and sample.  The final sigmoid is excluded.
    Classification: ``2*K`` plus bias add and the running sum per VALID
    output, one division per mean, and ``2*(M+F)*J + J`` for the linear head.
    The power spectrum is excluded.
    """
    total = 0
    if model.task == "segmentation":
        per = 2 if model.absorbed else 3
        for g in model.bank.groups:
            total += g.size * length * (2 * g.length + per)
        return total
    for g in model.bank.groups:
        n_out = length - g.length + 1
        total += g.size * (n_out * (2 * g.length + 2) + 1)
    j = model.n_classes
    return total + 2 * (model.n_kernels + model.n_bands) * j + j


def _all_params(model) -> list:
    arrs = [a for g in model.bank.groups for a in (g.taps, g.biases)]
    if model.task == "segmentation":
        if not model.absorbed:
            arrs.append(model.weights)
    else:
        arrs += [model.class_weights, model.spectrum_weights, model.class_bias]
    return arrs


def quantize(model, dtype: str = "f16"):
    """Return a copy with every parameter cast to ``dtype`` ('f16', 'f32', 'f64')."""
    if dtype not in DTYPES:
        raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
    if dtype == "f16":
        peak = max((float(np.max(np.abs(a))) for a in _all_params(model) if a.size), default=0.0)
        if peak > F16_MAX:
            raise OverflowOnCast(f"parameter magnitude {peak:g} exceeds float16 max {F16_MAX:g}")
    target = DTYPES[dtype]
    bank = model.bank.astype(target)
    if model.task == "segmentation":
        return SegmentationModel(bank, None if model.absorbed else model.weights.astype(target),
                                 model.absorbed,
                                 None if model.signs is None else model.signs.copy())
    return ClassificationModel(bank, model.class_weights.astype(target),
                               model.spectrum_weights.astype(target),
                               model.class_bias.astype(target), model.f_max_hz,
                               list(model.class_names))


# --------------------------------------------------------------------------
# serialization

MAGIC = b"SMLK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHBBI")  # magic, version, task, dtype, M
_BANK_META = struct.Struct("<dB")  # sample rate, flags
_KERNEL_META = struct.Struct("<BI")  # group id, K
_CLS_META = struct.Struct("<IId")  # J, F, f_max


def serialize(model) -> bytes:
    name = dtype_name(model.dtype)
    dt = np.dtype(DTYPES[name]).newbyteorder("<")
    m = model.n_kernels
    flags = 1 if getattr(model, "absorbed", False) else 0
    parts = [_PREFIX.pack(MAGIC, FORMAT_VERSION, _TASK_TAGS[model.task], _DTYPE_TAGS[name], m),
             _BANK_META.pack(model.bank.sample_rate_hz, flags)]
    for g in model.bank.groups:
        gid = GROUP_NAMES.index(g.name)
        for i in range(g.size):
            parts.append(_KERNEL_META.pack(gid, g.length))
            parts.append(g.taps[i].astype(dt).tobytes())
            parts.append(g.biases[i:i + 1].astype(dt).tobytes())
    if model.task == "segmentation":
        if model.absorbed:
            parts.append(np.packbits(model.signs < 0).tobytes())
        else:
            parts.append(model.weights.astype(dt).tobytes())
    else:
        parts.append(_CLS_META.pack(model.n_classes, model.n_bands, model.f_max_hz))
        parts += [model.class_weights.astype(dt).tobytes(),
                  model.spectrum_weights.astype(dt).tobytes(),
                  model.class_bias.astype(dt).tobytes()]
        names = ",".join(model.class_names).encode()
        parts.append(struct.pack("<I", len(names)) + names)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize(raw: bytes):
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, found {raw[:4]!r}")
    if len(raw) < _PREFIX.size + 4:
        raise ChecksumMismatch("file truncated")
    _, version, task_tag, dtype_tag, m = _PREFIX.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"format version {version} (supported: {FORMAT_VERSION})")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch("CRC32 mismatch; file is corrupt or truncated")
    try:
        return _parse_body(body, task_tag, dtype_tag, m)
    except (struct.error, ValueError, IndexError) as exc:
        raise ChecksumMismatch(f"malformed model body: {exc}") from exc


def _parse_body(body, task_tag, dtype_tag, m):
    task = {v: k for k, v in _TASK_TAGS.items()}[task_tag]
    dname = {v: k for k, v in _DTYPE_TAGS.items()}[dtype_tag]
    dt = np.dtype(DTYPES[dname]).newbyteorder("<")
    pos = _PREFIX.size
    rate, flags = _BANK_META.unpack_from(body, pos)
    pos += _BANK_META.size

    def take(count):
        nonlocal pos
        arr = np.frombuffer(body, dtype=dt, count=count, offset=pos).astype(DTYPES[dname])
        pos += count * dt.itemsize
        return arr

    kernels = []
    for _ in range(m):
        gid, k = _KERNEL_META.unpack_from(body, pos)
        pos += _KERNEL_META.size
        taps = take(k)
        bias = take(1)[0]
        kernels.append(Kernel(taps, bias, GROUP_NAMES[gid]))
    bank = KernelBank.from_kernels(kernels, rate, dtype=DTYPES[dname]) if kernels else \
        KernelBank([], rate)
    if task == "segmentation":
        if flags & 1:
            nbytes = (m + 7) // 8
            bits = np.unpackbits(np.frombuffer(body, np.uint8, nbytes, pos))[:m]
            pos += nbytes
            model = SegmentationModel(bank, None, True, np.where(bits, -1, 1))
        else:
            model = SegmentationModel(bank, take(m))
    else:
        j, f, f_max = _CLS_META.unpack_from(body, pos)
        pos += _CLS_META.size
        cw = take(m * j).reshape(m, j)
        sw = take(f * j).reshape(f, j)
        cb = take(j)
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        names = body[pos:pos + n].decode().split(",") if n else []
        pos += n
        model = ClassificationModel(bank, cw, sw, cb, f_max, names)
    if pos != len(body):
        raise ValueError(f"{len(body) - pos} trailing bytes")
    return model


def save_model(path, model) -> None:
    try:
        Path(path).write_bytes(serialize(model))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_model(path):
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return deserialize(raw)


def model_checksum(model) -> str:
    return hashlib.sha256(serialize(model)).hexdigest()


def check_class(model: ClassificationModel, j: int) -> int:
    if not 0 <= int(j) < model.n_classes:
        raise BadClass(f"class {j} outside 0..{model.n_classes - 1}")
    return int(j)


def with_bank(model, bank: KernelBank, **changes):
    return replace(model, bank=bank, **changes)
