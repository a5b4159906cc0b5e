"""Signals, label maps, the on-disk corpus format and synthetic generators.

Binary formats (all integers little-endian):

* signal file: ``b"SIG1"`` + ``u32`` sample count + float32 samples
* label file:  ``b"LBL1"`` + ``u32`` sample count + one byte per sample (0/1)

A manifest is a text file with ``key=value`` header lines followed by
tab-separated entries ``<signal path>\\t<label path or class index>``.
Relative paths resolve against the manifest's directory.  Single-column CSV
files (optional header row) are accepted anywhere a signal or label file is.
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .exceptions import (
    EmptySignal,
    InvalidSpan,
    IoError,
    LengthMismatch,
    ManifestError,
    MissingFile,
    NonFiniteSample,
)

logger = logging.getLogger(__name__)

SIGNAL_MAGIC = b"SIG1"
LABEL_MAGIC = b"LBL1"
_HEADER = struct.Struct("<4sI")

PathLike = Union[str, Path]
TASKS = ("segmentation", "classification")


@dataclass(eq=False)
class Signal:
    """A sampled 1D waveform."""

    samples: np.ndarray
    sample_rate_hz: float
    id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size == 0:
            raise EmptySignal(f"signal {self.id!r} has no samples")
        if not np.all(np.isfinite(self.samples)):
            raise NonFiniteSample(f"signal {self.id!r} contains NaN or Inf")
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        self.sample_rate_hz = float(self.sample_rate_hz)

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def replace(self, samples=None, sample_rate_hz=None, id=None) -> "Signal":
        return Signal(
            self.samples if samples is None else samples,
            self.sample_rate_hz if sample_rate_hz is None else sample_rate_hz,
            self.id if id is None else id,
        )


@dataclass(eq=False)
class LabelMap:
    """Ground truth: a per-sample 0/1 map (1 = artifact) or one class index."""

    values: Optional[np.ndarray] = None
    class_index: Optional[int] = None

    def __post_init__(self):
        if (self.values is None) == (self.class_index is None):
            raise ValueError("LabelMap needs exactly one of values / class_index")
        if self.values is not None:
            v = np.asarray(self.values).reshape(-1)
            if v.size and not np.isin(v, (0, 1)).all():
                raise ValueError("segmentation labels must be 0 or 1")
            self.values = v.astype(np.uint8)
        else:
            self.class_index = int(self.class_index)
            if self.class_index < 0:
                raise ValueError("class index must be non-negative")

    @property
    def is_segmentation(self) -> bool:
        return self.values is not None

    def __len__(self):
        return self.values.size if self.values is not None else 1


@dataclass
class DatasetManifest:
    task: str
    class_names: list
    entries: list  # (signal path, label path or class index)
    sample_rate_hz: float
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ManifestError(f"unknown task {self.task!r}")
        if not self.sample_rate_hz > 0:
            raise ManifestError("sample_rate_hz must be positive")


@dataclass
class Corpus:
    manifest: DatasetManifest
    signals: list
    labels: list

    def __len__(self):
        return len(self.signals)

    def pairs(self):
        return list(zip(self.signals, self.labels))


# --------------------------------------------------------------------------
# single files


def _read_csv_column(path: Path) -> np.ndarray:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        return np.zeros(0)
    try:
        float(lines[0].split(",")[0])
        start = 0
    except ValueError:
        start = 1  # header row
    return np.array([float(ln.split(",")[0]) for ln in lines[start:]])


def _read_binary(path: Path, magic: bytes, dtype) -> np.ndarray:
    if not path.exists():
        raise MissingFile(str(path))
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size or raw[:4] != magic:
        raise IoError(f"{path}: not a {magic.decode()} file")
    (_, n) = _HEADER.unpack_from(raw)
    body = raw[_HEADER.size:]
    itemsize = np.dtype(dtype).itemsize
    if len(body) != n * itemsize:
        raise IoError(f"{path}: expected {n} samples, file holds {len(body) // itemsize}")
    return np.frombuffer(body, dtype=dtype).copy()


def _write_binary(path: Path, magic: bytes, data: np.ndarray) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(magic, data.size))
            fh.write(data.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_signal(path: PathLike, sample_rate_hz: float, id: Optional[str] = None) -> Signal:
    """Read a ``.sig`` or ``.csv`` signal file."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    if path.suffix.lower() == ".csv":
        samples = _read_csv_column(path)
    else:
        samples = _read_binary(path, SIGNAL_MAGIC, "<f4")
    return Signal(samples, sample_rate_hz, path.stem if id is None else id)


def save_signal(path: PathLike, signal) -> None:
    """Write samples as little-endian float32.

    The round trip is bit-exact for samples representable in float32, which
    holds for everything this package loads or synthesizes.
    """
    samples = signal.samples if isinstance(signal, Signal) else np.asarray(signal, dtype=np.float64)
    samples = samples.reshape(-1)
    if samples.size == 0:
        raise EmptySignal("refusing to save an empty signal")
    data = samples.astype("<f4")
    if not np.all(np.isfinite(data)):
        raise NonFiniteSample("signal is not finite in float32")
    _write_binary(Path(path), SIGNAL_MAGIC, data)


def load_labels(path: PathLike) -> LabelMap:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    if path.suffix.lower() == ".csv":
        values = _read_csv_column(path)
        if not np.isin(values, (0, 1)).all():
            raise IoError(f"{path}: labels must be 0 or 1")
        return LabelMap(values.astype(np.uint8))
    return LabelMap(_read_binary(path, LABEL_MAGIC, np.uint8))


def save_labels(path: PathLike, labels) -> None:
    values = labels.values if isinstance(labels, LabelMap) else np.asarray(labels)
    if values is None:
        raise ValueError("class-index labels live in the manifest, not in label files")
    values = np.asarray(values).reshape(-1)
    if values.size == 0:
        raise EmptySignal("refusing to save an empty label map")
    _write_binary(Path(path), LABEL_MAGIC, LabelMap(values).values)


# --------------------------------------------------------------------------
# manifests


def parse_manifest(path: PathLike) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    header, entries = {}, []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "\t" in line:
                sig, lab = line.split("\t", 1)
                entries.append((sig.strip(), lab.strip()))
            elif "=" in line:
                key, value = line.split("=", 1)
                header[key.strip()] = value.strip()
            else:
                raise ManifestError(f"{path}:{lineno}: cannot parse {line!r}")
    for key in ("task", "sample_rate_hz"):
        if key not in header:
            raise ManifestError(f"{path}: missing header key {key!r}")
    task = header["task"]
    names = [c.strip() for c in header.get("class_names", "").split(",") if c.strip()]
    if task == "segmentation" and not names:
        names = ["clean", "artifact"]
    if task == "classification":
        if len(names) < 2:
            raise ManifestError(f"{path}: classification manifest needs >= 2 class_names")
        parsed = []
        for sig, lab in entries:
            try:
                parsed.append((sig, int(lab)))
            except ValueError:
                raise ManifestError(f"{path}: class index {lab!r} is not an integer") from None
        entries = parsed
    return DatasetManifest(task, names, entries, float(header["sample_rate_hz"]), path.parent)


def write_manifest(path: PathLike, manifest: DatasetManifest) -> None:
    lines = [
        f"task={manifest.task}",
        f"sample_rate_hz={manifest.sample_rate_hz:g}",
        f"class_names={','.join(manifest.class_names)}",
    ]
    lines += [f"{sig}\t{lab}" for sig, lab in manifest.entries]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _load_entry(manifest: DatasetManifest, entry):
    sig_path, lab = entry
    sig_path = manifest.root / sig_path
    signal = load_signal(sig_path, manifest.sample_rate_hz)
    if manifest.task == "segmentation":
        labels = load_labels(manifest.root / lab)
        if len(labels) != len(signal):
            raise LengthMismatch(
                f"{sig_path.name}: {len(signal)} samples but {len(labels)} labels"
            )
    else:
        if not 0 <= lab < len(manifest.class_names):
            raise ManifestError(
                f"{sig_path.name}: class index {lab} outside {len(manifest.class_names)} classes"
            )
        labels = LabelMap(class_index=lab)
    return signal, labels


def load_corpus(manifest_path: PathLike, jobs: int = 1) -> Corpus:
    """Load every (signal, labels) pair listed in a manifest."""
    manifest = parse_manifest(manifest_path)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            pairs = list(pool.map(lambda e: _load_entry(manifest, e), manifest.entries))
    else:
        pairs = [_load_entry(manifest, e) for e in manifest.entries]
    signals = [p[0] for p in pairs]
    labels = [p[1] for p in pairs]
    return Corpus(manifest, signals, labels)


def write_corpus(out_dir: PathLike, pairs, task: str, sample_rate_hz: float,
                 class_names: Sequence[str] = ("clean", "artifact")) -> Path:
    """Write (Signal, LabelMap) pairs plus ``manifest.txt``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "signals").mkdir(parents=True, exist_ok=True)
    if task == "segmentation":
        (out_dir / "labels").mkdir(exist_ok=True)
    entries = []
    for i, (signal, labels) in enumerate(pairs):
        name = signal.id or f"chunk{i:05d}"
        save_signal(out_dir / "signals" / f"{name}.sig", signal)
        if task == "segmentation":
            save_labels(out_dir / "labels" / f"{name}.lbl", labels)
            entries.append((f"signals/{name}.sig", f"labels/{name}.lbl"))
        else:
            entries.append((f"signals/{name}.sig", str(labels.class_index)))
    manifest = DatasetManifest(task, list(class_names), entries, sample_rate_hz, out_dir)
    write_manifest(out_dir / "manifest.txt", manifest)
    return out_dir / "manifest.txt"


# --------------------------------------------------------------------------
# synthetic data


def _band_noise(rng, n, fs, low, high):
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    spec[(freqs < low) | (freqs > high)] = 0
    out = np.fft.irfft(spec, n)
    sd = out.std()
    return out / sd if sd > 0 else out


def synth_ppg(duration_s: float, sample_rate_hz: float, artifact_spans=(), seed: int = 0,
              id: str = ""):
    """Synthesize a PPG-like trace with artifact spans.

    Clean stretches are a pulse train whose rate wanders inside 1-2 Hz, built
    from the fundamental plus a second harmonic that carves the dicrotic
    notch.  Each span ``(start_s, end_s)`` is overwritten with band-limited
    noise on top of baseline wander.  Returns ``(Signal, LabelMap)`` with the
    label map equal to 1 exactly on ``round(start*fs) .. round(end*fs) - 1``.
    """
    if not duration_s > 0:
        raise InvalidSpan("duration must be positive")
    fs = float(sample_rate_hz)
    n = int(round(duration_s * fs))
    labels = np.zeros(n, dtype=np.uint8)
    for start, end in artifact_spans:
        if not 0 <= start < end <= duration_s:
            raise InvalidSpan(f"span ({start}, {end}) not inside [0, {duration_s}]")
        labels[int(round(start * fs)):int(round(end * fs))] = 1

    rng = np.random.default_rng(seed)
    t = np.arange(n) / fs
    rate = rng.uniform(1.1, 1.7) + 0.15 * np.sin(2 * np.pi * rng.uniform(0.01, 0.05) * t
                                                 + rng.uniform(0, 2 * np.pi))
    rate = np.clip(rate, 1.0, 2.0)
    phase = 2 * np.pi * np.cumsum(rate) / fs + rng.uniform(0, 2 * np.pi)
    notch = rng.uniform(0.3, 0.5)
    pulse = np.sin(phase) + notch * np.sin(2 * phase + rng.uniform(0.8, 1.4)) \
        + 0.1 * np.sin(3 * phase + rng.uniform(0, 2 * np.pi))
    resp = 1.0 + 0.15 * np.sin(2 * np.pi * rng.uniform(0.15, 0.35) * t + rng.uniform(0, 2 * np.pi))
    clean = pulse * resp + 0.05 * rng.standard_normal(n)

    if labels.any():
        amp = rng.uniform(1.5, 4.0)
        wander_f = rng.uniform(0.05, 0.3)
        artifact = amp * _band_noise(rng, n, fs, 0.3, 8.0) \
            + rng.uniform(1.0, 3.0) * np.sin(2 * np.pi * wander_f * t + rng.uniform(0, 2 * np.pi))
        samples = np.where(labels == 1, artifact, clean)
    else:
        samples = clean
    samples = samples.astype(np.float32).astype(np.float64)
    return Signal(samples, fs, id), LabelMap(labels)


def random_artifact_spans(rng, duration_s: float, clean_prob: float = 0.35,
                          max_spans: int = 2, min_len_s: float = 3.0, max_len_s: float = 12.0):
    """Draw non-overlapping artifact spans for one synthetic chunk."""
    if rng.random() < clean_prob:
        return []
    spans = []
    for _ in range(int(rng.integers(1, max_spans + 1))):
        for _attempt in range(20):
            length = rng.uniform(min_len_s, min(max_len_s, duration_s))
            start = rng.uniform(0, duration_s - length)
            cand = (round(start, 3), round(start + length, 3))
            if all(cand[1] <= s or cand[0] >= e for s, e in spans):
                spans.append(cand)
                break
    return sorted(spans)


def synth_ppg_corpus(n_chunks: int, duration_s: float = 30.0, sample_rate_hz: float = 64.0,
                     seed: int = 0):
    """A list of synthetic (Signal, LabelMap) chunks with random artifact spans."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=n_chunks)
    out = []
    for i in range(n_chunks):
        spans = random_artifact_spans(rng, duration_s)
        out.append(synth_ppg(duration_s, sample_rate_hz, spans, int(seeds[i]), id=f"chunk{i:05d}"))
    return out


ECG_CLASSES = ("normal", "afib", "other")


def _gauss(t, center, width):
    return np.exp(-0.5 * ((t - center) / width) ** 2)


def synth_ecg(duration_s: float, sample_rate_hz: float, rhythm: str = "normal", seed: int = 0,
              id: str = ""):
    """Synthesize a single-lead ECG-like trace.

    ``normal`` is a regular sinus rhythm; ``afib`` has irregular RR intervals,
    no P waves and fibrillatory baseline waves; ``other`` is a regular rhythm
    with a prolonged PR interval and frequent premature wide beats.
    """
    if rhythm not in ECG_CLASSES:
        raise ValueError(f"rhythm must be one of {ECG_CLASSES}")
    if not duration_s > 0:
        raise InvalidSpan("duration must be positive")
    fs = float(sample_rate_hz)
    n = int(round(duration_s * fs))
    rng = np.random.default_rng(seed)
    t = np.arange(n) / fs
    x = np.zeros(n)
    rr_base = 60.0 / rng.uniform(60, 95)
    beat_t = rng.uniform(0, rr_base)
    pr = 0.16 if rhythm != "other" else rng.uniform(0.26, 0.32)
    beat = 0
    while beat_t < duration_s + 1.0:
        wide = rhythm == "other" and beat % 3 == 2
        qrs_w = 0.012 if not wide else 0.03
        if rhythm != "afib" and not wide:
            x += 0.15 * _gauss(t, beat_t - pr, 0.025)
        x += -0.1 * _gauss(t, beat_t - 0.025, 0.01)
        x += 1.0 * _gauss(t, beat_t, qrs_w)
        x += -0.25 * _gauss(t, beat_t + 0.03, qrs_w)
        x += (0.3 if not wide else -0.35) * _gauss(t, beat_t + 0.25, 0.06)
        if rhythm == "afib":
            rr = rr_base * float(np.clip(1.0 + 0.3 * rng.standard_normal(), 0.5, 1.6))
        elif rhythm == "other":
            rr = rr_base * (0.65 if beat % 3 == 1 else 1.0) * (1 + 0.02 * rng.standard_normal())
        else:
            rr = rr_base * (1 + 0.02 * rng.standard_normal())
        beat_t += rr
        beat += 1
    if rhythm == "afib":
        for f in rng.uniform(5.0, 7.0, size=3):
            x += 0.03 * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    x += 0.1 * np.sin(2 * np.pi * rng.uniform(0.1, 0.3) * t + rng.uniform(0, 2 * np.pi))
    x += 0.02 * rng.standard_normal(n)
    samples = x.astype(np.float32).astype(np.float64)
    return Signal(samples, fs, id), LabelMap(class_index=ECG_CLASSES.index(rhythm))


def synth_ecg_corpus(n_records: int, duration_s: float = 10.0, sample_rate_hz: float = 300.0,
                     seed: int = 0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_records):
        rhythm = ECG_CLASSES[i % len(ECG_CLASSES)]
        out.append(synth_ecg(duration_s, sample_rate_hz, rhythm, int(rng.integers(2**31 - 1)),
                             id=f"rec{i:05d}"))
    return out
