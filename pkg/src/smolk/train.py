"""Training with hand-derived gradients.

Segmentation minimizes mean binary cross-entropy between the quality score
and ``1 - artifact_label``; classification minimizes mean multi-class
cross-entropy.  Both use Adam (L2 added to the gradient) or AdamW (decoupled
decay) with a linear learning-rate ramp from ``lr_start`` to ``lr_end``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .exceptions import AbsorbedModel, BadClass, EmptyDataset, LengthMismatch, NonFiniteLoss
from .model import (
    ClassificationModel,
    KernelBank,
    KernelGroup,
    SegmentationModel,
    compute_dtype,
    iter_blocks,
    kernel_means,
    quantize,
    Tile,
    prefers_fft,
    same_padding,
    spectrum_features,
    split_counts,
)

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass
class TrainConfig:
    task: str = "segmentation"
    iterations: int = 512
    lr_start: float = 0.01
    lr_end: float = 0.002
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    epsilon: float = 1e-8
    weight_decay: float = 1e-4
    batch: Union[str, int] = "full"
    seed: int = 0
    grad_accum_chunks: int = 1
    dtype: str = "f64"
    class_weighting: str = "none"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.lr_start >= self.lr_end >= 0:
            raise ValueError("need lr_start >= lr_end >= 0")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch != "full" and not (isinstance(self.batch, int) and self.batch >= 1):
            raise ValueError("batch must be 'full' or a positive integer")
        if self.grad_accum_chunks < 1:
            raise ValueError("grad_accum_chunks must be >= 1")
        if self.dtype not in ("f32", "f64"):
            raise ValueError("training dtype must be f32 or f64")
        if self.class_weighting not in ("none", "inverse_frequency"):
            raise ValueError(f"unknown class weighting {self.class_weighting!r}")
        self.betas = tuple(self.betas)

    @classmethod
    def segmentation(cls, **overrides):
        return cls(**{**dict(task="segmentation"), **overrides})

    @classmethod
    def classification(cls, **overrides):
        base = dict(task="classification", lr_start=0.1, lr_end=0.0, optimizer="adamw",
                    weight_decay=1e-2, batch=1024)
        return cls(**{**base, **overrides})

    def to_dict(self):
        return asdict(self)


def lr_at(config: TrainConfig, t: int, total: int) -> float:
    if total <= 1:
        return config.lr_start
    return config.lr_start + (config.lr_end - config.lr_start) * t / (total - 1)


# --------------------------------------------------------------------------
# parameters


def init_params(task: str, n_kernels: int, group_lengths: dict, seed: int = 0,
                sample_rate_hz: float = 64.0, n_classes: int = 3, n_bands: int = 64,
                f_max_hz: float = 30.0, class_names=()):
    """Fan-in uniform initialization; biases start at zero."""
    rng = np.random.default_rng(seed)
    names = list(group_lengths)
    counts = split_counts(n_kernels, len(names))
    groups = []
    for name, count in zip(names, counts):
        k = group_lengths[name]
        a = np.sqrt(1.0 / k)
        groups.append(KernelGroup(name, rng.uniform(-a, a, size=(count, k)), np.zeros(count)))
    bank = KernelBank(groups, sample_rate_hz)
    bound = np.sqrt(1.0 / n_kernels)
    if task == "segmentation":
        return SegmentationModel(bank, rng.uniform(-bound, bound, size=n_kernels))
    if task != "classification":
        raise ValueError(f"unknown task {task!r}")
    return ClassificationModel(
        bank,
        rng.uniform(-bound, bound, size=(n_kernels, n_classes)),
        rng.uniform(-np.sqrt(1.0 / n_bands), np.sqrt(1.0 / n_bands), size=(n_bands, n_classes)),
        np.zeros(n_classes),
        f_max_hz,
        list(class_names),
    )


def get_params(model) -> dict:
    """Named views of every trainable array."""
    if getattr(model, "absorbed", False):
        raise AbsorbedModel("absorbed models are inference-only")
    out = {}
    for g in model.bank.groups:
        out[f"{g.name}.taps"] = g.taps
        out[f"{g.name}.bias"] = g.biases
    if model.task == "segmentation":
        out["weights"] = model.weights
    else:
        out["class_weights"] = model.class_weights
        out["spectrum_weights"] = model.spectrum_weights
        out["class_bias"] = model.class_bias
    return out


def set_params(model, params: dict):
    """A new model of the same structure holding ``params``."""
    groups = [KernelGroup(g.name, params[f"{g.name}.taps"], params[f"{g.name}.bias"])
              for g in model.bank.groups]
    bank = KernelBank(groups, model.bank.sample_rate_hz)
    if model.task == "segmentation":
        return SegmentationModel(bank, params["weights"])
    return ClassificationModel(bank, params["class_weights"], params["spectrum_weights"],
                               params["class_bias"], model.f_max_hz, list(model.class_names))


def _zeros_like(params):
    return {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()}


# --------------------------------------------------------------------------
# losses


def loss_bce(pred, target) -> float:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if p.shape != y.shape:
        raise LengthMismatch(f"prediction shape {p.shape} vs target {y.shape}")
    p = np.clip(p, PROB_EPS, 1 - PROB_EPS)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def loss_ce(logits, cls: int) -> float:
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= cls < z.size:
        raise BadClass(f"class {cls} outside 0..{z.size - 1}")
    return float(-log_softmax(z)[cls])


# --------------------------------------------------------------------------
# gradients


def segmentation_loss_grad(model: SegmentationModel, X, artifact, normalizer=None):
    """Summed BCE and its gradient, both divided by ``normalizer``.

    ``X`` is (N, L) and ``artifact`` the matching 0/1 labels; the quality
    target is ``1 - artifact``.  ``normalizer`` defaults to ``N * L`` so the
    result is the mean loss; pass the full-batch count when accumulating.
    """
    if model.absorbed:
        raise AbsorbedModel("cannot differentiate an absorbed model")
    cdt = compute_dtype(model.dtype)
    X = np.asarray(X, dtype=cdt)
    if X.ndim == 1:
        X = X[None]
    target = 1.0 - np.asarray(artifact, dtype=cdt).reshape(X.shape)
    n, length = X.shape
    total = float(n * length if normalizer is None else normalizer)
    slices = model.bank.group_slices()
    groups = [g for g in model.bank.groups if g.size]
    taps = {g.name: g.taps.astype(cdt) for g in groups}
    pads = {g.name: np.pad(X, ((0, 0), same_padding(g.length))) for g in groups}
    w = model.weights.astype(cdt)
    grads = _zeros_like(get_params(model))
    loss = 0.0
    for rows, cols in iter_blocks(n, length):
        cache = []
        s = 0
        for g in groups:
            u = Tile(pads[g.name], rows, cols, g.length, prefers_fft(g))
            a = u.correlate(taps[g.name])
            a += g.biases.astype(cdt)
            np.maximum(a, 0, out=a)
            s = s + a @ w[slices[g.name]]
            cache.append((g, u, a))
        p = expit(s)
        y = target[rows, cols].reshape(-1)
        pc = np.clip(p, PROB_EPS, 1 - PROB_EPS)
        loss += float(-np.sum(y * np.log(pc) + (1 - y) * np.log1p(-pc)))
        gs = (p - y) / total
        gs[(p < PROB_EPS) | (p > 1 - PROB_EPS)] = 0
        for g, u, a in cache:
            sl = slices[g.name]
            grads["weights"][sl] += a.T @ gs
            # dh = gs * w * (a > 0); w is factored out so the mask is built in place
            np.greater(a, 0, out=a)
            a *= gs[:, None]
            grads[f"{g.name}.taps"] += u.taps_grad(a) * w[sl, None]
            grads[f"{g.name}.bias"] += a.sum(axis=0) * w[sl]
    return loss / total, grads


def classification_loss_grad(model: ClassificationModel, signals, classes, spectra=None,
                             sample_weights=None, normalizer=None):
    """Mean (or weighted) cross-entropy over a batch of signals and its gradient."""
    cdt = compute_dtype(model.dtype)
    signals = [np.asarray(s.samples if hasattr(s, "samples") else s, dtype=cdt) for s in signals]
    classes = np.asarray(classes, dtype=int)
    n, j = len(signals), model.n_classes
    if n == 0:
        raise EmptyDataset("empty batch")
    if classes.min() < 0 or classes.max() >= j:
        raise BadClass(f"class labels must lie in 0..{j - 1}")
    sw = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    total = float(sw.sum() if normalizer is None else normalizer)
    if spectra is None:
        spectra = spectrum_features(model, signals)
    spectra = np.asarray(spectra, dtype=cdt)
    phi = kernel_means(model.bank, signals)
    W = model.class_weights.astype(cdt)
    z = phi @ W + spectra @ model.spectrum_weights.astype(cdt) + model.class_bias.astype(cdt)
    z = z.astype(np.float64)
    logp = log_softmax(z, axis=1)
    loss = float(-np.sum(sw * logp[np.arange(n), classes]) / total)
    dz = softmax(z, axis=1)
    dz[np.arange(n), classes] -= 1
    dz *= (sw / total)[:, None]
    grads = _zeros_like(get_params(model))
    grads["class_weights"] += phi.T.astype(np.float64) @ dz
    grads["spectrum_weights"] += spectra.T.astype(np.float64) @ dz
    grads["class_bias"] += dz.sum(axis=0)
    dphi = (dz @ W.T.astype(np.float64)).astype(cdt)

    slices = model.bank.group_slices()
    by_len = {}
    for i, s in enumerate(signals):
        by_len.setdefault(len(s), []).append(i)
    for length, idx in by_len.items():
        Xl = np.asarray([signals[i] for i in idx], dtype=cdt)
        for g in model.bank.groups:
            if g.size == 0:
                continue
            n_out = length - g.length + 1
            taps = g.taps.astype(cdt)
            fft = prefers_fft(g)
            d = dphi[idx, slices[g.name]] / n_out
            for rows, cols in iter_blocks(len(idx), n_out):
                u = Tile(Xl, rows, cols, g.length, fft)
                h = u.correlate(taps)
                h += g.biases.astype(cdt)
                nb = rows.stop - rows.start
                dh = np.repeat(d[rows], cols.stop - cols.start, axis=0)
                dh *= (h > 0).reshape(nb * (cols.stop - cols.start), g.size)
                grads[f"{g.name}.taps"] += u.taps_grad(dh)
                grads[f"{g.name}.bias"] += dh.sum(axis=0)
    return loss, grads


def backward(model, batch):
    """Loss and exact gradients for a batch.

    ``batch`` is ``(X, artifact_labels)`` for segmentation or
    ``(signals, classes)`` for classification.
    """
    if model.task == "segmentation":
        return segmentation_loss_grad(model, *batch)
    return classification_loss_grad(model, *batch)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptState:
    m: dict
    v: dict
    step: int = 0


class Adam:
    """Adam with either L2-in-gradient (``decoupled=False``) or AdamW decay."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0,
                 decoupled=False):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.state = OptState(_zeros_like(params), _zeros_like(params))

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        st = self.state
        st.step += 1
        c1 = 1 - self.b1 ** st.step
        c2 = 1 - self.b2 ** st.step
        out = {}
        for k, p in params.items():
            g = grads[k]
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p
            st.m[k] = self.b1 * st.m[k] + (1 - self.b1) * g
            st.v[k] = self.b2 * st.v[k] + (1 - self.b2) * g * g
            if self.weight_decay and self.decoupled:
                p = p * (1 - lr * self.weight_decay)
            out[k] = p - lr * (st.m[k] / c1) / (np.sqrt(st.v[k] / c2) + self.eps)
        return out


# --------------------------------------------------------------------------
# fit


@dataclass
class TraceRow:
    iteration: int
    lr: float
    loss: float


@dataclass
class FitResult:
    model: object
    trace: list = field(default_factory=list)


def _accumulate(acc, grads):
    for k, v in grads.items():
        acc[k] += v


def _batches(n, config: TrainConfig, rng):
    if config.batch == "full" or config.batch >= n:
        return [np.arange(n)]
    order = rng.permutation(n)
    return [order[i:i + config.batch] for i in range(0, n, config.batch)]


def _class_sample_weights(classes, n_classes, mode):
    if mode == "none":
        return np.ones(len(classes))
    counts = np.bincount(classes, minlength=n_classes).astype(float)
    inv = np.divide(len(classes), n_classes * counts, out=np.zeros_like(counts), where=counts > 0)
    return inv[classes]


def fit(model, X, y, config: TrainConfig, callback=None) -> FitResult:
    """Train ``model`` and return the trained copy with its loss trace.

    Segmentation: ``X`` is an (N, L) array of normalized chunks and ``y`` the
    matching artifact labels.  Classification: ``X`` is a sequence of
    normalized signals (lengths may differ) and ``y`` the class indices.
    With ``batch='full'`` every iteration uses the whole set, optionally split
    into ``grad_accum_chunks`` pieces whose gradients are summed.  With an
    integer batch size each iteration is one pass over shuffled mini-batches
    and the learning rate ramps per optimizer step.
    """
    if model.task != config.task:
        raise ValueError(f"config is for {config.task}, model is {model.task}")
    n = len(X)
    if n == 0:
        raise EmptyDataset("no training samples")
    rng = np.random.default_rng(config.seed)
    params = {k: v.astype(np.float64) for k, v in get_params(model).items()}
    template = set_params(model, params)
    opt = Adam(params, config.betas, config.epsilon, config.weight_decay,
               decoupled=config.optimizer == "adamw")

    if model.task == "segmentation":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y).reshape(X.shape)
        spectra = None
    else:
        X = [np.asarray(s.samples if hasattr(s, "samples") else s, dtype=np.float64) for s in X]
        y = np.asarray(y, dtype=int)
        spectra = spectrum_features(model, X)
        sample_w = _class_sample_weights(y, model.n_classes, config.class_weighting)

    steps_per_iter = len(_batches(n, config, np.random.default_rng(0)))
    total_steps = config.iterations * steps_per_iter
    trace, step = [], 0
    for it in range(config.iterations):
        for batch in _batches(n, config, rng):
            lr = lr_at(config, step, total_steps)
            current = set_params(template, params)
            if config.dtype == "f32":
                current = quantize(current, "f32")
            grads = _zeros_like(params)
            loss = 0.0
            pieces = np.array_split(batch, min(config.grad_accum_chunks, len(batch)))
            if model.task == "segmentation":
                norm = len(batch) * X.shape[1]
                for piece in pieces:
                    part, g = segmentation_loss_grad(current, X[piece], y[piece], norm)
                    loss += part
                    _accumulate(grads, g)
            else:
                norm = sample_w[batch].sum()
                for piece in pieces:
                    part, g = classification_loss_grad(
                        current, [X[i] for i in piece], y[piece], spectra[piece],
                        sample_w[piece], norm)
                    loss += part
                    _accumulate(grads, g)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss} at iteration {it}")
            trace.append(TraceRow(step, lr, loss))
            params = opt.step(params, grads, lr)
            step += 1
        if callback is not None:
            callback(it, trace[-1])
        if it % 64 == 0:
            logger.debug("iteration %d lr %.5f loss %.6f", it, trace[-1].lr, trace[-1].loss)
    out = set_params(template, params)
    return FitResult(out, trace)


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "lr", "loss"])
        for row in trace:
            w.writerow([row.iteration, repr(row.lr), repr(row.loss)])
