"""Metrics, k-fold splits, robustness and scaling sweeps, and report emission."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax
from scipy.stats import rankdata

from . import svg
from .exceptions import LengthMismatch, SingleClass, TooFewSamples
from .model import (
    classify_logits,
    count_flops,
    count_params,
    forward_segment,
    group_lengths_for,
    model_checksum,
)
from .postprocess import PostConfig, postprocess
from .preprocess import znorm_array
from .train import TrainConfig, fit, init_params

# --------------------------------------------------------------------------
# metrics


def dice(pred, truth) -> float:
    """Overlap of the artifact class (value 1), pooled over every sample given.

    Two empty maps score 1.0.
    """
    a = np.asarray(pred).ravel() == 1
    b = np.asarray(truth).ravel() == 1
    if a.shape != b.shape:
        raise LengthMismatch(f"prediction has {a.size} samples, truth {b.size}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / denom


def macro_f1(preds, truths, n_classes: int) -> float:
    """Unweighted mean per-class F1; classes absent from both inputs are skipped."""
    p = np.asarray(preds, dtype=int).ravel()
    t = np.asarray(truths, dtype=int).ravel()
    if p.shape != t.shape:
        raise LengthMismatch(f"{p.size} predictions for {t.size} labels")
    scores = []
    for j in range(n_classes):
        tp = int(np.sum((p == j) & (t == j)))
        fp = int(np.sum((p == j) & (t != j)))
        fn = int(np.sum((p != j) & (t == j)))
        if tp + fp + fn == 0:
            continue
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores)) if scores else 1.0


def auc_roc(scores, truths, class_index: int = 1) -> float:
    """One-vs-rest AUC from the normalized Mann-Whitney U (ties count one half).

    ``scores`` may be 1D (score of ``class_index``) or ``(n, J)`` probabilities.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 2:
        s = s[:, class_index]
    pos = np.asarray(truths).ravel() == class_index
    if s.shape != pos.shape:
        raise LengthMismatch(f"{s.size} scores for {pos.size} labels")
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"class {class_index} needs positives and negatives")
    ranks = rankdata(s)
    # rank sums are multiples of 1/2, so this is exact for any realistic n
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def kfold(n_samples: int, k: int = 10, seed: int = 0) -> np.ndarray:
    """Fold id for every sample; fold sizes differ by at most one."""
    if k < 1 or k > n_samples:
        raise TooFewSamples(f"cannot split {n_samples} samples into {k} folds")
    order = np.random.default_rng(seed).permutation(n_samples)
    folds = np.empty(n_samples, dtype=int)
    for f, idx in enumerate(np.array_split(order, k)):
        folds[idx] = f
    return folds


# --------------------------------------------------------------------------
# model evaluation


def predict_artifacts(model, X, post: PostConfig = PostConfig()) -> np.ndarray:
    return postprocess(forward_segment(model, X), post)


def segmentation_dice(model, X, y, post: PostConfig = PostConfig()) -> float:
    return dice(predict_artifacts(model, X, post), y)


def classification_scores(model, signals, classes):
    """Macro-F1 and per-class AUC (``nan`` where a class is missing)."""
    probs = softmax(classify_logits(model, list(signals)).astype(np.float64), axis=1)
    classes = np.asarray(classes, dtype=int)
    f1 = macro_f1(np.argmax(probs, axis=1), classes, model.n_classes)
    aucs = []
    for j in range(model.n_classes):
        try:
            aucs.append(auc_roc(probs, classes, j))
        except SingleClass:
            aucs.append(float("nan"))
    return f1, aucs


@dataclass
class EvalReport:
    task: str
    metrics: dict  # name -> (mean, std over folds or seeds)
    n_params: int
    flops: int
    n_folds: int
    model_checksum: str = ""
    config: dict = field(default_factory=dict)
    class_names: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"task": self.task, "metrics": {k: list(v) for k, v in self.metrics.items()},
                "n_params": self.n_params, "flops": self.flops, "n_folds": self.n_folds,
                "model_checksum": self.model_checksum, "config": self.config}

    def to_markdown(self) -> str:
        lines = [f"# {self.task} evaluation", "",
                 "| metric | mean | std |", "|---|---|---|"]
        for k, (mean, std) in self.metrics.items():
            lines.append(f"| {k} | {mean:.4f} | {std:.4f} |")
        lines += ["", f"- parameters: {self.n_params}", f"- flops per input: {self.flops}",
                  f"- folds: {self.n_folds}", f"- model sha256: {self.model_checksum}", "",
                  "```json", json.dumps(self.config, indent=2, sort_keys=True, default=str), "```"]
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "mean", "std", "n_params", "flops", "n_folds", "model_checksum",
                        "config"])
            cfg = json.dumps(self.config, sort_keys=True, default=str)
            for k, (mean, std) in self.metrics.items():
                w.writerow([k, repr(mean), repr(std), self.n_params, self.flops, self.n_folds,
                            self.model_checksum, cfg])


def _mean_std(values):
    v = np.asarray(values, dtype=np.float64)
    return float(np.nanmean(v)), float(np.nanstd(v)) if v.size > 1 else 0.0


def evaluate(models, X, y, post: PostConfig = PostConfig(), config=None) -> EvalReport:
    """Score one model or a list of fold models on the same evaluation set."""
    models = models if isinstance(models, (list, tuple)) else [models]
    first = models[0]
    if first.task == "segmentation":
        X = np.asarray(X, dtype=np.float64)
        scores = [segmentation_dice(m, X, y, post) for m in models]
        metrics = {"dice": _mean_std(scores)}
        flops = count_flops(first, X.shape[-1])
        names = []
    else:
        X = list(X)
        rows = [classification_scores(m, X, y) for m in models]
        names = list(first.class_names) or [str(j) for j in range(first.n_classes)]
        metrics = {"macro_f1": _mean_std([r[0] for r in rows])}
        for j, name in enumerate(names):
            metrics[f"auc_{name}"] = _mean_std([r[1][j] for r in rows])
        flops = count_flops(first, int(np.mean([len(np.asarray(s)) for s in X])))
    return EvalReport(first.task, metrics, count_params(first), flops, len(models),
                      model_checksum(first), dict(config or {}), names)


@dataclass
class RankedChunk:
    chunk_id: str
    dice: float


def rank_by_accuracy(model, X, y, ids=None, post: PostConfig = PostConfig()) -> list:
    """Per-chunk DICE, worst first (stable for ties)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).reshape(X.shape)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(X))]
    pred = predict_artifacts(model, X, post)
    scores = [dice(p, t) for p, t in zip(pred, y)]
    order = np.argsort(scores, kind="stable")
    return [RankedChunk(ids[i], scores[i]) for i in order]


# --------------------------------------------------------------------------
# sweeps


@dataclass
class NoisePoint:
    sigma: float
    delta_mean: float
    delta_std: float
    dice_mean: float


def add_noise(X, sigma: float, rng) -> np.ndarray:
    """Gaussian noise on normalized chunks, followed by re-normalization."""
    X = np.asarray(X, dtype=np.float64)
    if sigma == 0:
        return X.copy()
    noisy = X + rng.normal(0.0, sigma, size=X.shape)
    return np.stack([znorm_array(row) for row in noisy])


def noise_sweep(models, X, y, sigmas, seed: int = 0, post: PostConfig = PostConfig()) -> list:
    """DICE change under additive noise, relative to the noise-free score.

    With several models (folds or seeds) the spread of the change is reported.
    """
    models = models if isinstance(models, (list, tuple)) else [models]
    X = np.asarray(X, dtype=np.float64)
    base = [segmentation_dice(m, X, y, post) for m in models]
    out = []
    for i, sigma in enumerate(sigmas):
        if sigma == 0:
            out.append(NoisePoint(0.0, 0.0, 0.0, float(np.mean(base))))
            continue
        noisy = add_noise(X, float(sigma), np.random.default_rng([seed, i]))
        scores = [segmentation_dice(m, noisy, y, post) for m in models]
        deltas = np.asarray(scores) - np.asarray(base)
        out.append(NoisePoint(float(sigma), float(deltas.mean()), float(deltas.std()),
                              float(np.mean(scores))))
    return out


@dataclass
class ScalingPoint:
    n_kernels: int
    n_params: int
    dice_mean: float
    dice_std: float
    fold_scores: list


def scaling_run(X, y, m_values, folds: int = 3, seed: int = 0, train_config=None,
                sample_rate_hz: float = 64.0, group_seconds=None,
                post: PostConfig = PostConfig(), jobs: int = 1) -> list:
    """Held-out DICE against model size, one model per (M, fold)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).reshape(X.shape)
    for m in m_values:
        if m % 3:
            raise ValueError(f"kernel count {m} is not divisible by 3")
    config = train_config or TrainConfig.segmentation(seed=seed)
    lengths = group_lengths_for(sample_rate_hz, group_seconds)
    assign = kfold(len(X), folds, seed)

    def run(job):
        m, f = job
        train, test = assign != f, assign == f
        init = init_params("segmentation", m, lengths, seed=seed + f, sample_rate_hz=sample_rate_hz)
        model = fit(init, X[train], y[train], config).model
        return segmentation_dice(model, X[test], y[test], post), count_params(model)

    jobs_list = [(m, f) for m in m_values for f in range(folds)]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(run, jobs_list))
    else:
        results = [run(j) for j in jobs_list]
    points = []
    for i, m in enumerate(m_values):
        chunk = results[i * folds:(i + 1) * folds]
        scores = [r[0] for r in chunk]
        points.append(ScalingPoint(int(m), chunk[0][1], float(np.mean(scores)),
                                   float(np.std(scores)), scores))
    return points


def write_noise_outputs(prefix, points) -> tuple:
    csv_path, svg_path = f"{prefix}.csv", f"{prefix}.svg"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sigma", "delta_dice_mean", "delta_dice_std", "dice_mean"])
        for p in points:
            w.writerow([p.sigma, repr(p.delta_mean), repr(p.delta_std), repr(p.dice_mean)])
    svg.write(svg_path, svg.line_chart(
        [("delta DICE", [p.sigma for p in points], [p.delta_mean for p in points])],
        "Noise robustness", "noise sigma", "change in DICE"))
    return csv_path, svg_path


def write_scaling_outputs(prefix, points) -> tuple:
    csv_path, svg_path = f"{prefix}.csv", f"{prefix}.svg"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_kernels", "n_params", "inverse_params", "dice_mean", "dice_std"])
        for p in points:
            w.writerow([p.n_kernels, p.n_params, repr(1.0 / p.n_params), repr(p.dice_mean),
                        repr(p.dice_std)])
    svg.write(svg_path, svg.line_chart(
        [("mean DICE", [1.0 / p.n_params for p in points], [p.dice_mean for p in points])],
        "Scaling", "1 / parameter count", "held-out DICE"))
    return csv_path, svg_path
