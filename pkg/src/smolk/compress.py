"""Post-training parameter reduction: weight absorption and correlated kernel pruning."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import AbsorbedModel, AlreadyAbsorbed, LengthMismatch, TooManyPairs
from .model import (
    GROUP_NAMES,
    ClassificationModel,
    KernelBank,
    KernelGroup,
    SegmentationModel,
    count_params,
)

logger = logging.getLogger(__name__)

METRICS = ("euclidean", "manhattan", "cosine", "spectral_cosine")


def absorb_weights(model: SegmentationModel) -> SegmentationModel:
    """Fold ``|w_m|`` into taps and bias, keeping only ``sgn(w_m)``.

    Exact because ``max(0, u) * |w| == max(0, u * |w|)``.  Kernels whose
    weight is exactly zero contribute nothing and are dropped.
    """
    if model.absorbed:
        raise AlreadyAbsorbed("model is already absorbed")
    slices = model.bank.group_slices()
    groups, signs = [], []
    for g in model.bank.groups:
        w = model.weights[slices[g.name]]
        keep = w != 0
        if not keep.all():
            logger.warning("dropping %d zero-weight %s kernel(s)", int((~keep).sum()), g.name)
        scale = np.abs(w[keep]).astype(g.taps.dtype)
        groups.append(KernelGroup(g.name, g.taps[keep] * scale[:, None], g.biases[keep] * scale))
        signs.append(np.where(w[keep] > 0, 1, -1))
    bank = KernelBank([g for g in groups if g.size], model.bank.sample_rate_hz)
    sign_vec = np.concatenate(signs) if signs else np.zeros(0)
    return SegmentationModel(bank, None, True, sign_vec.astype(np.int8))


def kernel_distance(a, b, metric: str = "euclidean") -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatch(f"kernel lengths differ: {a.size} vs {b.size}")
    return float(pairwise_distances(np.stack([a, b]), metric)[0, 1])


def _cosine_matrix(v):
    norms = np.linalg.norm(v, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    u = v / safe[:, None]
    d = 1.0 - u @ u.T
    d[np.ix_(norms == 0, norms == 0)] = 0.0
    np.fill_diagonal(d, 0.0)
    return np.clip(d, 0.0, 2.0)


def pairwise_distances(taps: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """(n, n) distance matrix between equal-length kernels."""
    taps = np.asarray(taps, dtype=np.float64)
    if metric == "euclidean":
        sq = np.sum(taps ** 2, axis=1)
        d2 = sq[:, None] + sq[None, :] - 2 * taps @ taps.T
        d = np.sqrt(np.maximum(d2, 0))
        np.fill_diagonal(d, 0.0)
        return d
    if metric == "manhattan":
        return np.abs(taps[:, None, :] - taps[None, :, :]).sum(axis=2)
    if metric == "cosine":
        return _cosine_matrix(taps)
    if metric == "spectral_cosine":
        spec = np.abs(np.fft.rfft(taps, axis=1)) ** 2
        return _cosine_matrix(spec)
    raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")


@dataclass
class PruneConfig:
    pairs_to_prune: int = 0
    metric: str = "euclidean"
    groups: tuple = GROUP_NAMES

    def __post_init__(self):
        if self.pairs_to_prune < 0:
            raise ValueError("pairs_to_prune must be >= 0")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        self.groups = tuple(self.groups)
        unknown = set(self.groups) - set(GROUP_NAMES)
        if unknown:
            raise ValueError(f"unknown groups {sorted(unknown)}")


@dataclass
class RemovedPair:
    kept: int
    removed: int
    distance: float
    eff_kept: float
    eff_removed: float


@dataclass
class PruneReport:
    removed_pairs: list = field(default_factory=list)
    params_before: int = 0
    params_removed: int = 0

    @property
    def params_removed_pct(self) -> float:
        return 100.0 * self.params_removed / self.params_before if self.params_before else 0.0

    def to_text(self) -> str:
        lines = [f"removed {len(self.removed_pairs)} kernels, {self.params_removed} of "
                 f"{self.params_before} parameters ({self.params_removed_pct:.2f}%)"]
        for p in self.removed_pairs:
            lines.append(f"  keep {p.kept:4d} (eff {p.eff_kept:+.5f})  drop {p.removed:4d} "
                         f"(eff {p.eff_removed:+.5f})  distance {p.distance:.5f}")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kept", "removed", "distance", "eff_kept", "eff_removed"])
            for p in self.removed_pairs:
                w.writerow([p.kept, p.removed, repr(p.distance), repr(p.eff_kept),
                            repr(p.eff_removed)])


def select_pairs(model, config: PruneConfig) -> list:
    """Most-similar disjoint same-group pairs, greedily by ascending distance.

    Returns ``(distance, i, j)`` with global kernel indices ``i < j``.
    """
    slices = model.bank.group_slices()
    candidates, capacity = [], 0
    for g in model.bank.groups:
        if g.name not in config.groups or g.size < 2:
            continue
        capacity += g.size // 2
        d = pairwise_distances(g.taps, config.metric)
        iu, ju = np.triu_indices(g.size, k=1)
        off = slices[g.name].start
        candidates += [(float(d[a, b]), int(a + off), int(b + off)) for a, b in zip(iu, ju)]
    if config.pairs_to_prune > capacity:
        raise TooManyPairs(f"{config.pairs_to_prune} pairs requested, only {capacity} available")
    candidates.sort()
    used, chosen = set(), []
    for dist, i, j in candidates:
        if len(chosen) == config.pairs_to_prune:
            break
        if i in used or j in used:
            continue
        used.update((i, j))
        chosen.append((dist, i, j))
    return chosen


def _flat(model):
    taps = [t for g in model.bank.groups for t in g.taps]
    biases = np.concatenate([g.biases for g in model.bank.groups]).astype(np.float64)
    return taps, biases


def prune(model, config: PruneConfig):
    """Correlated kernel pruning.

    For every selected pair the kernel with the larger ``|w * mean|taps||``
    survives (ties keep the lower index) and absorbs the other one::

        w_keep' = (eff_keep + eff_drop) / mu_keep,   b_keep' = b_keep + b_drop

    Classification models only lose the removed kernels' class-weight rows
    (no compensation).
    """
    if getattr(model, "absorbed", False):
        raise AbsorbedModel("prune before absorbing weights")
    before = count_params(model)
    report = PruneReport(params_before=before)
    if config.pairs_to_prune == 0:
        return model.copy(), report
    pairs = select_pairs(model, config)
    taps, biases = _flat(model)
    mu = np.array([np.mean(np.abs(t)) for t in taps])
    seg = model.task == "segmentation"
    weights = model.weights.astype(np.float64).copy() if seg else None
    removed = set()
    for dist, i, j in pairs:
        if seg:
            eff_i, eff_j = weights[i] * mu[i], weights[j] * mu[j]
        else:
            eff_i = float(np.abs(model.class_weights[i]).sum() * mu[i])
            eff_j = float(np.abs(model.class_weights[j]).sum() * mu[j])
        keep, drop = (i, j) if abs(eff_i) >= abs(eff_j) else (j, i)
        eff_keep, eff_drop = (eff_i, eff_j) if keep == i else (eff_j, eff_i)
        if seg:
            if mu[keep] > 0:
                weights[keep] = (eff_keep + eff_drop) / mu[keep]
            biases[keep] = biases[keep] + biases[drop]
        removed.add(drop)
        report.removed_pairs.append(RemovedPair(keep, drop, dist, float(eff_keep), float(eff_drop)))

    keep_mask = np.array([m not in removed for m in range(model.n_kernels)])
    slices = model.bank.group_slices()
    dtype = model.dtype
    groups = []
    for g in model.bank.groups:
        sl = slices[g.name]
        mask = keep_mask[sl]
        if mask.any():
            groups.append(KernelGroup(g.name, g.taps[mask], biases[sl][mask].astype(dtype)))
    bank = KernelBank(groups, model.bank.sample_rate_hz)
    if seg:
        out = SegmentationModel(bank, weights[keep_mask].astype(dtype))
    else:
        out = ClassificationModel(bank, model.class_weights[keep_mask], model.spectrum_weights,
                                  model.class_bias, model.f_max_hz, list(model.class_names))
    report.params_removed = before - count_params(out)
    return out, report


@dataclass
class SweepPoint:
    pairs: int
    params_removed_pct: float
    score: float
    relative: float


def prune_sweep(model, metric: str, pair_counts: Sequence[int], evaluate,
                groups: Sequence[str] = GROUP_NAMES) -> list:
    """Score pruned variants of ``model``.

    ``evaluate`` maps a model to a scalar (e.g. held-out DICE); ``relative``
    is the score divided by the unpruned score.
    """
    base = float(evaluate(model))
    points = []
    for pa in sorted(set(int(p) for p in pair_counts)):
        if pa == 0:
            points.append(SweepPoint(0, 0.0, base, 1.0))
            continue
        pruned, report = prune(model, PruneConfig(pa, metric, tuple(groups)))
        score = float(evaluate(pruned))
        points.append(SweepPoint(pa, report.params_removed_pct, score,
                                 score / base if base else float("nan")))
    return points


def tune_pairs(model, metric: str, evaluate, min_relative: float = 0.96,
               groups: Sequence[str] = GROUP_NAMES, step: int = 1):
    """Largest pair count whose relative score stays at or above ``min_relative``.

    Scans upward and stops at the first failure.
    """
    base = float(evaluate(model))
    cap = sum(g.size // 2 for g in model.bank.groups if g.name in groups)
    best = 0
    for pa in range(step, cap + 1, step):
        pruned, _ = prune(model, PruneConfig(pa, metric, tuple(groups)))
        if base and evaluate(pruned) / base >= min_relative:
            best = pa
        else:
            break
    return best


def write_sweep_csv(path, points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pairs", "params_removed_pct", "score", "relative"])
        for p in points:
            w.writerow([p.pairs, f"{p.params_removed_pct:.6f}", repr(p.score), repr(p.relative)])
