"""Built-in interpretability: kernel importance, group responses, contribution maps."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy import stats

from . import svg
from .exceptions import AbsorbedModel, InsufficientSamples, IoError, SignalTooShort, UnknownGroup
from .model import (
    GROUP_NAMES,
    ClassificationModel,
    SegmentationModel,
    check_class,
    compute_dtype,
    feature_maps,
    segment_logits,
    spectrum_features,
)


@dataclass
class KernelImportanceRecord:
    index: int
    group: str
    importance: float
    sign: int


def kernel_importance(model: SegmentationModel) -> list:
    """``(sum(k**2) + b) * w`` for every kernel: its output under a perfect template match."""
    if model.absorbed:
        raise AbsorbedModel("kernel importance needs explicit weights")
    records = []
    groups = model.bank.group_of()
    for m, k in enumerate(model.bank.kernels()):
        taps = np.asarray(k.taps, dtype=np.float64)
        imp = float((np.dot(taps, taps) + k.bias) * float(model.weights[m]))
        records.append(KernelImportanceRecord(m, groups[m], imp, int(np.sign(imp))))
    return records


def group_response(model: SegmentationModel, x, group: str) -> np.ndarray:
    """Pre-sigmoid contribution of one kernel group (SAME alignment)."""
    if group not in GROUP_NAMES:
        raise UnknownGroup(group)
    return segment_logits(model, x, groups=[group])


# --------------------------------------------------------------------------
# group statistics


@dataclass
class Comparison:
    label: str
    mean_a: float
    mean_b: float
    t: float
    p: float
    p_bonferroni: float


@dataclass
class GroupStats:
    importance_mean: dict
    importance_tests: list
    response_means: dict  # group -> (clean mean, artifact mean)
    response_tests: list

    def to_markdown(self) -> str:
        lines = ["| group | mean importance | mean response (clean) | mean response (artifact) |",
                 "|---|---|---|---|"]
        for g in self.importance_mean:
            clean, art = self.response_means.get(g, (float("nan"), float("nan")))
            lines.append(f"| {g} | {self.importance_mean[g]:.5g} | {clean:.5g} | {art:.5g} |")
        lines += ["", "| comparison | t | p (Bonferroni) |", "|---|---|---|"]
        for c in self.importance_tests + self.response_tests:
            lines.append(f"| {c.label} | {c.t:.4g} | {c.p_bonferroni:.3g} |")
        return "\n".join(lines)


def bonferroni(pvalues):
    p = np.asarray(pvalues, dtype=np.float64)
    return np.minimum(p * p.size, 1.0)


def ttest(a, b):
    """Two-tailed independent-samples t-test (pooled variance)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise InsufficientSamples("each population needs at least 2 samples")
    if np.ptp(np.concatenate([a, b])) == 0:
        return 0.0, 1.0
    res = stats.ttest_ind(a, b)
    return float(res.statistic), float(res.pvalue)


def _compare(pairs):
    raw = [(label, a, b, *ttest(a, b)) for label, a, b in pairs]
    adj = bonferroni([r[4] for r in raw]) if raw else []
    return [Comparison(label, float(np.mean(a)), float(np.mean(b)), t, p, float(q))
            for (label, a, b, t, p), q in zip(raw, adj)]


def group_importance_stats(models, X, artifact) -> GroupStats:
    """Kernel importance by group across ``models`` and the empirical group
    responses on clean vs artifact timesteps (averaged per timestep)."""
    models = list(models)
    imps = {g: [] for g in GROUP_NAMES}
    for mdl in models:
        for r in kernel_importance(mdl):
            imps[r.group].append(r.importance)
    present = [g for g in GROUP_NAMES if imps[g]]
    for g in present:
        if len(imps[g]) < 2:
            raise InsufficientSamples(f"group {g!r} has fewer than 2 kernels across models")
    imp_tests = _compare([(f"importance {a} vs {b}", imps[a], imps[b])
                          for a, b in combinations(present, 2)])

    X = np.asarray(X, dtype=np.float64)
    mask = np.asarray(artifact).reshape(X.shape).astype(bool)
    resp = {g: ([], []) for g in present}
    for mdl in models:
        for g in present:
            r = group_response(mdl, X, g)
            resp[g][0].append(r[~mask])
            resp[g][1].append(r[mask])
    pooled = {g: (np.concatenate(c), np.concatenate(a)) for g, (c, a) in resp.items()}
    resp_tests = _compare([(f"response {g} clean vs artifact", *pooled[g]) for g in present])
    return GroupStats(
        {g: float(np.mean(imps[g])) for g in present},
        imp_tests,
        {g: (float(np.mean(c)) if c.size else float("nan"),
             float(np.mean(a)) if a.size else float("nan")) for g, (c, a) in pooled.items()},
        resp_tests,
    )


# --------------------------------------------------------------------------
# contribution maps


@dataclass
class ContributionMap:
    values: np.ndarray
    class_index: int
    model_id: str = ""
    spectrum_share: float = 0.0
    bias: float = 0.0

    def write_csv(self, path, sample_rate_hz=None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "value"])
            for i, v in enumerate(self.values):
                t = i / sample_rate_hz if sample_rate_hz else i
                w.writerow([f"{t:.6f}" if sample_rate_hz else t, repr(float(v))])


def contribution_map(model: ClassificationModel, x, class_index: int, model_id: str = ""):
    """Spread each weighted feature-map value evenly over the K samples it saw.

    For kernel ``m`` and VALID position ``l`` the value
    ``f_m[l] * w_mj / K`` is added to ``I[l : l + K]`` (a transposed
    convolution with a box of ones), so
    ``sum(I) == sum_m w_mj * sum_l f_m[l]``.  The spectrum features have no
    location; their share of the logit is returned separately.
    """
    j = check_class(model, class_index)
    samples = x.samples if hasattr(x, "samples") else np.asarray(x)
    length = samples.size
    if length < model.bank.max_length:
        raise SignalTooShort(f"signal of {length} samples < kernel of {model.bank.max_length}")
    cdt = compute_dtype(model.dtype)
    fmaps = feature_maps(model.bank, samples, "valid")
    w = model.class_weights[:, j].astype(np.float64)
    out = np.zeros(length)
    slices = model.bank.group_slices()
    for g in model.bank.groups:
        if g.size == 0:
            continue
        sl = slices[g.name]
        weighted = np.zeros(length - g.length + 1)
        for m in range(sl.start, sl.stop):
            weighted += fmaps.maps[m].astype(np.float64) * w[m]
        out += np.convolve(weighted / g.length, np.ones(g.length))
    spec = spectrum_features(model, [samples])[0].astype(cdt)
    share = float(spec @ model.spectrum_weights[:, j].astype(cdt))
    return ContributionMap(out, j, model_id, share, float(model.class_bias[j]))


# --------------------------------------------------------------------------
# kernel dumps


def _kernel_signs(model, class_index=0):
    if model.task == "segmentation":
        w = model.head_weights()
    else:
        w = model.class_weights[:, class_index]
    return np.where(np.asarray(w) >= 0, 1, -1)


def dump_kernels(model, path, class_index: int = 0):
    """Write ``<path>.csv`` (one row per tap) and ``<path>.svg`` (one panel per kernel).

    Kernels are colored by the sign of their output weight (absorbed models
    use the stored signs).  Returns the two paths.
    """
    if model.n_kernels == 0:
        raise ValueError("model has no kernels")
    path = Path(path)
    signs = _kernel_signs(model, class_index)
    groups = model.bank.group_of()
    kernels = model.bank.kernels()
    csv_path, svg_path = path.with_suffix(".csv"), path.with_suffix(".svg")
    try:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kernel", "group", "sign", "tap", "value"])
            for m, k in enumerate(kernels):
                for i, v in enumerate(k.taps):
                    w.writerow([m, groups[m], int(signs[m]), i, repr(float(v))])
        traces = [(f"#{m} {groups[m]} {'+' if signs[m] > 0 else '-'}", k.taps,
                   svg.POSITIVE if signs[m] > 0 else svg.NEGATIVE)
                  for m, k in enumerate(kernels)]
        svg.write(svg_path, svg.kernel_grid(traces))
    except OSError as exc:
        raise IoError(f"cannot write kernel dump: {exc}") from exc
    return csv_path, svg_path
