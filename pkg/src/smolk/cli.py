"""Command-line front end.

Every subcommand reads and writes files only, so runs compose through the
output directory.  Exit codes: 0 success, 1 domain error, 2 usage or
configuration error; failures also print one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import compress, evaluation, interpret, svg
from .exceptions import ConfigError, SmolkError
from .model import (
    DTYPES,
    GROUP_NAMES,
    SIZE_PRESETS,
    count_params,
    group_lengths_for,
    load_model,
    model_checksum,
    quantize,
    save_model,
    segment_logits,
)
from .postprocess import PostConfig
from .preprocess import PreprocessConfig, preprocess_corpus, preprocess_record
from .signal_io import (
    DatasetManifest,
    load_corpus,
    load_signal,
    parse_manifest,
    synth_ecg_corpus,
    synth_ppg_corpus,
    write_corpus,
    write_manifest,
)
from .train import TrainConfig, fit, init_params, write_trace_csv

logger = logging.getLogger("smolk")


# --------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    task: str = "segmentation"
    seed: int = 0
    n_kernels: int = 12
    group_seconds: dict = field(default_factory=lambda: {"short": 1.0, "moderate": 1.5, "long": 3.0})
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig.ppg)
    train: TrainConfig = field(default_factory=TrainConfig.segmentation)
    post: PostConfig = field(default_factory=PostConfig)
    prune: compress.PruneConfig = field(default_factory=compress.PruneConfig)
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["paths"] = {k: str(v) for k, v in self.paths.items()}
        return out


SECTIONS = {"preprocess": PreprocessConfig, "train": TrainConfig, "post": PostConfig,
            "prune": compress.PruneConfig}
TOP_KEYS = {"task", "seed", "model", "paths"} | set(SECTIONS)
MODEL_KEYS = {"size", "n_kernels", "group_seconds"}


def read_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    for name, cls in SECTIONS.items():
        if name in raw:
            _check_keys(raw, name, {f.name for f in fields(cls)})
    if "model" in raw:
        _check_keys(raw, "model", MODEL_KEYS)
    return raw


def _check_keys(raw, name, known):
    if not isinstance(raw[name], dict):
        raise ConfigError(f"[{name}] must be a table")
    bad = set(raw[name]) - known
    if bad:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")


def _section(raw, name, cls, defaults):
    values = dict(raw.get(name, {}))
    try:
        return cls(**{**defaults, **values})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def resolve_config(args, task: str | None = None, **overrides) -> RunConfig:
    """File values, then flag overrides (flags that were not given are ``None``)."""
    raw = read_config_file(getattr(args, "config", None))
    task = task or raw.get("task", "segmentation")
    if raw.get("task", task) != task:
        raise ConfigError(f"config is for {raw['task']!r}, data is {task!r}")
    seg = task == "segmentation"
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))

    pre_default = PreprocessConfig.ppg() if seg else PreprocessConfig.ecg()
    pre = _section(raw, "preprocess", PreprocessConfig, asdict(pre_default))
    train_default = (TrainConfig.segmentation() if seg else TrainConfig.classification()).to_dict()
    train_over = {k: v for k, v in overrides.items()
                  if k in {f.name for f in fields(TrainConfig)} and v is not None}
    train = _section(raw, "train", TrainConfig, {**train_default, "seed": seed})
    if train_over:
        try:
            train = TrainConfig(**{**train.to_dict(), **train_over})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    post = _section(raw, "post", PostConfig, {})
    prune = _section(raw, "prune", compress.PruneConfig, {})

    model_raw = dict(raw.get("model", {}))
    # flags beat the file; within each, an explicit count beats a size preset
    n_kernels = None
    for source in (overrides, model_raw):
        if source.get("n_kernels"):
            n_kernels = int(source["n_kernels"])
        elif source.get("size"):
            if source["size"] not in SIZE_PRESETS:
                raise ConfigError(f"unknown size {source['size']!r}; "
                                  f"choose from {sorted(SIZE_PRESETS)}")
            n_kernels = SIZE_PRESETS[source["size"]]
        if n_kernels is not None:
            break
    n_kernels = n_kernels or SIZE_PRESETS["small"]
    group_seconds = model_raw.get("group_seconds", {"short": 1.0, "moderate": 1.5, "long": 3.0})
    paths = {**raw.get("paths", {}), **{k: v for k, v in overrides.get("paths", {}).items() if v}}
    return RunConfig(task, seed, n_kernels, dict(group_seconds), pre, train, post, prune, paths)


# --------------------------------------------------------------------------
# data helpers


@dataclass
class Dataset:
    task: str
    X: object  # (N, L) array for segmentation, list of arrays for classification
    y: np.ndarray
    ids: list
    class_names: list
    sample_rate_hz: float


def load_dataset(manifest_path, config: RunConfig, jobs: int = 1) -> Dataset:
    corpus = load_corpus(manifest_path, jobs=jobs)
    chunks = preprocess_corpus(corpus.pairs(), config.preprocess)
    if not chunks:
        raise SmolkError(f"{manifest_path}: no chunks after preprocessing")
    ids = [s.id for s, _ in chunks]
    rate = config.preprocess.target_rate_hz
    if corpus.manifest.task == "segmentation":
        X = np.stack([s.samples for s, _ in chunks])
        y = np.stack([lab.values for _, lab in chunks])
    else:
        X = [s.samples for s, _ in chunks]
        y = np.array([lab.class_index for _, lab in chunks])
    return Dataset(corpus.manifest.task, X, y, ids, list(corpus.manifest.class_names), rate)


def _subset(ds: Dataset, idx) -> Dataset:
    idx = np.asarray(idx)
    X = ds.X[idx] if ds.task == "segmentation" else [ds.X[i] for i in idx]
    return Dataset(ds.task, X, ds.y[idx], [ds.ids[i] for i in idx], ds.class_names,
                   ds.sample_rate_hz)


def split_holdout(ds: Dataset, fraction: float, seed: int):
    n = len(ds.y)
    n_hold = int(round(fraction * n))
    if n_hold == 0:
        return ds, None
    if n_hold >= n:
        raise SmolkError(f"holdout fraction {fraction} leaves nothing to train on")
    order = np.random.default_rng(seed).permutation(n)
    return _subset(ds, np.sort(order[n_hold:])), _subset(ds, np.sort(order[:n_hold]))


def score_fn(ds: Dataset, post: PostConfig):
    """Scalar held-out score used by pruning: DICE or macro-F1."""
    if ds.task == "segmentation":
        return lambda m: evaluation.segmentation_dice(m, ds.X, ds.y, post)
    return lambda m: evaluation.classification_scores(m, ds.X, ds.y)[0]


def write_report(report: evaluation.EvalReport, out_dir: Path, stem: str = "report") -> dict:
    md, csv_path, js = (out_dir / f"{stem}.md", out_dir / f"{stem}.csv", out_dir / f"{stem}.json")
    md.write_text(report.to_markdown())
    report.write_csv(csv_path)
    js.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True, default=str))
    return {"report": str(md), "metrics": {k: v[0] for k, v in report.metrics.items()}}


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_out(args, out_dir: Path, default: str) -> Path:
    return Path(args.out) if getattr(args, "out", None) else out_dir / default


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True, default=str))


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> dict:
    out_dir = _out_dir(args)
    seed = args.seed or 0
    if args.task == "segmentation":
        rate = args.rate or 64.0
        pairs = synth_ppg_corpus(args.n, args.duration or 30.0, rate, seed=seed)
        names = ("clean", "artifact")
    else:
        rate = args.rate or 300.0
        pairs = synth_ecg_corpus(args.n, args.duration or 10.0, rate, seed=seed)
        names = ("normal", "afib", "other")
    manifest_path = write_corpus(out_dir, pairs, args.task, rate, names)
    full = parse_manifest(manifest_path)
    order = np.random.default_rng(seed).permutation(len(full.entries))
    n_test = int(round(args.test_fraction * len(order)))
    test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
    out = {"manifest": str(manifest_path)}
    for name, idx in (("train", train_idx), ("test", test_idx)):
        if len(idx) == 0:
            continue
        sub = DatasetManifest(full.task, full.class_names, [full.entries[i] for i in idx],
                              full.sample_rate_hz, full.root)
        path = out_dir / f"{name}.txt"
        write_manifest(path, sub)
        out[name] = str(path)
    return out


def cmd_train(args) -> dict:
    out_dir = _out_dir(args)
    task = parse_manifest(args.manifest).task
    cfg = resolve_config(args, task, size=args.size, n_kernels=args.kernels,
                         iterations=args.iterations, lr_start=args.lr_start, lr_end=args.lr_end,
                         dtype=args.dtype, paths={"manifest": args.manifest})
    ds = load_dataset(args.manifest, cfg, args.jobs)
    train_ds, val_ds = split_holdout(ds, args.val_fraction, cfg.seed)
    lengths = group_lengths_for(ds.sample_rate_hz, cfg.group_seconds)
    init = init_params(task, cfg.n_kernels, lengths, seed=cfg.seed,
                       sample_rate_hz=ds.sample_rate_hz, n_classes=len(ds.class_names),
                       class_names=ds.class_names)
    result = fit(init, train_ds.X, train_ds.y, cfg.train)
    model_path = _model_out(args, out_dir, "model.smlk")
    save_model(model_path, result.model)
    write_trace_csv(out_dir / "trace.csv", result.trace)
    svg.write(out_dir / "loss.svg", svg.line_chart(
        [("loss", [r.iteration for r in result.trace], [r.loss for r in result.trace])],
        "Training loss", "step", "loss", markers=False))
    out = {"model": str(model_path), "params": count_params(result.model),
           "checksum": model_checksum(result.model), "final_loss": result.trace[-1].loss}
    if val_ds is not None:
        report = evaluation.evaluate(result.model, val_ds.X, val_ds.y, cfg.post, cfg.to_dict())
        out.update(write_report(report, out_dir, "validation_report"))
    return out


def cmd_eval(args) -> dict:
    out_dir = _out_dir(args)
    model = load_model(args.model)
    cfg = resolve_config(args, model.task, paths={"manifest": args.manifest, "model": args.model})
    ds = load_dataset(args.manifest, cfg, args.jobs)
    report = evaluation.evaluate(model, ds.X, ds.y, cfg.post, cfg.to_dict())
    out = write_report(report, out_dir)
    if args.rank:
        if model.task != "segmentation":
            raise SmolkError("per-chunk ranking is defined for segmentation only")
        ranking = evaluation.rank_by_accuracy(model, ds.X, ds.y, ds.ids, cfg.post)
        path = out_dir / "ranking.csv"
        path.write_text("chunk_id,dice\n" + "".join(f"{r.chunk_id},{r.dice!r}\n" for r in ranking))
        out["ranking"] = str(path)
    return out


def cmd_prune(args) -> dict:
    out_dir = _out_dir(args)
    model = load_model(args.model)
    cfg = resolve_config(args, model.task, paths={"manifest": args.manifest, "model": args.model})
    groups = tuple(args.groups.split(",")) if args.groups else cfg.prune.groups
    metric = args.metric or cfg.prune.metric
    ds = load_dataset(args.manifest, cfg, args.jobs)
    evaluate = score_fn(ds, cfg.post)
    if args.tune:
        pairs = compress.tune_pairs(model, metric, evaluate, args.min_relative, groups)
    else:
        pairs = args.pairs if args.pairs is not None else cfg.prune.pairs_to_prune
    pruned, report = compress.prune(model, compress.PruneConfig(pairs, metric, groups))
    model_path = _model_out(args, out_dir, "pruned.smlk")
    save_model(model_path, pruned)
    (out_dir / "prune_report.txt").write_text(report.to_text() + "\n")
    report.write_csv(out_dir / "prune_report.csv")
    cap = sum(g.size // 2 for g in model.bank.groups if g.name in groups)
    step = max(1, cap // 16)
    counts = sorted(set(range(0, cap + 1, step)) | {pairs})
    curve = compress.prune_sweep(model, metric, counts, evaluate, groups)
    compress.write_sweep_csv(out_dir / "retention.csv", curve)
    svg.write(out_dir / "retention.svg", svg.line_chart(
        [("retention", [p.params_removed_pct for p in curve], [p.relative for p in curve])],
        f"Pruning ({metric})", "parameters removed (%)", "relative score"))
    point = next(p for p in curve if p.pairs == pairs)
    return {"model": str(model_path), "pairs": pairs, "params_removed": report.params_removed,
            "params_removed_pct": report.params_removed_pct, "relative_score": point.relative}


def cmd_absorb(args) -> dict:
    out_dir = _out_dir(args)
    model = compress.absorb_weights(load_model(args.model))
    path = _model_out(args, out_dir, "absorbed.smlk")
    save_model(path, model)
    return {"model": str(path), "params": count_params(model)}


def cmd_quantize(args) -> dict:
    out_dir = _out_dir(args)
    model = quantize(load_model(args.model), args.dtype)
    path = _model_out(args, out_dir, f"model_{args.dtype}.smlk")
    save_model(path, model)
    return {"model": str(path), "bytes": path.stat().st_size, "dtype": args.dtype}


def cmd_explain(args) -> dict:
    out_dir = _out_dir(args)
    model = load_model(args.model)
    rate = model.bank.sample_rate_hz
    stem = out_dir / (args.name or "explain")
    if args.what == "kernels":
        csv_path, svg_path = interpret.dump_kernels(model, stem, args.class_index or 0)
        return {"csv": str(csv_path), "svg": str(svg_path)}
    if args.what == "importance":
        records = interpret.kernel_importance(model)
        path = stem.with_suffix(".csv")
        path.write_text("kernel,group,importance,sign\n" + "".join(
            f"{r.index},{r.group},{r.importance!r},{r.sign}\n" for r in records))
        return {"csv": str(path)}
    if not args.signal:
        raise ConfigError(f"--signal is required for {args.what!r}")
    signal = load_signal(args.signal, rate)
    if args.preprocess:
        cfg = resolve_config(args, model.task)
        signal = preprocess_record(signal, None, cfg.preprocess)[0][0]
    x = signal.samples
    if args.what == "groups":
        if model.task != "segmentation":
            raise SmolkError("group responses are defined for segmentation models")
        parts = {g: interpret.group_response(model, x, g) for g in GROUP_NAMES
                 if g in model.bank.group_lengths}
        total = segment_logits(model, x)
        t = np.arange(x.size) / rate
        path = stem.with_suffix(".csv")
        cols = list(parts)
        rows = ["t," + ",".join(cols) + ",total"]
        rows += [f"{t[i]:.6f}," + ",".join(repr(float(parts[c][i])) for c in cols)
                 + f",{float(total[i])!r}" for i in range(x.size)]
        path.write_text("\n".join(rows) + "\n")
        series = [(c, t, parts[c]) for c in cols] + [("total", t, total)]
        svg.write(stem.with_suffix(".svg"), svg.line_chart(
            series, "Group responses", "time (s)", "pre-sigmoid score", markers=False))
        return {"csv": str(path), "svg": str(stem.with_suffix(".svg"))}
    if model.task != "classification":
        raise SmolkError("contribution maps are defined for classification models")
    cmap = interpret.contribution_map(model, x, args.class_index or 0, Path(args.model).name)
    cmap.write_csv(stem.with_suffix(".csv"), rate)
    name = model.class_names[cmap.class_index] if model.class_names else str(cmap.class_index)
    svg.write(stem.with_suffix(".svg"), svg.heat_strip(x, cmap.values, f"Evidence for {name}"))
    return {"csv": str(stem.with_suffix(".csv")), "svg": str(stem.with_suffix(".svg")),
            "spectrum_share": cmap.spectrum_share}


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_sweep(args) -> dict:
    out_dir = _out_dir(args)
    if args.kind == "noise":
        if not args.model:
            raise ConfigError("noise sweep needs --model")
        model = load_model(args.model)
        cfg = resolve_config(args, model.task)
        ds = load_dataset(args.manifest, cfg, args.jobs)
        points = evaluation.noise_sweep(model, ds.X, ds.y, _floats(args.sigmas), cfg.seed, cfg.post)
        csv_path, svg_path = evaluation.write_noise_outputs(out_dir / "noise", points)
    else:
        task = parse_manifest(args.manifest).task
        if task != "segmentation":
            raise SmolkError("scaling runs are defined for segmentation")
        cfg = resolve_config(args, task, iterations=args.iterations, dtype=args.dtype)
        ds = load_dataset(args.manifest, cfg, args.jobs)
        m_values = [int(v) for v in _floats(args.m_values)]
        points = evaluation.scaling_run(ds.X, ds.y, m_values, args.folds, cfg.seed, cfg.train,
                                        ds.sample_rate_hz, cfg.group_seconds, cfg.post, args.jobs)
        csv_path, svg_path = evaluation.write_scaling_outputs(out_dir / "scaling", points)
    return {"csv": str(csv_path), "svg": str(svg_path)}


# --------------------------------------------------------------------------
# argument parsing


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="smolk", description="Sparse learned-kernel models for biosignals.")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--jobs", type=int, default=1, help="worker and BLAS thread cap")
    p.add_argument("--config", default=None, help="TOML run configuration")
    p.add_argument("--out-dir", default="smolk_out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic corpus and train/test manifests")
    s.add_argument("--task", choices=("segmentation", "classification"), default="segmentation")
    s.add_argument("--n", type=int, default=200, help="number of chunks or records")
    s.add_argument("--duration", type=float, default=None, help="seconds per chunk")
    s.add_argument("--rate", type=float, default=None, help="sample rate in Hz")
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model on a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--size", choices=sorted(SIZE_PRESETS), default=None)
    s.add_argument("--kernels", type=int, default=None, help="kernel count (multiple of 3)")
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--lr-start", type=float, default=None)
    s.add_argument("--lr-end", type=float, default=None)
    s.add_argument("--dtype", choices=("f32", "f64"), default=None, help="training precision")
    s.add_argument("--val-fraction", type=float, default=0.1)
    s.add_argument("--out", default=None, help="model path (default OUT_DIR/model.smlk)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a model on a manifest")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--rank", action="store_true", help="also write per-chunk DICE, worst first")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("prune", help="correlated kernel pruning")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True, help="held-out data for the retention curve")
    s.add_argument("--pairs", type=int, default=None)
    s.add_argument("--tune", action="store_true", help="largest pair count above --min-relative")
    s.add_argument("--min-relative", type=float, default=0.96)
    s.add_argument("--metric", choices=compress.METRICS, default=None)
    s.add_argument("--groups", default=None, help="comma-separated kernel groups")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("absorb", help="fold head weights into the kernels")
    s.add_argument("--model", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_absorb)

    s = sub.add_parser("quantize", help="cast model parameters")
    s.add_argument("--model", required=True)
    s.add_argument("--dtype", choices=sorted(DTYPES), default="f16")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("explain", help="kernel dumps, importances, group responses, contributions")
    s.add_argument("--model", required=True)
    s.add_argument("--what", choices=("kernels", "importance", "groups", "contribution"),
                   default="kernels")
    s.add_argument("--signal", default=None, help=".sig or .csv signal at the model rate")
    s.add_argument("--class", dest="class_index", type=int, default=None)
    s.add_argument("--preprocess", action="store_true", help="filter and normalize the signal")
    s.add_argument("--name", default=None, help="output file stem")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("sweep", help="noise-robustness or scaling curves")
    s.add_argument("kind", choices=("noise", "scaling"))
    s.add_argument("--manifest", required=True)
    s.add_argument("--model", default=None)
    s.add_argument("--sigmas", default="0,0.05,0.1,0.2,0.5")
    s.add_argument("--m-values", default="6,12,24,48")
    s.add_argument("--folds", type=int, default=3)
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--dtype", choices=("f32", "f64"), default=None)
    s.set_defaults(func=cmd_sweep)
    return p


def _fail(exc, code: int) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(exc, 2)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        return _fail(UsageError("--jobs must be >= 1"), 2)
    try:
        with threadpool_limits(args.jobs):
            payload = args.func(args)
    except (ConfigError, UsageError) as exc:
        return _fail(exc, 2)
    except (SmolkError, OSError, ValueError) as exc:
        return _fail(exc, 1)
    _emit(payload)
    return 0


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
