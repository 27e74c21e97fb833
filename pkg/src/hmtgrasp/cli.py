"""Command line entry point: ``hmtgrasp <command> [flags]``.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autograd as ag
from .data import SceneError, load_dataset, split_folds, write_synthetic_dataset
from .gradcheck import format_report, run_suite
from .geometry import synthesize_grasps, write_grasps
from .model import ConfigError, ModelConfig, build_model, load_weights, save_weights
from .serialize import FormatError, load_tensor, save_tensor
from .training import (PROFILES, EvalResult, TrainConfig, TrainingAborted, cross_validate, evaluate,
                       predict_maps, train)

log = logging.getLogger("hmtgrasp")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------
# Config files
# ----------------------------------------------------------------------
RUN_KEYS = {"profile", "split", "folds"}


def _coerce(value: str, kind):
    if kind is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind is int:
        return int(value)
    if kind is float:
        return float(value)
    return value


_MODEL_TYPES = {"input_channels": int, "input_size": int, "mamba_blocks_per_stage": int,
                "bottleneck_mamba_blocks": int, "use_cnn_stream": bool, "use_transformer_stream": bool,
                "use_mamba_fusion": bool, "use_skip": bool, "window_size": int, "ssm_state": int,
                "expansion": int, "heads": int, "upsample": str, "seed": int}
_TRAIN_TYPES = {"learning_rate": float, "batch_size": int, "epochs": int, "beta1": float, "beta2": float,
                "eps": float, "seed": int, "loss": str, "augment": bool, "holdout": float,
                "eval_every": int, "max_width_px": float, "smooth_sigma": float, "min_peak_dist": float}


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise UsageError(f"config line {lineno}: empty key")
        if key in out:
            raise UsageError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def build_run_config(raw: dict[str, str]) -> tuple[ModelConfig, TrainConfig, dict]:
    """Split flat keys into model, training and run settings.

    ``profile`` sets learning rate and epochs before explicit keys apply;
    ``seed`` seeds both model initialisation and training.
    """
    unknown = set(raw) - set(_MODEL_TYPES) - set(_TRAIN_TYPES) - RUN_KEYS - {"stage_widths"}
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    run = {"profile": raw.get("profile", "cornell"), "split": raw.get("split", "image-wise"),
           "folds": int(raw.get("folds", 5))}
    if run["profile"] not in PROFILES:
        raise UsageError(f"unknown profile {run['profile']!r} (choose from {', '.join(PROFILES)})")
    lr, epochs = PROFILES[run["profile"]]
    mkw, tkw = {}, {"learning_rate": lr, "epochs": epochs}
    try:
        for key, value in raw.items():
            if key == "stage_widths":
                mkw[key] = tuple(int(v) for v in value.replace(",", " ").split())
            if key in _MODEL_TYPES:
                mkw[key] = _coerce(value, _MODEL_TYPES[key])
            if key in _TRAIN_TYPES:
                tkw[key] = _coerce(value, _TRAIN_TYPES[key])
    except ValueError as exc:
        raise UsageError(f"bad config value: {exc}") from None
    mcfg = ModelConfig(**mkw).validate()
    tcfg = TrainConfig(**tkw)
    try:
        tcfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return mcfg, tcfg, run


def load_run_config(path: str | None, overrides: list[str] = ()) -> tuple[ModelConfig, TrainConfig, dict]:
    raw = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file {p} does not exist")
        raw = parse_config_text(p.read_text())
    for item in overrides:
        raw.update(parse_config_text(item))
    return build_run_config(raw)


def _require_dir(path: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"data directory {p} does not exist")
    return p


def _load_samples(path: str, mcfg: ModelConfig | None = None):
    root = _require_dir(path)
    size = mcfg.input_size if mcfg else None
    channels = mcfg.input_channels if mcfg else None
    samples = load_dataset(root, size, channels)
    if not samples:
        raise UsageError(f"no samples found under {root}")
    if mcfg is not None:
        shape = samples[0].image.shape
        want = (mcfg.input_channels, mcfg.input_size, mcfg.input_size)
        if shape != want:
            raise UsageError(f"data in {root} has image shape {shape}, model expects {want}")
    return samples


def _threads() -> int:
    raw = os.environ.get("HMT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"HMT_THREADS must be an integer, got {raw!r}") from None


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------
def cmd_gen_synthetic(args) -> int:
    try:
        out = write_synthetic_dataset(args.out, args.count, args.seed, args.size, args.objects,
                                      args.channels, args.images_per_object)
    except (ValueError, SceneError) as exc:
        raise UsageError(str(exc)) from None
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed = {args.seed}")
    mcfg, tcfg, _ = load_run_config(args.config, overrides)
    samples = _load_samples(args.data, mcfg)
    model = build_model(mcfg)
    out = Path(args.out)
    history_path = Path(args.history) if args.history else out.with_suffix(".history.csv")

    def report(rec, _model):
        print(f"epoch {rec.epoch:4d}  loss {rec.loss:.6g}  accuracy {rec.accuracy:.4g}", flush=True)

    try:
        history = train(model, samples, tcfg, [report] if not args.quiet else [])
    except TrainingAborted as exc:
        print(f"error: training aborted at {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(model, out)
    history_path.write_text(history.to_csv())
    print(f"weights -> {out}\nhistory -> {history_path}")
    return EXIT_OK


def _fold_report(rows: list[tuple[int, EvalResult]], split: str, title: str) -> tuple[str, str]:
    accs = [r.accuracy for _, r in rows]
    text = [title, f"split: {split}   folds: {len(rows)}", "",
            f"{'fold':>4} {'n':>5} {'accuracy':>9} {'angle_fail':>10} {'iou_fail':>9} {'ms/img':>8}"]
    csv = ["fold,n,accuracy,angle_failures,iou_failures,mean_time_ms"]
    for f, r in rows:
        text.append(f"{f:>4} {r.n:>5} {100 * r.accuracy:>8.2f}% {r.angle_failures:>10} "
                    f"{r.iou_failures:>9} {1000 * r.mean_time_s:>8.2f}")
        csv.append(f"{f},{r.n},{r.accuracy:.6f},{r.angle_failures},{r.iou_failures},{1000 * r.mean_time_s:.4f}")
    mean = float(np.mean(accs))
    n = sum(r.n for _, r in rows)
    ang = sum(r.angle_failures for _, r in rows)
    iou = sum(r.iou_failures for _, r in rows)
    ms = 1000 * float(np.mean([r.mean_time_s for _, r in rows]))
    text.append(f"{'mean':>4} {n:>5} {100 * mean:>8.2f}% {ang:>10} {iou:>9} {ms:>8.2f}")
    csv.append(f"mean,{n},{mean:.6f},{ang},{iou},{ms:.4f}")
    return "\n".join(text) + "\n", "\n".join(csv) + "\n"


def cmd_eval(args) -> int:
    if args.folds < 2:
        raise UsageError("--folds must be >= 2")
    if args.weights is None and not args.oracle and args.config is None and not args.set:
        raise UsageError("give --weights, --oracle, or --config/--set (cross-validation training)")
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed = {args.seed}")
    mcfg, tcfg, _ = load_run_config(args.config, overrides)
    model = None
    if args.weights:
        if not Path(args.weights).is_file():
            raise UsageError(f"weight file {args.weights} does not exist")
        model = load_weights(args.weights)
        mcfg = model.config
    samples = _load_samples(args.data, None if args.oracle else mcfg)
    ids = [s.source_id for s in samples]
    objs = [s.object_id for s in samples] if args.split == "object-wise" else None
    try:
        folds = split_folds(ids, args.folds, args.split, tcfg.seed, objs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    by_id = {s.source_id: s for s in samples}
    workers = _threads()

    if args.oracle or model is not None:
        title = "oracle (rasterized ground truth)" if args.oracle else f"weights {args.weights}"

        def run_fold(f):
            test = [by_id[i] for i in folds[f][1]]
            return f, evaluate(model, test, tcfg, oracle=args.oracle)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_fold, range(len(folds))))
    else:
        title = "cross-validation (fresh model per fold)"
        try:
            cv = cross_validate(samples, args.folds, args.split, mcfg, tcfg, workers=workers)
        except TrainingAborted as exc:
            print(f"error: training aborted at {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        rows = list(enumerate(cv.results))
    text, csv = _fold_report(rows, args.split, title)
    print(text, end="")
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    out.with_suffix(".csv").write_text(csv)
    return EXIT_OK


def cmd_predict(args) -> int:
    if not Path(args.weights).is_file():
        raise UsageError(f"weight file {args.weights} does not exist")
    if not Path(args.image).is_file():
        raise UsageError(f"image {args.image} does not exist")
    if args.topk < 1:
        raise UsageError("--topk must be >= 1")
    model = load_weights(args.weights)
    cfg = model.config
    image = load_tensor(args.image)
    want = (cfg.input_channels, cfg.input_size, cfg.input_size)
    if image.ndim == 4 and image.shape[0] == 1:
        image = image[0]
    if image.shape != want:
        raise UsageError(f"image shape {image.shape} does not match model input {want}")
    from .data import Sample, default_max_width

    maps = predict_maps(model, [Sample(image.astype(np.float32), [])])[0]
    max_w = args.max_width or default_max_width(cfg.input_size)
    grasps = synthesize_grasps(maps, args.topk, args.sigma, args.min_peak_dist, max_w)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grasps.txt").write_text(write_grasps(grasps))
    for name, arr in zip(("quality", "cos2", "sin2", "width"), maps.maps()):
        save_tensor(out / f"{name}.hmtt", np.asarray(arr, dtype=np.float32))
    print(write_grasps(grasps), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = run_suite(args.scope, range(args.seed, args.seed + args.seeds), tuple(args.sabotage or ()))
    print(format_report(results), end="")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    return EXIT_NUMERIC if failed else EXIT_OK


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hmtgrasp", description="Hybrid Mamba/Transformer grasp detection.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--objects", type=int, default=1)
    g.add_argument("--channels", type=int, default=4, choices=(1, 3, 4))
    g.add_argument("--images-per-object", type=int, default=2)
    g.set_defaults(func=cmd_gen_synthetic)

    def config_flags(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int, help="override the seed")

    t = sub.add_parser("train", help="train a model and write weights plus history")
    config_flags(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="weight file to write")
    t.add_argument("--history", help="history CSV (default: <out>.history.csv)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="rectangle-metric accuracy per fold")
    config_flags(e)
    e.add_argument("--weights")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("image-wise", "object-wise"), default="image-wise")
    e.add_argument("--folds", type=int, default=5)
    e.add_argument("--oracle", action="store_true", help="decode rasterized ground truth instead of a model")
    e.add_argument("--report", default="eval_report.txt")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="grasps and heatmaps for one HMTT image")
    r.add_argument("--weights", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--topk", type=int, default=1)
    r.add_argument("--out", default="prediction")
    r.add_argument("--sigma", type=float, default=2.0)
    r.add_argument("--min-peak-dist", type=float, default=5.0)
    r.add_argument("--max-width", type=float)
    r.set_defaults(func=cmd_predict)

    c = sub.add_parser("gradcheck", help="finite-difference suite in 64-bit")
    c.add_argument("--scope", choices=("op", "block", "model", "all"), default="all")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--sabotage", action="append", metavar="OP", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ag.NonFiniteError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
