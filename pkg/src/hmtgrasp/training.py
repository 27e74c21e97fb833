"""Heatmap loss, Adam, the training loop and k-fold cross-validation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import NonFiniteError, Tensor
from .data import Sample, augment, default_max_width, rasterize_targets, split_folds
from .geometry import HeatmapSet, match_grasp, synthesize_grasps
from .model import HMTGrasp, ModelConfig, build_model

log = logging.getLogger(__name__)

# Optimizer settings per dataset profile: (learning rate, epochs).
PROFILES = {
    "cornell": (2e-4, 100),
    "jacquard": (1e-3, 200),
    "ocid": (1e-3, 80),
    "synthetic": (1e-3, 100),
}


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 8
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss: str = "mse"
    augment: bool = True
    holdout: float = 0.0
    eval_every: int = 1
    max_width_px: float | None = None
    smooth_sigma: float = 2.0
    min_peak_dist: float = 5.0

    def validate(self) -> "TrainConfig":
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.loss not in ("mse", "smooth_l1"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0.0 <= self.holdout < 1.0:
            raise ValueError("holdout must be in [0, 1)")
        return self

    @classmethod
    def for_profile(cls, profile: str, **overrides) -> "TrainConfig":
        lr, epochs = PROFILES[profile]
        return cls(learning_rate=lr, epochs=epochs, **overrides)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


class TrainingAborted(RuntimeError):
    def __init__(self, epoch: int, batch: int, reason: str):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"epoch {epoch} batch {batch}: {reason}")


# ----------------------------------------------------------------------
# Loss
# ----------------------------------------------------------------------
def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def heatmap_loss(pred: HeatmapSet, target: HeatmapSet, kind: str = "mse") -> Tensor:
    """Sum over the four maps of the per-map mean error."""
    total = None
    for p, t in zip(pred.maps(), target.maps()):
        t = _as_tensor(t, p.dtype)
        if p.shape != t.shape:
            raise ag.ShapeError(f"heatmap_loss: prediction {p.shape} vs target {t.shape}")
        diff = ag.sub(p, t)
        per = ag.mean_all(ag.mul(diff, diff) if kind == "mse" else ag.smooth_l1(diff))
        total = per if total is None else ag.add(total, per)
    return total


# ----------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------
@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState,
              config: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    lr = config.learning_rate
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.dtype, copy=False)
    return state


class Adam:
    def __init__(self, params: dict[str, Tensor], config: TrainConfig):
        self.params = params
        self.config = config
        self.state = AdamState()

    def step(self) -> None:
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state, self.config)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ----------------------------------------------------------------------
# Batching and evaluation
# ----------------------------------------------------------------------
def stack_batch(samples: Sequence[Sample], max_width_px: float, dtype=np.float32) -> tuple[Tensor, HeatmapSet]:
    images = Tensor(np.stack([s.image for s in samples]).astype(dtype, copy=False))
    targets = [rasterize_targets(s.rects, s.size, max_width_px) for s in samples]
    maps = HeatmapSet(*(np.stack([getattr(t, f) for t in targets]).astype(dtype, copy=False)
                        for f in ("quality", "cos2", "sin2", "width")))
    return images, maps


def predict_maps(model: HMTGrasp, samples: Sequence[Sample], batch_size: int = 8) -> list[HeatmapSet]:
    dtype = model.parameters()[0].dtype
    out = []
    with ag.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            images = Tensor(np.stack([s.image for s in chunk]).astype(dtype, copy=False))
            maps = model(images)
            out.extend(maps.image(j) for j in range(len(chunk)))
    return out


@dataclass
class EvalResult:
    accuracy: float
    n: int
    angle_failures: int
    iou_failures: int
    mean_time_s: float
    per_sample: list[bool] = field(default_factory=list)


def evaluate(model: HMTGrasp | None, samples: Sequence[Sample], config: TrainConfig,
             oracle: bool = False) -> EvalResult:
    """Top-1 rectangle-metric accuracy.

    ``oracle`` decodes the rasterized ground truth instead of running the model.
    """
    if not samples:
        return EvalResult(float("nan"), 0, 0, 0, 0.0)
    size = samples[0].size
    max_w = config.max_width_px or default_max_width(size)
    t0 = time.perf_counter()
    if oracle:
        maps = [rasterize_targets(s.rects, s.size, max_w) for s in samples]
    else:
        maps = predict_maps(model, samples, config.batch_size)
    elapsed = time.perf_counter() - t0
    ok, angle_fail, iou_fail = [], 0, 0
    for s, m in zip(samples, maps):
        g = synthesize_grasps(m, k=1, smooth_sigma=config.smooth_sigma,
                              min_peak_dist=config.min_peak_dist, max_width_px=max_w)[0]
        success, why = match_grasp(g, s.rects)
        ok.append(success)
        angle_fail += why == "angle"
        iou_fail += why == "iou"
    return EvalResult(float(np.mean(ok)), len(ok), angle_fail, iou_fail, elapsed / len(samples), ok)


# ----------------------------------------------------------------------
# Training loop
# ----------------------------------------------------------------------
@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float

    def csv(self) -> str:
        return f"{self.epoch},{self.loss:.9g},{self.accuracy:.9g}"


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    initial_loss: float = float("nan")

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def to_csv(self) -> str:
        return "epoch,loss,accuracy\n" + "".join(r.csv() + "\n" for r in self.records)


Callback = Callable[[EpochRecord, HMTGrasp], None]


def train(model: HMTGrasp, dataset: Sequence[Sample], config: TrainConfig,
          callbacks: Sequence[Callback] = (), eval_samples: Sequence[Sample] | None = None) -> History:
    """Adam on the summed heatmap MSE.

    Accuracy is measured on ``eval_samples``, else on a ``holdout`` fraction
    split off ``dataset``, else on the training samples themselves.
    """
    config.validate()
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    samples = list(dataset)
    if eval_samples is None and config.holdout > 0:
        perm = rng.permutation(len(samples))
        n_hold = max(1, int(round(config.holdout * len(samples))))
        if n_hold >= len(samples):
            raise ValueError("holdout leaves no training samples")
        eval_samples = [samples[i] for i in perm[:n_hold]]
        samples = [samples[i] for i in perm[n_hold:]]
    elif eval_samples is None:
        eval_samples = samples
    size = samples[0].size
    max_w = config.max_width_px or default_max_width(size)
    dtype = model.parameters()[0].dtype
    params = model.named_parameters()
    opt = Adam(params, config)
    history = History()
    cached = None if config.augment else {}
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        losses = []
        for bi in range(0, len(order), config.batch_size):
            idx = order[bi:bi + config.batch_size]
            batch_no = bi // config.batch_size
            if config.augment:
                chunk = [augment(samples[i], seed=config.seed * 1_000_003 + epoch * 10_007 + int(i))
                         for i in idx]
                images, targets = stack_batch(chunk, max_w, dtype)
            else:
                key = tuple(int(i) for i in idx)
                if key not in cached:
                    cached[key] = stack_batch([samples[i] for i in idx], max_w, dtype)
                images, targets = cached[key]
            loss = heatmap_loss(model(images), targets, config.loss)
            if not loss.is_finite():
                raise TrainingAborted(epoch, batch_no, "non-finite loss")
            opt.zero_grad()
            ag.backward(loss)
            for name, p in params.items():
                if p.grad is not None and not np.isfinite(p.grad).all():
                    raise TrainingAborted(epoch, batch_no, f"non-finite gradient in {name}")
            opt.step()
            losses.append(loss.item())
        epoch_loss = float(np.mean(losses))
        if epoch == 0:
            history.initial_loss = losses[0]
        last = epoch == config.epochs - 1
        if config.eval_every and (epoch % config.eval_every == 0 or last):
            acc = evaluate(model, eval_samples, config).accuracy
        else:
            acc = float("nan")
        rec = EpochRecord(epoch, epoch_loss, acc)
        history.records.append(rec)
        log.info("epoch %d loss %.6g accuracy %.4g", epoch, epoch_loss, acc)
        for cb in callbacks:
            cb(rec, model)
    return history


@dataclass
class CrossValResult:
    results: list[EvalResult]
    folds: list[tuple[list[str], list[str]]]

    @property
    def fold_accuracies(self) -> list[float]:
        return [r.accuracy for r in self.results]

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracies))


def _run_fold(train_set: list[Sample], test_set: list[Sample], model_config: ModelConfig,
              config: TrainConfig, callbacks: Sequence[Callback] = ()) -> EvalResult:
    model = build_model(model_config)
    train(model, train_set, config, callbacks, eval_samples=test_set)
    return evaluate(model, test_set, config)


def cross_validate(dataset: Sequence[Sample], k: int, mode: str, model_config: ModelConfig,
                   config: TrainConfig, callbacks: Sequence[Callback] = (), workers: int = 1) -> CrossValResult:
    """Fresh model per fold; top-1 accuracy on each fold's test split.

    ``workers > 1`` trains folds in separate processes (callbacks are then
    not invoked). Results do not depend on the worker count.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    by_id = {s.source_id: s for s in dataset}
    if len(by_id) != len(dataset):
        raise ValueError("sample source ids must be unique")
    ids = [s.source_id for s in dataset]
    objs = [s.object_id for s in dataset] if mode == "object-wise" else None
    folds = split_folds(ids, k, mode, config.seed, objs)
    jobs = [([by_id[i] for i in tr], [by_id[i] for i in te]) for tr, te in folds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(workers, k)) as pool:
            futures = [pool.submit(_run_fold, tr, te, model_config, config) for tr, te in jobs]
            results = [f.result() for f in futures]
    else:
        results = [_run_fold(tr, te, model_config, config, callbacks) for tr, te in jobs]
    for f, r in enumerate(results):
        log.info("fold %d accuracy %.4g", f, r.accuracy)
    return CrossValResult(results, folds)
