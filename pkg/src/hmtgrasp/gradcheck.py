"""Finite-difference suite over ops, blocks and a tiny model (64-bit)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from . import blocks
from .autograd import Tensor, finite_diff_check
from .model import ModelConfig, build_model
from .scan import selective_scan

OP_TOL = 1e-6
BLOCK_TOL = 1e-5
MODEL_TOL = 1e-5
SCOPES = ("op", "block", "model")


@dataclass
class CheckResult:
    scope: str
    name: str
    seed: int
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tol)


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64))


def _weighted(fn: Callable[[Tensor], Tensor], rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    # random weights keep every gradient entry away from structural zeros
    w = _t(rng.normal(size=shape))
    return lambda v: ag.sum_all(ag.mul(fn(v), w))


def _check(fn, rng, x_shape, out_shape=None, x=None) -> float:
    x = rng.normal(size=x_shape) if x is None else x
    return finite_diff_check(_weighted(fn, rng, out_shape or x_shape), _t(x))


def _f64(module):
    return module.astype(np.float64)


# ----------------------------------------------------------------------
# op cases: name -> seed -> max relative error
# ----------------------------------------------------------------------
def _op_cases() -> dict[str, Callable[[np.random.Generator], float]]:
    def binary(op):
        def run(rng):
            other = _t(rng.normal(size=(3, 4)))
            return max(_check(lambda v: op(v, other), rng, (3, 4)),
                       _check(lambda v: op(other, v), rng, (3, 4)))
        return run

    def conv(stride):
        def run(rng):
            w = _t(rng.normal(size=(3, 2, 3, 3)))
            b = _t(rng.normal(size=3))
            x = rng.normal(size=(2, 2, 5, 5))
            out = ag.conv2d(_t(x), w, b, stride=stride, padding=1).shape
            e1 = _check(lambda v: ag.conv2d(v, w, b, stride=stride, padding=1), rng, x.shape, out, x)
            e2 = _check(lambda v: ag.conv2d(_t(x), v, b, stride=stride, padding=1), rng, w.shape, out, w.data)
            return max(e1, e2)
        return run

    def layer_norm(rng):
        g, b = _t(rng.normal(size=5)), _t(rng.normal(size=5))
        x = rng.normal(size=(3, 5))
        return max(_check(lambda v: ag.layer_norm(v, g, b), rng, (3, 5)),
                   _check(lambda v: ag.layer_norm(_t(x), v, b), rng, (5,), (3, 5), g.data))

    def matmul(rng):
        a, b = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=(4, 2)))
        return max(_check(lambda v: ag.matmul(v, b), rng, (3, 4), (3, 2)),
                   _check(lambda v: ag.matmul(a, v), rng, (4, 2), (3, 2)))

    def bmm(rng):
        b = _t(rng.normal(size=(2, 4, 3)))
        return _check(lambda v: ag.bmm(v, b), rng, (2, 5, 4), (2, 5, 3))

    def linear(rng):
        w, b = _t(rng.normal(size=(4, 3))), _t(rng.normal(size=3))
        return _check(lambda v: ag.linear(v, w, b), rng, (2, 5, 4), (2, 5, 3))

    def depthwise(rng):
        w, b = _t(rng.normal(size=(3, 3, 3))), _t(rng.normal(size=3))
        x = rng.normal(size=(1, 3, 4, 5))
        return max(_check(lambda v: ag.depthwise_conv2d(v, w, b, 1), rng, x.shape, x=x),
                   _check(lambda v: ag.depthwise_conv2d(_t(x), v, b, 1), rng, (3, 3, 3), x.shape, w.data))

    def unary(op, shape=(3, 4)):
        return lambda rng: _check(op, rng, shape)

    def scan(rng):
        L, N, C = 5, 2, 3
        args = [rng.normal(size=(L, C)), rng.uniform(0.05, 1.0, size=(L, C)), rng.normal(size=(L, N)),
                rng.normal(size=(L, N)), -rng.uniform(0.2, 2.0, size=(C, N)), rng.normal(size=C)]
        worst = 0.0
        for i in range(len(args)):
            def f(v, i=i):
                ins = [_t(a) for a in args]
                ins[i] = v
                return selective_scan(*ins)
            worst = max(worst, _check(f, rng, args[i].shape, (L, C), args[i]))
        return worst

    return {
        "add": binary(ag.add),
        "mul": binary(ag.mul),
        "sub": binary(ag.sub),
        "exp": unary(ag.exp),
        "sigmoid": unary(ag.sigmoid),
        "silu": unary(ag.silu),
        "softplus": unary(ag.softplus),
        "gelu": unary(ag.gelu),
        "relu": unary(ag.relu),
        "softmax": unary(ag.softmax),
        "smooth_l1": unary(ag.smooth_l1),
        "layer_norm": layer_norm,
        "matmul": matmul,
        "bmm": bmm,
        "linear": linear,
        "conv2d": conv(1),
        "conv2d_stride2": conv(2),
        "depthwise_conv2d": depthwise,
        "avg_pool2x2": lambda rng: _check(ag.avg_pool2x2, rng, (1, 2, 4, 6), (1, 2, 2, 3)),
        "upsample_bilinear2x": lambda rng: _check(ag.upsample_bilinear2x, rng, (1, 2, 3, 4), (1, 2, 6, 8)),
        "upsample_nearest2x": lambda rng: _check(ag.upsample_nearest2x, rng, (1, 2, 3, 4), (1, 2, 6, 8)),
        "roll": unary(lambda v: ag.roll(v, (1, -2), (0, 1))),
        "selective_scan": scan,
    }


# ----------------------------------------------------------------------
# block cases
# ----------------------------------------------------------------------
def _paths(c: int, n: int, rng: np.random.Generator) -> list[blocks.SsmParams]:
    out = []
    for _ in blocks.SCAN_PATHS:
        p = _f64(blocks.SsmParams(c, n, rng))
        p.proj.data[:] = rng.normal(scale=0.5, size=p.proj.shape)
        p.D.data[:] = rng.normal(size=c)
        p.a_log.data[:] = rng.normal(scale=0.5, size=p.a_log.shape)
        out.append(p)
    return out


def _block_cases() -> dict[str, Callable[[np.random.Generator], float]]:
    def wmsa(rng):
        worst = 0.0
        for shift in (0, 2):
            p = _f64(blocks.SwinBlockParams(4, 4, 2, shift, rng))
            mask = blocks.shifted_window_mask(8, 4, 4, shift)
            worst = max(worst, _check(lambda v: blocks.wmsa(v, p, mask), rng, (2, 16, 4)))
        return worst

    def swin(rng):
        worst = 0.0
        for shift in (0, 2):
            p = _f64(blocks.SwinBlockParams(4, 4, 2, shift, rng))
            worst = max(worst, _check(lambda v: blocks.swin_block(v, p), rng, (1, 4, 4, 8)))
        return worst

    def double_conv(rng):
        p = _f64(blocks.DoubleConvParams(2, 3, rng))
        return _check(lambda v: blocks.double_conv(v, p), rng, (1, 2, 4, 4), (1, 3, 4, 4))

    def scan_1d(rng):
        p = _f64(blocks.SsmParams(3, 2, rng))
        p.D.data[:] = rng.normal(size=3)
        delta, bs, cs = (_t(rng.uniform(0.05, 1.0, size=(6, 3))), _t(rng.normal(size=(6, 2))),
                         _t(rng.normal(size=(6, 2))))
        e1 = _check(lambda v: blocks.selective_scan_1d(v, delta, bs, cs, p), rng, (6, 3))
        x = _t(rng.normal(size=(6, 3)))

        def via_a_log(v):
            p.a_log = v
            return blocks.selective_scan_1d(x, delta, bs, cs, p)
        e2 = _check(via_a_log, rng, (3, 2), (6, 3), rng.normal(scale=0.5, size=(3, 2)))
        return max(e1, e2)

    def ss2d(rng):
        paths = _paths(2, 2, rng)
        return _check(lambda v: blocks.ss2d(v, paths), rng, (1, 2, 3, 2))

    def mamba(rng):
        p = _f64(blocks.MambaBlockParams(4, rng, expansion=1, state=2))
        return _check(lambda v: blocks.mamba_block(v, p), rng, (1, 4, 3, 3))

    return {
        "wmsa": wmsa,
        "swin_block": swin,
        "double_conv": double_conv,
        "selective_scan_1d": scan_1d,
        "ss2d": ss2d,
        "mamba_block": mamba,
    }


# ----------------------------------------------------------------------
# model case
# ----------------------------------------------------------------------
TINY_CHECK_CONFIG = dict(input_size=16, stage_widths=(4, 8, 8), heads=2, window_size=2, ssm_state=2, expansion=1)


def model_check(seed: int, n_params: int = 10, n_pixels: int = 10, step: float = 1e-6,
                min_scale: float = 1e-3) -> float:
    """Central differences on random parameter entries and input pixels.

    Entries are drawn among those whose gradient is at least ``min_scale``
    times the largest one: smaller entries sit below the round-off floor of
    a two-sided difference on the summed loss, and block-level checks cover
    them with conditioned inputs.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(seed=seed, **TINY_CHECK_CONFIG)
    model = build_model(cfg, np.float64)
    s = cfg.input_size
    weights = [_t(rng.normal(size=(1, s, s))) for _ in range(4)]
    image = Tensor(rng.uniform(0, 1, size=(1, cfg.input_channels, s, s)), requires_grad=True)

    def loss() -> Tensor:
        total = None
        for m, w in zip(model(image).maps(), weights):
            term = ag.sum_all(ag.mul(m, w))
            total = term if total is None else ag.add(total, term)
        return total

    ag.backward(loss())
    params = model.named_parameters()
    scale = max(float(np.max(np.abs(p.grad))) for p in params.values())

    def pick(tensors: dict[str, Tensor], n: int) -> list[tuple[Tensor, tuple]]:
        pool = [(t, idx) for _, t in sorted(tensors.items())
                for idx in zip(*np.nonzero(np.abs(t.grad) >= min_scale * scale))]
        chosen = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
        return [pool[i] for i in chosen]

    worst = 0.0
    for t, idx in pick(params, n_params) + pick({"image": image}, n_pixels):
        analytic = float(t.grad[idx])
        orig = t.data[idx]
        with ag.no_grad():
            t.data[idx] = orig + step
            fp = loss().item()
            t.data[idx] = orig - step
            fm = loss().item()
        t.data[idx] = orig
        numeric = (fp - fm) / (2 * step)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    return worst


def run_suite(scope: str = "all", seeds=range(5), sabotaged: tuple[str, ...] = ()) -> list[CheckResult]:
    if scope not in SCOPES + ("all",):
        raise ValueError(f"unknown scope {scope!r}")
    scopes = SCOPES if scope == "all" else (scope,)
    results = []
    with ag.sabotage(*sabotaged):
        for sc in scopes:
            if sc == "model":
                for seed in seeds:
                    results.append(CheckResult("model", "tiny_model", seed, model_check(seed), MODEL_TOL))
                continue
            cases, tol = (_op_cases(), OP_TOL) if sc == "op" else (_block_cases(), BLOCK_TOL)
            for name, fn in cases.items():
                for seed in seeds:
                    try:
                        err = fn(np.random.default_rng(seed))
                    except ag.NonFiniteError:
                        err = float("inf")
                    results.append(CheckResult(sc, name, seed, err, tol))
    return results


def format_report(results: list[CheckResult]) -> str:
    """One row per (scope, name) with the max error over seeds."""
    rows: dict[tuple[str, str], list[CheckResult]] = {}
    for r in results:
        rows.setdefault((r.scope, r.name), []).append(r)
    lines = [f"{'scope':<6} {'check':<22} {'seeds':>5} {'max_rel_err':>12} {'tol':>8}  status"]
    for (scope, name), rs in rows.items():
        err = max(r.error for r in rs)
        ok = all(r.passed for r in rs)
        lines.append(f"{scope:<6} {name:<22} {len(rs):>5} {err:>12.3e} {rs[0].tol:>8.0e}  {'PASS' if ok else 'FAIL'}")
    return "\n".join(lines) + "\n"
