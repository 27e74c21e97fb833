"""Sequential selective-scan recurrence as a single differentiable op.

For channel ``c`` and step ``t``::

    a_t = exp(delta[t, c] * A[c, :])          # decay, in (0, 1) when A < 0
    h_t = a_t * h_{t-1} + delta[t, c] * B[t, :] * x[t, c]
    y[t, c] = <C[t, :], h_t> + D[c] * x[t, c]

The loop is compiled with numba; the backward pass replays it in reverse
using the stored hidden states and decay factors.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from .autograd import ShapeError, Tensor, _make


@njit(cache=True)
def _scan_fwd(x, delta, bs, cs, A, D, y, hs, decay):
    nb, length, nc = x.shape
    ns = A.shape[1]
    h = np.zeros(ns, dtype=x.dtype)
    for b in range(nb):
        for c in range(nc):
            h[:] = 0.0
            dc = D[c]
            for t in range(length):
                d = delta[b, t, c]
                xv = x[b, t, c]
                acc = 0.0
                for n in range(ns):
                    a = np.exp(d * A[c, n])
                    decay[b, c, t, n] = a
                    h[n] = a * h[n] + d * bs[b, t, n] * xv
                    hs[b, c, t, n] = h[n]
                    acc += cs[b, t, n] * h[n]
                y[b, t, c] = acc + dc * xv


@njit(cache=True)
def _scan_bwd(gy, x, delta, bs, cs, A, D, hs, decay, gx, gdelta, gb, gc, gA, gD):
    nb, length, nc = x.shape
    ns = A.shape[1]
    gh = np.zeros(ns, dtype=x.dtype)
    for b in range(nb):
        for c in range(nc):
            gh[:] = 0.0
            for t in range(length - 1, -1, -1):
                g = gy[b, t, c]
                d = delta[b, t, c]
                xv = x[b, t, c]
                gD[c] += g * xv
                gx_acc = g * D[c]
                gd_acc = 0.0
                for n in range(ns):
                    h_t = hs[b, c, t, n]
                    h_prev = hs[b, c, t - 1, n] if t > 0 else 0.0
                    gc[b, t, n] += g * h_t
                    ght = gh[n] + cs[b, t, n] * g
                    a = decay[b, c, t, n]
                    gx_acc += ght * d * bs[b, t, n]
                    gd_acc += ght * (h_prev * a * A[c, n] + bs[b, t, n] * xv)
                    gb[b, t, n] += ght * d * xv
                    gA[c, n] += ght * h_prev * a * d
                    gh[n] = ght * a
                gx[b, t, c] = gx_acc
                gdelta[b, t, c] = gd_acc


def selective_scan(x: Tensor, delta: Tensor, b_seq: Tensor, c_seq: Tensor, A: Tensor, D: Tensor) -> Tensor:
    """Run the recurrence over axis ``-2``.

    Shapes: x, delta ``[(B,) L, C]``; b_seq, c_seq ``[(B,) L, N]``; A ``[C, N]``;
    D ``[C]``. The state starts at zero for every sequence.
    """
    batched = x.ndim == 3
    if x.ndim not in (2, 3):
        raise ShapeError(f"selective_scan: x must be [L,C] or [B,L,C], got {x.shape}")
    if delta.shape != x.shape:
        raise ShapeError(f"selective_scan: delta {delta.shape} != x {x.shape}")
    ns = A.shape[1] if A.ndim == 2 else -1
    lead = x.shape[:-1]
    if b_seq.shape != lead + (ns,) or c_seq.shape != lead + (ns,):
        raise ShapeError(
            f"selective_scan: B {b_seq.shape} / C {c_seq.shape} must be {lead + (ns,)}"
        )
    nc = x.shape[-1]
    if A.shape != (nc, ns) or D.shape != (nc,):
        raise ShapeError(f"selective_scan: A {A.shape} / D {D.shape} do not match {nc} channels")
    dtype = x.dtype

    def prep(t: Tensor) -> np.ndarray:
        arr = np.ascontiguousarray(t.data, dtype=dtype)
        return arr if batched else arr[None]

    xd, dd, bd, cd = prep(x), prep(delta), prep(b_seq), prep(c_seq)
    ad = np.ascontiguousarray(A.data, dtype=dtype)
    Dd = np.ascontiguousarray(D.data, dtype=dtype)
    nb, length = xd.shape[0], xd.shape[1]
    y = np.empty_like(xd)
    hs = np.empty((nb, nc, length, ns), dtype=dtype)
    decay = np.empty_like(hs)
    _scan_fwd(xd, dd, bd, cd, ad, Dd, y, hs, decay)

    def rule(g):
        gy = np.ascontiguousarray(g if batched else g[None], dtype=dtype)
        gx = np.empty_like(xd)
        gdelta = np.empty_like(dd)
        gb = np.zeros_like(bd)
        gc = np.zeros_like(cd)
        gA = np.zeros_like(ad)
        gD = np.zeros_like(Dd)
        _scan_bwd(gy, xd, dd, bd, cd, ad, Dd, hs, decay, gx, gdelta, gb, gc, gA, gD)
        if not batched:
            gx, gdelta, gb, gc = gx[0], gdelta[0], gb[0], gc[0]
        return gx, gdelta, gb, gc, gA, gD

    return _make(y if batched else y[0], (x, delta, b_seq, c_seq, A, D), rule, "selective_scan")
