"""Architectural units: dual-conv stream, (shifted-)window attention, the
selective-scan SSM, its four-path 2-D variant and the Mamba fusion block.

Functional forms take explicit parameter modules; the module classes below
just bundle parameters with their forward.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .nn import Conv2d, LayerNorm, Linear, Module, channel_norm, param
from .scan import selective_scan

MASK_VALUE = -1e9

# Scan-path order used everywhere: row-major fwd/bwd, column-major fwd/bwd.
SCAN_PATHS = ("row_fwd", "row_bwd", "col_fwd", "col_bwd")


# ----------------------------------------------------------------------
# Window attention
# ----------------------------------------------------------------------
def _check_windows(h: int, w: int, m: int, shift: int) -> None:
    if h % m or w % m:
        raise ShapeError(f"feature map {h}x{w} is not divisible by window size {m}")
    if shift not in (0, m // 2):
        raise ValueError(f"shift must be 0 or {m // 2}, got {shift}")


def _partition_cl(t: Tensor, m: int, shift: int) -> Tensor:
    b, h, w, c = t.shape
    _check_windows(h, w, m, shift)
    if shift:
        t = ag.roll(t, (-shift, -shift), (1, 2))
    t = ag.reshape(t, (b, h // m, m, w // m, m, c))
    t = ag.permute(t, (0, 1, 3, 2, 4, 5))
    return ag.reshape(t, (b * (h // m) * (w // m), m * m, c))


def _reverse_cl(windows: Tensor, m: int, shift: int, b: int, h: int, w: int) -> Tensor:
    c = windows.shape[-1]
    t = ag.reshape(windows, (b, h // m, w // m, m, m, c))
    t = ag.permute(t, (0, 1, 3, 2, 4, 5))
    t = ag.reshape(t, (b, h, w, c))
    if shift:
        t = ag.roll(t, (shift, shift), (1, 2))
    return t


def window_partition(x: Tensor, m: int, shift: int = 0) -> Tensor:
    """[B, C, H, W] -> [B * (H/M) * (W/M), M*M, C], rolling by -shift first."""
    return _partition_cl(ag.permute(x, (0, 2, 3, 1)), m, shift)


def window_reverse(windows: Tensor, m: int, shift: int, b: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    return ag.permute(_reverse_cl(windows, m, shift, b, h, w), (0, 3, 1, 2))


def shifted_window_mask(h: int, w: int, m: int, shift: int) -> np.ndarray | None:
    """Additive logit mask [nW, M*M, M*M] for the rolled grid.

    Tokens that only share a window because of the cyclic wrap-around get
    ``MASK_VALUE``; everything else gets 0.
    """
    if not shift:
        return None
    labels = np.zeros((h, w), dtype=np.int64)
    cuts = (slice(0, -m), slice(-m, -shift), slice(-shift, None))
    cnt = 0
    for hs in cuts:
        for ws in cuts:
            labels[hs, ws] = cnt
            cnt += 1
    win = labels.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    return np.where(win[:, :, None] != win[:, None, :], MASK_VALUE, 0.0)


def wmsa(windows: Tensor, params: "SwinBlockParams", mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention inside each window.

    ``mask`` is the per-image window mask from :func:`shifted_window_mask`;
    windows are assumed ordered image-major, as produced by the partition.
    """
    nw, t, c = windows.shape
    if c != params.channels:
        raise ShapeError(f"wmsa: windows carry {c} channels, block expects {params.channels}")
    nh = params.num_heads
    dh = c // nh
    qkv = params.qkv(windows)
    qkv = ag.permute(ag.reshape(qkv, (nw, t, 3, nh, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ag.bmm(ag.scale(q, dh ** -0.5), ag.permute(k, (0, 1, 3, 2)))
    if mask is not None:
        per_img = mask.shape[0]
        if nw % per_img:
            raise ShapeError("wmsa: window count is not a multiple of the mask's window count")
        full = np.broadcast_to(mask[None, :, None], (nw // per_img, per_img, nh, t, t)).reshape(nw, nh, t, t)
        scores = ag.add_const(scores, full)
    out = ag.bmm(ag.softmax(scores), v)
    out = ag.reshape(ag.permute(out, (0, 2, 1, 3)), (nw, t, c))
    return params.proj(out)


class SwinBlockParams(Module):
    """One Swin block: LN -> (S)W-MSA -> residual, LN -> MLP(4C) -> residual."""

    def __init__(self, channels: int, window_size: int, num_heads: int, shift: int,
                 rng: np.random.Generator):
        if channels % num_heads:
            raise ValueError(f"channels {channels} not divisible by heads {num_heads}")
        if shift not in (0, window_size // 2):
            raise ValueError(f"shift must be 0 or {window_size // 2}")
        self.channels = channels
        self.window_size = window_size
        self.num_heads = num_heads
        self.shift = shift
        self.norm1 = LayerNorm(channels)
        self.qkv = Linear(channels, 3 * channels, rng)
        self.proj = Linear(channels, channels, rng)
        self.norm2 = LayerNorm(channels)
        self.fc1 = Linear(channels, 4 * channels, rng)
        self.fc2 = Linear(4 * channels, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        return swin_block(x, self)


def swin_block(x: Tensor, params: SwinBlockParams) -> Tensor:
    b, c, h, w = x.shape
    m, s = params.window_size, params.shift
    _check_windows(h, w, m, s)
    t = ag.permute(x, (0, 2, 3, 1))
    windows = _partition_cl(params.norm1(t), m, s)
    attn = wmsa(windows, params, shifted_window_mask(h, w, m, s))
    t = ag.add(t, _reverse_cl(attn, m, s, b, h, w))
    mlp = params.fc2(ag.gelu(params.fc1(params.norm2(t))))
    t = ag.add(t, mlp)
    return ag.permute(t, (0, 3, 1, 2))


# ----------------------------------------------------------------------
# Convolutional stream
# ----------------------------------------------------------------------
class DoubleConvParams(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, mid: int | None = None):
        mid = cout if mid is None else mid
        self.cin = cin
        self.conv1 = Conv2d(cin, mid, 3, rng)
        self.norm1 = LayerNorm(mid)
        self.conv2 = Conv2d(mid, cout, 3, rng)
        self.norm2 = LayerNorm(cout)

    def forward(self, x: Tensor) -> Tensor:
        return double_conv(x, self)


def double_conv(x: Tensor, params: DoubleConvParams) -> Tensor:
    """(conv3x3 -> channel LayerNorm -> ReLU) twice, spatial size preserved."""
    if x.shape[1] != params.cin:
        raise ShapeError(f"double_conv: input has {x.shape[1]} channels, expected {params.cin}")
    y = ag.relu(channel_norm(params.conv1(x), params.norm1))
    return ag.relu(channel_norm(params.conv2(y), params.norm2))


# ----------------------------------------------------------------------
# Selective scan
# ----------------------------------------------------------------------
def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SsmParams(Module):
    """Parameters of one scan path.

    ``proj`` maps each position's features to [delta_pre (C), B (N), C (N)];
    delta = softplus(delta_pre + dt_bias); A = -exp(a_log).
    """

    def __init__(self, channels: int, state: int, rng: np.random.Generator,
                 dt_min: float = 0.01, dt_max: float = 0.1):
        if state < 1:
            raise ValueError("state size must be >= 1")
        self.channels = channels
        self.state = state
        bound = 1.0 / np.sqrt(channels)
        self.proj = param(rng.uniform(-bound, bound, size=(channels, channels + 2 * state)) * 0.1)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=channels))
        self.dt_bias = param(_inv_softplus(dt))
        self.a_log = param(np.tile(np.log(np.arange(1, state + 1, dtype=np.float64)), (channels, 1)))
        self.D = param(np.ones(channels))

    def A(self) -> Tensor:
        return ag.scale(ag.exp(self.a_log), -1.0)

    def project(self, seq: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """[..., L, C] -> (delta [..., L, C], B [..., L, N], C [..., L, N])."""
        c, n = self.channels, self.state
        p = ag.linear(seq, self.proj)
        last = seq.ndim - 1
        delta = ag.softplus(ag.add_bias(ag.slice_axis(p, last, 0, c), self.dt_bias, axis=-1))
        return delta, ag.slice_axis(p, last, c, c + n), ag.slice_axis(p, last, c + n, c + 2 * n)


def selective_scan_1d(x: Tensor, delta: Tensor, b_seq: Tensor, c_seq: Tensor, params: SsmParams) -> Tensor:
    """Scan [L, C] (or batched [B, L, C]) sequences with ``params``' A and D."""
    if not (x.shape[:-1] == delta.shape[:-1] == b_seq.shape[:-1] == c_seq.shape[:-1]):
        raise ShapeError("selective_scan_1d: sequence lengths differ among x, delta, B, C")
    return selective_scan(x, delta, b_seq, c_seq, params.A(), params.D)


def _to_path(t: Tensor, path: str) -> Tensor:
    """[B, H, W, C] grid -> [B, L, C] sequence along ``path``."""
    b, h, w, c = t.shape
    if path.startswith("col"):
        t = ag.permute(t, (0, 2, 1, 3))
    seq = ag.reshape(t, (b, h * w, c))
    return ag.flip(seq, 1) if path.endswith("bwd") else seq


def _from_path(seq: Tensor, path: str, h: int, w: int) -> Tensor:
    b, _, c = seq.shape
    if path.endswith("bwd"):
        seq = ag.flip(seq, 1)
    if path.startswith("col"):
        return ag.permute(ag.reshape(seq, (b, w, h, c)), (0, 2, 1, 3))
    return ag.reshape(seq, (b, h, w, c))


def ss2d_cl(t: Tensor, paths: list[SsmParams]) -> Tensor:
    """Four-path selective scan on a channels-last [B, H, W, C] grid."""
    if len(paths) != len(SCAN_PATHS):
        raise ValueError(f"ss2d needs {len(SCAN_PATHS)} path parameter sets")
    _, h, w, _ = t.shape
    out = None
    for name, prm in zip(SCAN_PATHS, paths):
        seq = _to_path(t, name)
        delta, bs, cs = prm.project(seq)
        y = _from_path(selective_scan_1d(seq, delta, bs, cs, prm), name, h, w)
        out = y if out is None else ag.add(out, y)
    return out


def ss2d(x: Tensor, paths: list[SsmParams]) -> Tensor:
    """[B, C, H, W] -> [B, C, H, W]: sum of the four scan-path outputs."""
    return ag.permute(ss2d_cl(ag.permute(x, (0, 2, 3, 1)), paths), (0, 3, 1, 2))


class MambaBlockParams(Module):
    def __init__(self, channels: int, rng: np.random.Generator, expansion: int = 2, state: int = 8):
        inner = expansion * channels
        self.channels = channels
        self.inner = inner
        self.norm_in = LayerNorm(channels)
        self.in_proj = Linear(channels, inner, rng)
        self.gate_proj = Linear(channels, inner, rng)
        self.dw_weight = param(rng.normal(0.0, np.sqrt(2.0 / 9.0), size=(inner, 3, 3)))
        self.dw_bias = param(np.zeros(inner))
        self.paths = [SsmParams(inner, state, rng) for _ in SCAN_PATHS]
        self.norm_scan = LayerNorm(inner)
        self.out_proj = Linear(inner, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        return mamba_block(x, self)


def mamba_block(x: Tensor, params: MambaBlockParams) -> Tensor:
    """x0 = LN(x); x1 = LN(SS2D(SiLU(DWConv(LP(x0))))); out = LP(LP_g(SiLU(x0)) * x1) + x."""
    if x.shape[1] != params.channels:
        raise ShapeError(f"mamba_block: input has {x.shape[1]} channels, expected {params.channels}")
    t = ag.permute(x, (0, 2, 3, 1))
    x0 = params.norm_in(t)
    u = ag.permute(params.in_proj(x0), (0, 3, 1, 2))
    u = ag.silu(ag.depthwise_conv2d(u, params.dw_weight, params.dw_bias, padding=1))
    x1 = params.norm_scan(ss2d_cl(ag.permute(u, (0, 2, 3, 1)), params.paths))
    gate = params.gate_proj(ag.silu(x0))
    out = ag.add(params.out_proj(ag.mul(gate, x1)), t)
    return ag.permute(out, (0, 3, 1, 2))
