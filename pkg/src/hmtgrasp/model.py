"""Hybrid CNN / window-attention / Mamba grasp network.

Layout for input size S and stage widths (D1, D2, D3)::

    stem        conv3x3 C_in->D1/2, conv3x3/2 ->D1             S/2
    stage i     [DoubleConv | Swin(shift 0) -> Swin(shift M/2)] -> concat 2Di
                -> Mamba x k -> conv1x1 2Di->Di                 (skip e_i)
    downsample  avgpool 2x2 + conv1x1 Di->D(i+1)
    decoder     upsample, concat skip, DoubleConv ->D(i-1)     ... S/2
    heads       upsample to S, four conv1x1 D1->1 (raw outputs)
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .blocks import DoubleConvParams, MambaBlockParams, SwinBlockParams
from .geometry import HeatmapSet
from .nn import Conv2d, Module
from .serialize import FormatError, encode_tensor, read_tensor

WEIGHTS_MAGIC = b"HMTW"
WEIGHTS_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_channels: int = 4
    input_size: int = 224
    stage_widths: tuple[int, int, int] = (48, 96, 192)
    mamba_blocks_per_stage: int = 1
    bottleneck_mamba_blocks: int = 2
    use_cnn_stream: bool = True
    use_transformer_stream: bool = True
    use_mamba_fusion: bool = True
    use_skip: bool = True
    window_size: int = 4
    ssm_state: int = 8
    expansion: int = 2
    heads: int = 4
    upsample: str = "bilinear"
    seed: int = 0

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)

    def validate(self) -> "ModelConfig":
        if self.input_channels not in (1, 3, 4):
            raise ConfigError(f"input_channels must be 1, 3 or 4, got {self.input_channels}")
        if len(self.stage_widths) != 3:
            raise ConfigError("stage_widths must list three widths")
        if any(w <= 0 or w % 2 for w in self.stage_widths):
            raise ConfigError(f"stage widths must be positive and even, got {self.stage_widths}")
        if self.input_size <= 0 or self.input_size % 8:
            raise ConfigError(f"input_size must be a positive multiple of 8, got {self.input_size}")
        if self.input_size % (2 * self.window_size):
            raise ConfigError(f"input_size {self.input_size} not divisible by 2*window_size")
        if not (self.use_cnn_stream or self.use_transformer_stream or self.use_mamba_fusion):
            raise ConfigError("at least one of CNN stream, transformer stream, Mamba fusion must be enabled")
        if self.use_transformer_stream:
            if self.window_size < 2 or self.window_size % 2:
                raise ConfigError("window_size must be even and >= 2")
            bad = [w for w in self.stage_widths if w % self.heads]
            if bad:
                raise ConfigError(f"widths {bad} not divisible by heads={self.heads}")
        if self.ssm_state < 1 or self.expansion < 1:
            raise ConfigError("ssm_state and expansion must be >= 1")
        if self.mamba_blocks_per_stage < 1 or self.bottleneck_mamba_blocks < 1:
            raise ConfigError("Mamba block counts must be >= 1")
        if self.upsample not in ("bilinear", "nearest"):
            raise ConfigError(f"upsample must be 'bilinear' or 'nearest', got {self.upsample!r}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)

    def architecture_hash(self) -> str:
        """SHA-256 over everything that affects parameter layout or forward (seed excluded)."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _upsample(x: Tensor, mode: str) -> Tensor:
    return ag.upsample_bilinear2x(x) if mode == "bilinear" else ag.upsample_nearest2x(x)


class SwinStream(Module):
    """W-MSA block then SW-MSA block; pads H, W up to a multiple of the window."""

    def __init__(self, width: int, cfg: ModelConfig, rng: np.random.Generator):
        m = cfg.window_size
        self.window_size = m
        self.blocks = [SwinBlockParams(width, m, cfg.heads, 0, rng),
                       SwinBlockParams(width, m, cfg.heads, m // 2, rng)]

    def forward(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        m = self.window_size
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = ag.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)))
        for blk in self.blocks:
            x = blk(x)
        if ph or pw:
            x = x[:, :, :h, :w]
        return x


class EncoderStage(Module):
    def __init__(self, width: int, n_mamba: int, cfg: ModelConfig, rng: np.random.Generator):
        self.width = width
        self.cnn = DoubleConvParams(width, width, rng) if cfg.use_cnn_stream else None
        self.swin = SwinStream(width, cfg, rng) if cfg.use_transformer_stream else None
        if cfg.use_mamba_fusion:
            self.mamba = [MambaBlockParams(2 * width, rng, cfg.expansion, cfg.ssm_state) for _ in range(n_mamba)]
            self.fusion = None
        else:
            self.mamba = []
            self.fusion = Conv2d(2 * width, 2 * width, 1, rng)
        self.out_conv = Conv2d(2 * width, width, 1, rng)

    def fused_input(self, x: Tensor) -> Tensor:
        """The 2D-channel map fed to the fusion site."""
        a = self.cnn(x) if self.cnn is not None else None
        b = self.swin(x) if self.swin is not None else None
        if a is not None and b is not None:
            return ag.concat([a, b], axis=1)
        only = a if a is not None else b if b is not None else x
        return ag.concat([only, only], axis=1)

    def forward(self, x: Tensor) -> Tensor:
        f = self.fused_input(x)
        for blk in self.mamba:
            f = blk(f)
        if self.fusion is not None:
            f = self.fusion(f)
        return self.out_conv(f)


class HMTGrasp(Module):
    HEADS = ("quality", "cos2", "sin2", "width")

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        d1, d2, d3 = cfg.stage_widths
        self.stem1 = Conv2d(cfg.input_channels, d1 // 2, 3, rng, stride=1, padding=1)
        self.stem2 = Conv2d(d1 // 2, d1, 3, rng, stride=2, padding=1)
        depths = (cfg.mamba_blocks_per_stage, cfg.mamba_blocks_per_stage, cfg.bottleneck_mamba_blocks)
        self.stages = [EncoderStage(w, k, cfg, rng) for w, k in zip(cfg.stage_widths, depths)]
        self.down = [Conv2d(d1, d2, 1, rng), Conv2d(d2, d3, 1, rng)]
        skip2, skip1 = (d2, d1) if cfg.use_skip else (0, 0)
        self.decoder = [DoubleConvParams(d3 + skip2, d2, rng), DoubleConvParams(d2 + skip1, d1, rng)]
        self.heads = [Conv2d(d1, 1, 1, rng) for _ in self.HEADS]

    def encode(self, image: Tensor) -> list[Tensor]:
        cfg = self.config
        if image.ndim != 4 or image.shape[1] != cfg.input_channels:
            raise ShapeError(f"expected [B, {cfg.input_channels}, S, S] input, got {image.shape}")
        if image.shape[2] != cfg.input_size or image.shape[3] != cfg.input_size:
            raise ShapeError(f"expected spatial size {cfg.input_size}, got {image.shape[2:]}")
        x = ag.relu(self.stem2(ag.relu(self.stem1(image))))
        skips = []
        for i, stage in enumerate(self.stages):
            if i:
                x = self.down[i - 1](ag.avg_pool2x2(x))
            x = stage(x)
            skips.append(x)
        return skips

    def forward(self, image: Tensor) -> HeatmapSet:
        e1, e2, e3 = self.encode(image)
        mode = self.config.upsample
        d = e3
        for blk, skip in zip(self.decoder, (e2, e1)):
            d = _upsample(d, mode)
            if self.config.use_skip:
                d = ag.concat([d, skip], axis=1)
            d = blk(d)
        d = _upsample(d, mode)
        b, _, s, _ = d.shape
        outs = [ag.reshape(head(d), (b, s, s)) for head in self.heads]
        return HeatmapSet(*outs)


def build_model(config: ModelConfig, dtype=np.float32) -> HMTGrasp:
    model = HMTGrasp(config)
    if np.dtype(dtype) != np.float32:
        model.astype(dtype)
    return model


# ----------------------------------------------------------------------
# Weight files
# ----------------------------------------------------------------------
def encode_weights(model: HMTGrasp) -> bytes:
    cfg = model.config
    cfg_json = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    params = model.named_parameters()
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<I", WEIGHTS_VERSION))
    buf.write(bytes.fromhex(cfg.architecture_hash()))
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(encode_tensor(params[name].data))
    return buf.getvalue()


def save_weights(model: HMTGrasp, path: str | Path) -> None:
    Path(path).write_bytes(encode_weights(model))


def _read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError("truncated weight file")
    return raw


def read_weights(path: str | Path) -> tuple[ModelConfig, str, dict[str, np.ndarray]]:
    """Parse a weight file into (config, header hash, named arrays)."""
    fh = io.BytesIO(Path(path).read_bytes())
    if fh.read(4) != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: not a weight file")
    (version,) = struct.unpack("<I", _read_exact(fh, 4))
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    digest = _read_exact(fh, 32).hex()
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    try:
        cfg = ModelConfig.from_dict(json.loads(_read_exact(fh, n)))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: bad config header ({exc})") from exc
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, ln).decode()
        arrays[name] = read_tensor(fh)
    if fh.read(1):
        raise FormatError(f"{path}: trailing bytes")
    if cfg.architecture_hash() != digest:
        raise FormatError(f"{path}: config hash does not match embedded config")
    return cfg, digest, arrays


def _param_diff(expected: dict[str, tuple], found: dict[str, tuple]) -> list[str]:
    lines = []
    for name in sorted(set(expected) | set(found)):
        if name not in found:
            lines.append(f"  missing in file: {name} {expected[name]}")
        elif name not in expected:
            lines.append(f"  unexpected in file: {name} {found[name]}")
        elif expected[name] != found[name]:
            lines.append(f"  shape differs: {name} model {expected[name]} vs file {found[name]}")
    return lines


def load_into(model: HMTGrasp, path: str | Path) -> HMTGrasp:
    """Copy a weight file into ``model``; the architectures must agree exactly."""
    cfg, digest, arrays = read_weights(path)
    params = model.named_parameters()
    diff = _param_diff({k: v.shape for k, v in params.items()}, {k: v.shape for k, v in arrays.items()})
    if digest != model.config.architecture_hash() or diff:
        detail = "\n".join(diff) if diff else "  (same parameter layout, different forward settings)"
        raise ConfigError(f"{path}: config mismatch between file and model\n{detail}")
    for name, p in params.items():
        p.data = arrays[name].copy()
        p.grad = None
    return model


def load_weights(path: str | Path) -> HMTGrasp:
    cfg, _, _ = read_weights(path)
    model = HMTGrasp(cfg)
    return load_into(model, path)
