"""Patch embedding, SS-Conv-SSM blocks, patch merging and the classifier head."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import binfmt
from .nn import (BatchNorm2d, Conv2d, LayerNorm, Linear, Module, adaptive_global_avg_pool,
                 channel_concat, channel_shuffle, channel_split, permute_layout)
from .ss2d import SS2D
from .tensor import ShapeError, Tensor, as_tensor, concat, pad, reshape

CHECKPOINT_MAGIC = b"DZGMCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_height: int = 17
    input_width: int = 200
    patch_size: int = 4
    base_dim: int = 32
    stage_depths: tuple = (1,)
    state_size: int = 16
    num_classes: int = 2
    padding_policy: str = "zero_bottom"
    d_skip: bool = True
    dt_rank: int = 0            # 0 -> ceil(d_inner / 16)
    ssm_expand: int = 1
    init_seed: int = 0

    def __post_init__(self):
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        self.validate()

    def validate(self) -> None:
        if self.input_height < 1 or self.input_width < 1 or self.patch_size < 1:
            raise ValueError("input dimensions and patch size must be positive")
        if self.base_dim < 2 or self.base_dim % 2:
            raise ValueError(f"base_dim must be even (channel split), got {self.base_dim}")
        if not self.stage_depths or any(d < 0 for d in self.stage_depths):
            raise ValueError(f"stage_depths must be a non-empty list of counts, got {self.stage_depths}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.state_size < 1 or self.ssm_expand < 1 or self.dt_rank < 0:
            raise ValueError("state_size and ssm_expand must be positive, dt_rank non-negative")
        if self.padding_policy not in ("zero_bottom", "zero_symmetric"):
            raise ValueError(f"unknown padding_policy {self.padding_policy!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_depths"] = list(self.stage_depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def padded_size(self) -> tuple[int, int]:
        p = self.patch_size
        return -(-self.input_height // p) * p, -(-self.input_width // p) * p


class PatchEmbed(Module):
    """Non-overlapping p x p patches projected to C features (a stride-p convolution)."""

    def __init__(self, dim: int, patch_size: int = 4, padding_policy: str = "zero_bottom",
                 rng=None):
        self.patch_size = patch_size
        self.padding_policy = padding_policy
        self.proj = Conv2d(1, dim, patch_size, stride=patch_size, rng=rng)

    def pad_input(self, x: Tensor) -> Tensor:
        _, H, W, _ = x.shape
        p = self.patch_size
        ph, pw = (-H) % p, (-W) % p
        if not ph and not pw:
            return x
        if self.padding_policy == "zero_symmetric":
            rows, cols = (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)
        else:
            rows, cols = (0, ph), (0, pw)
        return pad(x, [(0, 0), rows, cols, (0, 0)])

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if min(x.shape[1:3]) < 1:
            raise ShapeError(f"patch_embed: non-positive spatial dims {x.shape}")
        x = self.pad_input(x)
        y = self.proj(permute_layout(x, "channels_first"))
        return permute_layout(y, "channels_last")


class SSConvSSMBlock(Module):
    """Dual-branch block: convolutional half and SS2D half, concatenated, shuffled, residual."""

    def __init__(self, dim: int, state_size: int = 16, dt_rank: int = 0, expand: int = 1,
                 d_skip: bool = True, rng=None):
        if dim % 2:
            raise ShapeError(f"SS-Conv-SSM needs an even channel count, got {dim}")
        rng = rng or np.random.default_rng(0)
        half = dim // 2
        inner = half * expand
        # conv branch
        self.bn1 = BatchNorm2d(half)
        self.conv1 = Conv2d(half, half, 3, padding=1, rng=rng)
        self.bn2 = BatchNorm2d(half)
        self.conv2 = Conv2d(half, half, 3, padding=1, rng=rng)
        self.bn3 = BatchNorm2d(half)
        self.pwconv = Conv2d(half, half, 1, rng=rng)
        # ssm branch
        self.ln1 = LayerNorm(half)
        self.in_proj = Linear(half, inner, rng=rng)
        self.dwconv = Conv2d(inner, inner, 3, padding=1, groups=inner, rng=rng)
        self.ss2d = SS2D(inner, state_size, dt_rank or None, use_skip=d_skip, rng=rng)
        self.ln2 = LayerNorm(inner)
        self.gate_proj = Linear(half, inner, rng=rng)
        self.out_proj = Linear(inner, half, rng=rng)

    def conv_branch(self, x1: Tensor) -> Tensor:
        h = permute_layout(x1, "channels_first")
        h = self.bn1(h)
        h = self.bn2(self.conv1(h)).relu()
        h = self.bn3(self.conv2(h)).relu()
        h = self.pwconv(h).relu()
        return permute_layout(h, "channels_last")

    def ssm_branch(self, x2: Tensor) -> Tensor:
        xn = self.ln1(x2)
        h = self.in_proj(xn)
        h = permute_layout(self.dwconv(permute_layout(h, "channels_first")), "channels_last")
        h = self.ln2(self.ss2d(h.silu()))
        gate = self.gate_proj(xn).silu()
        return self.out_proj(h * gate)

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        x1, x2 = channel_split(x)
        mixed = channel_shuffle(channel_concat(self.conv_branch(x1), self.ssm_branch(x2)), 2)
        return x + mixed


class PatchMerging(Module):
    """2x2 neighbourhood concat (4C) -> LayerNorm -> linear to 2C; odd H/W zero-padded."""

    def __init__(self, dim: int, rng=None):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, bias=False, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        _, H, W, _ = x.shape
        if H % 2 or W % 2:
            x = pad(x, [(0, 0), (0, H % 2), (0, W % 2), (0, 0)])
        parts = [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]]
        return self.reduction(self.norm(concat(parts, axis=-1)))


class ClassifierHead(Module):
    def __init__(self, dim: int, num_classes: int, rng=None):
        self.fc = Linear(dim, num_classes, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(adaptive_global_avg_pool(x))


class DrowzeeMamba(Module):
    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.init_seed)
        self.config = cfg
        dim = cfg.base_dim
        self.patch_embed = PatchEmbed(dim, cfg.patch_size, cfg.padding_policy, rng=rng)
        self.stages = []
        self.mergers = []
        for i, depth in enumerate(cfg.stage_depths):
            self.stages.append(_Stage([SSConvSSMBlock(dim, cfg.state_size, cfg.dt_rank,
                                                      cfg.ssm_expand, cfg.d_skip, rng=rng)
                                       for _ in range(depth)]))
            if i < len(cfg.stage_depths) - 1:
                self.mergers.append(PatchMerging(dim, rng=rng))
                dim *= 2
        self.head = ClassifierHead(dim, cfg.num_classes, rng=rng)

    def forward(self, x, trace: list | None = None) -> Tensor:
        """Logits (batch, num_classes) for input (batch, H, W) or (batch, H, W, 1)."""
        x = as_tensor(x)
        if x.ndim == 3:
            x = reshape(x, x.shape + (1,))
        if x.ndim != 4 or x.shape[-1] != 1:
            raise ShapeError(f"model input must be (batch, H, W[, 1]), got {x.shape}")
        h = self.patch_embed(x)
        if trace is not None:
            trace.append(("patch_embed", h.shape[1:]))
        for i, stage in enumerate(self.stages):
            h = stage(h)
            if trace is not None:
                trace.append((f"stage{i + 1}", h.shape[1:]))
            if i < len(self.mergers):
                h = self.mergers[i](h)
                if trace is not None:
                    trace.append((f"merge{i + 1}", h.shape[1:]))
        logits = self.head(h)
        if trace is not None:
            trace.append(("logits", logits.shape[1:]))
        return logits


class _Stage(Module):
    def __init__(self, blocks: list):
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


def build_model(cfg: ModelConfig | None = None) -> DrowzeeMamba:
    """Default: one stage with one SS-Conv-SSM block at 32 channels, no merging."""
    cfg = cfg or ModelConfig()
    cfg.validate()
    return DrowzeeMamba(cfg)


def count_params(m: Module) -> int:
    return int(sum(p.size for p in m.parameters()))


# -- checkpoints --------------------------------------------------------------

def checkpoint_bytes(model: DrowzeeMamba) -> bytes:
    """Serialize config + every parameter and buffer.

    Layout: magic, u32 version, u32 config length, config JSON (UTF-8, sorted
    keys), u32 tensor count, then per tensor: u32 name length, name, u32 rank,
    u64 extents, float64 little-endian data.
    """
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    state = model.state_dict()
    out = [CHECKPOINT_MAGIC, binfmt.u32(CHECKPOINT_VERSION), binfmt.u32(len(cfg)), cfg,
           binfmt.u32(len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name], dtype="<f8")
        nb = name.encode()
        out += [binfmt.u32(len(nb)), nb, binfmt.u32(arr.ndim)]
        out += [binfmt.u64(n) for n in arr.shape]
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def save_checkpoint(model: DrowzeeMamba, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def parse_checkpoint(buf: bytes) -> tuple[ModelConfig, dict]:
    r = binfmt.Reader(buf, "checkpoint")
    r.expect_magic(CHECKPOINT_MAGIC)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise binfmt.UnsupportedVersionError(f"checkpoint: version {version} not supported")
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(r.u32()).decode()))
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, binfmt.FormatError):
            raise
        raise binfmt.FormatError(f"checkpoint: invalid config record ({exc})") from exc
    state = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        shape = tuple(r.u64() for _ in range(r.u32()))
        state[name] = r.array("<f8", int(np.prod(shape))).reshape(shape)
    r.expect_end()
    return cfg, state


def load_checkpoint(path) -> DrowzeeMamba:
    cfg, state = parse_checkpoint(Path(path).read_bytes())
    model = build_model(cfg)
    try:
        model.load_state_dict(state)
    except (KeyError, ShapeError) as exc:
        raise binfmt.ExtentMismatchError(f"checkpoint: {exc}") from exc
    return model
