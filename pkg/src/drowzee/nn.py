"""Layer primitives for the convolutional and state-space branches.

Feature maps are channels-last ``(batch, H, W, C)`` by default; convolution and
batch normalization work channels-first ``(batch, C, H, W)`` and
:func:`permute_layout` converts between the two.
"""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import ShapeError, Tensor, _record, as_tensor, concat, reshape, transpose

BN_MOMENTUM = 0.1
NORM_EPS = 1e-5


# -- parameter containers ---------------------------------------------------

class Module:
    """Minimal parameter container: tensors with ``requires_grad`` are parameters,
    ``numpy`` arrays listed in ``_buffers`` are persistent non-learnable state."""

    training: bool = True
    _buffers: tuple = ()

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in self._buffers:
            yield prefix + key, getattr(self, key)
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: np.array(b, copy=True) for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing, unexpected = expected - set(state), set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr
        for name, buf in buffers.items():
            buf[...] = state[name]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    # PyTorch's default: kaiming_uniform with a=sqrt(5) -> bound 1/sqrt(fan_in)
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = _param(kaiming_uniform(rng, (in_features, out_features), in_features), "weight")
        self.bias = _param(kaiming_uniform(rng, (out_features,), in_features), "bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    """Kernel ``(out_ch, in_ch // groups, kh, kw)`` with bias ``(out_ch,)``."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, groups: int = 1, bias: bool = True,
                 rng: np.random.Generator | None = None):
        if in_ch % groups or out_ch % groups:
            raise ShapeError(f"channels ({in_ch}, {out_ch}) not divisible by groups={groups}")
        rng = rng or np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_in = (in_ch // groups) * kernel_size * kernel_size
        shape = (out_ch, in_ch // groups, kernel_size, kernel_size)
        self.kernel = _param(kaiming_uniform(rng, shape, fan_in), "kernel")
        self.bias = _param(kaiming_uniform(rng, (out_ch,), fan_in), "bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = NORM_EPS, momentum: float = BN_MOMENTUM):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.eps, self.momentum = eps, momentum
        self.gamma = _param(np.ones(channels), "gamma")
        self.beta = _param(np.zeros(channels), "beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self, "train" if self.training else "eval")


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = NORM_EPS):
        self.eps = eps
        self.gamma = _param(np.ones(channels), "gamma")
        self.beta = _param(np.zeros(channels), "beta")

    def forward(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gamma, self.beta, self.eps)


# -- functional ops ---------------------------------------------------------

def linear(x, W, b=None) -> Tensor:
    """Affine map over the last axis: ``x @ W + b`` with ``W`` of shape (in, out)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input features {x.shape} do not match weight {W.shape}")
    lead = x.shape[:-1]
    y = reshape(x, (-1, x.shape[-1])) @ W
    if b is not None:
        y = y + b
    return reshape(y, lead + (W.shape[1],))


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation of channels-first ``(B, C, H, W)`` input with zero padding.

    Computed as one matmul (or, for depthwise, one multiply) per kernel offset on
    a channels-last view of the padded input.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    O, Cg, kh, kw = kernel.shape
    if C % groups or O % groups or Cg != C // groups:
        raise ShapeError(f"conv2d: input channels {C}, kernel {kernel.shape}, groups={groups}")
    s, p, g = stride, padding, groups
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {(H + 2 * p, W + 2 * p)}")
    depthwise = Cg == 1 and O == g
    if not depthwise and g != 1:
        return _grouped_conv2d(x, kernel, bias, s, p, g)
    if s == kh == kw and p == 0 and g == 1:
        return _patch_conv2d(x, kernel, bias)
    xl = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (p, p), (p, p), (0, 0)))   # (B, Hp, Wp, C)
    kd = kernel.data

    def window(arr, i, j):
        return arr[:, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s]

    out = np.zeros((B, Ho, Wo, O))
    for i in range(kh):
        for j in range(kw):
            if depthwise:
                out += window(xl, i, j) * kd[:, 0, i, j]
            else:
                out += window(xl, i, j) @ kd[:, :, i, j].T
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data

    def rule(go):
        gl = go.transpose(0, 2, 3, 1)                                  # (B, Ho, Wo, O)
        gxl = np.zeros_like(xl)
        gk = np.zeros_like(kd)
        g2 = gl.reshape(-1, O)
        for i in range(kh):
            for j in range(kw):
                win = window(xl, i, j)
                if depthwise:
                    gk[:, 0, i, j] = (win * gl).sum(axis=(0, 1, 2))
                    window(gxl, i, j)[...] += gl * kd[:, 0, i, j]
                else:
                    gk[:, :, i, j] = g2.T @ win.reshape(-1, C)
                    window(gxl, i, j)[...] += gl @ kd[:, :, i, j]
        gx = gxl[:, p:p + H, p:p + W].transpose(0, 3, 1, 2)
        grads = [gx, gk]
        if bias is not None:
            grads.append(go.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, kernel) + ((bias,) if bias is not None else ())
    return _record(out.transpose(0, 3, 1, 2), "conv2d", inputs, rule)


def _patch_conv2d(x, kernel, bias) -> Tensor:
    # stride == kernel, no padding: disjoint patches, a single matmul
    B, C, H, W = x.shape
    O, _, k, _ = kernel.shape
    Ho, Wo = H // k, W // k
    xs = x[:, :, :Ho * k, :Wo * k] if (H % k or W % k) else x
    patches = reshape(xs, (B, C, Ho, k, Wo, k))
    patches = reshape(transpose(patches, (0, 2, 4, 1, 3, 5)), (B, Ho, Wo, C * k * k))
    w = transpose(reshape(kernel, (O, C * k * k)), (1, 0))
    out = linear(patches, w, bias)
    return transpose(out, (0, 3, 1, 2))


def _grouped_conv2d(x, kernel, bias, stride, padding, groups) -> Tensor:
    # general grouped case: independent convolutions per channel group
    C, O = x.shape[1], kernel.shape[0]
    ci, co = C // groups, O // groups
    outs = []
    for gi in range(groups):
        b = None if bias is None else as_tensor(bias)[gi * co:(gi + 1) * co]
        outs.append(conv2d(x[:, gi * ci:(gi + 1) * ci], kernel[gi * co:(gi + 1) * co], b,
                           stride, padding, 1))
    return concat(outs, axis=1)


def batchnorm2d(x, p: BatchNorm2d, mode: str = "train") -> Tensor:
    """Per-channel normalization of ``(B, C, H, W)``; train mode updates running stats."""
    x = as_tensor(x)
    C = x.shape[1]
    gamma = reshape(p.gamma, (C, 1, 1))
    beta = reshape(p.beta, (C, 1, 1))
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batchnorm2d in train mode needs a batch of at least 2")
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        xhat = centered * (var + p.eps) ** -0.5
        n = x.size // C
        m = p.momentum
        p.running_mean[...] = (1 - m) * p.running_mean + m * mean.data.reshape(C)
        p.running_var[...] = (1 - m) * p.running_var + m * var.data.reshape(C) * n / max(n - 1, 1)
    elif mode == "eval":
        scale = 1.0 / np.sqrt(p.running_var + p.eps)
        xhat = (x - p.running_mean.reshape(C, 1, 1)) * scale.reshape(C, 1, 1)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    return xhat * gamma + beta


def layernorm(x, gamma, beta, eps: float = NORM_EPS) -> Tensor:
    """Normalize over the last (channel) axis with population variance, then affine."""
    x = as_tensor(x)
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * (var + eps) ** -0.5 * gamma + beta


def channel_split(x) -> tuple[Tensor, Tensor]:
    """Halve the last (channel) axis, preserving order."""
    x = as_tensor(x)
    C = x.shape[-1]
    if C % 2:
        raise ShapeError(f"channel_split needs an even channel count, got {C}")
    h = C // 2
    return x[..., :h], x[..., h:]


def channel_concat(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"channel_concat: spatial mismatch {a.shape} vs {b.shape}")
    return concat([a, b], axis=-1)


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Source channel index for each output channel of a grouped shuffle."""
    if channels % groups:
        raise ShapeError(f"{channels} channels not divisible by {groups} groups")
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def channel_shuffle(x, groups: int = 2) -> Tensor:
    """Reshape channels to (groups, C/groups), transpose, flatten (last axis)."""
    x = as_tensor(x)
    C = x.shape[-1]
    lead = x.shape[:-1]
    if C % groups:
        raise ShapeError(f"channel_shuffle: {C} channels not divisible by {groups} groups")
    y = reshape(x, lead + (groups, C // groups))
    y = transpose(y, tuple(range(len(lead))) + (len(lead) + 1, len(lead)))
    return reshape(y, lead + (C,))


def permute_layout(x, target: str) -> Tensor:
    """Move the channel axis: ``channels_first`` (B,H,W,C)->(B,C,H,W) or back.

    Unbatched 3-D maps are handled the same way ((H,W,C) <-> (C,H,W)).
    """
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"permute_layout expects a 3-D or 4-D map, got {x.shape}")
    off = x.ndim - 3
    lead = tuple(range(off))
    if target == "channels_first":
        return transpose(x, lead + (off + 2, off, off + 1))
    if target == "channels_last":
        return transpose(x, lead + (off + 1, off + 2, off))
    raise ValueError(f"unknown layout {target!r}")


def adaptive_global_avg_pool(x) -> Tensor:
    """Spatial mean of a channels-last map: (..., H, W, C) -> (..., C)."""
    x = as_tensor(x)
    return x.mean(axis=(-3, -2))
