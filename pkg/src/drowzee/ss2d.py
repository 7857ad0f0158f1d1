"""Four-direction cross scan over a 2-D feature map.

Traversal orders over an H x W grid (positions p = i * W + j):

    0  row-major, top-left -> bottom-right
    1  row-major reversed, bottom-right -> top-left
    2  column-major, top-left -> bottom-right down the columns
    3  column-major reversed, bottom-right -> top-left

These are the VMamba cross-scan orders; each starts in a different corner
sense of the sweep and together they give every position a causal path from
all four quadrants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Module
from .ssm import S6Weights, init_s6_weights, s6_selective_scan
from .tensor import ShapeError, Tensor, _record, as_tensor, reshape

NUM_DIRECTIONS = 4


def scan_orders(H: int, W: int) -> np.ndarray:
    """(4, H*W) array; row k lists flat positions in traversal order of direction k."""
    if H < 1 or W < 1:
        raise ShapeError(f"scan_orders: invalid grid {H}x{W}")
    rm = np.arange(H * W)
    cm = rm.reshape(H, W).T.reshape(-1)
    return np.stack([rm, rm[::-1], cm, cm[::-1]])


def inverse_orders(orders: np.ndarray) -> np.ndarray:
    return np.argsort(orders, axis=1)


@dataclass
class DirectionalSequences:
    """Stacked per-direction sequences ``seqs`` of shape (batch, 4, H*W, C)."""

    seqs: Tensor
    H: int
    W: int

    def __getitem__(self, k: int) -> Tensor:
        return self.seqs[:, k]

    @property
    def length(self) -> int:
        return self.seqs.shape[2]


def cross_scan_expand(x) -> DirectionalSequences:
    """Unfold a (batch, H, W, C) map (or unbatched (H, W, C)) into four sequences."""
    x = as_tensor(x)
    if x.ndim == 3:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ShapeError(f"cross_scan_expand expects (B, H, W, C), got {x.shape}")
    B, H, W, C = x.shape
    orders = scan_orders(H, W)
    inv = inverse_orders(orders)
    flat = x.data.reshape(B, H * W, C)
    out = flat[:, orders]                                              # (B, 4, L, C)

    def rule(g):
        gf = sum(g[:, k, inv[k]] for k in range(NUM_DIRECTIONS))
        return (gf.reshape(B, H, W, C),)

    return DirectionalSequences(_record(out, "cross_scan_expand", (x,), rule), H, W)


def cross_scan_merge(seqs: DirectionalSequences) -> Tensor:
    """Map each direction back onto the grid and sum: (B, 4, L, C) -> (B, H, W, C)."""
    s = as_tensor(seqs.seqs)
    H, W = seqs.H, seqs.W
    if s.ndim != 4 or s.shape[1] != NUM_DIRECTIONS or s.shape[2] != H * W:
        raise ShapeError(f"cross_scan_merge: sequences {s.shape} inconsistent with grid {H}x{W}")
    B, _, L, C = s.shape
    orders = scan_orders(H, W)
    inv = inverse_orders(orders)
    out = sum(s.data[:, k, inv[k]] for k in range(NUM_DIRECTIONS)).reshape(B, H, W, C)

    def rule(g):
        gf = g.reshape(B, L, C)
        return (gf[:, orders],)

    return _record(out, "cross_scan_merge", (s,), rule)


def ss2d_directional(x, weights: S6Weights, use_skip: bool = True) -> DirectionalSequences:
    """Per-direction selective-scan outputs, still in each direction's traversal order.

    ``weights`` stacked with a leading axis of 4 gives each direction its own
    parameters; unstacked weights are shared by all four directions.
    """
    seq = cross_scan_expand(x)
    s = seq.seqs
    B, K, L, C = s.shape
    if weights.A_log.ndim == 3:
        if weights.A_log.shape[0] != NUM_DIRECTIONS:
            raise ShapeError(f"ss2d: expected {NUM_DIRECTIONS} weight sets, got {weights.A_log.shape[0]}")
        y = s6_selective_scan(s, weights, use_skip)
    else:
        y = reshape(s6_selective_scan(reshape(s, (B * K, L, C)), weights, use_skip), (B, K, L, C))
    return DirectionalSequences(y, seq.H, seq.W)


def ss2d_forward(x, weights: S6Weights, use_skip: bool = True) -> Tensor:
    """Cross-scan expand, selective scan per direction, merge.  Shape-preserving."""
    x = as_tensor(x)
    out = cross_scan_merge(ss2d_directional(x, weights, use_skip))
    return reshape(out, x.shape) if out.shape != x.shape else out


class SS2D(Module):
    """Holds one selective-SSM parameter set per scan direction."""

    def __init__(self, d_inner: int, d_state: int = 16, dt_rank: int | None = None,
                 use_skip: bool = True, rng: np.random.Generator | None = None):
        w = init_s6_weights(d_inner, d_state, dt_rank, copies=NUM_DIRECTIONS, rng=rng)
        self.x_proj, self.dt_proj, self.dt_bias = w.x_proj, w.dt_proj, w.dt_bias
        self.A_log, self.D = w.A_log, w.D
        self.use_skip = use_skip

    @property
    def weights(self) -> S6Weights:
        return S6Weights(self.x_proj, self.dt_proj, self.dt_bias, self.A_log, self.D)

    def forward(self, x: Tensor) -> Tensor:
        return ss2d_forward(x, self.weights, self.use_skip)
