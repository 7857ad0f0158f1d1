"""Diagonal state-space kernels: ZOH discretization, recurrent and convolutional
evaluation, and the input-dependent (selective) scan.

State matrices are diagonal, so every "matrix" here is an array of per-state
scalars with shape ``(..., N)``.  All routines are differentiable tape ops.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (ShapeError, Tensor, _record, as_tensor, exp, matmul, neg, reshape,
                     softplus, unbroadcast)

# Below this |delta * a| the ZOH input factor is replaced by its limit delta
# (relative truncation error |delta * a| / 2 < 5e-9).
ZOH_SERIES_THRESHOLD = 1e-8


@dataclass
class DiscreteSSM:
    A_bar: Tensor
    B_bar: Tensor


# -- ZOH ----------------------------------------------------------------------

def _zoh_factor_arrays(A: np.ndarray, delta: np.ndarray):
    """Return (phi, dphi/ddelta, dphi/dA) for phi = expm1(delta*A) / A."""
    z = delta * A
    small = np.abs(z) < ZOH_SERIES_THRESHOLD
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(small, delta * np.ones_like(z), np.expm1(z) / np.where(small, 1.0, A))
    ez = np.exp(z)
    d_delta = np.where(small, 1.0, ez)
    # dphi/dA = delta^2 * (z e^z - expm1 z) / z^2, series for small z
    tiny = np.abs(z) < 1e-4
    zs = np.where(tiny, 1.0, z)
    ratio = np.where(tiny, 0.5 + z / 3.0 + z * z / 8.0, (zs * ez - np.expm1(zs)) / (zs * zs))
    d_A = np.where(small, 0.0, delta * delta * ratio)
    return phi, d_delta, d_A


def zoh_factor(A, delta) -> Tensor:
    """Elementwise (exp(delta*a) - 1) / a, the ZOH input scaling for diagonal A."""
    A, delta = as_tensor(A), as_tensor(delta)
    phi, d_delta, d_A = _zoh_factor_arrays(A.data, delta.data)
    sa, sd = A.shape, delta.shape
    return _record(phi, "zoh_factor", (A, delta),
                   lambda g: (unbroadcast(g * d_A, sa), unbroadcast(g * d_delta, sd)))


def zoh_discretize(A, B, delta) -> DiscreteSSM:
    """Zero-order hold for diagonal A: A_bar = exp(delta*A), B_bar = (A_bar - 1)/A * B."""
    A, B, delta = as_tensor(A), as_tensor(B), as_tensor(delta)
    if np.any(delta.data <= 0):
        raise ValueError("zoh_discretize: timescale delta must be strictly positive")
    A_bar = exp(delta * A)
    B_bar = zoh_factor(A, delta) * B
    return DiscreteSSM(A_bar, B_bar)


# -- linear scan helpers (time on axis 0) -------------------------------------

def _scan(a: np.ndarray, u: np.ndarray, h0) -> np.ndarray:
    """h_t = a_t * h_{t-1} + u_t for t = 0..L-1; ``a`` may have time extent 1."""
    L = u.shape[0]
    hs = np.empty(np.broadcast_shapes(a.shape[1:], u.shape[1:], np.shape(h0)), dtype=u.dtype)
    hs = np.empty((L,) + hs.shape, dtype=u.dtype)
    h = h0
    const = a.shape[0] == 1
    for t in range(L):
        h = (a[0] if const else a[t]) * h + u[t]
        hs[t] = h
    return hs


def _scan_adjoint(a: np.ndarray, gh: np.ndarray) -> np.ndarray:
    """Total gradient on each h_t given direct gradients ``gh``: G_t = gh_t + a_{t+1} G_{t+1}."""
    L = gh.shape[0]
    G = np.empty_like(gh)
    acc = np.zeros(gh.shape[1:], dtype=gh.dtype)
    const = a.shape[0] == 1
    for t in range(L - 1, -1, -1):
        if t < L - 1:
            acc = (a[0] if const else a[t + 1]) * acc
        acc = acc + gh[t]
        G[t] = acc
    return G


def _prev_states(hs: np.ndarray, h0) -> np.ndarray:
    prev = np.empty_like(hs)
    prev[0] = h0
    prev[1:] = hs[:-1]
    return prev


# -- time-invariant recurrence ------------------------------------------------

def _as_sequence(x: Tensor) -> tuple[Tensor, tuple]:
    """View input as (batch, L, channels); remember the original shape."""
    if x.ndim == 1:
        return reshape(x, (1, x.shape[0], 1)), x.shape
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), x.shape
    if x.ndim == 3:
        return x, x.shape
    raise ShapeError(f"expected a sequence of rank 1-3, got shape {x.shape}")


def ssm_recurrence(d: DiscreteSSM, C, x, h0=None) -> Tensor:
    """Run h_t = A_bar*h_{t-1} + B_bar*x_t, y_t = sum_n C*h_t over a sequence batch.

    ``x`` is (batch, L, channels) (or (L,) / (L, channels)); A_bar, B_bar, C are
    (N,) shared by all channels or (channels, N).  ``h0`` defaults to zero.
    """
    A_bar, B_bar, C = as_tensor(d.A_bar), as_tensor(d.B_bar), as_tensor(C)
    x = as_tensor(x)
    xs, orig = _as_sequence(x)
    Bt, L, Ch = xs.shape
    N = A_bar.shape[-1]
    for name, t in (("B_bar", B_bar), ("C", C)):
        if t.shape[-1] != N:
            raise ShapeError(f"ssm_recurrence: {name} has {t.shape[-1]} states, A_bar has {N}")
    for t in (A_bar, B_bar, C):
        if t.ndim == 2 and t.shape[0] not in (1, Ch):
            raise ShapeError(f"ssm_recurrence: parameter shape {t.shape} vs {Ch} channels")
    inputs = [xs, A_bar, B_bar, C]
    if h0 is None:
        h0_arr = np.zeros((1, 1, N))
    else:
        h0 = as_tensor(h0)
        if h0.shape[-1] != N:
            raise ShapeError(f"ssm_recurrence: h0 has extent {h0.shape[-1]}, expected {N}")
        h0_arr = h0.data
        inputs.append(h0)
    a = np.broadcast_to(A_bar.data, (Ch, N))[None]                     # (1, Ch, N)
    u = (xs.data[..., None] * B_bar.data).transpose(1, 0, 2, 3)        # (L, Bt, Ch, N)
    hs = _scan(a[:, None], u, h0_arr)                                  # (L, Bt, Ch, N)
    Cd = C.data
    y = (hs * Cd).sum(-1).transpose(1, 0, 2)                           # (Bt, L, Ch)

    def rule(g):
        gT = g.transpose(1, 0, 2)[..., None]                           # (L, Bt, Ch, 1)
        gC = unbroadcast((gT * hs).sum(axis=(0, 1)), C.shape) if C.ndim <= 2 else None
        G = _scan_adjoint(a[:, None], gT * Cd)
        prev = _prev_states(hs, h0_arr)
        gA = unbroadcast((G * prev).sum(axis=(0, 1)), A_bar.shape)
        gB = unbroadcast((G * xs.data.transpose(1, 0, 2)[..., None]).sum(axis=(0, 1)), B_bar.shape)
        gx = (G * B_bar.data).sum(-1).transpose(1, 0, 2)
        grads = [gx, gA, gB, gC]
        if h0 is not None:
            grads.append(unbroadcast(a[0] * G[0], h0.shape))
        return tuple(grads)

    out = _record(y, "ssm_recurrence", tuple(inputs), rule)
    return reshape(out, orig) if orig != out.shape else out


# -- convolutional form --------------------------------------------------------

def ssm_conv_kernel(d: DiscreteSSM, C, L: int) -> Tensor:
    """K[t] = sum_n C * A_bar^t * B_bar for t = 0..L-1; shape (L,) or (channels, L)."""
    if L < 1:
        raise ValueError("kernel length must be at least 1")
    A_bar, B_bar, C = as_tensor(d.A_bar), as_tensor(d.B_bar), as_tensor(C)
    lead = np.broadcast_shapes(A_bar.shape, B_bar.shape, C.shape)[:-1]
    t = np.arange(L, dtype=float)
    a, b, c = A_bar.data, B_bar.data, C.data
    powers = a[..., None, :] ** t[:, None]                             # (..., L, N)
    cb = (c * b)[..., None, :]
    K = (cb * powers).sum(-1)
    K = np.broadcast_to(K, lead + (L,)).copy()

    def rule(g):
        gp = g[..., None] * powers                                     # (..., L, N)
        gcb = gp.sum(-2)
        with np.errstate(divide="ignore", invalid="ignore"):
            dpow = np.where(t[:, None] > 0, t[:, None] * a[..., None, :] ** np.maximum(t - 1, 0)[:, None], 0.0)
        gA = (g[..., None] * cb * dpow).sum(-2)
        return (unbroadcast(gA, A_bar.shape), unbroadcast(gcb * c, B_bar.shape),
                unbroadcast(gcb * b, C.shape))

    return _record(K, "ssm_conv_kernel", (A_bar, B_bar, C), rule)


def _fft_len(L: int) -> int:
    return 1 << (2 * L - 1).bit_length()


def ssm_apply_conv(x, K) -> Tensor:
    """Causal convolution y_t = sum_{tau<=t} K[tau] x_{t-tau} along the time axis.

    ``x`` is (batch, L, channels) (or (L,)); ``K`` is (L,) or (channels, L).
    """
    x, K = as_tensor(x), as_tensor(K)
    xs, orig = _as_sequence(x)
    _, L, Ch = xs.shape
    if K.shape[-1] != L:
        raise ShapeError(f"ssm_apply_conv: kernel length {K.shape[-1]} != sequence length {L}")
    if K.ndim == 2 and K.shape[0] not in (1, Ch):
        raise ShapeError(f"ssm_apply_conv: kernel shape {K.shape} vs {Ch} channels")
    n = _fft_len(L)
    Kt = np.broadcast_to(K.data if K.ndim == 2 else K.data[None], (Ch, L)).T     # (L, Ch)
    Xf = np.fft.rfft(xs.data, n=n, axis=1)
    Kf = np.fft.rfft(Kt, n=n, axis=0)
    y = np.fft.irfft(Xf * Kf, n=n, axis=1)[:, :L]

    def rule(g):
        Gf = np.fft.rfft(g, n=n, axis=1)
        gx = np.fft.irfft(Gf * np.conj(Kf), n=n, axis=1)[:, :L]
        gK = np.fft.irfft(Gf * np.conj(Xf), n=n, axis=1)[:, :L].sum(0).T      # (Ch, L)
        gK = gK.sum(0) if K.ndim == 1 else unbroadcast(gK, K.shape)
        return gx, gK

    out = _record(y, "ssm_apply_conv", (xs, K), rule)
    return reshape(out, orig) if orig != out.shape else out


# -- selective scan ------------------------------------------------------------

def _numpy_scan_forward(u, delta, A, B, C, D):
    # time-leading layout: (L, batch, K, d, N)
    ud = np.ascontiguousarray(u.transpose(2, 0, 1, 3))
    dd = np.ascontiguousarray(delta.transpose(2, 0, 1, 3))[..., None]
    Bd = np.ascontiguousarray(B.transpose(2, 0, 1, 3))[:, :, :, None, :]
    Cd = np.ascontiguousarray(C.transpose(2, 0, 1, 3))[:, :, :, None, :]
    Ad = A[None, None]
    Abar = np.exp(dd * Ad)
    phi, dphi_dd, dphi_dA = _zoh_factor_arrays(Ad, dd)
    hs = _scan(Abar, phi * Bd * ud[..., None], 0.0)
    y = (hs * Cd).sum(-1) + D * ud                                     # (L, batch, K, d)

    def backward(g):
        gT = np.ascontiguousarray(g.transpose(2, 0, 1, 3))
        gC = (gT[..., None] * hs).sum(-2)
        G = _scan_adjoint(Abar, gT[..., None] * Cd)
        gphi = G * Bd * ud[..., None]
        gB = (G * phi * ud[..., None]).sum(-2)
        gu = (G * phi * Bd).sum(-1) + gT * D
        dz = G * _prev_states(hs, 0.0) * Abar
        gdelta = (dz * Ad + gphi * dphi_dd).sum(-1)
        gA = (dz * dd + gphi * dphi_dA).sum(axis=(0, 1))
        gD = (gT * ud).sum(axis=(0, 1))
        back = lambda arr: arr.transpose(1, 2, 0, 3)  # noqa: E731
        return back(gu), back(gdelta), gA, back(gB), back(gC), gD

    return y.transpose(1, 2, 0, 3), backward


def _numba_scan_forward(u, delta, A, B, C, D):
    from . import _scan_kernels as kern

    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (u, delta, A, B, C, D)]
    Abar = np.exp(args[1][..., None] * A[None, :, None])               # (Bn, K, L, d, N)
    y, hs = kern.scan_forward(*args, Abar)

    def backward(g):
        return kern.scan_backward(np.ascontiguousarray(g, dtype=np.float64), *args, Abar, hs)

    return y, backward


def _numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


SCAN_BACKENDS = {"numpy": _numpy_scan_forward, "numba": _numba_scan_forward}


def selective_scan(u, delta, A, B, C, D=None, backend: str = "auto") -> Tensor:
    """Input-dependent diagonal SSM scan with ZOH discretization per timestep.

    Shapes: ``u``/``delta`` (batch, K, L, d), ``A`` (K, d, N), ``B``/``C``
    (batch, K, L, N), ``D`` (K, d) or None.  K indexes independent parameter
    sets (scan directions).  Returns (batch, K, L, d):

        h_t = exp(delta_t A) h_{t-1} + phi(A, delta_t) B_t u_t
        y_t = <C_t, h_t> + D u_t

    ``backend`` selects the fused numba loops or the vectorized numpy
    reference; "auto" prefers numba when importable.
    """
    u, delta, A, B, C = (as_tensor(t) for t in (u, delta, A, B, C))
    Bn, K, L, d = u.shape
    N = A.shape[-1]
    if delta.shape != u.shape or A.shape != (K, d, N) or B.shape != (Bn, K, L, N) \
            or C.shape != B.shape:
        raise ShapeError(f"selective_scan: u{u.shape} delta{delta.shape} A{A.shape} "
                         f"B{B.shape} C{C.shape}")
    if D is not None:
        D = as_tensor(D)
        if D.shape != (K, d):
            raise ShapeError(f"selective_scan: D{D.shape}, expected {(K, d)}")
    if backend == "auto":
        backend = "numba" if _numba_available() else "numpy"
    D_arr = D.data if D is not None else np.zeros((K, d))
    y, back = SCAN_BACKENDS[backend](u.data, delta.data, A.data, B.data, C.data, D_arr)

    def rule(g):
        grads = back(g)
        return grads if D is not None else grads[:5]

    inputs = (u, delta, A, B, C) + ((D,) if D is not None else ())
    return _record(y, "selective_scan", inputs, rule)


@dataclass
class S6Weights:
    """Parameters of one selective SSM (or K stacked ones, leading axis K).

    x_proj: (d, R + 2N) maps each input to [dt_low_rank | B_t | C_t];
    dt_proj: (R, d) and dt_bias: (d,) give delta = softplus(dt_low_rank @ dt_proj + dt_bias);
    A_log: (d, N) with A = -exp(A_log); D: (d,) skip weights.
    """

    x_proj: Tensor
    dt_proj: Tensor
    dt_bias: Tensor
    A_log: Tensor
    D: Tensor

    @property
    def d_state(self) -> int:
        return self.A_log.shape[-1]

    @property
    def dt_rank(self) -> int:
        return self.dt_proj.shape[-2]

    def tensors(self) -> dict[str, Tensor]:
        return {"x_proj": self.x_proj, "dt_proj": self.dt_proj, "dt_bias": self.dt_bias,
                "A_log": self.A_log, "D": self.D}


def init_s6_weights(d_inner: int, d_state: int, dt_rank: int | None = None,
                    copies: int | None = None, rng: np.random.Generator | None = None,
                    dt_min: float = 1e-3, dt_max: float = 1e-1) -> S6Weights:
    """S4D-real style init: A = -(1..N), D = 1, softplus(dt_bias) log-uniform in [dt_min, dt_max]."""
    rng = rng or np.random.default_rng(0)
    R = dt_rank or max(1, math.ceil(d_inner / 16))
    lead = (copies,) if copies else ()
    bound = 1.0 / math.sqrt(d_inner)
    x_proj = rng.uniform(-bound, bound, size=lead + (d_inner, R + 2 * d_state))
    dt_std = R ** -0.5
    dt_proj = rng.uniform(-dt_std, dt_std, size=lead + (R, d_inner))
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=lead + (d_inner,)))
    dt_bias = dt + np.log(-np.expm1(-dt))                              # inverse softplus
    A_log = np.broadcast_to(np.log(np.arange(1, d_state + 1, dtype=float)),
                            lead + (d_inner, d_state)).copy()
    D = np.ones(lead + (d_inner,))
    mk = lambda a, n: Tensor(a, requires_grad=True, name=n)  # noqa: E731
    return S6Weights(mk(x_proj, "x_proj"), mk(dt_proj, "dt_proj"), mk(dt_bias, "dt_bias"),
                     mk(A_log, "A_log"), mk(D, "D"))


def s6_selective_scan(x, weights: S6Weights, use_skip: bool = True) -> Tensor:
    """Selective SSM over (batch, L, d), or (batch, K, L, d) with K-stacked weights.

    delta_t, B_t, C_t are projections of x_t; each step is ZOH-discretized with
    its own delta_t before the recurrence.
    """
    x = as_tensor(x)
    w = weights
    stacked = w.A_log.ndim == 3
    if stacked != (x.ndim == 4):
        raise ShapeError(f"s6_selective_scan: input {x.shape} vs A_log {w.A_log.shape}")
    xs = x if stacked else reshape(x, (x.shape[0], 1) + x.shape[1:])
    x_proj = w.x_proj if stacked else reshape(w.x_proj, (1,) + w.x_proj.shape)
    dt_proj = w.dt_proj if stacked else reshape(w.dt_proj, (1,) + w.dt_proj.shape)
    dt_bias = reshape(w.dt_bias, (-1, 1, w.dt_bias.shape[-1]))
    A_log = w.A_log if stacked else reshape(w.A_log, (1,) + w.A_log.shape)
    D = reshape(w.D, (-1, w.D.shape[-1])) if use_skip else None
    N, R = w.d_state, w.dt_rank
    if x_proj.shape[-1] != R + 2 * N or x_proj.shape[-2] != xs.shape[-1]:
        raise ShapeError(f"s6_selective_scan: x_proj {w.x_proj.shape} vs input {x.shape}")

    proj = matmul(xs, x_proj)                                          # (batch, K, L, R+2N)
    delta = softplus(matmul(proj[..., :R], dt_proj) + dt_bias)
    A = neg(exp(A_log))
    y = selective_scan(xs, delta, A, proj[..., R:R + N], proj[..., R + N:], D)
    return y if stacked else reshape(y, x.shape)
