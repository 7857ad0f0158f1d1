"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` whose ``_node``
records the inputs and a gradient rule.  :func:`backward` linearizes the graph
reachable from a scalar loss into a :class:`Tape` (topological order) and sweeps
it in reverse, accumulating ``grad`` on leaf tensors that require it.

Broadcasting is deliberately narrow: a binary op accepts equal shapes, a
scalar operand, or a "bias" operand whose shape broadcasts one-sidedly onto the
other (the result always has the larger operand's shape).
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an operation produces NaN or inf."""


def set_debug(enabled: bool) -> None:
    """Toggle finite-value checks after every forward operation (per thread)."""
    _state.debug = bool(enabled)


def debug_enabled() -> bool:
    return getattr(_state, "debug", False)


class no_grad:
    """Context manager that suppresses graph recording in the current thread."""

    def __enter__(self):
        self._prev = getattr(_state, "grad_enabled", True)
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@dataclass(eq=False)
class Node:
    """One recorded operation: inputs, and a rule mapping output grad to input grads."""

    op: str
    inputs: tuple
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE, copy=True)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node: Node | None = None
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce("mean", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def silu(self):
        return silu(self)

    def exp(self):
        return exp(self)

    def backward(self) -> int:
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, op: str, inputs: tuple, rule) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out._node = None
    if debug_enabled() and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op}: non-finite value in output of shape {out_data.shape}")
    needs = grad_enabled() and any(isinstance(t, Tensor) and (t.requires_grad or t._node is not None)
                                   for t in inputs)
    out.requires_grad = needs
    if needs:
        out._node = Node(op, inputs, rule)
    return out


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> tuple:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0 or a.size == 1 or b.size == 1:
        return np.broadcast_shapes(a.shape, b.shape)
    # one operand must already have the result shape
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        out = None
    if out not in (a.shape, b.shape):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- binary elementwise -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, "add", (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, "sub", (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _record(ad * bd, "mul", (a, b),
                   lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, "div", (a, b),
                   lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)))


# -- unary elementwise ------------------------------------------------------

def neg(x) -> Tensor:
    x = as_tensor(x)
    return _record(-x.data, "neg", (x,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, "exp", (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(np.log(xd), "log", (x,), lambda g: (g / xd,))


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    p = float(exponent)
    return _record(xd ** p, "power", (x,), lambda g: (g * p * xd ** (p - 1.0),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    # Branching on sign keeps exp() from overflowing.
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_array(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = sigmoid_array(x.data)
    return _record(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def silu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    s = sigmoid_array(xd)
    return _record(xd * s, "silu", (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(softplus_array(xd), "softplus", (x,), lambda g: (g * sigmoid_array(xd),))


_UNARY = {"neg": neg, "exp": exp, "log": log, "relu": relu, "silu": silu,
          "softplus": softplus, "sigmoid": sigmoid}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch a pointwise operation by name (``add``, ``mul``, ``relu``, ``silu``, ...)."""
    if kind in _UNARY:
        if len(args) != 1:
            raise TypeError(f"{kind} takes one operand, got {len(args)}")
        return _UNARY[kind](args[0])
    if kind in _BINARY:
        if len(args) != 2:
            raise TypeError(f"{kind} takes two operands, got {len(args)}")
        return _BINARY[kind](*args)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast as in numpy."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {ad.shape} and {bd.shape}")
    try:
        out = ad @ bd
    except ValueError as exc:
        raise ShapeError(f"matmul: cannot multiply shapes {ad.shape} and {bd.shape}") from exc

    def rule(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record(out, "matmul", (a, b), rule)


# -- reductions -------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for tensor of rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(kind: str, x, axis=None, keepdims: bool = False) -> Tensor:
    """Sum or mean over ``axis`` (all axes when None); the gradient broadcasts back."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    if kind == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
        scale = 1.0
    elif kind == "mean":
        out = x.data.mean(axis=axes, keepdims=keepdims)
        scale = 1.0 / max(1, int(np.prod([shape[a] for a in axes])))
    else:
        raise ValueError(f"unknown reduction {kind!r}")

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * scale, shape),)

    return _record(np.asarray(out), kind, (x,), rule)


# -- shape manipulation -----------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _record(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inv),))


def getitem(x, index) -> Tensor:
    """Basic (slice) indexing; advanced indexing goes through :func:`take`."""
    x = as_tensor(x)
    shape = x.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _record(x.data[index], "getitem", (x,), rule)


def take(x, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    shape = x.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (full,)

    return _record(np.take(x.data, indices, axis=axis), "take", (x,), rule)


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    arrays = [t.data for t in ts]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: shapes {[a.shape for a in arrays]} along axis {axis}") from exc
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return _record(out, "concat", tuple(ts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: shapes {[t.shape for t in ts]}") from exc
    n = len(ts)
    return _record(out, "stack", tuple(ts),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def pad(x, widths) -> Tensor:
    """Zero-pad; ``widths`` follows :func:`numpy.pad`."""
    x = as_tensor(x)
    widths = [tuple(w) for w in widths]
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return _record(np.pad(x.data, widths), "pad", (x,), lambda g: (g[sl],))


def flip(x, axis) -> Tensor:
    x = as_tensor(x)
    return _record(np.flip(x.data, axis=axis).copy(), "flip", (x,),
                   lambda g: (np.flip(g, axis=axis),))


# -- the tape ---------------------------------------------------------------

_GRAD_FAULTS: dict[str, float] = {}


class inject_gradient_fault:
    """Test hook: scale every gradient produced by rules of ``op`` by ``scale``."""

    def __init__(self, op: str, scale: float = 1.1):
        self.op, self.scale = op, scale

    def __enter__(self):
        _GRAD_FAULTS[self.op] = self.scale
        return self

    def __exit__(self, *exc):
        _GRAD_FAULTS.pop(self.op, None)
        return False


@dataclass
class Tape:
    """Operations reachable from one output, in topological (execution) order."""

    nodes: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(out, False)]
        while stack_:
            t, expanded = stack_.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            stack_.append((t, True))
            for inp in t._node.inputs:
                if isinstance(inp, Tensor) and inp._node is not None and id(inp) not in seen:
                    stack_.append((inp, False))
        return cls(nodes=[t._node for t in order], outputs=order)

    def __len__(self) -> int:
        return len(self.nodes)

    def sweep(self, seed: np.ndarray) -> int:
        """Propagate ``seed`` (d loss / d output) back to the leaves; returns rule count."""
        if not self.outputs:
            return 0
        grads: dict[int, np.ndarray] = {id(self.outputs[-1]): seed}
        applied = 0
        for out in reversed(self.outputs):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            node = out._node
            in_grads = node.rule(g)
            if _GRAD_FAULTS and node.op in _GRAD_FAULTS:
                k = _GRAD_FAULTS[node.op]
                in_grads = tuple(None if ig is None else ig * k for ig in in_grads)
            applied += 1
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if inp._node is None:
                    ig = np.asarray(ig, dtype=inp.data.dtype).reshape(inp.shape)
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                else:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = ig if prev is None else prev + ig
        return applied


def backward(loss: Tensor) -> int:
    """Populate ``grad`` of every leaf reachable from scalar ``loss``.

    Gradients accumulate across calls; call ``zero_grad`` between steps.
    Returns the number of gradient rules applied.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return 0
    tape = Tape.from_output(loss)
    return tape.sweep(np.ones_like(loss.data))


# -- finite-difference oracle -----------------------------------------------

@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error between reverse-mode and central differences."""

    errors: dict
    tolerance: float
    failures: list
    abs_errors: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for name, err in self.errors.items():
            status = "FAIL" if name in self.failures else "ok"
            out.append(f"{status:4s} {name:40s} rel={err:.3e} abs={self.abs_errors.get(name, 0.0):.3e}")
        return out


def finite_diff_check(f: Callable[[], Tensor], params, step: float = 1e-5,
                      tolerance: float = 1e-4, abs_floor: float | None = None,
                      max_elements: int | None = None,
                      rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` against central differences.

    ``params`` is a sequence of tensors or a mapping name -> tensor; each is
    perturbed in place.  Elementwise error is |ad - fd| / (|ad| + |fd| + 1e-12);
    elements whose absolute discrepancy is below ``abs_floor`` count as exact,
    since central differences cannot resolve gradients below their roundoff
    (default floor: 100 * machine eps * (|f| + 1) / step).
    ``max_elements`` subsamples large parameters.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    items = list(params.items()) if isinstance(params, dict) else \
        [(p.name or f"param{i}", p) for i, p in enumerate(params)]
    for _, p in items:
        p.grad = None
    f0 = f()
    backward(f0)
    if abs_floor is None:
        abs_floor = 100 * np.finfo(float).eps * (abs(f0.item()) + 1.0) / step
    analytic = {name: (np.zeros(p.shape) if p.grad is None else p.grad.copy()) for name, p in items}
    errors: dict[str, float] = {}
    abs_errors: dict[str, float] = {}
    failures: list[str] = []
    rng = rng or np.random.default_rng(0)
    with no_grad():
        for name, p in items:
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
            ga = analytic[name].reshape(-1)
            worst = worst_abs = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                gf = (fp - fm) / (2.0 * step)
                diff = abs(ga[i] - gf)
                worst_abs = max(worst_abs, diff)
                if diff < abs_floor:
                    continue
                worst = max(worst, diff / (abs(ga[i]) + abs(gf) + 1e-12))
            errors[name] = worst
            abs_errors[name] = worst_abs
            if worst > tolerance:
                failures.append(name)
    return GradCheckReport(errors=errors, tolerance=tolerance, failures=failures,
                           abs_errors=abs_errors)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if isinstance(t, Tensor) and t.requires_grad]
