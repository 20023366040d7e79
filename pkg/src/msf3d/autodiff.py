"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` whenever one of
their inputs requires a gradient.  Outside a tape every op is a plain numpy
evaluation, which is what the finite-difference checker relies on.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes or a 0-d operand; bias-add lives inside :func:`linear`; per-column
constant scaling goes through :func:`scale_shift`.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractViolation, DimensionError

_local = threading.local()
_deterministic = True


def set_deterministic(flag: bool) -> None:
    """Toggle the row-order-stable (non-BLAS) contraction path."""
    global _deterministic
    _deterministic = bool(flag)


def is_deterministic() -> bool:
    return _deterministic


@contextmanager
def deterministic(flag: bool = True) -> Iterator[None]:
    previous = _deterministic
    set_deterministic(flag)
    try:
        yield
    finally:
        set_deterministic(previous)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # einsum's C loop accumulates every output cell in the same k-order, so a
    # row's result never depends on where the row sits in the batch.
    if _deterministic:
        return np.einsum("ik,kj->ij", a, b)
    return a @ b


def _bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _deterministic:
        return np.einsum("hik,hkj->hij", a, b)
    return a @ b


class Tensor:
    """An immutable float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A named trainable tensor; names are unique within a :class:`ParamSet`."""

    __slots__ = ()

    def __init__(self, name: str, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad, name=name)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class ParamSet(OrderedDict):
    """Ordered mapping of parameter name to :class:`Parameter`."""

    def add(self, name: str, data) -> Parameter:
        if name in self:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        param = Parameter(name, np.array(data, dtype=np.float64))
        self[name] = param
        return param

    def linear(self, prefix: str) -> tuple[Parameter, Parameter]:
        return self[f"{prefix}.weight"], self[f"{prefix}.bias"]

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data) for name, p in self.items())

    def num_elements(self) -> int:
        return sum(p.size for p in self.values())

    def load_arrays(self, arrays: dict) -> None:
        missing = set(self) - set(arrays)
        extra = set(arrays) - set(self)
        if missing or extra:
            raise ContractViolation(
                f"parameter names differ: missing={sorted(missing)} unexpected={sorted(extra)}"
            )
        for name, param in self.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != param.shape:
                raise DimensionError(f"{name}: expected shape {param.shape}, got {value.shape}")
            param.data = value.copy()


@dataclass
class Node:
    op: str
    inputs: tuple  # node id per input, None where the input is untracked
    vjp: Callable | None


class Tape:
    """Append-only record of differentiable ops; single writer.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded when any input requires a gradient.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._ids: dict[int, int] = {}
        self._alive: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def node_id(self, tensor: Tensor) -> int | None:
        return self._ids.get(id(tensor))

    def _register(self, tensor: Tensor, node: Node) -> int:
        nid = len(self.nodes)
        self.nodes.append(node)
        self._ids[id(tensor)] = nid
        # keep the tensor alive so its id() cannot be recycled
        self._alive.append(tensor)
        return nid

    def _input_id(self, tensor: Tensor) -> int | None:
        if not tensor.requires_grad:
            return None
        nid = self._ids.get(id(tensor))
        if nid is None:
            nid = self._register(tensor, Node("leaf", (), None))
        return nid

    def record(self, op: str, inputs: Sequence[Tensor], out: Tensor, vjp: Callable) -> None:
        ids = tuple(self._input_id(t) for t in inputs)
        self._register(out, Node(op, ids, vjp))

    def backward(self, loss: Tensor) -> "Gradients":
        """Propagate d(loss)/d(loss) = 1 through the tape in reverse order."""
        if loss.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
        start = self._ids.get(id(loss))
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        if start is None:
            return Gradients(self, grads)
        grads[start] = np.ones_like(loss.data)
        for i in range(start, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for j, gj in zip(node.inputs, node.vjp(g)):
                if j is None or gj is None:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
        return Gradients(self, grads)


class Gradients:
    """Result of :meth:`Tape.backward`; index with a tensor or parameter."""

    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        nid = self._tape.node_id(tensor)
        if nid is None or self._grads[nid] is None:
            return np.zeros_like(tensor.data)
        return self._grads[nid]

    def for_params(self, params: ParamSet) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, self[p]) for name, p in params.items())


def current_tape() -> Tape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


@contextmanager
def no_record() -> Iterator[None]:
    """Evaluate ops without recording, even inside an active tape."""
    stack = getattr(_local, "tapes", None)
    saved = list(stack) if stack else []
    _local.tapes = []
    try:
        yield
    finally:
        _local.tapes = saved


def backward(tape: Tape, loss: Tensor, params: ParamSet) -> "OrderedDict[str, np.ndarray]":
    """Gradients of ``loss`` for every parameter in ``params``."""
    return tape.backward(loss).for_params(params)


def apply_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp: Callable) -> Tensor:
    """Wrap a forward result and register its vector-Jacobian product.

    ``vjp(g)`` must return one gradient (or None) per input, each shaped like
    that input.  Extension point for fused ops defined in other modules.
    """
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, vjp)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _fit(g: np.ndarray, like: Tensor) -> np.ndarray:
    return np.asarray(g.sum()) if like.ndim == 0 and g.ndim != 0 else g


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    return apply_op("add", (a, b), a.data + b.data, lambda g: (_fit(g, a), _fit(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    return apply_op("sub", (a, b), a.data - b.data, lambda g: (_fit(g, a), _fit(-g, b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    x, y = a.data, b.data
    return apply_op("mul", (a, b), x * y, lambda g: (_fit(g * y, a), _fit(g * x, b)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    x, y = a.data, b.data
    out = x / y
    return apply_op("div", (a, b), out, lambda g: (_fit(g / y, a), _fit(-g * out / y, b)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return apply_op("neg", (a,), -a.data, lambda g: (-g,))


def scale_shift(x: Tensor, scale, shift=None) -> Tensor:
    """``x * scale + shift`` with constant per-last-axis vectors."""
    scale = np.asarray(scale, dtype=np.float64)
    out = x.data * scale
    if shift is not None:
        out = out + np.asarray(shift, dtype=np.float64)
    return apply_op("scale_shift", (x,), out, lambda g: (g * scale,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return apply_op("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return apply_op("log", (x,), np.log(d), lambda g: (g / d,))


def sigmoid(x: Tensor) -> Tensor:
    out = stable_sigmoid(x.data)
    return apply_op("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    d = x.data
    out = -np.logaddexp(0.0, -d)
    return apply_op("log_sigmoid", (x,), out, lambda g: (g * stable_sigmoid(-d),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return apply_op("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return apply_op("abs", (x,), np.abs(x.data), lambda g: (g * sign,))


def pow_(x: Tensor, p: float) -> Tensor:
    """``x ** p`` for a constant exponent; x must be non-negative when p is fractional."""
    d = x.data
    if p == 0:
        return apply_op("pow", (x,), np.ones_like(d), lambda g: (np.zeros_like(d),))
    out = d**p
    return apply_op("pow", (x,), out, lambda g: (g * p * d ** (p - 1),))


def stable_sigmoid(d) -> np.ndarray:
    # split form keeps exp() arguments non-positive
    out = np.empty_like(d, dtype=np.float64)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    x, y = a.data, b.data
    return apply_op("matmul", (a, b), _mm(x, y), lambda g: (_mm(g, y.T), _mm(x.T, g)))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over a leading axis: (h, n, k) @ (h, k, m)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    x, y = a.data, b.data
    return apply_op(
        "bmm",
        (a, b),
        _bmm(x, y),
        lambda g: (_bmm(g, y.transpose(0, 2, 1)), _bmm(x.transpose(0, 2, 1), g)),
    )


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w + b for x (n, p), w (p, q), b (q,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = _mm(xd, wd)
    if b is not None:
        out = out + b.data

    def vjp(g):
        gb = g.sum(axis=0) if b is not None else None
        return (_mm(g, wd.T), _mm(xd.T, g), gb)

    inputs = (x, w, b) if b is not None else (x, w)
    return apply_op("linear", inputs, out, vjp)


# -- reductions and normalization ---------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return apply_op("sum", (x,), out, vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ContractViolation(f"softmax: axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return apply_op("softmax", (x,), out, vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise normalization of an (n, d) tensor followed by gain and bias."""
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError(f"layer_norm: input {x.shape}, gain {gain.shape}, bias {bias.shape}")
    if eps <= 0:
        raise ContractViolation("layer_norm: eps must be positive")
    d = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx_hat = g * gain.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(axis=1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=1, keepdims=True))
        return (gx, (g * xhat).sum(axis=0), g.sum(axis=0))

    return apply_op("layer_norm", (x, gain, bias), out, vjp)


def masked_max(x: Tensor, mask: np.ndarray) -> Tensor:
    """Max over axis 1 of (n, m, c) considering only rows where mask (n, m) is set.

    Every group must have at least one unmasked row.  The gradient goes to
    the first maximizing row.
    """
    mask = np.asarray(mask, dtype=bool)
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise DimensionError(f"masked_max: values {x.shape} vs mask {mask.shape}")
    filled = np.where(mask[:, :, None], x.data, -np.inf)
    arg = filled.argmax(axis=1)
    out = np.take_along_axis(filled, arg[:, None, :], axis=1)[:, 0, :]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg[:, None, :], g[:, None, :], axis=1)
        return (gx,)

    return apply_op("masked_max", (x,), out, vjp)


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """out[n] = sum_s weights[n, s] * values[n, s, :]."""
    if weights.ndim != 2 or values.ndim != 3 or values.shape[:2] != weights.shape:
        raise DimensionError(f"weighted_sum: weights {weights.shape} vs values {values.shape}")
    w, v = weights.data, values.data
    out = np.einsum("ns,nsc->nc", w, v)

    def vjp(g):
        return (np.einsum("nc,nsc->ns", g, v), w[:, :, None] * g[:, None, :])

    return apply_op("weighted_sum", (weights, values), out, vjp)


# -- shape manipulation ---------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return apply_op("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return apply_op("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inverse),))


def _has_array(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def index(x: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradient."""
    out = x.data[idx]
    fancy = _has_array(idx)

    def vjp(g):
        gx = np.zeros_like(x.data)
        if fancy:
            np.add.at(gx, idx, g)
        else:
            gx[idx] += g
        return (gx,)

    return apply_op("index", (x,), np.array(out), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return apply_op("concat", tensors, out, vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return apply_op("stack", tensors, out, vjp)


def scatter_rows(values: Tensor, rows: np.ndarray, num_rows: int) -> Tensor:
    """Place ``values[i]`` at row ``rows[i]`` of a zero (num_rows, c) array.

    Row indices must be unique.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if values.ndim != 2 or rows.shape != (values.shape[0],):
        raise DimensionError(f"scatter_rows: values {values.shape} vs rows {rows.shape}")
    out = np.zeros((num_rows, values.shape[1]))
    out[rows] = values.data
    return apply_op("scatter_rows", (values,), out, lambda g: (g[rows],))


def avg_pool2x2(x: Tensor) -> Tensor:
    """2x2 average pooling of an (h, w, c) map with ceil-mode extents.

    Windows clipped by an odd border average only the cells they cover.
    """
    if x.ndim != 3:
        raise DimensionError(f"avg_pool2x2: expected (h, w, c), got {x.shape}")
    h, w, c = x.shape
    ho, wo = -(-h // 2), -(-w // 2)
    padded = np.zeros((2 * ho, 2 * wo, c))
    padded[:h, :w] = x.data
    counts = np.zeros((2 * ho, 2 * wo))
    counts[:h, :w] = 1.0
    count = counts.reshape(ho, 2, wo, 2).sum(axis=(1, 3))[:, :, None]
    out = padded.reshape(ho, 2, wo, 2, c).sum(axis=(1, 3)) / count

    def vjp(g):
        spread = np.repeat(np.repeat(g / count, 2, axis=0), 2, axis=1)
        return (spread[:h, :w],)

    return apply_op("avg_pool2x2", (x,), out, vjp)


# -- verification -----------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_error: float
    worst: tuple | None = None  # (parameter name, flat index)
    failure: str | None = None
    checked: int = 0

    @property
    def ok(self) -> bool:
        return self.failure is None


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-6,
    samples: int = 100,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare tape gradients with central differences.

    ``f`` rebuilds a scalar from the current values of ``params``.  Up to
    ``samples`` coordinates are checked per tensor (all of them for smaller
    tensors).  The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractViolation(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    rng = np.random.default_rng(0) if rng is None else rng
    params = list(params)
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        return GradCheckResult(np.inf, None, "non-finite value at the base point")
    grads = tape.backward(loss)
    result = GradCheckResult(0.0)
    for k, p in enumerate(params):
        label = p.name or f"param{k}"
        analytic = grads[p].reshape(-1)
        base = p.data
        n = base.size
        coords = np.arange(n) if n <= samples else rng.choice(n, size=samples, replace=False)
        try:
            for i in coords:
                values = []
                for step in (eps, -eps):
                    moved = base.copy().reshape(-1)
                    moved[i] += step
                    p.data = moved.reshape(base.shape)
                    with no_record():
                        values.append(float(f().data))
                if not all(np.isfinite(values)):
                    result.max_error = np.inf
                    result.worst = (label, int(i))
                    result.failure = f"non-finite forward value at {label}[{int(i)}]"
                    return result
                numeric = (values[0] - values[1]) / (2 * eps)
                err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
                result.checked += 1
                if err > result.max_error:
                    result.max_error = err
                    result.worst = (label, int(i))
        finally:
            p.data = base
    return result
