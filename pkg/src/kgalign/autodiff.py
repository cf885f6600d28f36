"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive records its parents and an adjoint closure; ``backward``
walks the recorded graph in reverse topological order.  Broadcasting is
limited to what the model needs (bias rows, per-sample offsets), and the
adjoint of a broadcast operand is summed back to its own shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

GELU_C = np.sqrt(2.0 / np.pi)
KL_LOG_FLOOR = 1e-30


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("division only supported by a python scalar")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self, seed=None) -> None:
        backward(self, seed)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data, parents: Sequence[Tensor], adjoint: Callable) -> Tensor:
    """Record an operation with a caller-supplied adjoint.

    ``adjoint(g)`` receives the output gradient and must return one array
    (or None) per parent.  Primitives below are all built through this.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = adjoint
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return custom_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "subtract")
    return custom_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def hadamard(a, b) -> Tensor:
    """Entry-wise product of two tensors of identical shape."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes differ, {a.shape} vs {b.shape}")
    return custom_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return custom_op(a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return custom_op(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive entry")
    return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def adjoint(g):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner),)

    return custom_op(y, (a,), adjoint)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product.  Supports 2-D @ 2-D, batched @ 2-D (shared weight) and
    batched @ batched with identical leading extents."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim == 2:
        def adjoint(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    elif a.shape[:-2] == b.shape[:-2]:
        def adjoint(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g
    else:
        raise ShapeError(f"matmul: leading extents differ, {a.shape} vs {b.shape}")
    return custom_op(a.data @ b.data, (a, b), adjoint)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return custom_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def adjoint(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, adjoint)


def split(a, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    a = as_tensor(a)
    if int(np.sum(sizes)) != a.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover axis of extent {a.shape[axis]}")
    outs = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + n)
        idx = tuple(idx)

        def adjoint(g, idx=idx):
            full = np.zeros_like(a.data)
            full[idx] = g
            return (full,)

        outs.append(custom_op(a.data[idx], (a,), adjoint))
        start += n
    return outs


def take(table, indices) -> Tensor:
    """Gather rows ``table[indices]``; repeated indices accumulate in the adjoint."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)

    def adjoint(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return custom_op(table.data[idx], (table,), adjoint)


# ---------------------------------------------------------------- reductions


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return custom_op(y, (a,), adjoint)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- normalizers


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data, "softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def adjoint(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return custom_op(s, (a,), adjoint)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data, "log_softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def adjoint(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return custom_op(y, (a,), adjoint)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def adjoint(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return custom_op(y, (x, gain, bias), adjoint)


def l2_norm(a, axis: int = -1, eps: float = 0.0) -> Tensor:
    """Euclidean norm along ``axis``; ``eps`` is added under the root."""
    a = as_tensor(a)
    n = np.sqrt((a.data**2).sum(axis=axis) + eps)
    if np.any(n == 0):
        raise NumericError("l2_norm: zero-norm slice (pass eps > 0 to smooth)")

    def adjoint(g):
        return (np.expand_dims(g / n, axis) * a.data,)

    return custom_op(n, (a,), adjoint)


def l2_normalize(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    n = np.sqrt((a.data**2).sum(axis=axis, keepdims=True))
    if np.any(n == 0):
        raise NumericError("l2_normalize: zero-norm slice")
    y = a.data / n

    def adjoint(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return custom_op(y, (a,), adjoint)


def cosine(u, v) -> Tensor:
    """Cosine similarity along the last axis (one value per leading index)."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError(f"cosine: shapes differ, {u.shape} vs {v.shape}")
    nu = np.sqrt((u.data**2).sum(axis=-1, keepdims=True))
    nv = np.sqrt((v.data**2).sum(axis=-1, keepdims=True))
    if np.any(nu == 0) or np.any(nv == 0):
        raise NumericError("cosine: zero-norm input")
    uh, vh = u.data / nu, v.data / nv
    c = (uh * vh).sum(axis=-1, keepdims=True)

    def adjoint(g):
        g = np.asarray(g)[..., None]
        return g * (vh - c * uh) / nu, g * (uh - c * vh) / nv

    return custom_op(np.clip(c[..., 0], -1.0, 1.0), (u, v), adjoint)


def kl_divergence(q, p, atol: float = 1e-8) -> Tensor:
    """Sum of ``q * log(q / p)`` over all entries.

    Each slice along the last axis of ``q`` and ``p`` must be a probability
    distribution; ``0 * log 0`` counts as zero.
    """
    q, p = as_tensor(q), as_tensor(p)
    if q.shape != p.shape:
        raise ShapeError(f"kl_divergence: shapes differ, {q.shape} vs {p.shape}")
    for name, t in (("q", q), ("p", p)):
        _check_finite(t.data, "kl_divergence")
        if np.any(t.data < 0):
            raise NumericError(f"kl_divergence: negative entry in {name}")
        if np.any(np.abs(t.data.sum(axis=-1) - 1.0) > atol):
            raise NumericError(f"kl_divergence: {name} does not sum to 1")
    support = q.data > 0
    if np.any(support & (p.data <= 0)):
        raise NumericError("kl_divergence: p is zero where q has mass")
    safe_q = np.where(support, q.data, 1.0)
    safe_p = np.where(support, p.data, 1.0)
    logratio = np.where(support, np.log(safe_q) - np.log(safe_p), 0.0)
    value = (q.data * logratio).sum()

    def adjoint(g):
        dq = g * np.where(support, logratio + 1.0, np.log(KL_LOG_FLOOR) - np.log(np.maximum(p.data, KL_LOG_FLOOR)) + 1.0)
        dp = g * np.where(support, -safe_q / safe_p, 0.0)
        return dq, dp

    return custom_op(value, (q, p), adjoint)


# ---------------------------------------------------------------- backward


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, seed=None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor
    with ``requires_grad``.  Repeated calls add to existing gradients."""
    if seed is None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != loss.shape:
        raise ValueError(f"seed shape {seed.shape} does not match {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self) -> str:
        rows = [f"{k}: {v:.3e}" for k, v in self.errors.items()]
        verdict = "PASS" if self.passed else "FAIL"
        return f"grad_check {verdict} (max {self.max_error:.3e}, tol {self.tolerance:g})\n  " + "\n  ".join(rows)


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[Tensor],
    h: float = 1e-6,
    tolerance: float = 1e-6,
    *,
    entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar program ``f()`` with central
    differences.

    The error for one parameter is ``max|analytic - numeric|`` divided by the
    larger of the two gradients' max-abs values.  That scale is floored at
    1% of the largest analytic gradient in the program: a parameter whose
    gradient vanishes identically (a key bias under softmax, say) would
    otherwise be judged on pure rounding noise of the difference quotient.

    ``entries`` caps the number of coordinates probed per parameter (chosen
    by a seeded draw); every parameter is still visited.
    """
    if not isinstance(params, dict):
        params = {p.name or f"param{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    backward(f())
    analytic = {name: np.zeros_like(p.data) if p.grad is None else p.grad.copy() for name, p in params.items()}
    floor = max([1e-12] + [0.01 * float(np.abs(a).max()) for a in analytic.values() if a.size])
    report = GradCheckReport(tolerance)
    for name, p in params.items():
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError(f"grad_check: parameter {name!r} is not contiguous")
        probe = np.arange(flat.size)
        if entries is not None and flat.size > entries:
            probe = np.sort(np.random.default_rng([seed, len(report.errors)]).choice(flat.size, entries, replace=False))
        for i in probe:
            old = flat[i]
            flat[i] = old + h
            fp = f().item()
            flat[i] = old - h
            fm = f().item()
            flat[i] = old
            numeric.flat[i] = (fp - fm) / (2 * h)
        a = analytic[name].reshape(-1)[probe]
        num = numeric.reshape(-1)[probe]
        denom = max(np.abs(analytic[name]).max(), np.abs(num).max(), floor)
        report.errors[name] = float(np.abs(a - num).max() / denom)
    return report
