"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every primitive applied to tensors that require
gradients while it is active (define-by-run). :meth:`Tape.backward` walks the
record in exact reverse order and returns gradients keyed by parameter name.

    >>> w = parameter([[2.0]], name="w")
    >>> with Tape() as tape:
    ...     loss = ops.sum(w * w)
    >>> tape.backward(loss)["w"]
    array([[4.]])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    """Raised when an op receives incompatible input shapes."""


class TapeError(RuntimeError):
    """Raised for misuse of the tape (non-scalar loss, backward before forward)."""


class NondeterministicFunctionError(RuntimeError):
    """Raised by :func:`finite_diff_check` when two identical evaluations differ."""


class Tensor:
    """Dense float64 array that may participate in a recorded computation."""

    __slots__ = ("data", "requires_grad", "name", "node_id", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: Optional[int] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; every method funnels through ops
    def __add__(self, other):
        return ops.add(self, other)

    def __radd__(self, other):
        return ops.add(other, self)

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    def __rmul__(self, other):
        return ops.mul(other, self)

    def __truediv__(self, other):
        return ops.div(self, other)

    def __neg__(self):
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def __getitem__(self, index):
        return ops.getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return ops.mean(self, axis=axis, keepdims=keepdims)


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def tensor(values, name: Optional[str] = None) -> Tensor:
    """Build a constant tensor from external data, rejecting NaN/Inf."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if 0 in arr.shape:
        raise ShapeError(f"tensor dimensions must be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in tensor {name or ''}".strip())
    return Tensor(arr, name=name)


def parameter(values, name: str) -> Tensor:
    """A trainable leaf tensor."""
    t = tensor(values, name=name)
    t.requires_grad = True
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Record:
    kind: str
    inputs: Sequence[Tensor]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered record of primitive operations for one forward pass."""

    records: List[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, kind, inputs, output, backward) -> None:
        output.node_id = len(self.records)
        self.records.append(_Record(kind, inputs, output, backward))

    def backward(self, loss: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> Dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` for every named leaf.

        Leaves listed in ``params`` but not reachable from ``loss`` get an
        exact zero gradient.
        """
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.records or loss.node_id is None or loss.node_id >= len(self.records) or self.records[loss.node_id].output is not loss:
            raise TapeError("backward called before any recorded forward pass produced this loss")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: Dict[str, Tensor] = {}
        for rec in reversed(self.records[: loss.node_id + 1]):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp.node_id is None and inp.name is not None:
                    leaves[inp.name] = inp
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig

        out: Dict[str, np.ndarray] = {}
        if params is not None:
            for name, p in params.items():
                g = grads.get(id(p))
                out[name] = np.zeros_like(p.data) if g is None else g.reshape(p.shape)
        else:
            for name, p in leaves.items():
                out[name] = grads[id(p)].reshape(p.shape)
        return out


def backward(loss: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> Dict[str, np.ndarray]:
    """Backward through the innermost active tape."""
    tape = _active_tape()
    if tape is None:
        raise TapeError("backward called outside an active tape")
    return tape.backward(loss, params)


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _emit(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.record(kind, inputs, out, backward)
    return out


def _check_broadcast(kind, a: np.ndarray, b: np.ndarray):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


class ops:
    """Namespace of differentiable primitives (also reachable via :func:`apply`)."""

    @staticmethod
    def add(a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        _check_broadcast("add", a.data, b.data)
        sa, sb = a.shape, b.shape
        return _emit("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    @staticmethod
    def sub(a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        _check_broadcast("sub", a.data, b.data)
        sa, sb = a.shape, b.shape
        return _emit("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    @staticmethod
    def mul(a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        _check_broadcast("mul", a.data, b.data)
        ad, bd = a.data, b.data
        return _emit(
            "mul",
            (a, b),
            ad * bd,
            lambda g: (
                _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
            ),
        )

    @staticmethod
    def div(a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        _check_broadcast("div", a.data, b.data)
        ad, bd = a.data, b.data
        out = ad / bd
        return _emit(
            "div",
            (a, b),
            out,
            lambda g: (
                _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
            ),
        )

    @staticmethod
    def matmul(a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        ad, bd = a.data, b.data
        if ad.ndim < 1 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {ad.shape} @ {bd.shape}")
        if ad.ndim == 1:
            row = ops.matmul(ops.reshape(a, (1, ad.shape[0])), b)
            return ops.reshape(row, row.shape[1:])

        if bd.ndim == 2 and ad.ndim > 2:
            # batched rows times one weight matrix: fold the batch into rows
            flat = ops.matmul(ops.reshape(a, (-1, ad.shape[-1])), b)
            return ops.reshape(flat, ad.shape[:-1] + (bd.shape[1],))

        def back(g):
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
            return ga, gb

        return _emit("matmul", (a, b), ad @ bd, back)

    @staticmethod
    def concat(items: Sequence, axis: int = -1) -> Tensor:
        items = [as_tensor(t) for t in items]
        if not items:
            raise ShapeError("concat: empty input list")
        try:
            out = np.concatenate([t.data for t in items], axis=axis)
        except ValueError as err:
            raise ShapeError(f"concat: {[t.shape for t in items]} along axis {axis}: {err}") from None
        splits = np.cumsum([t.shape[axis] for t in items])[:-1]
        return _emit("concat", tuple(items), out, lambda g: tuple(np.split(g, splits, axis=axis)))

    @staticmethod
    def reshape(a, shape) -> Tensor:
        a = as_tensor(a)
        src = a.shape
        try:
            out = a.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {src} as {shape}") from None
        return _emit("reshape", (a,), out, lambda g: (g.reshape(src),))

    @staticmethod
    def broadcast_to(a, shape) -> Tensor:
        a = as_tensor(a)
        src = a.shape
        try:
            out = np.broadcast_to(a.data, shape)
        except ValueError:
            raise ShapeError(f"broadcast: cannot broadcast {src} to {shape}") from None
        return _emit("broadcast", (a,), np.ascontiguousarray(out), lambda g: (_unbroadcast(g, src),))

    @staticmethod
    def getitem(a, index) -> Tensor:
        a = as_tensor(a)
        src = a.shape

        fancy = any(isinstance(i, (list, np.ndarray)) for i in (index if isinstance(index, tuple) else (index,)))

        def back(g):
            full = np.zeros(src)
            if fancy:
                np.add.at(full, index, g)
            else:
                full[index] = g
            return (full,)

        return _emit("getitem", (a,), a.data[index], back)

    @staticmethod
    def sum(a, axis=None, keepdims: bool = False) -> Tensor:
        a = as_tensor(a)
        src = a.shape
        out = a.data.sum(axis=axis, keepdims=keepdims)
        if axis is None and not keepdims:
            out = out.reshape(1)

        def back(g):
            if axis is None:
                return (np.full(src, g.reshape(-1)[0]),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return _emit("sum", (a,), out, back)

    @staticmethod
    def mean(a, axis=None, keepdims: bool = False) -> Tensor:
        a = as_tensor(a)
        n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
        return ops.mul(ops.sum(a, axis=axis, keepdims=keepdims), 1.0 / n)

    @staticmethod
    def abs(a) -> Tensor:
        a = as_tensor(a)
        sign = np.sign(a.data)
        return _emit("abs", (a,), np.abs(a.data), lambda g: (g * sign,))

    @staticmethod
    def exp(a) -> Tensor:
        a = as_tensor(a)
        out = np.exp(a.data)
        return _emit("exp", (a,), out, lambda g: (g * out,))

    @staticmethod
    def log(a) -> Tensor:
        a = as_tensor(a)
        ad = a.data
        return _emit("log", (a,), np.log(ad), lambda g: (g / ad,))

    @staticmethod
    def layer_norm(a, eps: float = 1e-5) -> Tensor:
        """Parameter-free normalisation over the last axis."""
        a = as_tensor(a)
        mu = a.data.mean(axis=-1, keepdims=True)
        sigma = np.sqrt(a.data.var(axis=-1, keepdims=True) + eps)
        xhat = (a.data - mu) / sigma

        def back(g):
            gm = g.mean(axis=-1, keepdims=True)
            gx = (g * xhat).mean(axis=-1, keepdims=True)
            return ((g - gm - xhat * gx) / sigma,)

        return _emit("layer_norm", (a,), xhat, back)

    @staticmethod
    def clamp_min(a, floor: float) -> Tensor:
        a = as_tensor(a)
        mask = a.data > floor
        return _emit("clamp_min", (a,), np.where(mask, a.data, floor), lambda g: (g * mask,))

    @staticmethod
    def relu(a) -> Tensor:
        a = as_tensor(a)
        mask = a.data > 0
        return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))

    @staticmethod
    def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
        a = as_tensor(a)
        factor = np.where(a.data > 0, 1.0, slope)
        return _emit("leaky_relu", (a,), a.data * factor, lambda g: (g * factor,))

    @staticmethod
    def sigmoid(a) -> Tensor:
        a = as_tensor(a)
        out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
        return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))

    @staticmethod
    def softmax(a, axis: int = -1) -> Tensor:
        a = as_tensor(a)
        z = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=axis, keepdims=True)

        def back(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return _emit("softmax", (a,), out, back)

    @staticmethod
    def dropout(a, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
        """Inverted dropout as a recorded mask multiply; identity when ``rng`` is None."""
        a = as_tensor(a)
        if rng is None or rate <= 0.0:
            return a
        keep = 1.0 - rate
        mask = (rng.random(a.shape) < keep) / keep
        return _emit("dropout", (a,), a.data * mask, lambda g: (g * mask,))


_OP_TABLE: Dict[str, Callable[..., Tensor]] = {
    "add": ops.add,
    "sub": ops.sub,
    "mul": ops.mul,
    "div": ops.div,
    "matmul": ops.matmul,
    "concat": lambda *xs, axis=-1: ops.concat(xs, axis=axis),
    "reshape": ops.reshape,
    "broadcast": ops.broadcast_to,
    "getitem": ops.getitem,
    "sum": ops.sum,
    "mean": ops.mean,
    "abs": ops.abs,
    "exp": ops.exp,
    "log": ops.log,
    "clamp_min": ops.clamp_min,
    "layer_norm": ops.layer_norm,
    "relu": ops.relu,
    "leaky_relu": ops.leaky_relu,
    "sigmoid": ops.sigmoid,
    "softmax": ops.softmax,
    "dropout": ops.dropout,
}


def apply(op_kind: str, inputs: Sequence, **attrs: Any) -> Tensor:
    """Apply a primitive by name, e.g. ``apply("matmul", [a, b])``."""
    try:
        fn = _OP_TABLE[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}; known: {sorted(_OP_TABLE)}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Max relative error of analytic vs. central-difference gradients per block."""

    max_rel_error: Dict[str, float]
    tol: float
    entries_checked: int

    @property
    def passed(self) -> bool:
        return all(err <= self.tol for err in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def lines(self) -> List[str]:
        return [
            f"{'PASS' if err <= self.tol else 'FAIL'} {name}: max rel err {err:.3e}"
            for name, err in self.max_rel_error.items()
        ]


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` must rebuild its forward pass from the current ``params`` values on
    every call. Each entry's error is ``|a - n| / max(|a|, |n|, floor)``.
    ``max_entries`` subsamples entries per block when given.
    """
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    with Tape() as tape:
        loss = f()
    analytic = tape.backward(loss, params)
    base = loss.item()
    again = float(f().item())
    if again != base:
        raise NondeterministicFunctionError(f"two forward passes disagree: {base!r} vs {again!r}")

    rng = rng if rng is not None else np.random.default_rng(0)
    report: Dict[str, float] = {}
    checked = 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        ga = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
            worst = max(worst, err)
            checked += 1
        report[name] = worst
    return GradCheckReport(report, tol, checked)
