"""Dense float64 tensors with a linear reverse-mode tape.

Operations executed while a :class:`Tape` is active are appended to it in
execution order, so the record is topologically sorted by construction.
Outside any tape the same functions just compute values, which is what
evaluation code uses.

    with Tape() as tape:
        loss = squared_l2(w)
    tape.backward(loss)
    w.grad  # -> 2 * w.data
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "ShapeError", "NonFiniteError", "TapeError",
    "Tensor", "Tape", "active_tape",
    "add", "sub", "mul", "scale", "neg", "matmul", "transpose", "relu",
    "sum_rows", "batch_mean", "total_sum", "mean", "squared_l2",
    "logsumexp_rows", "pick", "take_rows", "pairwise_sq_dists",
    "normalize_rows", "grad_scale", "detach",
    "GradCheckReport", "grad_check",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def _scalar(g) -> float:
    return float(np.asarray(g).reshape(()))


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """A float64 array plus an optional gradient slot."""

    __array_priority__ = 1000  # keep numpy from hijacking reflected operators

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        _check_finite(arr, name or "tensor input")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, op: str) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        _check_finite(arr, f"output of {op}")
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return NotImplemented

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape

@dataclass
class _Node:
    op: str
    inputs: tuple
    out: Tensor
    backward: Callable[[np.ndarray], tuple]


_local = threading.local()


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def active_tape() -> Optional["Tape"]:
    st = _stack()
    return st[-1] if st else None


class Tape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._done = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        st = _stack()
        if st and st[-1] is self:
            st.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self._produced.clear()
        self._done = False

    def _record(self, node: _Node) -> None:
        if self._done:
            raise TapeError("tape already consumed by backward(); call reset() first")
        self.nodes.append(node)
        self._produced.add(id(node.out))

    def leaves(self) -> list[Tensor]:
        """Gradient-requiring tensors consumed on this tape but not produced by it."""
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in self._produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
        """Populate ``.grad`` of every leaf reachable from ``loss``.

        Leaves on the tape that do not influence ``loss`` and any extra
        ``params`` get zero gradients.
        """
        if self._done:
            raise TapeError("backward() already called on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise TapeError("loss was not produced on this tape")
        self._done = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None or not node.out.requires_grad:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

        targets = {id(t): t for t in self.leaves()}
        for p in params:
            targets.setdefault(id(p), p)
        for key, t in targets.items():
            g = grads.get(key)
            t.grad = np.zeros_like(t.data) if g is None else np.array(g, dtype=np.float64).reshape(t.shape)
            _check_finite(t.grad, "gradient")


def _emit(op: str, arr: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor._wrap(arr, any(t.requires_grad for t in inputs), op)
    tape = active_tape()
    if tape is not None:
        tape._record(_Node(op, tuple(inputs), out, backward))
    return out


# ---------------------------------------------------------------------------
# primitives

def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "b_scalar"
    if a.ndim == 0:
        return "a_scalar"
    if a.ndim >= 1 and b.shape == a.shape[1:]:
        return "b_rows"
    if b.ndim >= 1 and a.shape == b.shape[1:]:
        return "a_rows"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == f"{side}_scalar":
        return np.asarray(g.sum())
    if kind == f"{side}_rows":
        return g.sum(axis=0)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b, "add")
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, kind, "a"), _reduce_to(g, kind, "b")))


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, kind, "a"), _reduce_to(-g, kind, "b")))


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b, "mul")
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_reduce_to(g * b.data, kind, "a"), _reduce_to(g * a.data, kind, "b")))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got shape {a.shape}")
    return _emit("transpose", a.data.T, (a,), lambda g: (g.T,))


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sum_rows(a: Tensor) -> Tensor:
    """(B, n) -> (B,): sum across each row."""
    if a.ndim != 2:
        raise ShapeError(f"sum_rows: expected 2-D, got shape {a.shape}")
    n = a.shape[1]
    return _emit("sum_rows", a.data.sum(axis=1), (a,),
                 lambda g: (np.repeat(g[:, None], n, axis=1),))


def batch_mean(a: Tensor) -> Tensor:
    """(B, n) -> (n,): average over the leading batch dimension."""
    if a.ndim != 2 or a.shape[0] == 0:
        raise ShapeError(f"batch_mean: expected non-empty 2-D, got shape {a.shape}")
    B = a.shape[0]
    return _emit("batch_mean", a.data.mean(axis=0), (a,),
                 lambda g: (np.broadcast_to(g / B, a.shape).copy(),))


def total_sum(a: Tensor) -> Tensor:
    return _emit("total_sum", np.asarray(a.data.sum()), (a,),
                 lambda g: (np.full(a.shape, _scalar(g)),))


def mean(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("mean of an empty tensor")
    n = a.size
    return _emit("mean", np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(a.shape, _scalar(g) / n),))


def squared_l2(a: Tensor) -> Tensor:
    """Sum of squares of all entries."""
    return _emit("squared_l2", np.asarray(np.sum(a.data * a.data)), (a,),
                 lambda g: (2.0 * _scalar(g) * a.data,))


def logsumexp_rows(a: Tensor) -> Tensor:
    """(B, C) -> (B,), stabilised by subtracting the row max."""
    if a.ndim != 2:
        raise ShapeError(f"logsumexp_rows: expected 2-D, got shape {a.shape}")
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    soft = e / s
    return _emit("logsumexp_rows", out, (a,), lambda g: (g[:, None] * soft,))


def pick(a: Tensor, idx) -> Tensor:
    """(B, C), int[B] -> (B,) with entry ``a[i, idx[i]]``."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"pick: incompatible shapes {a.shape} and {idx.shape}")
    rows = np.arange(a.shape[0])

    def bwd(g):
        out = np.zeros_like(a.data)
        out[rows, idx] = g
        return (out,)

    return _emit("pick", a.data[rows, idx], (a,), bwd)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows ``idx`` of a 2-D tensor; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"take_rows: incompatible shapes {a.shape} and {idx.shape}")

    def bwd(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("take_rows", a.data[idx], (a,), bwd)


def pairwise_sq_dists(a: Tensor) -> Tensor:
    """(n, d) -> (n, n) with entry ``||a_i - a_j||^2``, from explicit differences."""
    if a.ndim != 2:
        raise ShapeError(f"pairwise_sq_dists: expected 2-D, got shape {a.shape}")
    diff = a.data[:, None, :] - a.data[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def bwd(g):
        gs = g + g.T
        return (2.0 * np.einsum("ij,ijk->ik", gs, diff),)

    return _emit("pairwise_sq_dists", out, (a,), bwd)


def normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by ``max(||row||, eps)``; zero rows stay zero."""
    if a.ndim != 2:
        raise ShapeError(f"normalize_rows: expected 2-D, got shape {a.shape}")
    norms = np.sqrt(np.sum(a.data * a.data, axis=1, keepdims=True))
    big = norms > eps
    denom = np.where(big, norms, eps)
    u = a.data / denom

    def bwd(g):
        proj = np.sum(u * g, axis=1, keepdims=True)
        return (np.where(big, (g - u * proj) / denom, g / eps),)

    return _emit("normalize_rows", u, (a,), bwd)


def grad_scale(a: Tensor, factor: float) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``factor``."""
    factor = float(factor)
    return _emit("grad_scale", a.data.copy(), (a,), lambda g: (g * factor,))


def detach(a: Tensor) -> Tensor:
    return Tensor._wrap(a.data.copy(), False, "detach")


# ---------------------------------------------------------------------------
# finite-difference oracle

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_index: tuple
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} at {self.worst_index} (tol {self.tol:g})"


def grad_check(fn: Callable[[Tensor], Tensor], point, tol: float = 1e-5,
               step: float = 1e-6, floor: float = 1e-3) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn`` with central differences.

    The relative error is ``|a - n| / max(|a|, |n|, floor)`` so entries with
    vanishing gradient are judged on an absolute scale.
    """
    base = point.data if isinstance(point, Tensor) else np.asarray(point, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    with Tape() as tape:
        loss = fn(x)
    tape.backward(loss, params=[x])
    analytic = x.grad.copy()

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for k in range(base.size):
        hi = base.copy().reshape(-1)
        lo = hi.copy()
        hi[k] += step
        lo[k] -= step
        f_hi = fn(Tensor(hi.reshape(base.shape))).item()
        f_lo = fn(Tensor(lo.reshape(base.shape))).item()
        flat[k] = (f_hi - f_lo) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    err = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(err <= tol, err, tuple(int(i) for i in worst), analytic, numeric, tol)
