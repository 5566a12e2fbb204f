"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable function returns a new :class:`Tensor` that remembers its
parents and a backward rule. Calling :func:`backward` on a scalar loss builds a
:class:`Tape` (the recorded operations in topological order) and replays it in
reverse, accumulating gradients into every leaf that requires them.

Broadcasting is deliberately limited to exact shape matches and scalars. Use
:func:`expand` when a lower-rank tensor has to be tiled explicitly.
"""

from __future__ import annotations

import contextlib
import string
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(RuntimeError):
    """A call violated a documented precondition."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable operation recording inside the block."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- construction -----------------------------------------------------
    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Wrap `data` as the output of an operation.

        `backward(g)` must return one gradient (or None) per parent. Nothing is
        recorded when grad mode is off or no parent needs a gradient.
        """
        out = cls.__new__(cls)
        out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
        out.grad = None
        out.name = None
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------


class Tape:
    """Recorded operations reachable from a root, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
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
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data) if seed is None else seed}
        # buffers allocated here may be summed into in place; others can alias op outputs
        owned: set[int] = set()
        for node in reversed(self.nodes):
            key = id(node)
            g = grads.pop(key, None)
            owned.discard(key)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                pkey = id(p)
                if pkey not in grads:
                    grads[pkey] = pg
                elif pkey in owned:
                    grads[pkey] += pg
                else:
                    grads[pkey] = grads[pkey] + pg
                    owned.add(pkey)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into every leaf's ``grad``.

    Repeated calls accumulate; clear with ``zero_grad`` between steps.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires grad")
    if tape is None:
        tape = Tape.from_root(loss)
    tape.backward(loss)
    return tape


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def _unscalar(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only exact or scalar broadcast)")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (_unscalar(g, sa), _unscalar(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (_unscalar(g, sa), _unscalar(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor.from_op(
        ad * bd,
        (a, b),
        lambda g: (_unscalar(g * bd, ad.shape), _unscalar(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor.from_op(
        out,
        (a, b),
        lambda g: (_unscalar(g / bd, ad.shape), _unscalar(-g * out / bd, bd.shape)),
    )


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return Tensor.from_op(a.data * k, (a,), lambda g: (g * k,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor.from_op(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor.from_op(ad * ad, (a,), lambda g: (2.0 * g * ad,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "exp": lambda a, _=None: exp(a),
    "tanh": lambda a, _=None: tanh(a),
    "sigmoid": lambda a, _=None: sigmoid(a),
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch one of add, mul, sub, scale, exp, tanh, sigmoid by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(as_tensor(a), b)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Tensor.from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def _expand_ellipsis(subs: str, ndim: int, width: int) -> str:
    if "..." not in subs:
        return subs
    n = ndim - (len(subs) - 3)
    letters = string.ascii_uppercase[width - n : width]
    return subs.replace("...", letters)


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """Differentiable ``np.einsum`` for one or two operands.

    Each operand index must be distinct within that operand. Ellipsis dims
    must agree exactly across operands.
    """
    operands = tuple(as_tensor(o) for o in operands)
    if "->" not in subscripts:
        raise ValueError("einsum needs an explicit output ('->')")
    lhs, out = subscripts.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != len(operands):
        raise ShapeError("einsum operand count does not match subscripts")
    width = max(o.ndim - (len(s) - 3) if "..." in s else 0 for s, o in zip(ins, operands))
    ins = [_expand_ellipsis(s, o.ndim, width) for s, o in zip(ins, operands)]
    out = out.replace("...", string.ascii_uppercase[:width])
    for s, o in zip(ins, operands):
        if len(s) != o.ndim or len(set(s)) != len(s):
            raise ShapeError(f"einsum subscripts {s!r} do not fit operand of shape {o.shape}")
    spec = ",".join(ins) + "->" + out
    datas = [o.data for o in operands]
    result = np.einsum(spec, *datas, optimize=len(datas) > 1)
    sizes = {}
    for s, d in zip(ins, datas):
        for ch, n in zip(s, d.shape):
            if sizes.setdefault(ch, n) != n:
                raise ShapeError(f"einsum extent mismatch on index {ch!r}")

    def bw(g):
        grads = []
        for k, sk in enumerate(ins):
            others = [(ins[j], datas[j]) for j in range(len(ins)) if j != k]
            avail = set(out).union(*[set(s) for s, _ in others])
            kept = "".join(ch for ch in sk if ch in avail)
            gspec = ",".join([out] + [s for s, _ in others]) + "->" + kept
            gk = np.einsum(gspec, g, *[d for _, d in others], optimize=len(others) > 0)
            if kept != sk:
                view = [sizes[ch] if ch in kept else 1 for ch in sk]
                gk = np.broadcast_to(gk.reshape(view), [sizes[ch] for ch in sk]).copy()
            grads.append(gk)
        return grads

    return Tensor.from_op(np.asarray(result), operands, bw)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def _restore(g: np.ndarray, shape, axes, keepdims):
    if axes is None:
        return np.broadcast_to(g.reshape([1] * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce(kind: str, a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum, mean, or Euclidean norm (``norm2``) over ``axis`` (all axes if None).

    The norm's gradient at the zero vector is taken as zero.
    """
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    ad = a.data
    if kind == "sum":
        out = ad.sum(axis=axes, keepdims=keepdims)
        return Tensor.from_op(np.asarray(out), (a,), lambda g: (_restore(g, shape, axes, keepdims).copy(),))
    if kind == "mean":
        n = ad.size if axes is None else int(np.prod([shape[i] for i in axes]))
        out = ad.mean(axis=axes, keepdims=keepdims)
        return Tensor.from_op(np.asarray(out), (a,), lambda g: (_restore(g / n, shape, axes, keepdims).copy(),))
    if kind == "norm2":
        out = np.sqrt((ad * ad).sum(axis=axes, keepdims=keepdims))

        def bw(g):
            full = _restore(out, shape, axes, keepdims)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(full > 0, ad / np.where(full > 0, full, 1.0), 0.0)
            return (_restore(g, shape, axes, keepdims) * ratio,)

        return Tensor.from_op(np.asarray(out), (a,), bw)
    raise ValueError(f"unknown reduction {kind!r}")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", a, axis, keepdims)


def norm2(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("norm2", a, axis, keepdims)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        if _is_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return Tensor.from_op(np.array(a.data[idx]), (a,), bw)


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return Tensor.from_op(
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: np.split(g, splits, axis=ax),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"stack: shapes differ {[t.shape for t in tensors]}")
    ax = axis % (tensors[0].ndim + 1)
    return Tensor.from_op(
        np.stack([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: [np.take(g, i, axis=ax) for i in range(len(tensors))],
    )


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicitly broadcast size-1 axes of ``a`` to ``shape`` (same rank)."""
    shape = tuple(shape)
    if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    return Tensor.from_op(
        np.broadcast_to(a.data, shape).copy(),
        (a,),
        lambda g: (g.sum(axis=axes, keepdims=True),),
    )


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5, indices: Iterable | None = None) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (optionally at selected flat indices only)."""
    x = np.array(x, dtype=DTYPE)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    idxs = range(flat.size) if indices is None else indices
    with no_grad():
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(Tensor(x.copy())).data)
            flat[i] = orig - eps
            fm = float(f(Tensor(x.copy())).data)
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape)


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Largest |analytic - numeric| / max(1, |analytic|) over the elements of ``x``."""
    xt = Tensor(np.array(x, dtype=DTYPE), requires_grad=True)
    backward(f(xt))
    num = numeric_grad(f, xt.data, eps)
    err = np.abs(xt.grad - num) / np.maximum(1.0, np.abs(xt.grad))
    return float(err.max()) if err.size else 0.0
