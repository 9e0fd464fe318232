"""Reverse-mode automatic differentiation over dense float64 arrays.

Values are plain numpy arrays wrapped in :class:`Tensor`.  Operations are
recorded only while a :class:`Tape` is active and at least one input requires
a gradient; outside a tape every op is a thin wrapper around numpy, which is
what inference paths rely on.

Broadcasting is deliberately narrow: binary elementwise ops accept equal
shapes, a 0-d scalar against anything, or a 1-d vector against the last axis
of the other operand ("vector over rows").
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
_tapes: list["Tape"] = []


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class Tensor:
    """A float64 array, optionally a node on the active tape."""

    __slots__ = ("value", "op", "parents", "vjp", "requires_grad", "id")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op = op
        self.parents: tuple[Tensor, ...] = ()
        self.vjp = None
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return len(self.value)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def is_recording() -> bool:
    return bool(_tapes)


def _record(op: str, value, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if _tapes and any(p.requires_grad for p in parents):
        out = Tensor(value, requires_grad=True, op=op)
        out.parents = tuple(parents)
        out.vjp = vjp
        _tapes[-1].nodes.append(out)
        return out
    return Tensor(value, op=op)


class Tape:
    """Ordered record of the nodes built while the tape is active.

    Nodes are appended in creation order, which is a topological order, so
    the backward sweep is a single reverse pass over ``nodes``.
    """

    def __init__(self, params: Iterable[Tensor] = ()):
        self.nodes: list[Tensor] = []
        self.params: list[Tensor] = list(params)

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def watch(self, params: Iterable[Tensor]) -> None:
        self.params.extend(params)

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` w.r.t. ``params`` (default: watched params).

        Parameters the loss does not depend on get zero gradients.
        """
        if loss.value.shape not in ((), (1,)):
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        params = self.params if params is None else list(params)
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(node.id, None) if node.parents else None
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.id)
                grads[parent.id] = pg if prev is None else prev + pg
        return {p: grads.get(p.id, np.zeros_like(p.value)) for p in params}


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss, params)


# ---------------------------------------------------------------- broadcasting

def _check_binary(op: str, a: np.ndarray, b: np.ndarray) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim == 1 and b.ndim >= 1 and sa[0] == sb[-1]:
        return
    if b.ndim == 1 and a.ndim >= 1 and sb[0] == sa[-1]:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.reshape(-1, shape[0]).sum(axis=0)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("add", a.value, b.value)
    sa, sb = a.shape, b.shape
    return _record("add", a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def lincomb(tensors: Sequence, coeffs: Sequence[float]) -> Tensor:
    """sum_i c_i * t_i over equal-shape operands, as a single tape node."""
    ts = [as_tensor(t) for t in tensors]
    cs = [float(c) for c in coeffs]
    if not ts or len(ts) != len(cs):
        raise ShapeError(f"lincomb: need matching non-empty operands and coefficients, got {len(ts)} and {len(cs)}")
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise ShapeError(f"lincomb: incompatible shapes {shape} and {t.shape}")
    out = cs[0] * ts[0].value
    for c, t in zip(cs[1:], ts[1:]):
        out = out + c * t.value
    return _record("lincomb", out, ts, lambda g: tuple(c * g for c in cs))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("subtract", a.value, b.value)
    sa, sb = a.shape, b.shape
    return _record("subtract", a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("multiply", a.value, b.value)
    av, bv = a.value, b.value
    return _record("multiply", av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("divide", a.value, b.value)
    av, bv = a.value, b.value
    out = av / bv
    return _record("divide", out, (a, b),
                   lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("negate", -a.value, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scale", a.value * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _record("log", np.log(av), (a,), lambda g: (g / av,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _record("sin", np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _record("cos", np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _record("square", av * av, (a,), lambda g: (2.0 * g * av,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _record("abs", np.abs(av), (a,), lambda g: (g * np.sign(av),))


# ---------------------------------------------------------------- reductions

def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("sum", a.value.sum(axis=axis), (a,), vjp)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    return _record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def dense(x, w, b, tanh: bool = False) -> Tensor:
    """x @ w + b, optionally followed by tanh, as a single tape node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0] or bv.shape != (wv.shape[1],):
        raise ShapeError(f"dense: incompatible shapes {xv.shape}, {wv.shape}, {bv.shape}")
    out = xv @ wv + bv
    if tanh:
        out = np.tanh(out)

    def vjp(g):
        if tanh:
            g = g * (1.0 - out * out)
        return g @ wv.T, xv.T @ g, _unbroadcast(g, bv.shape)

    return _record("dense", out, (x, w, b), vjp)


def solve(a, b) -> Tensor:
    """X with A @ X = B, via LU with partial pivoting."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or av.shape[0] != av.shape[1] or bv.shape[0] != av.shape[0]:
        raise ShapeError(f"solve: incompatible shapes {av.shape} and {bv.shape}")
    x = np.linalg.solve(av, bv)

    def vjp(g):
        gb = np.linalg.solve(av.T, g)
        ga = -np.outer(gb, x) if x.ndim == 1 else -gb @ x.T
        return ga, gb

    return _record("solve", x, (a, b), vjp)


# ---------------------------------------------------------------- shape ops

def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _record("transpose", np.transpose(a.value, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record("getitem", a.value[idx], (a,), vjp)


def take(a, indices: Sequence[int], axis: int = -1) -> Tensor:
    """Gather along ``axis``; with a permutation this is a coordinate shuffle."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _record("take", np.take(a.value, indices, axis=axis), (a,), vjp)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    vals = [x.value for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[v.shape for v in vals]}") from e
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _record("concat", out, xs, lambda g: tuple(np.split(g, cuts, axis=axis)))


def split(a, sizes: int | Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split along ``axis``; an int is the single cut index (first part has that size)."""
    a = as_tensor(a)
    n = a.shape[axis]
    sizes = [sizes, n - sizes] if isinstance(sizes, int) else list(sizes)
    if any(s < 0 for s in sizes) or np.sum(sizes) != n:
        raise ShapeError(f"split: sizes {sizes} do not partition axis of length {n} (shape {a.shape})")
    out, start = [], 0
    for s in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + s)
        out.append(getitem(a, tuple(sl)))
        start += s
    return out


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    vals = [x.value for x in xs]
    if len({v.shape for v in vals}) > 1:
        raise ShapeError(f"stack: shapes differ {[v.shape for v in vals]}")
    n = len(vals)
    return _record("stack", np.stack(vals, axis=axis), xs,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# ---------------------------------------------------------------- gradient check

def grad_check(fn: Callable[..., Tensor], point: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps one Tensor per entry of ``point`` to a scalar Tensor.  The
    per-coordinate error is |a - c| / (|a| + |c| + 1e-12).
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"grad_check: eps must lie in (0, 1e-2], got {eps}")
    base = [np.array(p, dtype=np.float64) for p in point]
    params = [Tensor(p.copy(), requires_grad=True) for p in base]
    with Tape(params) as tape:
        loss = fn(*params)
    if not np.all(np.isfinite(loss.value)):
        raise NonFiniteError("grad_check: non-finite loss at the base point")
    analytic = tape.backward(loss)

    def evaluate(arrays) -> float:
        v = float(fn(*[Tensor(x) for x in arrays]).value)
        if not np.isfinite(v):
            raise NonFiniteError("grad_check: non-finite value at a perturbed point")
        return v

    worst = 0.0
    for i, p in enumerate(base):
        ga = analytic[params[i]]
        for j in np.ndindex(p.shape):
            plus = [x.copy() for x in base]
            minus = [x.copy() for x in base]
            plus[i][j] += eps
            minus[i][j] -= eps
            c = (evaluate(plus) - evaluate(minus)) / (2.0 * eps)
            a = float(ga[j])
            worst = max(worst, abs(a - c) / (abs(a) + abs(c) + 1e-12))
    return worst


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """``grad_check`` for a closure over live parameter tensors.

    Each parameter entry is perturbed in place and restored afterwards.  With
    ``max_coords`` only a seeded random subset of coordinates is probed.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"grad_check_params: eps must lie in (0, 1e-2], got {eps}")
    params = list(params)
    with Tape(params) as tape:
        loss = loss_fn()
    analytic = tape.backward(loss)
    coords = [(i, j) for i, p in enumerate(params) for j in np.ndindex(p.shape)]
    if max_coords is not None and len(coords) > max_coords:
        pick = np.random.default_rng(seed).choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    def evaluate() -> float:
        v = float(loss_fn().value)
        if not np.isfinite(v):
            raise NonFiniteError("grad_check_params: non-finite value at a perturbed point")
        return v

    worst = 0.0
    for i, j in coords:
        p = params[i]
        orig = p.value[j]
        p.value[j] = orig + eps
        up = evaluate()
        p.value[j] = orig - eps
        down = evaluate()
        p.value[j] = orig
        c = (up - down) / (2.0 * eps)
        a = float(analytic[p][j])
        worst = max(worst, abs(a - c) / (abs(a) + abs(c) + 1e-12))
    return worst
