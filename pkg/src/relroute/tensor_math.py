"""Dense float64 arrays plus a small reverse-mode differentiation tape.

Values are plain ``numpy.ndarray`` (float64, C order). A :class:`Tape` records
primitive applications as ``(primitive, input ids, attrs)`` so it can both
back-propagate and replay itself forward on fresh leaf values.

    tape = Tape()
    x = tape.leaf(np.array([1.0, 2.0, 3.0]))
    loss = (x * x).sum()
    (gx,) = tape.grad(loss, [x])   # [2, 4, 6]
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

NORM_FLOOR = 1e-12


def as_f64(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64, order="C")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    backward: Callable  # (g, out, *inputs, **attrs) -> tuple of input grads (None = no grad)


PRIMITIVES: dict[str, Primitive] = {}


def _prim(name):
    def register(pair):
        fwd, bwd = pair()
        PRIMITIVES[name] = Primitive(name, fwd, bwd)
        return pair
    return register


@_prim("add")
def _add():
    def f(a, b):
        return a + b

    def b(g, out, a, b_):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b_.shape)
    return f, b


@_prim("sub")
def _sub():
    def f(a, b):
        return a - b

    def b(g, out, a, b_):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b_.shape)
    return f, b


@_prim("mul")
def _mul():
    def f(a, b):
        return a * b

    def b(g, out, a, b_):
        return _unbroadcast(g * b_, a.shape), _unbroadcast(g * a, b_.shape)
    return f, b


@_prim("matmul")
def _matmul():
    def f(a, b):
        return np.matmul(a, b)

    def b(g, out, a, b_):
        ga = np.matmul(g, np.swapaxes(b_, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b_.shape)
    return f, b


@_prim("scale")
def _scale():
    def f(a, *, factor):
        return a * factor

    def b(g, out, a, *, factor):
        return (g * factor,)
    return f, b


@_prim("exp")
def _exp():
    def f(a):
        return np.exp(a)

    def b(g, out, a):
        return (g * out,)
    return f, b


@_prim("log")
def _log():
    def f(a):
        return np.log(a)

    def b(g, out, a):
        return (g / a,)
    return f, b


@_prim("pow")
def _pow():
    def f(a, *, exponent):
        return np.power(a, exponent)

    def b(g, out, a, *, exponent):
        return (g * exponent * np.power(a, exponent - 1.0),)
    return f, b


@_prim("sigmoid")
def _sigmoid():
    def f(a):
        # exp(-|a|) never overflows
        e = np.exp(-np.abs(a))
        return np.where(a >= 0, 1.0, e) / (1.0 + e)

    def b(g, out, a):
        return (g * out * (1.0 - out),)
    return f, b


@_prim("clip")
def _clip():
    def f(a, *, lo, hi):
        return np.clip(a, lo, hi)

    def b(g, out, a, *, lo, hi):
        return (g * ((a >= lo) & (a <= hi)),)
    return f, b


@_prim("softmax")
def _softmax():
    def f(a, *, axis):
        z = a - a.max(axis=axis, keepdims=True)
        np.exp(z, out=z)
        z /= z.sum(axis=axis, keepdims=True)
        return z

    def b(g, out, a, *, axis):
        gs = g * out
        dot = gs.sum(axis=axis, keepdims=True)
        np.subtract(g, dot, out=gs)
        gs *= out
        return (gs,)
    return f, b


@_prim("l2_normalize")
def _l2_normalize():
    def f(a):
        norm = np.sqrt((a * a).sum(axis=-1, keepdims=True))
        safe = np.where(norm < NORM_FLOOR, 1.0, norm)
        return np.where(norm < NORM_FLOOR, 0.0, a / safe)

    def b(g, out, a):
        norm = np.sqrt((a * a).sum(axis=-1, keepdims=True))
        safe = np.where(norm < NORM_FLOOR, 1.0, norm)
        ga = (g - out * (g * out).sum(axis=-1, keepdims=True)) / safe
        return (np.where(norm < NORM_FLOOR, 0.0, ga),)
    return f, b


@_prim("sum")
def _sum():
    def f(a, *, axis, keepdims):
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def b(g, out, a, *, axis, keepdims):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return f, b


@_prim("mean")
def _mean():
    def f(a, *, axis, keepdims):
        return np.asarray(a.mean(axis=axis, keepdims=keepdims))

    def b(g, out, a, *, axis, keepdims):
        count = a.size // max(out.size, 1) if a.size else 1
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)
    return f, b


@_prim("abs")
def _abs():
    def f(a):
        return np.abs(a)

    def b(g, out, a):
        # np.sign(0) == 0: subgradient 0 at the kink
        return (g * np.sign(a),)
    return f, b


@_prim("transpose")
def _transpose():
    def f(a, *, axes):
        return np.ascontiguousarray(np.transpose(a, axes))

    def b(g, out, a, *, axes):
        return (np.transpose(g, np.argsort(axes)),)
    return f, b


@_prim("reshape")
def _reshape():
    def f(a, *, shape):
        return a.reshape(shape)

    def b(g, out, a, *, shape):
        return (g.reshape(a.shape),)
    return f, b


@_prim("concat")
def _concat():
    def f(*arrays, axis):
        return np.concatenate(arrays, axis=axis)

    def b(g, out, *arrays, axis):
        cuts = np.cumsum([x.shape[axis] for x in arrays])[:-1]
        return tuple(np.split(g, cuts, axis=axis))
    return f, b


@_prim("gather")
def _gather():
    def f(a, *, indices, axis):
        return np.take(a, indices, axis=axis)

    def b(g, out, a, *, indices, axis):
        ga = np.zeros_like(a)
        moved = np.moveaxis(ga, axis, 0)
        np.add.at(moved, np.asarray(indices), np.moveaxis(g, axis, 0))
        return (ga,)
    return f, b


class Node:
    """A value recorded on a tape."""

    __slots__ = ("tape", "id", "value")
    __array_priority__ = 100

    def __init__(self, tape: "Tape", id_: int, value: np.ndarray):
        self.tape = tape
        self.id = id_
        self.value = value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Node(id={self.id}, shape={self.shape})"

    def _wrap(self, other) -> "Node":
        return other if isinstance(other, Node) else self.tape.const(other)

    def __add__(self, other):
        return add(self, self._wrap(other))

    def __radd__(self, other):
        return add(self._wrap(other), self)

    def __sub__(self, other):
        return sub(self, self._wrap(other))

    def __rsub__(self, other):
        return sub(self._wrap(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, self._wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return mul(self, power(self._wrap(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self._wrap(other))

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


@dataclass
class _Record:
    prim: Primitive
    inputs: tuple
    attrs: dict
    out: int


class Tape:
    """Ordered record of primitive applications over float64 arrays.

    Single-threaded while recording and during backward; separate tapes are
    independent.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.records: list[_Record] = []
        self._leaves: set[int] = set()

    def __len__(self) -> int:
        return len(self.records)

    def _new(self, value: np.ndarray) -> Node:
        self.values.append(value)
        return Node(self, len(self.values) - 1, value)

    def leaf(self, value) -> Node:
        node = self._new(as_f64(value))
        self._leaves.add(node.id)
        return node

    const = leaf

    def apply(self, name: str, *inputs: Node, **attrs) -> Node:
        prim = PRIMITIVES[name]
        for x in inputs:
            if x.tape is not self:
                raise ValueError(f"{name}: input {x!r} belongs to another tape")
        out = prim.forward(*(x.value for x in inputs), **attrs)
        node = self._new(np.asarray(out, dtype=np.float64))
        self.records.append(_Record(prim, tuple(x.id for x in inputs), attrs, node.id))
        return node

    def backward(self, objective: Node) -> dict[int, np.ndarray]:
        if objective.tape is not self:
            raise ValueError("objective is not on this tape")
        if objective.value.size != 1:
            raise ValueError(f"objective must be scalar, got shape {objective.shape}")
        grads: dict[int, np.ndarray] = {objective.id: np.ones_like(objective.value)}
        for rec in reversed(self.records):
            g = grads.pop(rec.out, None)
            if g is None:
                continue
            ins = [self.values[i] for i in rec.inputs]
            in_grads = rec.prim.backward(g, self.values[rec.out], *ins, **rec.attrs)
            for i, gi in zip(rec.inputs, in_grads):
                if gi is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        return grads

    def grad(self, objective: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
        """d objective / d leaf for every node in ``wrt``; unused leaves get zeros."""
        for node in wrt:
            if node.tape is not self:
                raise ValueError(f"{node!r} is not on this tape")
            if node.id not in self._leaves:
                raise ValueError(f"{node!r} is not a tape leaf")
        grads = self.backward(objective)
        return [np.array(grads.get(n.id, np.zeros_like(n.value)), dtype=np.float64).reshape(n.shape)
                for n in wrt]

    def replay(self, leaf_values: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Re-run every record forward, optionally substituting leaf values."""
        values = list(self.values)
        for i, v in (leaf_values or {}).items():
            if i not in self._leaves:
                raise ValueError(f"node {i} is not a leaf")
            values[i] = as_f64(v)
        for rec in self.records:
            values[rec.out] = np.asarray(
                rec.prim.forward(*(values[i] for i in rec.inputs), **rec.attrs), dtype=np.float64)
        return values


# functional surface ---------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    return a.tape.apply("add", a, b)


def sub(a: Node, b: Node) -> Node:
    return a.tape.apply("sub", a, b)


def mul(a: Node, b: Node) -> Node:
    return a.tape.apply("mul", a, b)


def matmul(a: Node, b: Node) -> Node:
    return a.tape.apply("matmul", a, b)


def scale(a: Node, factor: float) -> Node:
    return a.tape.apply("scale", a, factor=float(factor))


def exp(a: Node) -> Node:
    return a.tape.apply("exp", a)


def log(a: Node) -> Node:
    return a.tape.apply("log", a)


def power(a: Node, exponent: float) -> Node:
    return a.tape.apply("pow", a, exponent=float(exponent))


def sigmoid(a: Node) -> Node:
    return a.tape.apply("sigmoid", a)


def clip(a: Node, lo: float, hi: float) -> Node:
    return a.tape.apply("clip", a, lo=float(lo), hi=float(hi))


def logsumexp(a: Node, axis: int = -1) -> Node:
    shift = a.value.max(axis=axis, keepdims=True)
    inner = reduce_sum(exp(sub(a, a.tape.const(shift))), axis=axis)
    return add(log(inner), a.tape.const(np.squeeze(shift, axis=axis)))


def softmax(a: Node, axis: int = -1) -> Node:
    return a.tape.apply("softmax", a, axis=axis)


def l2_normalize(a: Node) -> Node:
    """Unit-normalize along the last axis; rows with norm < 1e-12 map to zero."""
    return a.tape.apply("l2_normalize", a)


def reduce_sum(a: Node, axis=None, keepdims: bool = False) -> Node:
    return a.tape.apply("sum", a, axis=_axis(axis), keepdims=keepdims)


def reduce_mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    return a.tape.apply("mean", a, axis=_axis(axis), keepdims=keepdims)


def absolute(a: Node) -> Node:
    return a.tape.apply("abs", a)


def transpose(a: Node, axes: Sequence[int]) -> Node:
    return a.tape.apply("transpose", a, axes=tuple(axes))


def swapaxes(a: Node, i: int, j: int) -> Node:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a: Node, shape: Sequence[int]) -> Node:
    return a.tape.apply("reshape", a, shape=tuple(shape))


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    return nodes[0].tape.apply("concat", *nodes, axis=axis)


def gather(a: Node, indices, axis: int = 0) -> Node:
    return a.tape.apply("gather", a, indices=tuple(np.atleast_1d(indices).tolist()), axis=axis)


def _axis(axis):
    if isinstance(axis, list):
        return tuple(axis)
    return axis


def grad(objective: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
    return objective.tape.grad(objective, wrt)


def finite_difference(fn: Callable[[np.ndarray], float], point, step: float = 1e-5,
                      coords: Iterable[int] | None = None, order: int = 2) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``point``.

    ``order`` 2 uses f(x +- h); order 4 adds f(x +- 2h), which allows a
    larger step and so less round-off. ``coords`` restricts the estimate to a
    subset of flat indices; other entries are left at zero.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    stencil = ((1, 0.5), (-1, -0.5)) if order == 2 else (
        (1, 2 / 3), (-1, -2 / 3), (2, -1 / 12), (-2, 1 / 12))
    x = as_f64(point).copy()
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    for k in (range(flat.size) if coords is None else coords):
        orig = flat[k]
        acc = 0.0
        for mult, coef in stencil:
            flat[k] = orig + mult * step
            v = float(fn(x))
            if not math.isfinite(v):
                flat[k] = orig
                raise FloatingPointError(f"non-finite objective at coordinate {k}")
            acc += coef * v
        flat[k] = orig
        out[k] = acc / step
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) over coordinates."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


# tensor file format -----------------------------------------------------------

def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    # append rather than replace: stems may contain dots ("ca.0.norm1")
    return stem.parent / (stem.name + ".json"), stem.parent / (stem.name + ".bin")


def save_tensor(stem, array) -> tuple[Path, Path]:
    """Write ``<stem>.json`` (header) and ``<stem>.bin`` (little-endian f64 payload)."""
    arr = as_f64(array)
    header, payload = _paths(stem)
    header.parent.mkdir(parents=True, exist_ok=True)
    header.write_text(json.dumps({"shape": list(arr.shape), "dtype": "f64", "order": "row-major"}))
    payload.write_bytes(arr.astype("<f8").tobytes(order="C"))
    return header, payload


def load_tensor(stem) -> np.ndarray:
    header, payload = _paths(stem)
    meta = json.loads(header.read_text())
    if meta.get("dtype") != "f64" or meta.get("order") != "row-major":
        raise ValueError(f"{header}: unsupported tensor header {meta}")
    shape = tuple(int(n) for n in meta["shape"])
    data = np.frombuffer(payload.read_bytes(), dtype="<f8")
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"{payload}: {data.size} values for shape {shape}")
    return data.astype(np.float64).reshape(shape)
