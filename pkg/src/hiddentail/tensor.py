"""Minimal dense tensors with tape-based reverse-mode autodiff.

Every value is a float64 numpy array. Operations executed while a
:class:`Tape` is active (and touching at least one tensor that requires a
gradient) are recorded in execution order; :func:`backward` walks the tape
in reverse exactly once.

Broadcasting is limited to a trailing-shape operand against a tensor with
extra leading (batch) dimensions, e.g. adding a bias of shape ``(d,)`` to
activations of shape ``(T, d)``. Anything else needs an explicit reshape.
"""

from __future__ import annotations

import io
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "ContractError",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "softmax",
    "log",
    "exp",
    "layer_norm",
    "embedding",
    "slice_",
    "concat",
    "cross_entropy",
    "mean",
    "sum_",
    "shift_max",
    "softplus",
    "backward",
    "check_gradient",
    "save_tensor",
    "load_tensor",
    "write_tensor",
    "read_tensor",
]

LOG_FLOOR = 1e-300
EXP_CEIL = 709.0


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_inputs", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._inputs: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


class Tape:
    """Ordered record of executed primitive ops.

    Use as a context manager; ops run inside the block are appended to
    ``ops``. Tapes nest, the innermost one records.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.ops: list[Tensor] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.ops)

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._backward = rule
        tape.ops.append(out)
    else:
        out.requires_grad = False
        out._inputs = ()
        out._backward = None
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or b.size == 1 and b.data.ndim == 0:
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    raise ShapeError(f"{op}: cannot combine shapes {sa} and {sb}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < b.data.ndim:
        a, b = b, a
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def rule(g):
        return g, _reduce_to(g, sb)

    return _record(a.data + b.data, (a, b), rule)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < b.data.ndim:
        a, b = b, a
    _check_broadcast(a, b, "mul")
    sb = b.shape
    ad, bd = a.data, b.data

    def rule(g):
        return g * bd, _reduce_to(g * ad, sb)

    return _record(ad * bd, (a, b), rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; a shared leading batch axis is allowed."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2] \
            or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data

    def rule(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _record(ad @ bd, (a, b), rule)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.data.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as err:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from err
    return _record(out, (a,), lambda g: (g.reshape(old),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.shape[axis] < 1:
        raise ContractError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True))),

    return _record(s, (x,), rule)


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.size and x.data.min() < LOG_FLOOR:
        raise ContractError(f"log: argument below {LOG_FLOOR} (min {x.data.min()!r})")
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.size and x.data.max() > EXP_CEIL:
        raise ContractError(f"exp: argument above {EXP_CEIL} would overflow")
    e = np.exp(x.data)
    return _record(e, (x,), lambda g: (g * e,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = _as_tensor(x)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    n = x.shape[-1]

    def rule(g):
        gx = g * gd
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return dx, _reduce_to(g * xhat, gain.shape), _reduce_to(g, bias.shape)

    return _record(xhat * gd + bias.data, (x, gain, bias), rule)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table``; gradients scatter-add back into repeated rows."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {table.shape[0]})")
    shape = table.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(table.data[idx], (table,), rule)


def slice_(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    x = _as_tensor(x)
    ax = axis % x.data.ndim
    key = tuple(slice(start, stop) if i == ax else slice(None) for i in range(x.data.ndim))
    shape = x.shape

    def rule(g):
        out = np.zeros(shape)
        out[key] = g
        return (out,)

    return _record(np.ascontiguousarray(x.data[key]), (x,), rule)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    ax = axis % xs[0].data.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def rule(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(xs)))

    return _record(np.concatenate([x.data for x in xs], axis=ax), xs, rule)


def cross_entropy(z: Tensor, target) -> Tensor:
    """Per-row ``-log softmax(z)[target]``.

    ``z`` of shape ``(n,)`` with an int target gives a scalar; ``z`` of
    shape ``(L, n)`` with ``L`` targets gives a length-``L`` vector.
    """
    z = _as_tensor(z)
    single = z.data.ndim == 1
    zd = z.data[None, :] if single else z.data
    tg = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n = zd.shape[-1]
    if tg.shape[0] != zd.shape[0]:
        raise ShapeError(f"cross_entropy: {zd.shape[0]} rows but {tg.shape[0]} targets")
    if tg.size and (tg.min() < 0 or tg.max() >= n):
        raise IndexError(f"cross_entropy: target out of range [0, {n})")
    m = zd.max(axis=-1, keepdims=True)
    e = np.exp(zd - m)
    se = e.sum(axis=-1, keepdims=True)
    rows = np.arange(zd.shape[0])
    loss = (np.log(se) + m)[:, 0] - zd[rows, tg]
    p = e / se

    def rule(g):
        gz = p.copy()
        gz[rows, tg] -= 1.0
        gz *= np.reshape(g, (-1, 1))
        return (gz[0] if single else gz),

    return _record(np.asarray(loss[0]) if single else loss, (z,), rule)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    if axis is None:
        n = x.data.size
        return _record(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n),))
    n = shape[axis]
    return _record(x.data.mean(axis=axis), (x,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),))


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    if axis is None:
        return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g),))
    return _record(x.data.sum(axis=axis), (x,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def shift_max(x: Tensor, axis: int = -1) -> Tensor:
    """Subtract the (constant, non-differentiated) max along ``axis``."""
    x = _as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    return _record(x.data - m, (x,), lambda g: (g,))


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))`` composed from primitives, stabilised by a constant shift."""
    x = _as_tensor(x)
    m = np.maximum(x.data, 0.0)
    return add(log(add(exp(Tensor(-m)), exp(sub(x, Tensor(m))))), Tensor(m))


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients are replaced, not accumulated across calls.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss was not produced through the tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.ops):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for inp, gi in zip(node._inputs, node._backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp._backward is None:
                leaves[key] = inp
    for key, leaf in leaves.items():
        leaf.grad = np.asarray(grads[key], dtype=np.float64).reshape(leaf.shape)


def check_gradient(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences."""
    x0 = np.array(x.data, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(xt)
    if out.requires_grad:
        backward(out, tape)
        analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    else:
        analytic = np.zeros_like(x0)
    flat = analytic.reshape(-1)
    worst = 0.0
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(flat[i] - fd) / (abs(flat[i]) + 1e-8))
    return worst


# -- serialization ---------------------------------------------------------

_MAGIC = "HTF1"


def write_tensor(stream, value) -> None:
    # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
    arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
    header = " ".join([_MAGIC, str(arr.ndim)] + [str(d) for d in arr.shape])
    stream.write(header.encode("ascii") + b"\n")
    stream.write(arr.tobytes(order="C"))


def read_tensor(stream) -> np.ndarray:
    line = stream.readline()
    parts = line.decode("ascii").split()
    if not parts or parts[0] != _MAGIC:
        raise ContractError(f"bad tensor header {line[:40]!r}")
    rank = int(parts[1])
    dims = tuple(int(d) for d in parts[2:2 + rank])
    if len(dims) != rank:
        raise ContractError(f"tensor header declares rank {rank} but lists {len(dims)} dims")
    count = int(np.prod(dims)) if dims else 1
    raw = stream.read(8 * count)
    if len(raw) != 8 * count:
        raise ContractError("truncated tensor payload")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)


def save_tensor(value) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, value)
    return buf.getvalue()


def load_tensor(blob: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(blob))
