"""Small reverse-mode differentiation engine on float64 numpy arrays.

Tensors are immutable. A :class:`Tape` records every primitive whose inputs
are tracked (a ``requires_grad`` leaf or the output of a recorded primitive);
:func:`backward` walks the recorded nodes in reverse order once.

Arrays use NHWC layout for images: ``(batch, height, width, channels)``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-12
NORM_FLOOR = 1e-12

# debug counters, incremented whenever a domain guard fires
counters = {"log_clamped": 0}

_local = threading.local()


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""

    def __init__(self, primitive: str, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        desc = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {desc}")


class GradientCheckError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, node={self.node_id})"

    # operator sugar for the arithmetic primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    shape: tuple
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    gradients: dict[int, np.ndarray] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def _leaf(self, t: Tensor) -> int:
        self.nodes.append(Node("leaf", (), t.shape))
        t.node_id = len(self.nodes) - 1
        t._tape = self
        return t.node_id

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the most recent backward pass w.r.t. ``t``."""
        if t._tape is not self or t.node_id is None:
            return np.zeros(t.shape)
        return self.gradients.get(t.node_id, np.zeros(t.shape))


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _tracked(tape: Tape | None, t: Tensor) -> bool:
    if tape is None:
        return False
    if t._tape is tape and t.node_id is not None:
        return True
    if t.requires_grad:
        tape._leaf(t)
        return True
    return False


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    """Wrap ``out`` and record it on the active tape if any input is tracked."""
    res = Tensor.__new__(Tensor)
    out = np.asarray(out, dtype=np.float64)
    out.flags.writeable = False
    res.data = out
    res.requires_grad = False
    res.node_id = None
    res._tape = None
    tape = active_tape()
    flags = [_tracked(tape, t) for t in inputs]
    if any(flags):
        ids = tuple(t.node_id if f else -1 for t, f in zip(inputs, flags))
        tape.nodes.append(Node(kind, ids, out.shape, vjp))
        res.node_id = len(tape.nodes) - 1
        res._tape = tape
    return res


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, a.shape, b.shape) from None


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return _record("scale", (a,), a.data * k, lambda g: (g * k,))


def matmul(a, b) -> Tensor:
    """``(..., K) @ (K, M)``; the right operand must be 2-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record("matmul", (a, b), ad @ bd, vjp)


def dot(a, b) -> Tensor:
    """Inner product over the last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise ShapeError("dot", a.shape, b.shape)
    _broadcast_shape("dot", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        g = g[..., None]
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("dot", (a, b), np.sum(ad * bd, axis=-1), vjp)


def conv3x3(x, weight, bias=None) -> Tensor:
    """3x3 convolution, stride 1, zero same-padding.

    ``x`` is ``(N, H, W, Cin)``, ``weight`` is ``(3, 3, Cin, Cout)`` and the
    optional ``bias`` is ``(Cout,)``. Computed as nine shifted matmuls.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4 or weight.shape[:2] != (3, 3) \
            or weight.shape[2] != x.shape[3]:
        raise ShapeError("conv3x3", x.shape, weight.shape)
    n, h, w, cin = x.shape
    cout = weight.shape[3]
    xp = np.zeros((n, h + 2, w + 2, cin))
    xp[:, 1:-1, 1:-1, :] = x.data
    wd = weight.data
    out = np.zeros((n, h, w, cout))
    for i in range(3):
        for j in range(3):
            out += xp[:, i:i + h, j:j + w, :] @ wd[i, j]
    inputs = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError("conv3x3", weight.shape, bias.shape)
        out += bias.data
        inputs.append(bias)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        g2 = g.reshape(-1, cout)
        for i in range(3):
            for j in range(3):
                gxp[:, i:i + h, j:j + w, :] += g @ wd[i, j].T
                gw[i, j] = xp[:, i:i + h, j:j + w, :].reshape(-1, cin).T @ g2
        grads = [gxp[:, 1:-1, 1:-1, :], gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _record("conv3x3", inputs, out, vjp)


def relu(x: Tensor) -> Tensor:
    gate = x.data > 0
    return _record("relu", (x,), np.where(gate, x.data, 0.0), lambda g: (g * gate,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    """Natural log; entries below ``LOG_FLOOR`` are clamped to it."""
    low = x.data < LOG_FLOOR
    if low.any():
        counters["log_clamped"] += int(low.sum())
    safe = np.where(low, LOG_FLOOR, x.data)
    return _record("log", (x,), np.log(safe), lambda g: (np.where(low, 0.0, g / safe),))


def log_softmax(x: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    soft = np.exp(out)
    return _record("log_softmax", (x,), out,
                   lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


def softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return _record("softmax", (x,), out,
                   lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def l2_normalize(x: Tensor) -> Tensor:
    """Unit L2 norm along the last axis (norm floored at ``NORM_FLOOR``)."""
    norm = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    safe = np.maximum(norm, NORM_FLOOR)
    out = x.data / safe

    def vjp(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(norm > NORM_FLOOR, (g - out * proj) / safe, g / safe),)

    return _record("l2_normalize", (x,), out, vjp)


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean of ``x`` over the positions where ``mask`` is true.

    ``mask`` has the leading shape of ``x``; remaining trailing axes are kept,
    so ``(N, H, W, D)`` with an ``(N, H, W)`` mask gives a ``(D,)`` vector.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:mask.ndim]:
        raise ShapeError("masked_mean", x.shape, mask.shape)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("masked_mean: empty mask")
    out = x.data[mask].sum(axis=0) / count
    xshape = x.shape

    def vjp(g):
        gx = np.zeros(xshape)
        gx[mask] = g / count
        return (gx,)

    return _record("masked_mean", (x,), out, vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """``(N, H, W, C) -> (N, C)``."""
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape)
    n, h, w, c = x.shape
    return _record("global_avg_pool", (x,), x.data.mean(axis=(1, 2)),
                   lambda g: (np.broadcast_to(g[:, None, None, :] / (h * w), (n, h, w, c)),))


def mean(x: Tensor) -> Tensor:
    shp, n = x.shape, x.size
    return _record("mean", (x,), np.mean(x.data), lambda g: (np.full(shp, g / n),))


def total(x: Tensor) -> Tensor:
    shp = x.shape
    return _record("sum", (x,), np.sum(x.data), lambda g: (np.full(shp, g),))


def gather_rows(x: Tensor, index) -> Tensor:
    """Rows of ``x`` flattened to ``(-1, last)`` picked by ``index``."""
    index = np.asarray(index, dtype=np.int64)
    flat = x.data.reshape(-1, x.shape[-1])
    shp = x.shape

    def vjp(g):
        gx = np.zeros_like(flat)
        np.add.at(gx, index, g)
        return (gx.reshape(shp),)

    return _record("gather_rows", (x,), flat[index], vjp)


def pick(x: Tensor, index) -> Tensor:
    """``x[..., index]`` per leading position: ``(..., K)`` -> ``(...)``."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise ShapeError("pick", x.shape, index.shape)
    out = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]
    shp = x.shape

    def vjp(g):
        gx = np.zeros(shp)
        np.put_along_axis(gx, index[..., None], g[..., None], axis=-1)
        return (gx,)

    return _record("pick", (x,), out, vjp)


def take_range(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice of a 1-D tensor."""
    if x.data.ndim != 1 or not 0 <= start <= stop <= x.shape[0]:
        raise ShapeError("take_range", x.shape, (start, stop))
    n = x.shape[0]

    def vjp(g):
        gx = np.zeros(n)
        gx[start:stop] = g
        return (gx,)

    return _record("take_range", (x,), x.data[start:stop], vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _record("reshape", (x,), out, lambda g: (g.reshape(old),))


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the tape."""
    return Tensor(x.data)


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns ``node_id -> gradient``.

    Every leaf recorded on ``tape`` receives an entry; leaves the loss does not
    depend on get zeros.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._tape is not tape or loss.node_id is None:
        raise ValueError("backward: loss is not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    for nid in range(loss.node_id, -1, -1):
        node = tape.nodes[nid]
        g = grads.get(nid)
        if g is None or node.vjp is None:
            continue
        for src, gi in zip(node.inputs, node.vjp(g)):
            if src < 0 or gi is None:
                continue
            if src in grads:
                grads[src] = grads[src] + gi
            else:
                grads[src] = np.asarray(gi, dtype=np.float64)
    result = {i: grads.get(i, np.zeros(n.shape))
              for i, n in enumerate(tape.nodes) if n.kind == "leaf"}
    tape.gradients = result
    return result


def value_and_grad(fn: Callable[[Tensor], Tensor], point) -> tuple[float, np.ndarray]:
    x = Tensor(point, requires_grad=True)
    with Tape() as tape:
        y = fn(x)
        if y._tape is not tape:
            return float(y.data), np.zeros(x.shape)
        backward(tape, y)
    return float(y.data), tape.grad(x)


def check_gradient(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |numeric|)``.

    ``numeric`` is the central difference with half-width ``step``.
    """
    point = np.array(point, dtype=np.float64)
    _, analytic = value_and_grad(fn, point)
    flat = point.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        vals = []
        for sgn in (1.0, -1.0):
            probe = flat.copy()
            probe[i] += sgn * step
            v = float(np.asarray(fn(Tensor(probe.reshape(point.shape))).data))
            if not np.isfinite(v):
                raise GradientCheckError(f"non-finite function value at coordinate {i}")
            vals.append(v)
        numeric = (vals[0] - vals[1]) / (2 * step)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    """``params - lr * grads``."""
    params, grads = np.asarray(params), np.asarray(grads)
    if params.shape != grads.shape:
        raise ValueError(f"sgd_step: length mismatch {params.shape} vs {grads.shape}")
    if lr <= 0:
        raise ValueError("sgd_step: lr must be positive")
    return params - lr * grads
