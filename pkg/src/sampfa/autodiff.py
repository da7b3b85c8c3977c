"""Dense float64 tensors with reverse-mode automatic differentiation."""
from __future__ import annotations

import json
import struct

import numpy as np


class ShapeError(Exception):
    pass


class NonFiniteError(Exception):
    pass


_op_counter = [0]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "vjp", "op", "op_id")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None
        self.parents = parents if self.requires_grad else ()
        self.vjp = vjp if self.requires_grad else None
        self.op = op
        _op_counter[0] += 1
        self.op_id = _op_counter[0]

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return tslice(self, key)

    def item(self) -> float:
        return float(self.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _binary_shapes_ok(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b)
    return Tensor(a.data + b.data, parents=(a, b), op="add",
                  vjp=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b)
    return Tensor(a.data - b.data, parents=(a, b), op="sub",
                  vjp=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b)
    return Tensor(a.data * b.data, parents=(a, b), op="mul",
                  vjp=lambda g: (
                      _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                      _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b)
    return Tensor(a.data / b.data, parents=(a, b), op="div",
                  vjp=lambda g: (
                      _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                      _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
                      if b.requires_grad else None))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 1 or b.data.ndim < 1:
        raise ShapeError(f"matmul needs >=1-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if b.data.ndim > 1 \
                else np.multiply.outer(g, b.data)
            ga = _unbroadcast(ga, a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor(np.matmul(a.data, b.data), parents=(a, b), op="matmul", vjp=vjp)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError(f"transpose needs >=2-d tensor, got {a.shape}")
    return Tensor(np.swapaxes(a.data, -1, -2), parents=(a,), op="transpose",
                  vjp=lambda g: (np.swapaxes(g, -1, -2),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor(np.transpose(a.data, axes), parents=(a,), op="permute",
                  vjp=lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor(a.data.reshape(shape), parents=(a,), op="reshape",
                  vjp=lambda g: (g.reshape(a.shape),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    return Tensor(np.broadcast_to(a.data, shape).copy(), parents=(a,), op="broadcast",
                  vjp=lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                  parents=tuple(tensors), op="concat", vjp=vjp)


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, slice)) for p in parts)


def tslice(a: Tensor, key) -> Tensor:
    basic = _is_basic_key(key)

    def vjp(g):
        out = np.zeros(a.shape)
        if basic:
            out[key] += g      # no duplicate positions with plain slicing
        else:
            np.add.at(out, key, g)
        return (out,)

    return Tensor(a.data[key], parents=(a,), op="slice", vjp=vjp)


def _segment_rows(data: np.ndarray, index: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum rows of `data` into n_rows bins; sort + reduceat beats np.add.at."""
    out = np.zeros((n_rows,) + data.shape[1:])
    if index.size == 0:
        return out
    if data.ndim == 1 or data.size < 4096:
        np.add.at(out, index, data)
        return out
    order = np.argsort(index, kind="stable")
    sorted_idx = index[order]
    starts = np.flatnonzero(np.diff(sorted_idx)) + 1
    starts = np.concatenate(([0], starts))
    out[sorted_idx[starts]] = np.add.reduceat(data[order], starts, axis=0)
    return out


def gather(a: Tensor, index, axis: int = 0) -> Tensor:
    """Rows/columns of `a` selected by an integer index array."""
    index = np.asarray(index, dtype=np.intp)

    def vjp(g):
        if axis == 0:
            return (_segment_rows(g, index, a.shape[0]),)
        out = np.zeros(a.shape)
        np.add.at(np.swapaxes(out, 0, axis), index, np.swapaxes(g, 0, axis))
        return (out,)

    return Tensor(np.take(a.data, index, axis=axis), parents=(a,), op="gather", vjp=vjp)


def scatter_add(a: Tensor, index, n_rows: int) -> Tensor:
    """out[k] = sum of rows of `a` whose index equals k (first axis)."""
    index = np.asarray(index, dtype=np.intp)
    return Tensor(_segment_rows(a.data, index, n_rows), parents=(a,),
                  op="scatter_add", vjp=lambda g: (g[index],))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def vjp(g):
        if axis is None:
            return (np.full(a.shape, g),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,),
                  op="sum", vjp=vjp)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), _as_tensor(1.0 / n))


def tabs(a: Tensor) -> Tensor:
    # subgradient at 0 taken as 0
    return Tensor(np.abs(a.data), parents=(a,), op="abs",
                  vjp=lambda g: (g * np.sign(a.data),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor(out, parents=(a,), op="sqrt",
                  vjp=lambda g: (g * 0.5 / np.maximum(out, 1e-300),))


def square(a: Tensor) -> Tensor:
    return Tensor(a.data * a.data, parents=(a,), op="square",
                  vjp=lambda g: (g * 2.0 * a.data,))


def arctan(a: Tensor) -> Tensor:
    """Single-argument arctangent, range (-pi/2, pi/2)."""
    return Tensor(np.arctan(a.data), parents=(a,), op="arctan",
                  vjp=lambda g: (g / (1.0 + a.data * a.data),))


def relu(a: Tensor) -> Tensor:
    return Tensor(np.maximum(a.data, 0.0), parents=(a,), op="relu",
                  vjp=lambda g: (g * (a.data > 0.0),))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    factor = np.where(a.data > 0.0, 1.0, slope)
    return Tensor(np.where(a.data > 0.0, a.data, slope * a.data), parents=(a,),
                  op="leaky_relu", vjp=lambda g: (g * factor,))


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax over the last axis with an additive mask.

    Mask entries of -inf give exactly zero output weight and zero gradient
    flow; fully masked rows produce all-zero rows.
    """
    mask = np.asarray(mask, dtype=np.float64)
    _binary_shapes_ok(a, Tensor(mask))
    logits = a.data + mask
    valid = np.isfinite(logits)
    any_valid = valid.any(axis=-1, keepdims=True)
    safe = np.where(valid, logits, -np.inf)
    rowmax = np.max(np.where(any_valid, safe, 0.0), axis=-1, keepdims=True)
    e = np.where(valid, np.exp(safe - rowmax), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    out = np.divide(e, z, out=np.zeros_like(e), where=z > 0)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor(out, parents=(a,), op="masked_softmax", vjp=vjp)


def backward(loss: Tensor) -> None:
    """Populate grads of all reachable requires_grad tensors."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def grad_check(f, xs: list[Tensor], eps: float = 1e-6) -> float:
    """Max relative error between backward grads and central differences."""
    zero_grads(xs)
    loss = f(*xs)
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError(f"non-finite forward value from op {loss.op}#{loss.op_id}")
    backward(loss)
    worst = 0.0
    for x in xs:
        g_ad = x.grad if x.grad is not None else np.zeros(x.shape)
        flat = x.data.reshape(-1)
        g_fd = np.zeros(flat.shape)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            fp = f(*xs).data.item()
            flat[i] = keep - eps
            fm = f(*xs).data.item()
            flat[i] = keep
            g_fd[i] = (fp - fm) / (2.0 * eps)
        g_ad_flat = np.asarray(g_ad).reshape(-1)
        denom = np.maximum(1e-8, np.abs(g_ad_flat) + np.abs(g_fd))
        worst = max(worst, float(np.max(np.abs(g_ad_flat - g_fd) / denom)))
    return worst


class Adam:
    """Adaptive moment estimation with bias correction; deterministic."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.skipped_steps = 0

    def step(self) -> bool:
        """Apply one update from stored grads; returns False on non-finite grads."""
        grads = [p.grad if p.grad is not None else np.zeros(p.shape)
                 for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped_steps += 1
            return False
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
        return True


# --- parameter checkpoint format ---------------------------------------------

_MAGIC = b"SAMPFA\x00\x01"


def save_params(params: dict[str, Tensor], path) -> None:
    manifest = {name: list(t.shape) for name, t in params.items()}
    blob = json.dumps(manifest).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for t in params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_params(path) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a sampfa checkpoint (bad magic)")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode())
        out = {}
        for name, shape in manifest.items():
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            out[name] = parameter(arr.copy())
        return out
