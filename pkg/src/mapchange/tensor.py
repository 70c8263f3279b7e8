"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that touches a tensor requiring gradients records its inputs
and a backward rule on the output node. ``Tensor.backward`` linearizes the
recorded graph into a :class:`Tape` (topological order) and replays it in
reverse, visiting each node once.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "no_grad",
    "make_node",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "absolute",
    "relu",
    "sigmoid",
    "softmax_channel",
    "sum_all",
    "mean_all",
    "reshape",
    "transpose",
    "channel_concat",
    "upsample_nearest_x2",
    "matmul",
    "attention",
    "conv2d",
    "group_norm",
    "layer_norm",
    "save_tensor",
    "load_tensor",
]

_state = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ValueError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            _raise_not_scalar(self.shape)
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes)

    def backward(self, grad: np.ndarray | None = None) -> "Tape":
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        ``self`` must be a scalar unless an explicit upstream ``grad`` is given.
        """
        if grad is None:
            if self.data.size != 1:
                _raise_not_scalar(self.shape)
            grad = np.ones_like(self.data)
        tape = Tape.from_output(self)
        tape.run_backward(grad)
        return tape


class Parameter(Tensor):
    """A named leaf tensor whose gradient accumulator always has its shape."""

    __slots__ = ("name", "init", "fan_in")

    def __init__(self, name: str, shape: Sequence[int], init: str = "zeros", fan_in: int = 1):
        super().__init__(np.zeros(tuple(shape)), requires_grad=True)
        self.name = name
        self.init = init
        self.fan_in = fan_in
        self.grad = np.zeros(self.data.shape)

    def zero_grad(self) -> None:
        self.grad = np.zeros(self.data.shape)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _raise_not_scalar(shape):
    raise ValueError(f"backward() needs a scalar output, got shape {shape}")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Topologically ordered list of the recorded nodes feeding one output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                node.node_id = len(order)
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

    def run_backward(self, grad: np.ndarray) -> None:
        if not self.nodes:
            raise ValueError("empty tape")
        out = self.nodes[-1]
        grads: dict[int, np.ndarray] = {id(out): np.asarray(grad, dtype=np.float64).reshape(out.shape)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros(node.shape)
                node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of an op; ``backward(g)`` returns one grad per parent."""
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return make_node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return make_node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return make_node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scalar_mul(x: Tensor, c: float) -> Tensor:
    return make_node(x.data * c, (x,), lambda g: (g * c,))


def absolute(x: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return make_node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_node(s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax_channel(x: Tensor, axis: int = 1) -> Tensor:
    """Softmax over ``axis`` (the channel axis of an NCHW tensor by default)."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_node(s, (x,), backward)


# ---------------------------------------------------------------- reductions / shape


def sum_all(x: Tensor) -> Tensor:
    return make_node(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return make_node(
        np.asarray(x.data.sum() / n), (x,), lambda g: (np.full(x.shape, float(g) / n),)
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def channel_concat(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:1] + t.shape[2:] != ref[:1] + ref[2:]:
            raise ValueError(f"channel_concat: shape mismatch {ref} vs {t.shape}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    return make_node(
        np.concatenate([t.data for t in tensors], axis=1),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=1)),
    )


def upsample_nearest_x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return make_node(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_node(a.data @ b.data, (a, b), backward)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over the token axis (-2), scale 1/sqrt(d)."""
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"attention: shape mismatch q{q.shape} k{k.shape} v{v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    logits = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)

    def backward(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(v.data, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        return gs @ k.data, np.swapaxes(gs, -1, -2) @ q.data, gv

    return make_node(p @ v.data, (q, k, v), backward)


# ---------------------------------------------------------------- convolution / normalization


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Rows are output pixels (n, y, x); columns are (ky, kx, c) of a padded NHWC input."""
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k * k * xp.shape[3])


def _pad_nhwc(x: np.ndarray, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    xp[:, pad : pad + h, pad : pad + w, :] = x.transpose(0, 2, 3, 1)
    return xp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with a square OIHW kernel (im2col + GEMM)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: shape mismatch input {x.shape} vs weight {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square and odd, got {weight.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d: shape mismatch bias {bias.shape} vs weight {weight.shape}")
    n, _, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: input {x.shape} too small for weight {weight.shape}")

    xp = _pad_nhwc(x.data, pad)
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (gmat.T @ cols).reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2)
        gb = gmat.sum(axis=0) if bias is not None else None
        gx = None
        if x.requires_grad and stride == 1 and 2 * pad == k - 1:
            # input gradient of a same-size conv is a same-size conv of g with the flipped kernel
            flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c_in, -1)
            gcols = _im2col(_pad_nhwc(g, pad), k, 1, h, w)
            gx = (gcols @ flipped.T).reshape(n, h, w, c_in).transpose(0, 3, 1, 2)
        elif x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, k, k, c_in)
            gxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pad : pad + h, pad : pad + w, :].transpose(0, 3, 1, 2)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


def _normalize(xg: np.ndarray, eps: float, axis: int):
    mu = xg.mean(axis=axis, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def _normalize_backward(gxhat: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axis: int) -> np.ndarray:
    return inv * (
        gxhat
        - gxhat.mean(axis=axis, keepdims=True)
        - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True)
    )


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"group_norm expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if groups <= 0 or c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"group_norm: shape mismatch affine {gamma.shape}/{beta.shape} vs channels {c}")
    if eps <= 0:
        raise ValueError("group_norm: eps must be positive")
    # computed channels-last: conv outputs are NHWC in memory, so this view is free
    x3 = x.data.transpose(0, 2, 3, 1).reshape(n, h * w, c)
    cg = c // groups
    count = h * w * cg

    def group_mean(per_channel):  # (n, c) channel sums -> (n, 1, c) group means
        means = per_channel.reshape(n, groups, cg).sum(axis=2) / count
        return np.repeat(means, cg, axis=1)[:, None, :]

    xc = x3 - group_mean(x3.sum(axis=1))
    inv = 1.0 / np.sqrt(group_mean((xc * xc).sum(axis=1)) + eps)
    xhat = xc * inv
    out = (xhat * gamma.data + beta.data).reshape(n, h, w, c).transpose(0, 3, 1, 2)

    def backward(g):
        g3 = g.transpose(0, 2, 3, 1).reshape(n, h * w, c)
        ggamma = (g3 * xhat).sum(axis=(0, 1))
        gbeta = g3.sum(axis=(0, 1))
        gxhat = g3 * gamma.data
        gx = inv * (gxhat - group_mean(gxhat.sum(axis=1)) - xhat * group_mean((gxhat * xhat).sum(axis=1)))
        return gx.reshape(n, h, w, c).transpose(0, 3, 1, 2), ggamma, gbeta

    return make_node(out, (x, gamma, beta), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (per token)."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: shape mismatch affine {gamma.shape} vs features {d}")
    xhat, inv = _normalize(x.data, eps, axis=-1)
    out = xhat * gamma.data + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        gx = _normalize_backward(g * gamma.data, xhat, inv, axis=-1)
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_node(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- serialization

MAGIC = b"MCTENSR1"


def save_tensor(path: str | Path, value: Tensor | np.ndarray) -> None:
    """Write ``value`` as MCTENSR1: magic, u32 rank, u64 extents, f64 LE payload."""
    arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:8]!r}")
    (rank,) = struct.unpack_from("<I", raw, 8)
    shape = struct.unpack_from(f"<{rank}Q", raw, 12)
    offset = 12 + 8 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(raw) - offset != 8 * count:
        raise ValueError(f"{path}: payload is {len(raw) - offset} bytes, expected {8 * count} for shape {shape}")
    return np.frombuffer(raw, dtype="<f8", offset=offset).reshape(shape).astype(np.float64)

