"""Small dense-tensor library with a reverse-mode tape.

Only the handful of operations the fusion network needs are provided:
fully-connected and 2-D convolution layers, ReLU, 2x2 max pooling,
concatenation, and the two training losses. Everything is plain numpy.
Training state is float32; passing float64 arrays in gives a float64 graph,
which is what the finite-difference checks use.
"""
from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, LabelError

DEFAULT_DTYPE = np.float32

_HEADER_PREFIX = struct.Struct("<Q")
CHECKPOINT_FORMAT = "visuotactile-checkpoint/1"


class Tensor:
    """An n-d float array that remembers how it was produced.

    Leaves (tensors built directly from data) keep their ``grad`` after
    :meth:`backward`; intermediate results drop theirs once propagated.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, scale: float) -> Tensor:
        return scale_by(self, scale)

    __rmul__ = __mul__

    def sum(self) -> Tensor:
        return total(self)

    def reshape(self, *shape: int) -> Tensor:
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    """Nodes ordered so every node precedes its parents; fixed for a given graph."""
    post: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, 0))
        else:
            post.append(node)
    post.reverse()
    return post


_grad_enabled = True


@contextmanager
def no_grad():
    """Evaluate without recording the tape (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise / structural


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def scale_by(a: Tensor, scale: float) -> Tensor:
    s = float(scale)
    return _result(a.data * a.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),))


def total(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)
    return _result(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, x.dtype.type(0)), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for x [B, I], weight [I, O], bias [O]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not conform to weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not conform to weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0, dtype=np.float64).astype(g.dtype)

    return _result(out, parents, backward)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((c, k, k, b, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            window = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            cols[:, i, j] = window.transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, b * ho * wo)


def conv2d(
    x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0
) -> Tensor:
    """Cross-correlation of x [B, C, H, W] with kernel [F, C, k, k]."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    b, c, h, w = x.shape
    f, kc, k, k2 = kernel.shape
    if kc != c or k != k2:
        raise DimensionError(f"conv2d: kernel {kernel.shape} does not match input {x.shape}")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape} (pad={pad})")
    if bias is not None and bias.shape != (f,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    kmat = kernel.data.reshape(f, -1)
    out = (kmat @ cols).reshape(f, b, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(f, -1)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (kmat.T @ g2).reshape(c, k, k, b, ho, wo)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, i, j
                    ].transpose(1, 0, 2, 3)
            gx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)

    return _result(out, parents, backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    The backward pass routes each window's gradient to the first maximum in
    row-major scan order.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2: expected 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise DimensionError(f"maxpool2: input {x.shape} too small for a 2x2 window")
    xe = x.data[:, :, : 2 * h2, : 2 * w2]
    corners = (xe[:, :, 0::2, 0::2], xe[:, :, 0::2, 1::2], xe[:, :, 1::2, 0::2], xe[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    # one-hot winner per window, earliest corner first on ties
    masks = []
    taken = np.zeros(out.shape, dtype=bool)
    for corner in corners:
        m = corner == out
        m &= ~taken
        taken |= m
        masks.append(m)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for m, (dy, dx) in zip(masks, ((0, 0), (0, 1), (1, 0), (1, 1))):
            gx[:, :, dy : 2 * h2 : 2, dx : 2 * w2 : 2] = g * m
        return (gx,)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# losses


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-x[class] + log(sum_j exp(x[j]))``, evaluated stably."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy_loss: logits {logits.shape} vs labels {labels.shape}")
    n, n_classes = logits.shape
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= n_classes:
        raise LabelError(f"cross_entropy_loss: labels must be integers in [0, {n_classes})")
    x = logits.data.astype(np.float64)
    shifted = x - x.max(axis=1, keepdims=True)
    sumexp = np.exp(shifted).sum(axis=1)
    rows = np.arange(n)
    loss = np.mean(np.log(sumexp) - shifted[rows, labels])

    def backward(g):
        p = np.exp(shifted) / sumexp[:, None]
        p[rows, labels] -= 1.0
        return ((p * (float(g) / n)).astype(logits.dtype),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def mse_loss(x: Tensor, y) -> Tensor:
    """Mean of squared differences over the batch."""
    target = y.data if isinstance(y, Tensor) else np.asarray(y)
    if x.shape != target.shape:
        raise DimensionError(f"mse_loss: prediction {x.shape} vs target {target.shape}")
    diff = x.data.astype(np.float64) - target.astype(np.float64)
    n = diff.size
    loss = np.mean(diff * diff)

    def backward(g):
        return ((diff * (2.0 * float(g) / n)).astype(x.dtype),)

    return _result(np.asarray(loss, dtype=x.dtype), (x,), backward)


# ---------------------------------------------------------------------------
# optimisation


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """Plain SGD update ``p <- p - lr * grad`` followed by zeroing every grad."""
    if not lr > 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p!r} has no gradient; run backward() first")
    for p in params:
        p.data -= p.dtype.type(lr) * p.grad
        p.grad = None


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant decay: multiply by ``gamma`` at each milestone epoch."""

    start_lr: float = 0.001
    milestones: tuple[int, ...] = (40, 70)
    gamma: float = 0.1

    def __post_init__(self):
        if not self.start_lr > 0:
            raise ValueError("start_lr must be positive")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        ms = tuple(int(m) for m in self.milestones)
        if list(ms) != sorted(ms):
            raise ValueError("milestones must be sorted")
        object.__setattr__(self, "milestones", ms)

    def lr_at(self, epoch: int) -> float:
        return lr_at(self, epoch)


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    lr = schedule.start_lr
    for m in schedule.milestones:
        if epoch >= m:
            lr *= schedule.gamma
    return lr


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``params`` as a JSON-headed blob of little-endian float32 values.

    Layout: 8-byte little-endian header length, UTF-8 JSON header, then the
    tensors back to back in header order.
    """
    entries = []
    offset = 0
    for name, arr in params.items():
        arr = np.asarray(arr)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {"format": CHECKPOINT_FORMAT, "dtype": "<f4", "tensors": entries}
    header.update(meta or {})
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER_PREFIX.pack(len(raw)))
        fh.write(raw)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    (n,) = _HEADER_PREFIX.unpack_from(blob, 0)
    header = json.loads(blob[8 : 8 + n].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    values = np.frombuffer(blob, dtype="<f4", offset=8 + n)
    params = {}
    for e in header["tensors"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        params[e["name"]] = values[e["offset"] : e["offset"] + size].reshape(e["shape"]).astype(np.float32)
    return params, header
