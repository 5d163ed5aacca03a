"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Shape discipline is strict: unless an op documents otherwise, operand shapes
must match exactly. The single sanctioned broadcast is the trailing-axis bias
add. Every op checks its result for NaN/Inf and raises instead of propagating
garbage. Ops record onto the innermost active ``Tape`` only when some input
requires gradients; with no active tape they are plain numpy computations, so
evaluation-time forwards are side-effect free and safe to run concurrently.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "backward",
    "matmul",
    "add",
    "add_bias",
    "mul",
    "scale",
    "concat_last_dim",
    "pairwise_concat",
    "embedding_lookup",
    "layer_norm",
    "gelu",
    "transpose",
    "reshape",
    "slice_rows",
    "slice_cols",
    "dot",
    "sum_all",
    "softmax_rows",
    "sigmoid",
    "bce_with_logits",
    "dropout",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


class TapeError(RuntimeError):
    """Tape misuse, e.g. running backward twice on the same graph."""


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer.

    ``grad`` exists exactly when ``requires_grad`` is set; it accumulates
    across backward calls until explicitly zeroed. ``node_id`` is assigned
    when the tensor is first touched by a tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.node_id = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


_tape_stack: list["Tape"] = []


class Tape:
    """Execution-ordered record of differentiable ops for one backward pass.

    Records are appended as ops execute, so parents always precede their
    consumers and a single reverse sweep visits each node exactly once.
    """

    def __init__(self):
        self._records = []  # (out tensor, parent node ids, backward closure)
        self._consumed = False
        self._n_nodes = 0

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def _touch(self, t: Tensor) -> int:
        if t._tape is not self or t.node_id is None:
            t.node_id = self._n_nodes
            self._n_nodes += 1
        return t.node_id

    def record(self, out: Tensor, parents, backward_fn):
        parent_ids = tuple(self._touch(p) for p in parents)
        self._touch(out)
        out._tape = self
        self._records.append((out, parent_ids, backward_fn))

    def backward(self, loss: Tensor):
        if self._consumed:
            raise TapeError(
                "backward already ran on this tape; zero grads and rebuild the graph"
            )
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        loss.grad[...] = 1.0
        for out, _parent_ids, fn in reversed(self._records):
            fn(out.grad)


def _active_tape():
    return _tape_stack[-1] if _tape_stack else None


def backward(loss: Tensor):
    """Accumulate gradients of a scalar loss into every requires-grad leaf.

    A loss with no tape attachment (a constant) is a no-op: untouched leaves
    keep their zero gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        return
    loss._tape.backward(loss)


def _ensure_finite(arr, op: str):
    # A float64 sum stays finite iff no element is NaN/Inf (inf-inf gives
    # NaN, NaN propagates); the cheap sum screens, the elementwise check
    # only runs to rule out overflow-of-the-sum false alarms.
    if not np.isfinite(arr.sum()):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{op} produced non-finite values")


def _make(data, op: str, parents, backward_fn) -> Tensor:
    _ensure_finite(data, op)
    tape = _active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(out, parents, backward_fn)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _make(out_data, "matmul", (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly."""
    if a.shape != b.shape:
        raise ShapeError(f"add shapes disagree: {a.shape} vs {b.shape}")

    def bw(g):
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad += g

    return _make(a.data + b.data, "add", (a, b), bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias along the trailing axis (the one sanctioned broadcast)."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias needs trailing-dim bias: {x.shape} vs {b.shape}")
    n = b.shape[0]

    def bw(g):
        if x.requires_grad:
            x.grad += g
        if b.requires_grad:
            b.grad += g.reshape(-1, n).sum(axis=0)

    return _make(x.data + b.data, "add_bias", (x, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes disagree: {a.shape} vs {b.shape}")

    def bw(g):
        if a.requires_grad:
            a.grad += g * b.data
        if b.requires_grad:
            b.grad += g * a.data

    return _make(a.data * b.data, "mul", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    c = float(c)

    def bw(g):
        if a.requires_grad:
            a.grad += g * c

    return _make(a.data * c, "scale", (a,), bw)


def concat_last_dim(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the trailing axis; leading shapes must match."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_last_dim leading shapes disagree: {a.shape} vs {b.shape}")
    na = a.shape[-1]

    def bw(g):
        if a.requires_grad:
            a.grad += g[..., :na]
        if b.requires_grad:
            b.grad += g[..., na:]

    return _make(np.concatenate([a.data, b.data], axis=-1), "concat_last_dim", (a, b), bw)


def pairwise_concat(head: Tensor, tail: Tensor) -> Tensor:
    """All-pairs row concatenation: out[i, j] = [head[i]; tail[j]].

    head and tail are (n, d); the result is (n, n, 2d).
    """
    if head.data.ndim != 2 or head.shape != tail.shape:
        raise ShapeError(f"pairwise_concat needs equal 2-D shapes: {head.shape} vs {tail.shape}")
    n, d = head.shape
    out = np.empty((n, n, 2 * d))
    out[:, :, :d] = head.data[:, None, :]
    out[:, :, d:] = tail.data[None, :, :]

    def bw(g):
        if head.requires_grad:
            head.grad += g[:, :, :d].sum(axis=1)
        if tail.requires_grad:
            tail.grad += g[:, :, d:].sum(axis=0)

    return _make(out, "pairwise_concat", (head, tail), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; gradients scatter-add into those rows."""
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup needs a 2-D table, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding_lookup needs a flat id list, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"row id out of range [0, {table.shape[0]}) in embedding_lookup"
        )

    def bw(g):
        if table.requires_grad:
            np.add.at(table.grad, idx, g)

    return _make(table.data[idx], "embedding_lookup", (table,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm affine params must be ({n},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            gain.grad += (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            bias.grad += g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x.grad += (gy - m1 - xhat * m2) * inv

    return _make(out, "layer_norm", (x, gain, bias), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def bw(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
            x.grad += g * (cdf + x.data * pdf)

    return _make(out, "gelu", (x,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    """Permute axes; default reverses them."""
    perm = tuple(axes) if axes is not None else tuple(reversed(range(a.data.ndim)))
    if sorted(perm) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose axes {perm} invalid for shape {a.shape}")
    inverse = np.argsort(perm)

    def bw(g):
        if a.requires_grad:
            a.grad += g.transpose(inverse)

    return _make(a.data.transpose(perm), "transpose", (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape

    def bw(g):
        if a.requires_grad:
            a.grad += g.reshape(old)

    return _make(a.data.reshape(shape), "reshape", (a,), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along axis 0."""
    n = a.shape[0]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice_rows [{start}:{stop}] invalid for {n} rows")

    def bw(g):
        if a.requires_grad:
            a.grad[start:stop] += g

    return _make(a.data[start:stop].copy(), "slice_rows", (a,), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the trailing axis of a 2-D tensor."""
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols needs a 2-D tensor, got {a.shape}")
    n = a.shape[1]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice_cols [{start}:{stop}] invalid for {n} columns")

    def bw(g):
        if a.requires_grad:
            a.grad[:, start:stop] += g

    return _make(a.data[:, start:stop].copy(), "slice_cols", (a,), bw)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Flat inner product of two equal-size tensors; scalar result."""
    if a.size != b.size:
        raise ShapeError(f"dot sizes disagree: {a.shape} vs {b.shape}")
    fa = a.data.reshape(-1)
    fb = b.data.reshape(-1)

    def bw(g):
        if a.requires_grad:
            a.grad += (g * fb).reshape(a.shape)
        if b.requires_grad:
            b.grad += (g * fa).reshape(b.shape)

    return _make(np.asarray(fa @ fb), "dot", (a, b), bw)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all entries; scalar result."""

    def bw(g):
        if a.requires_grad:
            a.grad += g

    return _make(np.asarray(a.data.sum()), "sum_all", (a,), bw)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, max-subtracted for stability."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        if a.requires_grad:
            s = (g * out).sum(axis=1, keepdims=True)
            a.grad += (g - s) * out

    return _make(out, "softmax_rows", (a,), bw)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def bw(g):
        if a.requires_grad:
            a.grad += g * out * (1.0 - out)

    return _make(out, "sigmoid", (a,), bw)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy against {0,1} targets, in stable form.

    Per cell: max(z, 0) - z*t + log(1 + exp(-|z|)), averaged over all cells.
    """
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if logits.shape != t.shape:
        raise ShapeError(f"bce shapes disagree: {logits.shape} vs {t.shape}")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("bce_with_logits targets must be exactly 0 or 1")
    z = logits.data
    per_cell = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = per_cell.size

    def bw(g):
        if logits.requires_grad:
            logits.grad += (_sigmoid(z) - t) * (float(g) / n)

    return _make(np.asarray(per_cell.mean()), "bce_with_logits", (logits,), bw)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)

    def bw(g):
        if a.requires_grad:
            a.grad += g * mask

    return _make(a.data * mask, "dropout", (a,), bw)
