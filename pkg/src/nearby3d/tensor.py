"""Dense float64 tensors and a small reverse-mode differentiation tape.

Every differentiable op here accepts either plain ``numpy`` arrays or
:class:`Node` objects.  When any operand is a ``Node`` the result is recorded
on that node's :class:`Tape`; otherwise the op is evaluated eagerly and a
plain array is returned.  This lets the same model code run for inference,
for training and inside finite-difference oracles.

Positions of a 3D grid are flattened temporal-major:
``flat(i, j, k) = k*h*w + i*w + j``.  A :class:`Tensor4` stores its payload as
an ``(h*w*s, d)`` row matrix in exactly that order, which is also the byte
order of the ``N3DT`` file format.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, FormatError, NumericError, ShapeError

DTYPE = np.float64
TENSOR_MAGIC = b"N3DT"

Dims3 = tuple[int, int, int]


# ---------------------------------------------------------------------------
# Canonical layout helpers
# ---------------------------------------------------------------------------

def flat_index(dims: Dims3, i: int, j: int, k: int) -> int:
    h, w, s = dims
    if not (0 <= i < h and 0 <= j < w and 0 <= k < s):
        raise IndexError(f"position {(i, j, k)} outside grid {dims}")
    return k * h * w + i * w + j


def unflat_index(dims: Dims3, t: int) -> tuple[int, int, int]:
    h, w, s = dims
    if not 0 <= t < h * w * s:
        raise IndexError(f"flat index {t} outside grid {dims}")
    k, rem = divmod(t, h * w)
    i, j = divmod(rem, w)
    return i, j, k


def grid_coords(dims: Dims3) -> np.ndarray:
    """``(h*w*s, 3)`` integer array of ``(i, j, k)`` in canonical order."""
    h, w, s = dims
    k, i, j = np.meshgrid(np.arange(s), np.arange(h), np.arange(w), indexing="ij")
    return np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)


def num_positions(dims: Dims3) -> int:
    h, w, s = dims
    return h * w * s


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class Node:
    """A value recorded on a tape."""

    __slots__ = ("tape", "id", "value", "inputs", "vjp", "name")

    def __init__(self, tape, id, value, inputs=(), vjp=None, name=None):
        self.tape = tape
        self.id = id
        self.value = value
        self.inputs = inputs
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self.vjp is None

    def __repr__(self):
        kind = "leaf" if self.is_leaf else "op"
        return f"Node({kind} #{self.id}, shape={self.value.shape}, name={self.name!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Append-only record of primitive operations.

    Nodes are appended in evaluation order, so inputs always carry smaller ids
    than their consumers and a reverse sweep is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> Node:
        value = np.array(value, dtype=DTYPE)
        node = Node(self, len(self.nodes), value, name=name or f"leaf{len(self.nodes)}")
        self.nodes.append(node)
        return node

    def record(self, value, inputs: Sequence[Node], vjp) -> Node:
        for inp in inputs:
            if inp.tape is not self:
                raise ContractError("operands recorded on different tapes")
        node = Node(self, len(self.nodes), value, tuple(inp.id for inp in inputs), vjp)
        self.nodes.append(node)
        return node

    @property
    def leaves(self) -> list[Node]:
        return [n for n in self.nodes if n.is_leaf]


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else x


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _emit(out, operands, vjp):
    """Wrap ``out`` in a node when any operand lives on a tape.

    ``vjp(g)`` returns one gradient per operand (``None`` for constants).
    """
    tape = _tape_of(*operands)
    if tape is None:
        return out
    tracked = [i for i, x in enumerate(operands) if isinstance(x, Node)]

    def node_vjp(g):
        grads = vjp(g)
        return [grads[i] for i in tracked]

    return tape.record(out, [operands[i] for i in tracked], node_vjp)


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns a gradient for every leaf on the tape keyed by leaf name; leaves
    the loss does not depend on get zeros.
    """
    if not isinstance(loss, Node) or loss.tape is not tape:
        raise ContractError("loss is not a node of this tape")
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")

    pending: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes[: loss.id + 1]):
        g = pending.pop(node.id, None)
        if g is None:
            continue
        if node.is_leaf:
            leaf_grads[node.id] = g
            continue
        for inp_id, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            if inp_id in pending:
                pending[inp_id] = pending[inp_id] + gi
            else:
                pending[inp_id] = gi

    out: dict[str, np.ndarray] = {}
    for node in tape.leaves:
        if node.name in out:
            raise ContractError(f"duplicate leaf name {node.name!r}")
        g = leaf_grads.get(node.id)
        out[node.name] = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=DTYPE)
    return out


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        return np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError:
        raise ShapeError(f"{opname}: shapes {np.shape(a)} and {np.shape(b)} do not broadcast") from None


def matmul(a, b):
    """Matrix product; leading axes are treated as a batch of equal size."""
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2] or av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")
    out = av @ bv

    def vjp(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return _emit(out, (a, b), vjp)


def add(a, b):
    av, bv = value_of(a), value_of(b)
    _check_broadcast(av, bv, "add")
    out = av + bv
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, np.shape(av)), _unbroadcast(g, np.shape(bv))))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    _check_broadcast(av, bv, "sub")
    out = av - bv
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, np.shape(av)), _unbroadcast(-g, np.shape(bv))))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    _check_broadcast(av, bv, "mul")
    out = av * bv
    return _emit(out, (a, b), lambda g: (_unbroadcast(g * bv, np.shape(av)), _unbroadcast(g * av, np.shape(bv))))


def scale(x, c: float):
    out = value_of(x) * c
    return _emit(out, (x,), lambda g: (g * c,))


def reshape(x, shape):
    xv = value_of(x)
    out = xv.reshape(shape)
    return _emit(out, (x,), lambda g: (g.reshape(xv.shape),))


def transpose(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(value_of(x), axes)
    return _emit(out, (x,), lambda g: (np.transpose(g, inverse),))


def take_rows(x, index):
    """Gather rows of ``x`` along axis 0; ``index`` may have any shape."""
    xv = value_of(x)
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= xv.shape[0]):
        raise IndexError(f"row index out of range for {xv.shape[0]} rows")
    out = xv[index]

    def vjp(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, index, g)
        return (gx,)

    return _emit(out, (x,), vjp)


def concat_rows(parts: Sequence):
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=0)
    bounds = np.cumsum([0] + [v.shape[0] for v in values])

    def vjp(g):
        return tuple(g[bounds[n]:bounds[n + 1]] for n in range(len(values)))

    return _emit(out, tuple(parts), vjp)


def sum_all(x):
    xv = value_of(x)
    out = np.asarray(xv.sum())
    return _emit(out, (x,), lambda g: (np.broadcast_to(g, xv.shape).copy(),))


def mean_all(x):
    xv = value_of(x)
    n = xv.size
    out = np.asarray(xv.sum() / n)
    return _emit(out, (x,), lambda g: (np.full(xv.shape, g / n),))


def stop_gradient(x) -> np.ndarray:
    """Detach ``x`` from the tape; the result is a constant."""
    return np.array(value_of(x), copy=True)


def substitute(x, value):
    """Forward ``value`` in place of ``x`` while passing gradients to ``x`` unchanged."""
    xv = value_of(x)
    value = np.array(value_of(value), dtype=DTYPE, copy=True)
    if value.shape != xv.shape:
        raise ShapeError(f"substitute: value {value.shape} does not match {xv.shape}")
    return _emit(value, (x,), lambda g: (g,))


def softmax_last(x):
    """Softmax over the last axis with max subtraction."""
    xv = value_of(x)
    if not np.all(np.isfinite(xv)):
        raise NumericError("softmax_last received non-finite input")
    e = np.exp(xv - xv.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return _emit(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def masked_softmax_last(x, keep):
    """Softmax over the entries of the last axis where ``keep`` is true.

    Excluded entries get probability exactly 0.  Every row needs at least
    one kept entry.
    """
    xv = value_of(x)
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), xv.shape)
    if not keep.any(axis=-1).all():
        raise ContractError("a softmax row has no admissible entries")
    kept = np.where(keep, xv, -np.inf)
    if not np.all(np.isfinite(xv[keep])):
        raise NumericError("masked_softmax_last received non-finite input")
    e = np.where(keep, np.exp(kept - kept.max(axis=-1, keepdims=True)), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)
    return _emit(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax_last(x):
    xv = value_of(x)
    if not np.all(np.isfinite(xv)):
        raise NumericError("log_softmax_last received non-finite input")
    shifted = xv - xv.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _emit(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit population variance, then scale and shift."""
    xv, gv, bv = value_of(x), value_of(gain), value_of(bias)
    d = xv.shape[-1]
    if gv.shape != (d,) or bv.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gv.shape} / bias {bv.shape} do not match width {d}")
    mu = xv.mean(axis=-1, keepdims=True)
    centered = xv - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gv + bv

    def vjp(g):
        gxhat = g * gv
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(xv.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(out, (x, gain, bias), vjp)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """Tanh approximation of GELU."""
    xv = value_of(x)
    u = _GELU_C * (xv + 0.044715 * xv ** 3)
    t = np.tanh(u)
    out = 0.5 * xv * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xv ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du),)

    return _emit(out, (x,), vjp)


def cross_entropy_logits(logits, target):
    """``-log softmax(logits)[target]``.

    ``logits`` is a vector with an integer target (scalar result) or an
    ``(n, V)`` matrix with ``n`` integer targets (vector of ``n`` losses).
    """
    lv = value_of(logits)
    target = np.asarray(target)
    if not np.all(np.isfinite(lv)):
        raise NumericError("cross_entropy_logits received non-finite logits")
    vocab = lv.shape[-1]
    if np.any(target < 0) or np.any(target >= vocab):
        raise IndexError(f"target id outside vocabulary of size {vocab}")
    if lv.ndim == 1:
        if target.ndim != 0:
            raise ShapeError("vector logits need a scalar target")
        rows = lv[None, :]
        tg = target.reshape(1)
    elif lv.ndim == 2:
        if target.shape != (lv.shape[0],):
            raise ShapeError(f"targets {target.shape} do not match logits {lv.shape}")
        rows, tg = lv, target
    else:
        raise ShapeError(f"cross_entropy_logits: logits must be rank 1 or 2, got {lv.shape}")
    shifted = rows - rows.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    losses = lse - shifted[np.arange(len(tg)), tg]
    p = np.exp(shifted - lse[:, None])
    out = losses.reshape(()) if lv.ndim == 1 else losses

    def vjp(g):
        grow = np.reshape(g, (-1, 1))
        gl = p.copy()
        gl[np.arange(len(tg)), tg] -= 1.0
        gl = gl * grow
        return (gl.reshape(lv.shape),)

    return _emit(np.asarray(out), (logits,), vjp)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def tape_gradients(f: Callable, params: dict[str, np.ndarray]):
    """Evaluate ``f`` on fresh leaves and return ``(value, grads)``."""
    tape = Tape()
    leaves = {name: tape.leaf(v, name) for name, v in params.items()}
    out = f(leaves)
    if not isinstance(out, Node):
        return float(np.asarray(out)), {n: np.zeros_like(np.asarray(v, dtype=DTYPE)) for n, v in params.items()}
    grads = backward(tape, out)
    return float(out.value), {name: grads[name] for name in params}


def finite_diff_check(f: Callable, params: dict[str, np.ndarray], step: float = 1e-5) -> float:
    """Largest relative disagreement between tape and central-difference gradients.

    ``f`` maps a dict of parameters (arrays or nodes) to a scalar.  The error
    per coordinate is ``|numeric - tape| / (|tape| + 1e-8)``.
    """
    params = {n: np.array(v, dtype=DTYPE) for n, v in params.items()}
    _, grads = tape_gradients(f, params)
    worst = 0.0
    for name, base in params.items():
        flat = base.reshape(-1)
        g = grads[name].reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = float(np.asarray(value_of(f(params))))
            flat[idx] = orig - step
            f_minus = float(np.asarray(value_of(f(params))))
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            worst = max(worst, abs(numeric - g[idx]) / (abs(g[idx]) + 1e-8))
    return worst


# ---------------------------------------------------------------------------
# Tensor4 and the N3DT format
# ---------------------------------------------------------------------------

class Tensor4:
    """A ``(h, w, s, d)`` grid of feature vectors.

    ``data`` holds the ``(h*w*s, d)`` row matrix in canonical order; it may
    be an array or a tape node.
    """

    __slots__ = ("dims", "data")

    def __init__(self, dims, data):
        dims = tuple(int(n) for n in dims)
        if len(dims) != 4 or min(dims) < 1:
            raise ShapeError(f"Tensor4 dims must be four positive counts, got {dims}")
        h, w, s, d = dims
        if not isinstance(data, Node):
            data = np.asarray(data, dtype=DTYPE)
            if data.size != h * w * s * d:
                raise ShapeError(f"Tensor4 {dims} needs {h * w * s * d} values, got {data.size}")
            data = data.reshape(h * w * s, d)
        elif data.shape != (h * w * s, d):
            raise ShapeError(f"Tensor4 {dims} needs rows of shape {(h * w * s, d)}, got {data.shape}")
        self.dims = dims
        self.data = data

    @property
    def grid(self) -> Dims3:
        return self.dims[:3]

    @property
    def width(self) -> int:
        return self.dims[3]

    @property
    def rows(self) -> np.ndarray:
        return value_of(self.data)

    @classmethod
    def from_hwsd(cls, array) -> "Tensor4":
        """Build from an array indexed ``[i, j, k, c]``."""
        array = np.asarray(array, dtype=DTYPE)
        if array.ndim != 4:
            raise ShapeError(f"expected a rank-4 array, got shape {array.shape}")
        h, w, s, d = array.shape
        return cls((h, w, s, d), array.transpose(2, 0, 1, 3).reshape(-1, d))

    def to_hwsd(self) -> np.ndarray:
        h, w, s, d = self.dims
        return self.rows.reshape(s, h, w, d).transpose(1, 2, 0, 3)

    def at(self, i: int, j: int, k: int) -> np.ndarray:
        return self.rows[flat_index(self.grid, i, j, k)]

    def __repr__(self):
        return f"Tensor4(dims={self.dims})"


def tensor_to_bytes(t: Tensor4) -> bytes:
    header = TENSOR_MAGIC + struct.pack("<4I", *t.dims)
    return header + np.ascontiguousarray(t.rows, dtype="<f8").tobytes()


def read_tensor_stream(stream, source: str = "<stream>") -> Tensor4:
    magic = stream.read(4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    raw = stream.read(16)
    if len(raw) != 16:
        raise FormatError(f"{source}: truncated N3DT header")
    dims = struct.unpack("<4I", raw)
    count = int(np.prod(dims))
    payload = stream.read(8 * count)
    if len(payload) != 8 * count:
        raise FormatError(f"{source}: truncated N3DT payload")
    return Tensor4(dims, np.frombuffer(payload, dtype="<f8").astype(DTYPE))


def tensor_from_bytes(blob: bytes) -> Tensor4:
    return read_tensor_stream(io.BytesIO(blob))


def write_tensor(path, t: Tensor4) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def read_tensor(path) -> Tensor4:
    with open(path, "rb") as fh:
        return read_tensor_stream(fh, str(path))


def as_matrix_tensor(m: np.ndarray) -> Tensor4:
    """Pack a vector or matrix as ``(1, 1, rows, cols)`` so it serializes row-major."""
    m = np.asarray(m, dtype=DTYPE)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"expected a vector or matrix, got shape {m.shape}")
    return Tensor4((1, 1, m.shape[0], m.shape[1]), m)
