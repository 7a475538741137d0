"""3D nearby attention and the competing sparse patterns.

Two execution paths share one semantics:

* the *gathered* path builds, for every query, the ordered list of admissible
  key positions and only ever touches those keys (cost ``O(n * window)``);
* the *dense* path forms the full ``Q K^T`` score matrix and excludes
  inadmissible pairs before the softmax (cost ``O(n * m)``).

The dense path exists as an oracle for the gathered one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, ShapeError
from .tensor import (
    Dims3,
    Tensor4,
    grid_coords,
    masked_softmax_last,
    matmul,
    num_positions,
    reshape,
    scale,
    take_rows,
    transpose,
    value_of,
)

ALL = math.inf
"""Extent value admitting a whole axis."""


@dataclass(frozen=True)
class Extent:
    """Window sizes along height, width and time.

    Each is a positive odd integer (window centred on the projected
    coordinate) or :data:`ALL`.
    """

    h: float
    w: float
    s: float

    def __post_init__(self):
        for name in ("h", "w", "s"):
            v = getattr(self, name)
            if v == ALL:
                continue
            if isinstance(v, bool) or not float(v).is_integer() or v < 1 or int(v) % 2 == 0:
                raise ContractError(f"extent {name}={v!r} must be a positive odd integer or ALL")
            object.__setattr__(self, name, int(v))

    def __iter__(self):
        return iter((self.h, self.w, self.s))

    @property
    def radii(self) -> tuple[float, float, float]:
        return tuple(ALL if e == ALL else (e - 1) // 2 for e in self)

    @classmethod
    def parse(cls, text: str) -> "Extent":
        parts = [p.strip().lower() for p in text.split(",")]
        if len(parts) != 3:
            raise ContractError(f"extent needs three comma separated values, got {text!r}")
        vals = [ALL if p in ("all", "inf") else int(p) for p in parts]
        return cls(*vals)

    def __str__(self):
        return ",".join("all" if e == ALL else str(e) for e in self)


TEXT_EXTENT = Extent(1, 1, ALL)
IMAGE_EXTENT = Extent(3, 3, 1)
VIDEO_EXTENT = Extent(3, 3, 3)


@dataclass(frozen=True, eq=False)
class AttnMask:
    """Boolean ``(h*w*s) x (h'*w'*s')`` matrix; ``True`` means *attend*."""

    q_dims: Dims3
    k_dims: Dims3
    bits: np.ndarray

    def __post_init__(self):
        shape = (num_positions(self.q_dims), num_positions(self.k_dims))
        if self.bits.shape != shape:
            raise ShapeError(f"mask bits {self.bits.shape} do not match dims {shape}")

    def __eq__(self, other):
        return (isinstance(other, AttnMask) and self.q_dims == other.q_dims
                and self.k_dims == other.k_dims and np.array_equal(self.bits, other.bits))

    def count(self) -> int:
        return int(self.bits.sum())


@dataclass
class ProjWeights:
    w_q: object
    w_k: object
    w_v: object

    def __post_init__(self):
        shapes = [value_of(w).shape for w in (self.w_q, self.w_k, self.w_v)]
        if any(len(s) != 2 for s in shapes):
            raise ShapeError(f"projection weights must be matrices, got {shapes}")
        if len({s[0] for s in shapes}) != 1:
            raise ShapeError(f"projection weights disagree on input width: {shapes}")
        if shapes[0][1] != shapes[1][1]:
            raise ShapeError(f"query and key widths differ: {shapes}")

    @property
    def d_in(self) -> int:
        return value_of(self.w_q).shape[0]

    @property
    def d_out(self) -> int:
        return value_of(self.w_v).shape[1]


# ---------------------------------------------------------------------------
# Neighbourhoods and masks
# ---------------------------------------------------------------------------

def _check_dims(dims) -> Dims3:
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ShapeError(f"grid dims must be three positive counts, got {dims}")
    return dims


def project_coord(target_dims, cond_dims, pos) -> tuple[int, int, int]:
    """Map a target position onto the condition grid by floor scaling."""
    target_dims, cond_dims = _check_dims(target_dims), _check_dims(cond_dims)
    if len(pos) != 3 or not all(0 <= p < n for p, n in zip(pos, target_dims)):
        raise IndexError(f"position {tuple(pos)} outside target grid {target_dims}")
    return tuple(p * c // t for p, c, t in zip(pos, cond_dims, target_dims))


def neighborhood(cond_dims, center, extent: Extent) -> list[int]:
    """Flat condition indices inside the clipped window around ``center``, ascending."""
    cond_dims = _check_dims(cond_dims)
    h, w, s = cond_dims
    if not all(0 <= c < n for c, n in zip(center, cond_dims)):
        raise IndexError(f"center {tuple(center)} outside condition grid {cond_dims}")
    ranges = []
    for c, n, r in zip(center, cond_dims, extent.radii):
        if r == ALL:
            ranges.append(range(n))
        else:
            ranges.append(range(max(0, c - r), min(n, c + r + 1)))
    rh, rw, rs = ranges
    return [k * h * w + i * w + j for k in rs for i in rh for j in rw]


def _causal_bits(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def _require_causal_dims(q_dims, k_dims):
    if q_dims != k_dims:
        raise ContractError(f"causal masking needs equal query/key dims, got {q_dims} vs {k_dims}")


def nearby_mask(target_dims, cond_dims, extent: Extent, causal: bool = False) -> AttnMask:
    target_dims, cond_dims = _check_dims(target_dims), _check_dims(cond_dims)
    if causal:
        _require_causal_dims(target_dims, cond_dims)
    q = grid_coords(target_dims)
    k = grid_coords(cond_dims)
    proj = q * np.array(cond_dims) // np.array(target_dims)
    radii = np.array(extent.radii, dtype=float)
    bits = (np.abs(k[None, :, :] - proj[:, None, :]) <= radii).all(axis=-1)
    if causal:
        bits &= _causal_bits(len(q))
    return AttnMask(target_dims, cond_dims, bits)


def axial_mask(dims, causal: bool = False) -> AttnMask:
    dims = _check_dims(dims)
    c = grid_coords(dims)
    same = (c[:, None, :] == c[None, :, :]).sum(axis=-1)
    bits = same >= 2
    if causal:
        bits &= _causal_bits(len(c))
    return AttnMask(dims, dims, bits)


def block_mask(dims, block_dims, causal: bool = False) -> AttnMask:
    dims = _check_dims(dims)
    block_dims = _check_dims(block_dims)
    if any(n % b for n, b in zip(dims, block_dims)):
        raise ContractError(f"block dims {block_dims} do not divide grid dims {dims}")
    ids = grid_coords(dims) // np.array(block_dims)
    bits = (ids[:, None, :] == ids[None, :, :]).all(axis=-1)
    if causal:
        bits &= _causal_bits(len(ids))
    return AttnMask(dims, dims, bits)


def full_mask(q_dims, k_dims=None, causal: bool = False) -> AttnMask:
    q_dims = _check_dims(q_dims)
    k_dims = q_dims if k_dims is None else _check_dims(k_dims)
    bits = np.ones((num_positions(q_dims), num_positions(k_dims)), dtype=bool)
    if causal:
        _require_causal_dims(q_dims, k_dims)
        bits &= _causal_bits(len(bits))
    return AttnMask(q_dims, k_dims, bits)


def identity_mask(dims) -> AttnMask:
    dims = _check_dims(dims)
    return AttnMask(dims, dims, np.eye(num_positions(dims), dtype=bool))


# ---------------------------------------------------------------------------
# Key tables for the gathered path
# ---------------------------------------------------------------------------

def _pack_table(rows: list[list[int]]):
    if any(len(r) == 0 for r in rows):
        raise ContractError("a query position has no admissible keys")
    width = max(len(r) for r in rows)
    index = np.empty((len(rows), width), dtype=np.intp)
    valid = np.zeros((len(rows), width), dtype=bool)
    for t, r in enumerate(rows):
        index[t, :len(r)] = r
        # padding re-reads an admissible key so no foreign value is touched
        index[t, len(r):] = r[0]
        valid[t, :len(r)] = True
    index.flags.writeable = False
    valid.flags.writeable = False
    return index, valid


@lru_cache(maxsize=256)
def nearby_table(target_dims: Dims3, cond_dims: Dims3, extent: Extent, causal: bool = False):
    """Per-query admissible key lists as a padded ``(index, valid)`` pair.

    Row ``t`` lists the condition positions attended by target position
    ``t`` in canonical order; ``valid`` marks real entries.
    """
    target_dims, cond_dims = _check_dims(target_dims), _check_dims(cond_dims)
    if causal:
        _require_causal_dims(target_dims, cond_dims)
    rows = []
    for t, pos in enumerate(grid_coords(target_dims)):
        keys = neighborhood(cond_dims, project_coord(target_dims, cond_dims, tuple(pos)), extent)
        if causal:
            keys = [u for u in keys if u <= t]
        rows.append(keys)
    return _pack_table(rows)


def table_from_mask(mask: AttnMask):
    return _pack_table([list(np.flatnonzero(row)) for row in mask.bits])


# ---------------------------------------------------------------------------
# Attention kernels on row matrices
# ---------------------------------------------------------------------------

def _split_heads(x, n: int, heads: int):
    """``(n, heads*dh)`` -> ``(heads, n, dh)``."""
    d = value_of(x).shape[-1]
    return transpose(reshape(x, (n, heads, d // heads)), (1, 0, 2))


def _merge_heads(x, n: int):
    heads, _, dh = value_of(x).shape
    return reshape(transpose(x, (1, 0, 2)), (n, heads * dh))


def gathered_attention(q, k, v, index, valid, scale_factor: float, heads: int = 1):
    """Attention where query ``t`` sees only keys ``index[t][valid[t]]``.

    ``q`` is ``(n, d)``; ``k``, ``v`` are ``(m, d)`` projected rows.
    """
    n, d = value_of(q).shape
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    if index.shape[0] != n:
        raise ShapeError(f"key table has {index.shape[0]} rows for {n} queries")
    width = index.shape[1]
    dh = d // heads
    qh = reshape(_split_heads(q, n, heads), (heads, n, 1, dh))
    kg = reshape(take_rows(k, index), (n, width, heads, dh))
    vg = reshape(take_rows(v, index), (n, width, heads, dh))
    scores = scale(matmul(qh, transpose(kg, (2, 0, 3, 1))), scale_factor)
    weights = masked_softmax_last(scores, valid[None, :, None, :])
    out = matmul(weights, transpose(vg, (2, 0, 1, 3)))
    return _merge_heads(reshape(out, (heads, n, dh)), n)


def dense_attention(q, k, v, bits: np.ndarray, scale_factor: float, heads: int = 1):
    """Full score matrix with inadmissible pairs excluded before the softmax."""
    n, d = value_of(q).shape
    m = value_of(k).shape[0]
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    if bits.shape != (n, m):
        raise ShapeError(f"mask {bits.shape} does not match {n} queries x {m} keys")
    qh = _split_heads(q, n, heads)
    kh = transpose(_split_heads(k, m, heads), (0, 2, 1))
    vh = _split_heads(v, m, heads)
    scores = scale(matmul(qh, kh), scale_factor)
    weights = masked_softmax_last(scores, bits[None])
    return _merge_heads(matmul(weights, vh), n)


def attention_weights_nearby(X: Tensor4, C: Tensor4, weights: ProjWeights, extent: Extent,
                             causal: bool = False) -> np.ndarray:
    """Dense ``(n, m)`` matrix of the single-head weights used by :func:`attend_sparse`."""
    index, valid = nearby_table(X.grid, C.grid, extent, causal)
    q = X.rows @ value_of(weights.w_q)
    k = C.rows @ value_of(weights.w_k)
    scores = np.einsum("nd,nwd->nw", q, k[index]) / math.sqrt(weights.d_in)
    scores = np.where(valid, scores, -np.inf)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    dense = np.zeros((X.rows.shape[0], C.rows.shape[0]))
    np.add.at(dense, (np.arange(len(index))[:, None].repeat(index.shape[1], 1), index), np.where(valid, p, 0.0))
    return dense


# ---------------------------------------------------------------------------
# Tensor4 front ends
# ---------------------------------------------------------------------------

def _project(X: Tensor4, C: Tensor4, weights: ProjWeights):
    if X.width != weights.d_in or C.width != weights.d_in:
        raise ShapeError(f"input widths {X.width}/{C.width} do not match projection d_in {weights.d_in}")
    return matmul(X.data, weights.w_q), matmul(C.data, weights.w_k), matmul(C.data, weights.w_v)


def attend_sparse(X: Tensor4, C: Tensor4, weights: ProjWeights, extent: Extent,
                  causal: bool = False, heads: int = 1) -> Tensor4:
    """3D nearby attention of ``X`` over ``C`` (pass ``C=X`` for self-attention).

    Scores are scaled by ``1/sqrt(d_in)`` for a single head and by
    ``1/sqrt(d_out/heads)`` when split into heads.
    """
    index, valid = nearby_table(X.grid, C.grid, extent, causal)
    q, k, v = _project(X, C, weights)
    out = gathered_attention(q, k, v, index, valid, _scale_for(weights, heads), heads)
    return Tensor4(X.grid + (weights.d_out,), out)


def attend_masked_sparse(X: Tensor4, C: Tensor4, weights: ProjWeights, mask: AttnMask,
                         heads: int = 1) -> Tensor4:
    """Gathered attention driven by an arbitrary mask (axial, block, ...)."""
    _check_mask_dims(X, C, mask)
    index, valid = table_from_mask(mask)
    q, k, v = _project(X, C, weights)
    out = gathered_attention(q, k, v, index, valid, _scale_for(weights, heads), heads)
    return Tensor4(X.grid + (weights.d_out,), out)


def attend_dense_masked(X: Tensor4, C: Tensor4, weights: ProjWeights, mask: AttnMask,
                        heads: int = 1) -> Tensor4:
    _check_mask_dims(X, C, mask)
    if not mask.bits.any(axis=1).all():
        raise ContractError("mask has a query row with no admissible keys")
    q, k, v = _project(X, C, weights)
    out = dense_attention(q, k, v, mask.bits, _scale_for(weights, heads), heads)
    return Tensor4(X.grid + (weights.d_out,), out)


def _check_mask_dims(X, C, mask):
    if mask.q_dims != X.grid or mask.k_dims != C.grid:
        raise ShapeError(f"mask dims {mask.q_dims}x{mask.k_dims} do not match inputs {X.grid}x{C.grid}")


def _scale_for(weights: ProjWeights, heads: int) -> float:
    if heads == 1:
        return 1.0 / math.sqrt(weights.d_in)
    return 1.0 / math.sqrt(weights.d_out // heads)


# ---------------------------------------------------------------------------
# Mask files
# ---------------------------------------------------------------------------

def mask_to_pgm(mask: AttnMask) -> bytes:
    """Binary PGM: one pixel per pair, 0 where attended and 255 where masked."""
    rows, cols = mask.bits.shape
    pixels = np.where(mask.bits, 0, 255).astype(np.uint8)
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes()


def mask_to_csv(mask: AttnMask) -> str:
    q, k = np.nonzero(mask.bits)
    lines = ["flat_q,flat_k"] + [f"{a},{b}" for a, b in zip(q, k)]
    return "\n".join(lines) + "\n"


def write_mask(prefix, mask: AttnMask) -> tuple[Path, Path]:
    prefix = Path(prefix)
    pgm = prefix.with_name(prefix.name + ".pgm")
    csv = prefix.with_name(prefix.name + ".csv")
    pgm.write_bytes(mask_to_pgm(mask))
    csv.write_text(mask_to_csv(mask), encoding="utf-8", newline="")
    return pgm, csv


def read_pgm(path) -> np.ndarray:
    """Parse a binary PGM written by :func:`mask_to_pgm` into a uint8 matrix."""
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise FormatError(f"{path}: not a binary PGM")
    cols, rows = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)
