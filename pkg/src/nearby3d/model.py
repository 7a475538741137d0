"""3D transformer encoder-decoder over nearby attention.

Parameters live in a flat ``dict`` (name -> array or tape leaf) whose key
order is fixed by :func:`param_shapes`; that order is also the on-disk order
of ``N3CK`` checkpoints.

Block layout (pre-norm, residual)::

    encoder layer:  x += Wo·A(LN(x), LN(x));              x += FFN(LN(x))
    decoder layer:  y += Wo·A(LN(y), LN(y)) + Wo'·A(LN(y), C_L);  y += FFN(LN(y))

where ``A`` is nearby attention with the configured extent and the decoder
self-attention is causal in canonical order.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import (
    ALL,
    Extent,
    TEXT_EXTENT,
    VIDEO_EXTENT,
    dense_attention,
    gathered_attention,
    nearby_mask,
    nearby_table,
)
from .codec import TokenGrid
from .errors import ContractError, FormatError, ShapeError
from .tensor import (
    Dims3,
    Tensor4,
    add,
    as_matrix_tensor,
    concat_rows,
    cross_entropy_logits,
    gelu,
    grid_coords,
    layer_norm,
    matmul,
    mean_all,
    num_positions,
    read_tensor_stream,
    reshape,
    sum_all,
    take_rows,
    tensor_to_bytes,
    value_of,
)

CHECKPOINT_MAGIC = b"N3CK"
NONE_TEXT_ID = 0
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    d: int = 32
    heads: int = 2
    vocab: int = 16
    text_vocab: int = 16
    enc_extent: Extent = TEXT_EXTENT
    dec_self_extent: Extent = VIDEO_EXTENT
    dec_cross_extent: Extent = TEXT_EXTENT
    target_dims: Dims3 = (2, 2, 2)
    cond_dims: Dims3 = (1, 1, 3)
    ffn_multiplier: int = 4
    loss_sum: bool = False

    def __post_init__(self):
        if self.layers < 1:
            raise ContractError("a model needs at least one layer")
        if self.heads < 1 or self.d % self.heads:
            raise ContractError(f"width {self.d} is not divisible by {self.heads} heads")
        if self.vocab < 2 or self.text_vocab < 2:
            raise ContractError("vocabularies need at least two entries")
        object.__setattr__(self, "target_dims", tuple(self.target_dims))
        object.__setattr__(self, "cond_dims", tuple(self.cond_dims))

    @property
    def head_width(self) -> int:
        return self.d // self.heads


def toy_config() -> ModelConfig:
    return ModelConfig()


def grad_check_config() -> ModelConfig:
    return ModelConfig(layers=1, d=8, heads=2, vocab=8, text_vocab=8)


def paper_scale_config() -> ModelConfig:
    # text_vocab is the size of a lower-cased BPE vocabulary; never instantiated
    return ModelConfig(layers=24, d=1280, heads=20, vocab=12288, text_vocab=49408,
                       target_dims=(21, 21, 10), cond_dims=(1, 1, 77))


PRESETS = {"toy": toy_config, "paper-scale": paper_scale_config, "grad-check": grad_check_config}


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _attn_shapes(prefix, d):
    return {f"{prefix}_{p}": (d, d) for p in ("q", "k", "v", "o")}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d, config.d * config.ffn_multiplier
    h, w, s = config.target_dims
    hc, wc, sc = config.cond_dims
    shapes = {
        "tok_emb": (config.vocab, d),
        "text_emb": (config.text_vocab, d),
        "bos": (d,),
        "pos_h": (h, d), "pos_w": (w, d), "pos_s": (s, d),
        "cpos_h": (hc, d), "cpos_w": (wc, d), "cpos_s": (sc, d),
    }
    ffn = lambda p: {f"{p}.ffn_w1": (d, f), f"{p}.ffn_b1": (f,), f"{p}.ffn_w2": (f, d), f"{p}.ffn_b2": (d,)}
    for l in range(config.layers):
        p = f"enc{l}"
        shapes.update({f"{p}.ln1_g": (d,), f"{p}.ln1_b": (d,)})
        shapes.update(_attn_shapes(f"{p}.self", d))
        shapes.update({f"{p}.ln2_g": (d,), f"{p}.ln2_b": (d,)})
        shapes.update(ffn(p))
    for l in range(config.layers):
        p = f"dec{l}"
        shapes.update({f"{p}.ln1_g": (d,), f"{p}.ln1_b": (d,)})
        shapes.update(_attn_shapes(f"{p}.self", d))
        shapes.update(_attn_shapes(f"{p}.cross", d))
        shapes.update({f"{p}.ln2_g": (d,), f"{p}.ln2_b": (d,)})
        shapes.update(ffn(p))
    shapes.update({"lnf_g": (d,), "lnf_b": (d,), "head": (d, config.vocab)})
    return shapes


def param_count(config: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(config).values())


def _is_gain(name):
    return name.endswith("_g")


def _is_bias(name):
    return name.endswith("_b") or "_b1" in name or "_b2" in name


def init_params(config: ModelConfig, seed: int, scale: float = 0.02) -> dict[str, np.ndarray]:
    """Weights and embeddings uniform in ``[-scale, scale]``; norms start as identity, biases at zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if _is_gain(name):
            params[name] = np.ones(shape)
        elif _is_bias(name):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.uniform(-scale, scale, size=shape)
    return params


def zero_params(config: ModelConfig) -> dict[str, np.ndarray]:
    return {n: (np.ones(s) if _is_gain(n) else np.zeros(s)) for n, s in param_shapes(config).items()}


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def add_positional(x: Tensor4, tables) -> Tensor4:
    """Add the height, width and time table rows of each position to its vector."""
    ph, pw, ps = tables
    h, w, s, d = x.dims
    for axis, n, t in (("h", h, ph), ("w", w, pw), ("s", s, ps)):
        tv = value_of(t)
        if tv.ndim != 2 or tv.shape[1] != d or tv.shape[0] < n:
            raise ShapeError(f"positional table {axis} of shape {tv.shape} cannot cover {n} positions of width {d}")
    return Tensor4(x.dims, add(x.data, _positional_rows((h, w, s), tables)))


def _positional_rows(dims, tables, n: int | None = None):
    coords = grid_coords(dims)
    if n is not None:
        coords = coords[:n]
    ph, pw, ps = tables
    return add(add(take_rows(ph, coords[:, 0]), take_rows(pw, coords[:, 1])), take_rows(ps, coords[:, 2]))


def _ln(x, params, name):
    return layer_norm(x, params[name + "_g"], params[name + "_b"], LN_EPS)


def _ffn(x, params, prefix):
    hidden = gelu(add(matmul(x, params[prefix + ".ffn_w1"]), params[prefix + ".ffn_b1"]))
    return add(matmul(hidden, params[prefix + ".ffn_w2"]), params[prefix + ".ffn_b2"])


@lru_cache(maxsize=256)
def _dense_bits(q_dims, k_dims, extent, causal):
    bits = nearby_mask(q_dims, k_dims, extent, causal).bits
    bits.flags.writeable = False
    return bits


def _attention(q_in, kv_in, params, prefix, q_dims, k_dims, extent, causal, config, impl):
    """Multi-head nearby attention over the first ``len(q_in)`` query positions."""
    n = value_of(q_in).shape[0]
    m = value_of(kv_in).shape[0]
    q = matmul(q_in, params[prefix + "_q"])
    k = matmul(kv_in, params[prefix + "_k"])
    v = matmul(kv_in, params[prefix + "_v"])
    scale = 1.0 / math.sqrt(config.head_width)
    if impl == "sparse":
        index, valid = nearby_table(q_dims, k_dims, extent, causal)
        index, valid = index[:n], valid[:n]
        if index.size and index.max() >= m:
            raise ShapeError(f"key table reaches position {index.max()} but only {m} keys are present")
        out = gathered_attention(q, k, v, index, valid, scale, config.heads)
    elif impl == "dense":
        out = dense_attention(q, k, v, _dense_bits(q_dims, k_dims, extent, causal)[:n, :m], scale, config.heads)
    else:
        raise ContractError(f"unknown attention implementation {impl!r}")
    return matmul(out, params[prefix + "_o"])


# ---------------------------------------------------------------------------
# Encoder / decoder
# ---------------------------------------------------------------------------

def encode(c0: Tensor4, config: ModelConfig, params, impl: str = "sparse") -> Tensor4:
    """Run the encoder stack over a condition that already carries positional encodings."""
    if c0.width != config.d:
        raise ShapeError(f"condition width {c0.width} != model width {config.d}")
    x = c0.data
    for l in range(config.layers):
        p = f"enc{l}"
        h = _ln(x, params, p + ".ln1")
        x = add(x, _attention(h, h, params, p + ".self", c0.grid, c0.grid, config.enc_extent, False, config, impl))
        x = add(x, _ffn(_ln(x, params, p + ".ln2"), params, p))
    return Tensor4(c0.dims, x)


def decode_hidden(prefix, target_dims: Dims3, c_l: Tensor4, config: ModelConfig, params,
                  impl: str = "sparse"):
    """Hidden states (after the final norm) for the first ``n`` target positions.

    ``prefix`` holds ``n`` input rows in canonical order, the first being the
    begin-of-sequence vector, each already carrying positional encoding.
    Row ``t`` of the result depends only on rows ``<= t`` and on ``c_l``.
    """
    target_dims = tuple(target_dims)
    n = value_of(prefix).shape[0]
    if not 1 <= n <= num_positions(target_dims):
        raise ShapeError(f"prefix of {n} rows does not fit grid {target_dims}")
    y = prefix
    for l in range(config.layers):
        p = f"dec{l}"
        h = _ln(y, params, p + ".ln1")
        self_out = _attention(h, h, params, p + ".self", target_dims, target_dims,
                              config.dec_self_extent, True, config, impl)
        cross_out = _attention(h, c_l.data, params, p + ".cross", target_dims, c_l.grid,
                               config.dec_cross_extent, False, config, impl)
        y = add(y, add(self_out, cross_out))
        y = add(y, _ffn(_ln(y, params, p + ".ln2"), params, p))
    return layer_norm(y, params["lnf_g"], params["lnf_b"], LN_EPS)


def logits(hidden, head, bias=None):
    """Vocabulary scores ``hidden @ head (+ bias)`` for a vector or a row matrix."""
    hv, wv = value_of(hidden), value_of(head)
    if wv.ndim != 2 or hv.shape[-1] != wv.shape[0]:
        raise ShapeError(f"hidden width {hv.shape} does not match head {wv.shape}")
    if hv.ndim == 1:
        out = reshape(matmul(reshape(hidden, (1, -1)), head), (wv.shape[1],))
    else:
        out = matmul(hidden, head)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# Conditions and teacher forcing
# ---------------------------------------------------------------------------

def condition_repr(cond, config: ModelConfig, params) -> Tensor4:
    """Condition before the encoder: text ids (``None`` for the reserved word) or a ready Tensor4."""
    if isinstance(cond, Tensor4):
        c = cond
    else:
        ids = np.asarray([NONE_TEXT_ID] if cond is None else cond, dtype=np.int64).reshape(-1)
        if ids.size < 1:
            raise ContractError("text condition needs at least one token")
        if ids.min() < 0 or ids.max() >= config.text_vocab:
            raise IndexError(f"text id outside vocabulary of size {config.text_vocab}")
        c = Tensor4((1, 1, ids.size, config.d), take_rows(params["text_emb"], ids))
    return add_positional(c, (params["cpos_h"], params["cpos_w"], params["cpos_s"]))


def encode_condition(cond, config: ModelConfig, params, impl: str = "sparse") -> Tensor4:
    return encode(condition_repr(cond, config, params), config, params, impl)


def decoder_inputs(prev_ids, n: int, target_dims: Dims3, config: ModelConfig, params):
    """Rows ``[bos, e(y_0), ..., e(y_{n-2})]`` plus target positional encoding."""
    prev_ids = np.asarray(prev_ids, dtype=np.int64).reshape(-1)[: n - 1]
    if prev_ids.size != n - 1:
        raise ShapeError(f"need {n - 1} previous tokens, got {prev_ids.size}")
    first = reshape(params["bos"], (1, config.d))
    rows = first if n == 1 else concat_rows([first, take_rows(params["tok_emb"], prev_ids)])
    tables = (params["pos_h"], params["pos_w"], params["pos_s"])
    for axis, size, t in zip("hws", target_dims, tables):
        if value_of(t).shape[0] < size:
            raise ShapeError(f"positional table {axis} too short for target dims {target_dims}")
    return add(rows, _positional_rows(target_dims, tables, n))


def _check_target(target: TokenGrid, config: ModelConfig):
    if target.vocab > config.vocab or (target.ids.size and target.ids.max() >= config.vocab):
        raise IndexError(f"target token outside vocabulary of size {config.vocab}")
    if any(a > b for a, b in zip(target.dims, config.target_dims)):
        raise ShapeError(f"target dims {target.dims} exceed configured {config.target_dims}")


def teacher_forced(cond, target: TokenGrid, config: ModelConfig, params, impl: str = "sparse"):
    """Hidden states and per-position losses under one-position-shifted teacher forcing."""
    _check_target(target, config)
    c_l = encode_condition(cond, config, params, impl)
    n = target.ids.size
    inputs = decoder_inputs(target.ids, n, target.dims, config, params)
    hidden = decode_hidden(inputs, target.dims, c_l, config, params, impl)
    losses = cross_entropy_logits(logits(hidden, params["head"]), target.ids)
    return hidden, losses


def teacher_forced_nll(cond, target: TokenGrid, config: ModelConfig, params, loss_from: int = 0,
                       impl: str = "sparse"):
    """Cross-entropy of the target grid; positions before ``loss_from`` are excluded.

    Reduced by mean over the scored positions, or by sum when ``config.loss_sum``.
    """
    _, losses = teacher_forced(cond, target, config, params, impl)
    n = target.ids.size
    if not 0 <= loss_from < n:
        raise ContractError(f"loss_from={loss_from} leaves no scored positions in {n}")
    if loss_from:
        keep = np.arange(loss_from, n)
        losses = take_rows(losses, keep)
    return sum_all(losses) if config.loss_sum else mean_all(losses)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample(cond, target_dims: Dims3, config: ModelConfig, params, strategy: str = "greedy",
           temperature: float = 1.0, seed: int = 0, prefix=None, impl: str = "sparse") -> TokenGrid:
    """Generate a token grid position by position in canonical order.

    ``prefix`` fixes the first tokens (e.g. given frames for video
    prediction); generation continues after them.  ``strategy`` is
    ``"greedy"`` (argmax, lowest index on ties) or ``"temperature"``
    (sampling from ``softmax(logits / temperature)`` with a generator seeded
    by ``seed``).
    """
    target_dims = tuple(target_dims)
    if strategy not in ("greedy", "temperature"):
        raise ContractError(f"unknown sampling strategy {strategy!r}")
    if strategy == "temperature" and not temperature > 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if any(a > b for a, b in zip(target_dims, config.target_dims)):
        raise ShapeError(f"target dims {target_dims} exceed configured {config.target_dims}")
    total = num_positions(target_dims)
    ids = [] if prefix is None else [int(t) for t in np.asarray(prefix).reshape(-1)]
    if len(ids) > total or any(not 0 <= t < config.vocab for t in ids):
        raise ContractError("prefix does not fit the target grid or vocabulary")
    rng = np.random.default_rng(seed)
    c_l = encode_condition(cond, config, params, impl)
    while len(ids) < total:
        n = len(ids) + 1
        inputs = decoder_inputs(ids, n, target_dims, config, params)
        hidden = decode_hidden(inputs, target_dims, c_l, config, params, impl)
        scores = value_of(logits(hidden[-1], params["head"]))
        ids.append(_select(scores, strategy, temperature, rng))
    return TokenGrid(target_dims, np.array(ids), config.vocab)


def _select(scores: np.ndarray, strategy: str, temperature: float, rng) -> int:
    if strategy == "greedy":
        return int(np.argmax(scores))
    z = scores / temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    u = rng.random()
    return int(min(np.searchsorted(np.cumsum(p), u, side="right"), len(p) - 1))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _extent_words(e: Extent):
    return [0 if v == ALL else int(v) for v in e]


def _words_extent(words):
    return Extent(*[ALL if v == 0 else v for v in words])


def config_to_words(config: ModelConfig) -> list[int]:
    return [
        config.layers, config.d, config.heads, config.vocab, config.text_vocab,
        *_extent_words(config.enc_extent), *_extent_words(config.dec_self_extent),
        *_extent_words(config.dec_cross_extent), *config.target_dims, *config.cond_dims,
        config.ffn_multiplier, int(config.loss_sum),
    ]


CONFIG_WORDS = 22


def config_from_words(w: Sequence[int]) -> ModelConfig:
    return ModelConfig(
        layers=w[0], d=w[1], heads=w[2], vocab=w[3], text_vocab=w[4],
        enc_extent=_words_extent(w[5:8]), dec_self_extent=_words_extent(w[8:11]),
        dec_cross_extent=_words_extent(w[11:14]), target_dims=tuple(w[14:17]),
        cond_dims=tuple(w[17:20]), ffn_multiplier=w[20], loss_sum=bool(w[21]),
    )


def checkpoint_bytes(config: ModelConfig, params) -> bytes:
    """``N3CK`` magic, 22 little-endian u32 config words, then every
    parameter in :func:`param_shapes` order as (u16 name length, UTF-8 name,
    N3DT payload with vectors/matrices packed as ``(1, 1, rows, cols)``)."""
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack(f"<{CONFIG_WORDS}I", *config_to_words(config)))
    for name, shape in param_shapes(config).items():
        value = np.asarray(value_of(params[name]))
        if value.shape != shape:
            raise ShapeError(f"parameter {name} has shape {value.shape}, expected {shape}")
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(tensor_to_bytes(as_matrix_tensor(value)))
    return out.getvalue()


def save_checkpoint(path, config: ModelConfig, params) -> None:
    Path(path).write_bytes(checkpoint_bytes(config, params))


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        raw = fh.read(4 * CONFIG_WORDS)
        if len(raw) != 4 * CONFIG_WORDS:
            raise FormatError(f"{path}: truncated config block")
        try:
            config = config_from_words(struct.unpack(f"<{CONFIG_WORDS}I", raw))
        except (ContractError, ValueError) as exc:
            raise FormatError(f"{path}: invalid config block ({exc})") from None
        params = {}
        for name, shape in param_shapes(config).items():
            head = fh.read(2)
            if len(head) != 2:
                raise FormatError(f"{path}: missing parameter {name}")
            (length,) = struct.unpack("<H", head)
            got = fh.read(length).decode("utf-8", errors="replace")
            if got != name:
                raise FormatError(f"{path}: expected parameter {name}, found {got}")
            t = read_tensor_stream(fh, str(path))
            if t.rows.size != math.prod(shape):
                raise FormatError(f"{path}: parameter {name} has {t.rows.size} values, expected {math.prod(shape)}")
            params[name] = t.rows.reshape(shape).copy()
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after last parameter")
    return config, params
