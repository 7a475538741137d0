"""Discrete visual tokens and the unified 3D representations built from them.

Images are cut into square pixel patches, mapped by a small affine encoder to
feature vectors, and each feature is snapped to its nearest codebook row.
Videos are tokenized frame by frame with the same 2D codec.  Text ids and
segmentation sketches get their own builders so every modality ends up as a
``(h, w, s, d)`` :class:`~nearby3d.tensor.Tensor4`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, NumericError, ShapeError
from .tensor import (
    DTYPE,
    Dims3,
    Tensor4,
    add,
    matmul,
    mul,
    stop_gradient,
    sub,
    substitute,
    sum_all,
    take_rows,
    value_of,
)

TOKENS_MAGIC = b"N3TG"

# desk defaults and the paper-scale preset (configuration only, never built in tests)
DESK_VOCAB = 16
DESK_CODE_WIDTH = 8
LARGE_VOCAB = 12288
LARGE_CODE_WIDTH = 256
LARGE_GRID = (21, 21)


@dataclass
class Codebook:
    """``N x d_B`` table of token embeddings (array or tape leaf)."""

    entries: object

    def __post_init__(self):
        e = value_of(self.entries)
        if e.ndim != 2 or e.shape[0] < 2:
            raise ShapeError(f"codebook must be N x d_B with N >= 2, got {e.shape}")
        if not np.all(np.isfinite(e)):
            raise NumericError("codebook has non-finite entries")

    @property
    def size(self) -> int:
        return value_of(self.entries).shape[0]

    @property
    def width(self) -> int:
        return value_of(self.entries).shape[1]

    @classmethod
    def random(cls, size: int = DESK_VOCAB, width: int = DESK_CODE_WIDTH, seed: int = 0) -> "Codebook":
        return cls(np.random.default_rng(seed).normal(size=(size, width)))


@dataclass
class TokenGrid:
    """Token ids on an ``(h, w, s)`` grid, stored in canonical order."""

    dims: Dims3
    ids: np.ndarray
    vocab: int

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ShapeError(f"token grid dims must be three positive counts, got {self.dims}")
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        h, w, s = self.dims
        if self.ids.size != h * w * s:
            raise ShapeError(f"token grid {self.dims} needs {h * w * s} ids, got {self.ids.size}")
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= self.vocab):
            raise IndexError(f"token id outside vocabulary of size {self.vocab}")

    def __eq__(self, other):
        return (isinstance(other, TokenGrid) and self.dims == other.dims
                and self.vocab == other.vocab and np.array_equal(self.ids, other.ids))

    def frames(self) -> np.ndarray:
        """Ids as an ``(s, h, w)`` array."""
        h, w, s = self.dims
        return self.ids.reshape(s, h, w)

    def dump(self) -> str:
        """Human readable frame-by-frame listing."""
        out = [f"# dims h={self.dims[0]} w={self.dims[1]} s={self.dims[2]} vocab={self.vocab}"]
        for k, frame in enumerate(self.frames()):
            out.append(f"frame {k}")
            out.extend(" ".join(f"{v:d}" for v in row) for row in frame)
        return "\n".join(out) + "\n"


@dataclass
class FeatureGrid:
    """Encoder output on the token grid: ``(h*w*s, d_B)`` rows in canonical order."""

    dims: Dims3
    features: object

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        h, w, s = self.dims
        f = value_of(self.features)
        if f.ndim != 2 or f.shape[0] != h * w * s:
            raise ShapeError(f"feature grid {self.dims} needs {h * w * s} rows, got {f.shape}")


# ---------------------------------------------------------------------------
# Quantization
# ---------------------------------------------------------------------------

def quantize(features: FeatureGrid, codebook: Codebook) -> TokenGrid:
    """Nearest codebook row per cell by squared distance, lowest index on ties."""
    f = value_of(features.features)
    b = value_of(codebook.entries)
    if f.shape[1] != b.shape[1]:
        raise ShapeError(f"feature width {f.shape[1]} != codebook width {b.shape[1]}")
    dist = ((f[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    # argmin returns the first minimum
    return TokenGrid(features.dims, dist.argmin(axis=1), codebook.size)


def embed(tokens: TokenGrid, codebook: Codebook) -> Tensor4:
    if tokens.vocab > codebook.size or (tokens.ids.size and tokens.ids.max() >= codebook.size):
        raise IndexError(f"token id outside codebook of size {codebook.size}")
    return Tensor4(tokens.dims + (codebook.width,), take_rows(codebook.entries, tokens.ids))


def straight_through(features: FeatureGrid, codebook: Codebook, tokens: TokenGrid | None = None):
    """Quantized rows whose gradient w.r.t. the features is the identity.

    Forward value equals ``B[z]``; backward passes the incoming gradient to
    the features unchanged and nothing to the codebook.
    """
    if tokens is None:
        tokens = quantize(features, codebook)
    return substitute(features.features, value_of(codebook.entries)[tokens.ids])


def vq_loss(features: FeatureGrid, reconstruction_error, codebook: Codebook,
            tokens: TokenGrid | None = None):
    """Reconstruction + codebook + commitment terms with stop-gradients.

    The codebook term moves only the codebook toward the (frozen) features;
    the commitment term moves only the features toward the (frozen) codebook.
    """
    if tokens is None:
        tokens = quantize(features, codebook)
    f = features.features
    chosen = take_rows(codebook.entries, tokens.ids)
    codebook_gap = sub(stop_gradient(f), chosen)
    commit_gap = sub(f, stop_gradient(chosen))
    return add(add(reconstruction_error, sum_all(mul(codebook_gap, codebook_gap))),
               sum_all(mul(commit_gap, commit_gap)))


# ---------------------------------------------------------------------------
# Toy patch codec
# ---------------------------------------------------------------------------

@dataclass
class PatchCodec:
    """Affine patch encoder ``E`` and decoder ``G`` around a codebook.

    An ``H x W x C`` image is split into ``p x p`` patches; each flattened
    patch is mapped by ``enc_w, enc_b`` to a ``d_B`` feature and decoded back
    by ``dec_w, dec_b``.
    """

    patch: int
    channels: int
    codebook: Codebook
    enc_w: object
    enc_b: object
    dec_w: object
    dec_b: object

    @classmethod
    def create(cls, patch: int = 2, channels: int = 3, vocab: int = DESK_VOCAB,
               code_width: int = DESK_CODE_WIDTH, seed: int = 0) -> "PatchCodec":
        rng = np.random.default_rng(seed)
        pix = patch * patch * channels
        return cls(
            patch=patch,
            channels=channels,
            codebook=Codebook(rng.normal(size=(vocab, code_width))),
            enc_w=rng.normal(scale=pix ** -0.5, size=(pix, code_width)),
            enc_b=np.zeros(code_width),
            dec_w=rng.normal(scale=code_width ** -0.5, size=(code_width, pix)),
            dec_b=np.zeros(pix),
        )

    def params(self) -> dict[str, object]:
        return {"codebook": self.codebook.entries, "enc_w": self.enc_w, "enc_b": self.enc_b,
                "dec_w": self.dec_w, "dec_b": self.dec_b}

    def with_params(self, p: dict) -> "PatchCodec":
        return PatchCodec(self.patch, self.channels, Codebook(p["codebook"]),
                          p["enc_w"], p["enc_b"], p["dec_w"], p["dec_b"])

    def patches(self, frames: np.ndarray) -> tuple[Dims3, np.ndarray]:
        """``(s, H, W, C)`` pixels -> grid dims and ``(h*w*s, p*p*C)`` patch rows."""
        frames = np.asarray(frames, dtype=DTYPE)
        if frames.ndim == 3:
            frames = frames[None]
        s, H, W, C = frames.shape
        p = self.patch
        if C != self.channels or H % p or W % p:
            raise ShapeError(f"frames {frames.shape} incompatible with {p}x{p} patches of {self.channels} channels")
        h, w = H // p, W // p
        rows = frames.reshape(s, h, p, w, p, C).transpose(0, 1, 3, 2, 4, 5).reshape(s * h * w, p * p * C)
        return (h, w, s), rows

    def unpatch(self, dims: Dims3, rows: np.ndarray) -> np.ndarray:
        h, w, s = dims
        p, C = self.patch, self.channels
        return rows.reshape(s, h, w, p, p, C).transpose(0, 1, 3, 2, 4, 5).reshape(s, h * p, w * p, C)

    def encode(self, frames) -> FeatureGrid:
        dims, rows = self.patches(frames)
        return FeatureGrid(dims, add(matmul(rows, self.enc_w), self.enc_b))

    def decode_rows(self, quantized):
        return add(matmul(quantized, self.dec_w), self.dec_b)

    def tokenize(self, frames) -> TokenGrid:
        """Per-frame 2D tokenization; a single image yields ``s = 1``."""
        return quantize(self.encode(frames), self.codebook)

    def render(self, tokens: TokenGrid) -> np.ndarray:
        rows = value_of(self.codebook.entries)[tokens.ids]
        return self.unpatch(tokens.dims, value_of(self.decode_rows(rows)))

    def loss(self, frames):
        """Training loss of the codec on ``frames`` (reconstruction via straight-through)."""
        dims, target = self.patches(frames)
        feats = FeatureGrid(dims, add(matmul(target, self.enc_w), self.enc_b))
        tokens = quantize(feats, self.codebook)
        recon = self.decode_rows(straight_through(feats, self.codebook, tokens))
        gap = sub(recon, target)
        return vq_loss(feats, sum_all(mul(gap, gap)), self.codebook, tokens)


# ---------------------------------------------------------------------------
# Unified 3D representations
# ---------------------------------------------------------------------------

def text_repr(token_ids, table) -> Tensor4:
    """Embed text ids as a ``(1, 1, s, d)`` tensor."""
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    tv = value_of(table)
    if ids.size < 1:
        raise ContractError("text needs at least one token")
    if ids.min() < 0 or ids.max() >= tv.shape[0]:
        raise IndexError(f"text id outside vocabulary of size {tv.shape[0]}")
    return Tensor4((1, 1, ids.size, tv.shape[1]), take_rows(table, ids))


def image_repr(image, codec: PatchCodec) -> Tensor4:
    """``(h, w, 1, d_B)`` codebook embedding of an image."""
    return embed(codec.tokenize(image), codec.codebook)


def video_repr(frames, codec: PatchCodec) -> Tensor4:
    """``(h, w, s, d_B)`` embedding with every frame tokenized independently."""
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ShapeError(f"video must be (s, H, W, C), got {frames.shape}")
    return embed(codec.tokenize(frames), codec.codebook)


def onehot_sketch(seg, num_classes: int) -> np.ndarray:
    """``H x W`` class ids -> ``H x W x C`` one-hot volume."""
    seg = np.asarray(seg, dtype=np.int64)
    if seg.ndim != 2:
        raise ShapeError(f"segmentation must be H x W, got {seg.shape}")
    if seg.size and (seg.min() < 0 or seg.max() >= num_classes):
        raise IndexError(f"class id outside 0..{num_classes - 1}")
    return np.eye(num_classes, dtype=DTYPE)[seg]


def sketch_repr(seg, codec: PatchCodec) -> Tensor4:
    """Sketch through its own codec whose channel count is the class count."""
    return image_repr(onehot_sketch(seg, codec.channels), codec)


# ---------------------------------------------------------------------------
# N3TG files
# ---------------------------------------------------------------------------

def tokens_to_bytes(tokens: TokenGrid) -> bytes:
    h, w, s = tokens.dims
    return TOKENS_MAGIC + struct.pack("<4I", h, w, s, tokens.vocab) + tokens.ids.astype("<u4").tobytes()


def tokens_from_bytes(blob: bytes, source: str = "<bytes>") -> TokenGrid:
    if blob[:4] != TOKENS_MAGIC:
        raise FormatError(f"{source}: bad magic {blob[:4]!r}, expected {TOKENS_MAGIC!r}")
    if len(blob) < 20:
        raise FormatError(f"{source}: truncated N3TG header")
    h, w, s, vocab = struct.unpack("<4I", blob[4:20])
    payload = blob[20:]
    if len(payload) != 4 * h * w * s:
        raise FormatError(f"{source}: expected {h * w * s} ids, got {len(payload) // 4}")
    return TokenGrid((h, w, s), np.frombuffer(payload, dtype="<u4").astype(np.int64), vocab)


def write_tokens(path, tokens: TokenGrid) -> None:
    Path(path).write_bytes(tokens_to_bytes(tokens))


def read_tokens(path) -> TokenGrid:
    return tokens_from_bytes(Path(path).read_bytes(), str(path))
