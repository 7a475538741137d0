"""Three-task training: text-to-image, video prediction and text-to-video.

All tasks are next-token cross-entropy over a visual token grid.  Text tasks
condition the encoder on the caption ids; video prediction conditions it on
the reserved ``None`` word and feeds the given frames to the decoder as a
fixed prefix whose positions are not scored.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .codec import TokenGrid
from .errors import ContractError, ShapeError
from .model import (
    NONE_TEXT_ID,
    ModelConfig,
    encode_condition,
    init_params,
    teacher_forced_nll,
)
from .tensor import Tape, Tensor4, add, backward, scale, value_of

T2I, V2V, T2V = "T2I", "V2V", "T2V"
TASK_KINDS = (T2I, V2V, T2V)

ADAM_LR = 1e-3
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TaskExample:
    kind: str
    condition: Sequence[int] | None
    target: TokenGrid
    given_frames: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ContractError(f"unknown task kind {self.kind!r}")
        if self.kind == V2V:
            if self.condition is not None:
                raise ContractError("video prediction takes no text condition")
            if not 1 <= self.given_frames < self.target.dims[2]:
                raise ContractError("video prediction needs at least one given and one predicted frame")
        else:
            if self.condition is None or len(self.condition) < 1:
                raise ContractError(f"{self.kind} needs a text condition")
            if NONE_TEXT_ID in self.condition:
                raise ContractError(f"text id {NONE_TEXT_ID} is reserved for the None condition")
            if self.given_frames:
                raise ContractError(f"{self.kind} has no given frames")
        if self.kind == T2I and self.target.dims[2] != 1:
            raise ContractError("text-to-image targets have a single frame")

    @property
    def loss_from(self) -> int:
        h, w, _ = self.target.dims
        return self.given_frames * h * w

    @property
    def prefix(self) -> np.ndarray:
        return self.target.ids[: self.loss_from]


def none_condition(config: ModelConfig, params) -> Tensor4:
    """Encoded representation of the reserved ``None`` word, shape ``(1, 1, 1, d)``."""
    return encode_condition(None, config, params)


def example_loss(ex: TaskExample, config: ModelConfig, params):
    return teacher_forced_nll(ex.condition, ex.target, config, params, loss_from=ex.loss_from)


def multitask_loss(examples: Sequence[TaskExample], config: ModelConfig, params):
    """Equal-weight mean of the per-example losses."""
    if not examples:
        raise ContractError("multitask_loss needs a non-empty batch")
    total = None
    for ex in examples:
        term = example_loss(ex, config, params)
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / len(examples))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = ADAM_LR
    beta1: float = ADAM_BETAS[0]
    beta2: float = ADAM_BETAS[1]
    eps: float = ADAM_EPS
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: OptimizerState):
    """One bias-corrected Adam update; returns new parameter dict and the state."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - state.beta1) * g if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = (1 - state.beta2) * g * g if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out, state


# ---------------------------------------------------------------------------
# Synthetic data and the training loop
# ---------------------------------------------------------------------------

def _pattern(kind: int, dims, vocab: int, key: int) -> np.ndarray:
    """Procedural token grid: stripes or a checkerboard offset by ``key``."""
    h, w, s = dims
    k, i, j = np.meshgrid(np.arange(s), np.arange(h), np.arange(w), indexing="ij")
    if kind == 0:
        grid = i + 3 * k
    elif kind == 1:
        grid = j + 5 * k
    else:
        grid = (i + j) % 2 * 7 + 2 * k
    return ((grid + key) % vocab).reshape(-1)


def toy_dataset(config: ModelConfig) -> list[TaskExample]:
    """One memorization example per task kind, sized by ``config``."""
    h, w, s = config.target_dims
    _, _, text_len = config.cond_dims
    if config.text_vocab < 2 * text_len + 1:
        raise ContractError("text vocabulary too small for two distinct captions")
    caption_a = list(range(1, text_len + 1))
    caption_b = list(range(text_len + 1, 2 * text_len + 1))
    return [
        TaskExample(T2I, caption_a, TokenGrid((h, w, 1), _pattern(0, (h, w, 1), config.vocab, 1), config.vocab)),
        TaskExample(V2V, None, TokenGrid((h, w, s), _pattern(2, (h, w, s), config.vocab, 3), config.vocab),
                    given_frames=1),
        TaskExample(T2V, caption_b, TokenGrid((h, w, s), _pattern(1, (h, w, s), config.vocab, 5), config.vocab)),
    ]


def loss_and_grads(examples, config: ModelConfig, params: dict):
    tape = Tape()
    leaves = {name: tape.leaf(v, name) for name, v in params.items()}
    loss = multitask_loss(examples, config, leaves)
    return float(value_of(loss)), backward(tape, loss)


def train_toy(config: ModelConfig, dataset: Sequence[TaskExample], steps: int, seed: int,
              tasks: Sequence[str] = TASK_KINDS, batch_size: int | None = None,
              lr: float = ADAM_LR, init_scale: float = 0.02, progress=None):
    """Seeded initialization followed by ``steps`` Adam updates.

    Batches are taken from ``dataset`` in fixed cyclic order (the whole
    dataset per step by default).  Returns the final parameters and the loss
    recorded at every step before its update.
    """
    if steps < 0:
        raise ContractError("steps must be non-negative")
    kinds = {ex.kind for ex in dataset}
    missing = [k for k in tasks if k not in kinds]
    if missing:
        raise ContractError(f"dataset has no examples for task(s) {missing}")
    extra = kinds - set(tasks)
    if extra:
        raise ContractError(f"dataset contains unconfigured task(s) {sorted(extra)}")
    batch_size = len(dataset) if batch_size is None else batch_size
    if batch_size < 1:
        raise ContractError("batch_size must be positive")

    params = init_params(config, seed, init_scale)
    state = OptimizerState(lr=lr)
    trace = []
    cursor = 0
    for step in range(steps):
        batch = [dataset[(cursor + n) % len(dataset)] for n in range(batch_size)]
        cursor = (cursor + batch_size) % len(dataset)
        loss, grads = loss_and_grads(batch, config, params)
        trace.append(loss)
        params, state = adam_step(params, grads, state)
        if progress is not None:
            progress(step, loss)
    return params, trace


def write_loss_csv(path, trace: Sequence[float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(trace):
            writer.writerow([step, repr(float(loss))])
