"""Transformer document encoders with CLS pooling for relevance scoring.

The model carries four encoder stacks (query, memory, source, retrieved).
Each produces per-token hidden states plus a unit-normalized [CLS] vector;
the inner product of two such vectors is the cosine relevance score.

When a local attention window ``w`` is configured, position i may attend j
only if ``|i - j| <= w`` or either position is flagged global; with ``w``
unset attention is full.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, gather_rows, reshape, sqrt
from .data import TokenSequence
from .errors import ContractError, NumericError
from .layers import EncoderBlock, LayerNorm, Module, normal_param


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 128
    heads: int = 4
    layers: int = 2
    d_ff: Optional[int] = None
    max_len: int = 512
    window: Optional[int] = None
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ContractError(
                f"d_model {self.d_model} must be divisible by heads {self.heads}")

    @property
    def ff_dim(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class EncodedDocument:
    """Per-token states plus the raw and unit-normalized [CLS] vector."""

    hidden: Tensor
    cls_raw: Tensor
    cls_unit: Tensor


def build_attention_mask(length: int, window: Optional[int],
                         global_mask: np.ndarray) -> Optional[np.ndarray]:
    """Boolean (length x length) self-attention mask; None means all-allowed."""
    if window is None:
        return None
    idx = np.arange(length)
    allowed = np.abs(idx[:, None] - idx[None, :]) <= window
    allowed |= global_mask[:, None]
    allowed |= global_mask[None, :]
    return allowed


class EncoderStack(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        dtype = config.np_dtype
        self.tok_emb = normal_param(rng, (config.vocab_size, config.d_model), dtype)
        self.pos_emb = normal_param(rng, (config.max_len, config.d_model), dtype)
        self.blocks = [EncoderBlock(config.d_model, config.heads, config.ff_dim, rng, dtype)
                       for _ in range(config.layers)]
        self.ln_out = LayerNorm(config.d_model, dtype)

    def encode(self, seq: TokenSequence) -> EncodedDocument:
        return encode(self, seq)


def encode(stack: EncoderStack, seq: TokenSequence) -> EncodedDocument:
    """Run the stack over one document."""
    length = len(seq)
    if length == 0:
        raise ContractError("cannot encode an empty token sequence")
    if length > stack.config.max_len:
        raise ContractError(
            f"sequence length {length} exceeds max_len {stack.config.max_len}")
    x = gather_rows(stack.tok_emb, seq.ids) + gather_rows(stack.pos_emb, np.arange(length))
    mask = build_attention_mask(length, stack.config.window, seq.global_mask)
    for block in stack.blocks:
        x = block(x, mask)
    hidden = stack.ln_out(x)
    cls_raw = reshape(gather_rows(hidden, np.array([0])), (stack.config.d_model,))
    norm = sqrt((cls_raw * cls_raw).sum())
    if float(norm.data) < 1e-12:
        raise NumericError("CLS vector norm is degenerate (< 1e-12)")
    cls_unit = cls_raw / norm
    return EncodedDocument(hidden=hidden, cls_raw=cls_raw, cls_unit=cls_unit)


def relevance_score(x: Tensor, y: Tensor) -> Tensor:
    """Inner product of two unit vectors (cosine similarity in [-1, 1])."""
    for name, v in (("x", x), ("y", y)):
        if v.data.ndim != 1:
            raise ContractError(f"relevance_score expects vectors, {name} has shape {v.data.shape}")
        norm = float(np.linalg.norm(v.data))
        if abs(norm - 1.0) > 1e-6:
            raise ContractError(f"relevance_score input {name} is not unit-norm (|v| = {norm!r})")
    return (x * y).sum()
