"""Decoder with source cross-attention and a single-head copy layer over
retrieved-candidate tokens.

Per decoding step t the copy layer scores every token j of every retrieved
document i:

    logit_ij = h_t . W_a r_ij + beta * s_i        (bias shared per document)
    alpha    = softmax over the flattened (i, j) set
    c_t      = W_c (sum_ij alpha_ij r_ij)

The decoder distribution becomes softmax(W_d (h_t + c_t) + b_d), and the
final next-token distribution mixes in copy mass gated by
lambda_t = sigmoid(gate([h_t ; c_t])):

    P(y) = (1 - lambda_t) P_dec(y) + lambda_t * sum_{ij: token(ij)=y} alpha_ij

With no candidates supplied the plain path softmax(W_d h_t + b_d) is used,
bit-identical to an ordinary seq2seq decoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import (Tensor, concat, gather_rows, matmul, pick, reshape,
                       scatter_add, sigmoid, softmax, transpose, clamp_min,
                       log, affine)
from .data import BOS_ID, CLS_ID, DOC_ID, PAD_ID, TokenSequence
from .errors import ContractError, DegenerateInputError, NumericError
from .index import RetrievedCandidate
from .layers import (DecoderBlock, LayerNorm, Linear, Module, Parameter,
                     normal_param)

_NON_COPYABLE = np.array([PAD_ID, CLS_ID, DOC_ID])
_PROB_FLOOR = 1e-12


class DecoderStack(Module):
    def __init__(self, vocab_size: int, d_model: int, heads: int, layers: int,
                 d_ff: int, max_len: int, rng: np.random.Generator, dtype):
        self.d_model = d_model
        self.max_len = max_len
        self.tok_emb = normal_param(rng, (vocab_size, d_model), dtype)
        self.pos_emb = normal_param(rng, (max_len, d_model), dtype)
        self.blocks = [DecoderBlock(d_model, heads, d_ff, rng, dtype)
                       for _ in range(layers)]
        self.ln_out = LayerNorm(d_model, dtype)

    def __call__(self, ids: np.ndarray, src_states: Tensor) -> Tensor:
        length = int(len(ids))
        if length == 0:
            raise ContractError("decoder input is empty")
        if length > self.max_len:
            raise ContractError(f"decoder input length {length} exceeds max_len {self.max_len}")
        x = gather_rows(self.tok_emb, ids) + gather_rows(self.pos_emb, np.arange(length))
        causal = np.tril(np.ones((length, length), dtype=bool))
        for block in self.blocks:
            x = block(x, src_states, causal)
        return self.ln_out(x)


class CopyLayer(Module):
    """Single-head biased cross-attention plus the mixture gate.

    beta starts at zero (unbiased attention); the gate bias starts at -2 so
    the mixture initially leans on the decoder distribution.
    """

    def __init__(self, d_model: int, rng: np.random.Generator, dtype):
        self.w_attn = normal_param(rng, (d_model, d_model), dtype)
        self.w_context = normal_param(rng, (d_model, d_model), dtype)
        self.beta = Parameter(np.zeros((), dtype=dtype))
        self.gate = Linear(2 * d_model, 1, rng, dtype)
        self.gate.bias.data[...] = -2.0


@dataclass
class FlatCandidates:
    """Retrieved documents flattened to one token axis."""

    states: Tensor          # (n_tokens, d_model)
    token_ids: np.ndarray   # (n_tokens,)
    copyable: np.ndarray    # (n_tokens,) bool; special tokens masked out
    bias: Tensor            # (n_tokens,) beta * s_i, shared per document


@dataclass
class MixtureDistribution:
    """One decode step: probabilities plus the copy-layer internals."""

    probs: Tensor                       # (vocab,)
    lam: Optional[Tensor] = None        # scalar gate, None on the plain path
    alpha: Optional[Tensor] = None      # (n_tokens,) copy weights
    context: Optional[Tensor] = None    # (d_model,)


@dataclass
class GenerationExample:
    """One training item: encoded target, source states, candidates."""

    target: TokenSequence
    source_states: Tensor
    candidates: Sequence[RetrievedCandidate]


def flatten_candidates(candidates: Sequence[RetrievedCandidate],
                       beta: Tensor) -> FlatCandidates:
    if not candidates or all(len(c.token_ids) == 0 for c in candidates):
        raise ContractError("copy attention needs at least one candidate token")
    states = concat([c.token_states for c in candidates], axis=0)
    token_ids = np.concatenate([c.token_ids for c in candidates])
    copyable = ~np.isin(token_ids, _NON_COPYABLE)
    if not copyable.any():
        raise DegenerateInputError("all candidate tokens are masked out of copy attention")
    ones = [Tensor(np.ones(len(c.token_ids), dtype=states.data.dtype)) for c in candidates]
    score_vec = concat([c.score * o for c, o in zip(candidates, ones)], axis=0)
    return FlatCandidates(states=states, token_ids=token_ids, copyable=copyable,
                          bias=beta * score_vec)


def _copy_attention_rows(h_rows: Tensor, flat: FlatCandidates,
                         layer: CopyLayer) -> tuple[Tensor, Tensor]:
    """Copy attention for a block of decoder states; no 1/sqrt(d) scaling."""
    logits = matmul(matmul(h_rows, layer.w_attn), transpose(flat.states))
    logits = logits + flat.bias
    alpha = softmax(logits, mask=flat.copyable, axis=-1)
    context = matmul(matmul(alpha, flat.states), transpose(layer.w_context))
    return alpha, context


def copy_attention(h_d_t: Tensor, candidates: Sequence[RetrievedCandidate],
                   layer: CopyLayer) -> tuple[Tensor, Tensor]:
    """Weights over the flattened candidate tokens and the context vector."""
    if h_d_t.data.ndim != 1:
        raise ContractError(f"copy_attention expects a state vector, got shape {h_d_t.data.shape}")
    d = h_d_t.data.shape[0]
    flat = flatten_candidates(candidates, layer.beta)
    alpha, context = _copy_attention_rows(reshape(h_d_t, (1, d)), flat, layer)
    return reshape(alpha, (-1,)), reshape(context, (d,))


def decode_rows(model, input_ids: np.ndarray, src_states: Tensor,
                candidates: Sequence[RetrievedCandidate]):
    """Teacher-forced distributions for every position of ``input_ids``.

    Returns ``(probs (T, V), lam (T, 1) | None, alpha (T, n_tokens) | None)``.
    """
    h = model.decoder(input_ids, src_states)
    vocab = model.out_proj.weight.data.shape[1]
    if not candidates:
        return softmax(affine(h, model.out_proj.weight, model.out_proj.bias), axis=-1), None, None
    flat = flatten_candidates(candidates, model.copy.beta)
    alpha, context = _copy_attention_rows(h, flat, model.copy)
    p_dec = softmax(affine(h + context, model.out_proj.weight, model.out_proj.bias), axis=-1)
    copy_dist = scatter_add(alpha, flat.token_ids, vocab)
    lam = sigmoid(model.copy.gate(concat([h, context], axis=1)))
    probs = (1.0 - lam) * p_dec + lam * copy_dist
    return probs, lam, alpha


def decode_step(model, prefix: TokenSequence, src_states: Tensor,
                candidates: Sequence[RetrievedCandidate]) -> MixtureDistribution:
    """Next-token distribution after ``prefix`` (which must start with [BOS])."""
    ids = np.asarray(prefix.ids, dtype=np.int64)
    if ids.size == 0:
        raise ContractError("decode_step prefix is empty")
    if ids[0] != BOS_ID:
        raise ContractError("decode_step prefix must start with [BOS]")
    probs, lam, alpha = decode_rows(model, ids, src_states, candidates)
    t = ids.size - 1
    vocab = probs.data.shape[1]
    last = reshape(gather_rows(probs, np.array([t])), (vocab,))
    if lam is None:
        return MixtureDistribution(probs=last)
    lam_t = reshape(gather_rows(lam, np.array([t])), ())
    alpha_t = reshape(gather_rows(alpha, np.array([t])), (-1,))
    return MixtureDistribution(probs=last, lam=lam_t, alpha=alpha_t)


def _example_nll(model, ex: GenerationExample):
    """(summed nll Tensor, token count, mean lambda) for one example."""
    ids = np.asarray(ex.target.ids, dtype=np.int64)
    if ids.size < 2:
        raise ContractError("encoded target must hold [BOS] plus at least one token")
    if ids[0] != BOS_ID:
        raise ContractError("encoded target must start with [BOS]")
    inputs, gold = ids[:-1], ids[1:]
    probs, lam, _ = decode_rows(model, inputs, ex.source_states, list(ex.candidates))
    keep = gold != PAD_ID
    p_gold = clamp_min(pick(probs, gold), _PROB_FLOOR)
    masked = log(p_gold) * Tensor(keep.astype(probs.data.dtype))
    nll = -masked.sum()
    lam_mean = float(lam.data.mean()) if lam is not None else 0.0
    return nll, int(keep.sum()), lam_mean


def sequence_loss(examples: Sequence[GenerationExample], model) -> Tensor:
    """Mean negative log-likelihood per non-[PAD] target token."""
    if not examples:
        raise ContractError("sequence_loss needs at least one example")
    total: Optional[Tensor] = None
    tokens = 0
    for i, ex in enumerate(examples):
        nll, n, _ = _example_nll(model, ex)
        if not np.isfinite(float(nll.data)):
            raise NumericError(
                f"non-finite loss for example {i} (id-like target len {len(ex.target)})")
        total = nll if total is None else total + nll
        tokens += n
    return total / float(tokens)
