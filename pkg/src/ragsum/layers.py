"""Parameter containers and the transformer building blocks.

Initialization convention: weight matrices are drawn from N(0, 0.02²),
biases start at zero (layer-norm gains at one). The copy layer overrides the
gate bias, see ``generator``.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (Tensor, add, affine, attention, concat, gelu, matmul,
                       mul, slice_cols, sqrt)

INIT_STD = 0.02


class Parameter(Tensor):
    """A trainable leaf tensor; always owns a gradient slot."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Minimal parameter container with dotted-path naming."""

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        self._collect("", out, set())
        return out

    def _collect(self, prefix: str, out: dict, seen: set) -> None:
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Parameter):
                if id(val) not in seen:
                    seen.add(id(val))
                    out[key] = val
            elif isinstance(val, Module):
                if id(val) not in seen:
                    seen.add(id(val))
                    val._collect(key + ".", out, seen)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module) and id(item) not in seen:
                        seen.add(id(item))
                        item._collect(f"{key}.{i}.", out, seen)
                    elif isinstance(item, Parameter) and id(item) not in seen:
                        seen.add(id(item))
                        out[f"{key}.{i}"] = item

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0.0

    def set_trainable(self, trainable: bool) -> None:
        for p in self.parameters():
            p.requires_grad = trainable


def normal_param(rng: np.random.Generator, shape, dtype, std: float = INIT_STD) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape).astype(dtype))


def zeros_param(shape, dtype) -> Parameter:
    return Parameter(np.zeros(shape, dtype=dtype))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype,
                 std: float = INIT_STD):
        self.weight = normal_param(rng, (d_in, d_out), dtype, std)
        self.bias = zeros_param((d_out,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d, dtype=dtype))
        self.bias = zeros_param((d,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered / sqrt(var + self.eps)
        return normed * self.gain + self.bias


class MultiHeadAttention(Module):
    """Unbiased multi-head attention used inside encoder/decoder blocks."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, dtype):
        self.heads = heads
        self.d_head = d_model // heads
        self.wq = Linear(d_model, d_model, rng, dtype)
        self.wk = Linear(d_model, d_model, rng, dtype)
        self.wv = Linear(d_model, d_model, rng, dtype)
        self.wo = Linear(d_model, d_model, rng, dtype)

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask=None) -> Tensor:
        q = self.wq(q_in)
        k = self.wk(kv_in)
        v = self.wv(kv_in)
        outs = []
        for h in range(self.heads):
            lo, hi = h * self.d_head, (h + 1) * self.d_head
            out_h, _ = attention(slice_cols(q, lo, hi), slice_cols(k, lo, hi),
                                 slice_cols(v, lo, hi), mask=mask)
            outs.append(out_h)
        return self.wo(concat(outs, axis=1))


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, dtype):
        self.lin1 = Linear(d_model, d_ff, rng, dtype)
        self.lin2 = Linear(d_ff, d_model, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(gelu(self.lin1(x)))


class EncoderBlock(Module):
    """Pre-norm: x += attn(ln(x)); x += ff(ln(x))."""

    def __init__(self, d_model: int, heads: int, d_ff: int, rng, dtype):
        self.ln_attn = LayerNorm(d_model, dtype)
        self.attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.ln_ff = LayerNorm(d_model, dtype)
        self.ff = FeedForward(d_model, d_ff, rng, dtype)

    def __call__(self, x: Tensor, mask) -> Tensor:
        h = self.ln_attn(x)
        x = x + self.attn(h, h, mask=mask)
        x = x + self.ff(self.ln_ff(x))
        return x


class DecoderBlock(Module):
    """Pre-norm block with causal self-attention and source cross-attention."""

    def __init__(self, d_model: int, heads: int, d_ff: int, rng, dtype):
        self.ln_self = LayerNorm(d_model, dtype)
        self.self_attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.ln_cross = LayerNorm(d_model, dtype)
        self.cross_attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.ln_ff = LayerNorm(d_model, dtype)
        self.ff = FeedForward(d_model, d_ff, rng, dtype)

    def __call__(self, x: Tensor, src_states: Tensor, causal_mask) -> Tensor:
        h = self.ln_self(x)
        x = x + self.self_attn(h, h, mask=causal_mask)
        x = x + self.cross_attn(self.ln_cross(x), src_states)
        x = x + self.ff(self.ln_ff(x))
        return x
