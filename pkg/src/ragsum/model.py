"""The full retrieval-augmented summarizer: four encoders, the decoder, the
copy layer, and the vocabulary projection."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .encoder import EncoderConfig, EncoderStack
from .errors import ConfigError
from .generator import CopyLayer, DecoderStack
from .layers import Linear, Module


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    heads: int = 4
    layers: int = 2
    d_ff: Optional[int] = None
    max_len: int = 512
    window: Optional[int] = None
    tie_query_memory: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.vocab_size < 7:
            raise ConfigError("vocab_size must cover the reserved tokens plus content")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def ff_dim(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(vocab_size=self.vocab_size, d_model=self.d_model,
                             heads=self.heads, layers=self.layers, d_ff=self.d_ff,
                             max_len=self.max_len, window=self.window, dtype=self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)


class SummarizerModel(Module):
    """Query/memory/source/retrieved encoders + copy-mechanism decoder.

    ``tie_query_memory=True`` makes the memory encoder share the query
    encoder's weights (the two stacks are otherwise independent).
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        enc_cfg = config.encoder_config()
        dtype = np.dtype(config.dtype)
        self.query_encoder = EncoderStack(enc_cfg, rng)
        self.memory_encoder = (self.query_encoder if config.tie_query_memory
                               else EncoderStack(enc_cfg, rng))
        self.source_encoder = EncoderStack(enc_cfg, rng)
        self.retrieved_encoder = EncoderStack(enc_cfg, rng)
        self.decoder = DecoderStack(config.vocab_size, config.d_model, config.heads,
                                    config.layers, config.ff_dim, config.max_len,
                                    rng, dtype)
        self.copy = CopyLayer(config.d_model, rng, dtype)
        self.out_proj = Linear(config.d_model, config.vocab_size, rng, dtype)
        self.retriever_pretrained = False


def build_model(config: ModelConfig, seed: int = 0) -> SummarizerModel:
    return SummarizerModel(config, np.random.default_rng(seed))
