"""
Decoder-only transformer tower.

A tower is used standalone (unimodal pre-training, the vocabulary-expanded
single decoder baseline) or as one of the two towers inside a zipped model.
The output head is the transpose of the token embedding table, so the two can
never drift apart.
"""
import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from apps.numeric.module import (
    INIT_STD,
    Dropout,
    FeedForward,
    LayerNorm,
    Module,
    MultiHeadAttention,
    normal_init,
)
from apps.interleave.sequences import build_self_mask
from apps.numeric.seeding import DROPOUT, INIT, substream
from apps.numeric.tensor import DEFAULT_DTYPE, ShapeError, add, embedding, matmul, transpose

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised for inconsistent model or experiment configuration."""


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 128
    dropout: float = 0.0
    tie_output_to_embedding: bool = True

    def __post_init__(self):
        if self.vocab_size < 3:
            raise ConfigError(f"vocab_size must be at least 3, got {self.vocab_size}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if min(self.d_model, self.n_layers, self.n_heads, self.d_ff, self.max_seq_len) < 1:
            raise ConfigError("backbone extents must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not self.tie_output_to_embedding:
            raise ConfigError("only tied output heads are supported")

    def to_dict(self):
        return asdict(self)


class DecoderBlock(Module):
    """Pre-norm residual block: causal self-attention, then feed-forward."""

    def __init__(self, config, rng, dropout_rng, dtype):
        self.attn_norm = LayerNorm(config.d_model, dtype)
        self.attn = MultiHeadAttention(config.d_model, config.n_heads, rng, dtype)
        self.ffn_norm = LayerNorm(config.d_model, dtype)
        self.ffn = FeedForward(config.d_model, config.d_ff, rng, dtype)
        self.dropout = Dropout(config.dropout, dropout_rng)

    def __call__(self, x, allowed):
        h = self.attn_norm(x)
        x = add(x, self.dropout(self.attn(h, h, allowed)))
        return add(x, self.dropout(self.ffn(self.ffn_norm(x))))


class DecoderBackbone(Module):

    def __init__(self, config, rng, dtype=DEFAULT_DTYPE, dropout_rng=None):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.dropout_rng = dropout_rng if dropout_rng is not None else np.random.default_rng(0)
        self.token_embedding = normal_init(rng, (config.vocab_size, config.d_model), dtype)
        self.position_embedding = normal_init(rng, (config.max_seq_len, config.d_model), dtype)
        self.blocks = [DecoderBlock(config, rng, self.dropout_rng, dtype) for _ in range(config.n_layers)]
        self.final_norm = LayerNorm(config.d_model, dtype)
        self.dropout = Dropout(config.dropout, self.dropout_rng)

    @classmethod
    def from_seed(cls, config, seed, dtype=DEFAULT_DTYPE, name="tower"):
        return cls(
            config,
            substream(seed, f"{INIT}.{name}"),
            dtype=dtype,
            dropout_rng=substream(seed, f"{DROPOUT}.{name}"),
        )

    @property
    def n_layers(self):
        return self.config.n_layers

    def check_tokens(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1:
            raise ShapeError(f"expected a flat token sequence, got shape {tokens.shape}")
        if len(tokens) > self.config.max_seq_len:
            raise ShapeError(f"sequence of {len(tokens)} tokens exceeds max_seq_len {self.config.max_seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ShapeError(f"token id outside vocabulary of {self.config.vocab_size}")
        return tokens

    def embed(self, tokens):
        """Token plus local positional embedding, positions 0..T-1."""
        tokens = self.check_tokens(tokens)
        x = add(embedding(self.token_embedding, tokens), embedding(self.position_embedding, np.arange(len(tokens))))
        return self.dropout(x)

    def run_blocks(self, x, start, stop, allowed):
        for block in self.blocks[start:stop]:
            x = block(x, allowed)
        return x

    def head(self, x):
        return matmul(self.final_norm(x), transpose(self.token_embedding))

    def forward(self, tokens, collect_hidden=(), input_projection=None):
        """
        Returns ``(logits [T, vocab], {layer: hidden [T, d_model]})``. Layer ``k``
        is the output of the k-th block (1-indexed), layer 0 the block input.
        """
        x = self.embed(tokens)
        if input_projection is not None:
            x = input_projection(x)
        wanted = set(collect_hidden)
        bad = [k for k in wanted if not 0 <= k <= self.n_layers]
        if bad:
            raise ShapeError(f"hidden layers {sorted(bad)} outside 0..{self.n_layers}")
        allowed = build_self_mask(x.shape[0])
        hidden = {0: x} if 0 in wanted else {}
        for k, block in enumerate(self.blocks, start=1):
            x = block(x, allowed)
            if k in wanted:
                hidden[k] = x
        return self.head(x), hidden

    __call__ = forward


def expected_parameter_count(config):
    d, ff = config.d_model, config.d_ff
    per_block = 4 * (d * d + d) + 2 * (2 * d) + (d * ff + ff) + (ff * d + d)
    return config.vocab_size * d + config.max_seq_len * d + config.n_layers * per_block + 2 * d


def expand_vocabulary(model, extra, rng):
    """
    Copy of ``model`` whose vocabulary gains ``extra`` rows, drawn from
    normal(0, 0.02). Every pre-existing weight is carried over bit-exactly and
    the tied head grows with the table.
    """
    if extra < 1:
        raise ConfigError(f"vocabulary expansion needs extra >= 1, got {extra}")
    config = replace(model.config, vocab_size=model.config.vocab_size + extra)
    expanded = DecoderBackbone(config, rng, dtype=model.dtype, dropout_rng=model.dropout_rng)
    state = model.state_dict()
    new_rows = rng.normal(0.0, INIT_STD, size=(extra, config.d_model)).astype(model.dtype)
    state["token_embedding"] = np.concatenate([state["token_embedding"], new_rows])
    expanded.load_state_dict(state)
    logger.info(f"Expanded vocabulary from {model.config.vocab_size} to {config.vocab_size}")
    return expanded


def with_max_seq_len(model, max_seq_len, rng):
    """Copy of ``model`` with a longer positional table; new positions drawn like fresh ones."""
    if max_seq_len < model.config.max_seq_len:
        raise ConfigError("positional table can only grow")
    config = replace(model.config, max_seq_len=max_seq_len)
    grown = DecoderBackbone(config, rng, dtype=model.dtype, dropout_rng=model.dropout_rng)
    state = model.state_dict()
    extra = max_seq_len - model.config.max_seq_len
    if extra:
        new_rows = rng.normal(0.0, INIT_STD, size=(extra, config.d_model)).astype(model.dtype)
        state["position_embedding"] = np.concatenate([state["position_embedding"], new_rows])
    grown.load_state_dict(state)
    return grown
