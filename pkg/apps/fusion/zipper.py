"""
Two unimodal towers zipped together by gated cross-attention.

At zip step n tower A has run n * i_A of its blocks and tower B n * i_B of
its blocks. Both towers then read the other tower's hidden state from that same
moment (before either cross update), project it with g, and apply a gated
cross-attention + feed-forward block whose gates start at zero.
"""
import logging
from dataclasses import asdict, dataclass

import numpy as np

from apps.backbone.towers import ConfigError, DecoderBackbone
from apps.interleave.sequences import Modality, build_cross_mask, build_self_mask, build_streams
from apps.numeric.module import Dropout, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter
from apps.numeric.seeding import DROPOUT, INIT, substream
from apps.numeric.tensor import DEFAULT_DTYPE, add, multiply, relu, tanh

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ZipperConfig:
    i_a: int = 1
    i_b: int = 1
    n_zips: int = 4
    proj_hidden: int = 64
    input_proj_layers: int = 3
    enable_input_proj_a: bool = True
    enable_input_proj_b: bool = True
    freeze_a: bool = True
    freeze_b: bool = False
    share_cross_projections: bool = False
    dropout: float = 0.0

    def validate(self, config_a, config_b):
        if self.i_a < 1 or self.i_b < 1:
            raise ConfigError("zip intervals i_a and i_b must be at least 1")
        if self.n_zips < 0:
            raise ConfigError(f"n_zips must be non-negative, got {self.n_zips}")
        if self.n_zips > config_a.n_layers // self.i_a:
            raise ConfigError(f"n_zips {self.n_zips} exceeds {config_a.n_layers} layers of A at interval {self.i_a}")
        if self.n_zips > config_b.n_layers // self.i_b:
            raise ConfigError(f"n_zips {self.n_zips} exceeds {config_b.n_layers} layers of B at interval {self.i_b}")
        if self.input_proj_layers < 1 or self.proj_hidden < 1:
            raise ConfigError("input projections need at least one layer of positive width")

    def to_dict(self):
        return asdict(self)


class InputProjection(Module):
    """MLP d -> proj_hidden -> ... -> d with ReLU after every layer, the last included."""

    def __init__(self, d, hidden, n_layers, rng, dtype=DEFAULT_DTYPE):
        widths = [d] + [hidden] * (n_layers - 1) + [d]
        self.layers = [Linear(w_in, w_out, rng, dtype) for w_in, w_out in zip(widths, widths[1:])]

    def __call__(self, x):
        for layer in self.layers:
            x = relu(layer(x))
        return x


class CrossProjection(Module):
    """g: linear map from the key tower's width to the query tower's width, then ReLU."""

    def __init__(self, d_key, d_query, rng, dtype=DEFAULT_DTYPE):
        self.linear = Linear(d_key, d_query, rng, dtype)

    def __call__(self, x):
        return relu(self.linear(x))


class GatedCrossBlock(Module):
    """
    x <- x + tanh(alpha) * CrossAttn(norm(x), h)
    x <- x + tanh(beta) * FFN(norm(x))

    alpha and beta start at zero, so a fresh block is an exact identity.
    """

    def __init__(self, query, key, query_layer, key_layer, d_query, n_heads, d_ff, projection, rng,
                 dropout_rng, dropout=0.0, dtype=DEFAULT_DTYPE):
        self.query = Modality(query)
        self.key = Modality(key)
        self.query_layer = query_layer
        self.key_layer = key_layer
        self.key_projection = projection
        self.attn_norm = LayerNorm(d_query, dtype)
        self.attn = MultiHeadAttention(d_query, n_heads, rng, dtype)
        self.gate_attn = Parameter(np.zeros(1), dtype=dtype)
        self.ffn_norm = LayerNorm(d_query, dtype)
        self.ffn = FeedForward(d_query, d_ff, rng, dtype)
        self.gate_ffn = Parameter(np.zeros(1), dtype=dtype)
        self.dropout = Dropout(dropout, dropout_rng)

    def project(self, key_hidden):
        return self.key_projection(key_hidden)

    def __call__(self, x, projected_keys, allowed):
        attended = self.attn(self.attn_norm(x), projected_keys, allowed)
        x = add(x, multiply(tanh(self.gate_attn), self.dropout(attended)))
        return add(x, multiply(tanh(self.gate_ffn), self.dropout(self.ffn(self.ffn_norm(x)))))


@dataclass
class ZipperOutput:
    logits_a: object
    logits_b: object

    def logits(self, modality):
        return self.logits_a if Modality(modality) is Modality.A else self.logits_b


class ZipperModel(Module):

    def __init__(self, tower_a, tower_b, config, rng, dropout_rng=None):
        config_a, config_b = tower_a.config, tower_b.config
        config.validate(config_a, config_b)
        if tower_a.dtype != tower_b.dtype:
            raise ConfigError(f"towers disagree on precision: {tower_a.dtype} vs {tower_b.dtype}")
        dtype = tower_a.dtype
        self.config = config
        self.dtype = dtype
        self.dropout_rng = dropout_rng if dropout_rng is not None else tower_a.dropout_rng
        self.tower_a = tower_a
        self.tower_b = tower_b
        self.input_proj_a = InputProjection(config_a.d_model, config.proj_hidden, config.input_proj_layers, rng, dtype)
        self.input_proj_b = InputProjection(config_b.d_model, config.proj_hidden, config.input_proj_layers, rng, dtype)

        shared = {}

        def projection(d_key, d_query, direction):
            if not config.share_cross_projections:
                return CrossProjection(d_key, d_query, rng, dtype)
            if direction not in shared:
                shared[direction] = CrossProjection(d_key, d_query, rng, dtype)
            return shared[direction]

        self.a_from_b = []
        self.b_from_a = []
        for k, l in self.zipped_layer_pairs():
            g_ab = projection(config_b.d_model, config_a.d_model, "a_from_b")
            g_ba = projection(config_a.d_model, config_b.d_model, "b_from_a")
            self.a_from_b.append(GatedCrossBlock(
                Modality.A, Modality.B, k, l, config_a.d_model, config_a.n_heads, config_a.d_ff, g_ab,
                rng, self.dropout_rng, config.dropout, dtype))
            self.b_from_a.append(GatedCrossBlock(
                Modality.B, Modality.A, l, k, config_b.d_model, config_b.n_heads, config_b.d_ff, g_ba,
                rng, self.dropout_rng, config.dropout, dtype))
        self.apply_freeze()

    @classmethod
    def from_seed(cls, tower_a, tower_b, config, seed):
        return cls(tower_a, tower_b, config, substream(seed, f"{INIT}.zipper"),
                   dropout_rng=substream(seed, f"{DROPOUT}.zipper"))

    def zipped_layer_pairs(self):
        """1-indexed (layer of A, layer of B) after which each zip step happens."""
        c = self.config
        return [(n * c.i_a, n * c.i_b) for n in range(1, c.n_zips + 1)]

    def tower(self, modality):
        return self.tower_a if Modality(modality) is Modality.A else self.tower_b

    def apply_freeze(self):
        for p in self.tower_a.parameters():
            p.requires_grad = not self.config.freeze_a
        for p in self.tower_b.parameters():
            p.requires_grad = not self.config.freeze_b

    def trainable_parameters(self):
        """Named parameters the optimizer may update; frozen towers are left out."""
        frozen = set()
        if self.config.freeze_a:
            frozen.update(id(p) for p in self.tower_a.parameters())
        if self.config.freeze_b:
            frozen.update(id(p) for p in self.tower_b.parameters())
        return [(name, p) for name, p in self.named_parameters() if id(p) not in frozen]

    def _embed(self, tokens, modality):
        if not tokens:
            return None
        tower = self.tower(modality)
        x = tower.embed(tokens)
        enabled = self.config.enable_input_proj_a if modality is Modality.A else self.config.enable_input_proj_b
        if enabled:
            x = (self.input_proj_a if modality is Modality.A else self.input_proj_b)(x)
        return x

    def forward_zipped(self, seq, train_mode=False):
        """
        Logits of both towers for an interleaved sequence. A tower with no
        tokens in ``seq`` is skipped and its logits are ``None``.
        """
        self.train(train_mode)
        streams = build_streams(seq)
        for modality in Modality:
            tokens = streams.stream(modality)
            limit = self.tower(modality).config.max_seq_len
            if len(tokens) > limit:
                raise ConfigError(f"{modality.value} stream of {len(tokens)} tokens exceeds max_seq_len {limit}")

        x_a = self._embed(streams.stream_a, Modality.A)
        x_b = self._embed(streams.stream_b, Modality.B)
        self_a = build_self_mask(len(streams.stream_a)) if x_a is not None else None
        self_b = build_self_mask(len(streams.stream_b)) if x_b is not None else None
        cross_ab = build_cross_mask(streams.lin_a, streams.lin_b).allowed
        cross_ba = build_cross_mask(streams.lin_b, streams.lin_a).allowed

        layer_a = layer_b = 0
        for block_ab, block_ba in zip(self.a_from_b, self.b_from_a):
            k, l = block_ab.query_layer, block_ab.key_layer
            if x_a is not None:
                x_a = self.tower_a.run_blocks(x_a, layer_a, k, self_a)
            if x_b is not None:
                x_b = self.tower_b.run_blocks(x_b, layer_b, l, self_b)
            layer_a, layer_b = k, l
            if x_a is None or x_b is None:
                continue
            # both directions read the pre-update hidden states
            h_b = block_ab.project(x_b)
            h_a = block_ba.project(x_a)
            x_a, x_b = block_ab(x_a, h_b, cross_ab), block_ba(x_b, h_a, cross_ba)

        logits_a = logits_b = None
        if x_a is not None:
            x_a = self.tower_a.run_blocks(x_a, layer_a, self.tower_a.n_layers, self_a)
            logits_a = self.tower_a.head(x_a)
        if x_b is not None:
            x_b = self.tower_b.run_blocks(x_b, layer_b, self.tower_b.n_layers, self_b)
            logits_b = self.tower_b.head(x_b)
        return ZipperOutput(logits_a, logits_b)

    __call__ = forward_zipped


def build_zipper(config_a, config_b, zipper_config, seed, dtype=DEFAULT_DTYPE, tower_a=None, tower_b=None):
    """Fresh zipped model; pre-trained towers may be passed in place of new ones."""
    tower_a = tower_a if tower_a is not None else DecoderBackbone.from_seed(config_a, seed, dtype, name="tower_a")
    tower_b = tower_b if tower_b is not None else DecoderBackbone.from_seed(config_b, seed, dtype, name="tower_b")
    model = ZipperModel.from_seed(tower_a, tower_b, zipper_config, seed)
    logger.info(f"Built zipper with layer pairs {model.zipped_layer_pairs()}, "
                f"{len(model.trainable_parameters())} trainable tensors")
    return model
