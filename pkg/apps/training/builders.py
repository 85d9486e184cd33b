"""Model kinds compared by the experiments, and the objective each one trains with."""
import logging
from dataclasses import replace

from apps.backbone.towers import ConfigError, DecoderBackbone, expand_vocabulary, with_max_seq_len
from apps.fusion.zipper import ZipperModel, build_zipper
from apps.interleave.sequences import Modality
from apps.numeric.seeding import INIT, substream
from apps.numeric.tensor import DEFAULT_DTYPE
from apps.synthdata.tokenizers import SPEECH_VOCAB_SIZE, TEXT_VOCAB_SIZE

from .objectives import SingleDecoderObjective, ZipperObjective

logger = logging.getLogger(__name__)

ZIPPER = "zipper"
ZIPPER_FROZEN_BOTH = "zipper_frozen_both"
ZIPPER_UNFROZEN = "zipper_unfrozen"
SINGLE_DECODER = "single_decoder"

# (freeze_a, freeze_b); None keeps the configured flags
ZIPPER_FREEZE = {
    ZIPPER: None,
    ZIPPER_FROZEN_BOTH: (True, True),
    ZIPPER_UNFROZEN: (False, False),
}
MODEL_KINDS = tuple(ZIPPER_FREEZE) + (SINGLE_DECODER,)

BASELINE_DROPOUT = 0.1


def load_tower(config, seed, name, state=None, dtype=DEFAULT_DTYPE):
    tower = DecoderBackbone.from_seed(config, seed, dtype, name=name)
    if state is not None:
        tower.load_state_dict(state)
    return tower


def build_single_decoder(config_a, config_b, seed, text_state=None, dropout=BASELINE_DROPOUT, dtype=DEFAULT_DTYPE):
    """
    Text tower with the speech ids appended to its vocabulary and a positional
    table long enough for a whole flattened example.
    """
    if config_a.vocab_size != TEXT_VOCAB_SIZE:
        raise ConfigError(f"single decoder expects a text tower of {TEXT_VOCAB_SIZE} ids, got {config_a.vocab_size}")
    tower = load_tower(replace(config_a, dropout=dropout), seed, "tower_a", text_state, dtype)
    rng = substream(seed, f"{INIT}.expand")
    model = expand_vocabulary(tower, SPEECH_VOCAB_SIZE, rng)
    return with_max_seq_len(model, config_a.max_seq_len + config_b.max_seq_len, rng)


def build_model(kind, config_a, config_b, zipper_config, seed, towers=None, dtype=DEFAULT_DTYPE,
                baseline_dropout=BASELINE_DROPOUT):
    """
    ``towers`` optionally maps a modality to pre-trained tower weights; every
    call builds fresh modules so cells never share state.
    """
    towers = towers or {}
    if kind == SINGLE_DECODER:
        return build_single_decoder(config_a, config_b, seed, towers.get(Modality.A), baseline_dropout, dtype)
    if kind not in ZIPPER_FREEZE:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    if ZIPPER_FREEZE[kind] is not None:
        freeze_a, freeze_b = ZIPPER_FREEZE[kind]
        zipper_config = replace(zipper_config, freeze_a=freeze_a, freeze_b=freeze_b)
    tower_a = load_tower(config_a, seed, "tower_a", towers.get(Modality.A), dtype)
    tower_b = load_tower(config_b, seed, "tower_b", towers.get(Modality.B), dtype)
    return build_zipper(config_a, config_b, zipper_config, seed, dtype, tower_a=tower_a, tower_b=tower_b)


def make_objective(model):
    if isinstance(model, ZipperModel):
        return ZipperObjective(model)
    return SingleDecoderObjective(model)
