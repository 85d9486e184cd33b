"""
Autoregressive decoding over a plan of output modalities.

Each planned modality opens a new segment with its start token and is decoded
token by token in its own tower until the end token or the segment budget.
Every step recomputes the full forward; there is no key/value cache.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from apps.interleave.sequences import InterleavedSequence, Modality, flatten
from apps.numeric.seeding import SAMPLING, substream
from apps.numeric.tensor import no_grad
from apps.synthdata.tokenizers import (
    SPEECH_BOA,
    SPEECH_EOA,
    SPEECH_VOCAB_SIZE,
    TEXT_BOS,
    TEXT_EOS,
    TEXT_VOCAB_SIZE,
    TextTokenizer,
    decode_speech,
)

logger = logging.getLogger(__name__)

GREEDY = "greedy"
TEMPERATURE = "temperature"

START_TOKEN = {Modality.A: TEXT_BOS, Modality.B: SPEECH_BOA}
END_TOKEN = {Modality.A: TEXT_EOS, Modality.B: SPEECH_EOA}
VOCAB_SIZE = {Modality.A: TEXT_VOCAB_SIZE, Modality.B: SPEECH_VOCAB_SIZE}


@dataclass(frozen=True)
class DecodePlan:
    modalities: tuple
    max_tokens: int = 128
    sampling: str = GREEDY
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(Modality(m) for m in self.modalities))
        if not self.modalities:
            raise ValueError("a decode plan needs at least one modality")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be at least 1, got {self.max_tokens}")
        if self.sampling not in (GREEDY, TEMPERATURE):
            raise ValueError(f"unknown sampling {self.sampling!r}")
        if self.sampling == TEMPERATURE and not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    @classmethod
    def parse(cls, text, **kwargs):
        """``"text,speech"`` -> plan over [A, B]."""
        names = {"text": Modality.A, "a": Modality.A, "speech": Modality.B, "b": Modality.B}
        try:
            modalities = [names[part.strip().lower()] for part in text.split(",") if part.strip()]
        except KeyError as e:
            raise ValueError(f"unknown modality {e.args[0]!r} in plan {text!r}") from None
        return cls(tuple(modalities), **kwargs)


@dataclass
class GenerationResult:
    sequence: InterleavedSequence
    generated: list = field(default_factory=list)
    truncated: list = field(default_factory=list)

    @property
    def any_truncated(self):
        return any(self.truncated)

    def segment(self, index=-1):
        return self.generated[index]

    def decoded(self, index=-1, codebook=None):
        """Generated segment ``index`` as a string (speech via the inverse of ``codebook``)."""
        modality, tokens = self.generated[index]
        if modality is Modality.A:
            return TextTokenizer().decode(tokens)
        return decode_speech(tokens, codebook)


class TokenChooser:

    def __init__(self, plan):
        self.plan = plan
        self.rng = substream(plan.seed, SAMPLING)

    def __call__(self, logits):
        logits = np.asarray(logits, dtype=np.float64)
        if self.plan.sampling == GREEDY:
            # argmax returns the first maximum: ties go to the lowest id
            return int(np.argmax(logits))
        scaled = logits / self.plan.temperature
        probs = np.exp(scaled - scaled.max())
        probs /= probs.sum()
        return int(self.rng.choice(len(probs), p=probs))


def _segment_budget(seq, modality, plan, limit):
    used = sum(len(s) for s in seq.segments if s.modality is modality)
    # start token plus generated tokens must fit the tower
    return min(plan.max_tokens, limit - used - 1)


def generate(model, prompt, plan):
    """
    Extend ``prompt`` with one generated segment per planned modality. A
    segment stopped by its budget rather than its end token is flagged in
    ``truncated``.
    """
    choose = TokenChooser(plan)
    seq = prompt
    result = GenerationResult(prompt)
    model.eval()
    with no_grad():
        for modality in plan.modalities:
            budget = _segment_budget(seq, modality, plan, model.tower(modality).config.max_seq_len)
            if budget < 1:
                logger.warning(f"no room left in tower {modality.value} for a new segment")
                result.generated.append((modality, []))
                result.truncated.append(True)
                continue
            seq = seq.with_segment(modality, [START_TOKEN[modality]])
            finished = False
            for _ in range(budget):
                logits = model.forward_zipped(seq).logits(modality)
                token = choose(logits.data[-1])
                seq = seq.extend_last(token)
                if token == END_TOKEN[modality]:
                    finished = True
                    break
            result.generated.append((modality, list(seq.last.tokens)))
            result.truncated.append(not finished)
    result.sequence = seq
    return result


def generate_baseline(model, prompt, plan, speech_offset=TEXT_VOCAB_SIZE):
    """
    Same protocol on the single flattened stream of a vocabulary-expanded
    decoder. The choice at every step is restricted to the current
    modality's id range.
    """
    choose = TokenChooser(plan)
    seq = prompt
    result = GenerationResult(prompt)
    limit = model.config.max_seq_len
    model.eval()
    with no_grad():
        for modality in plan.modalities:
            offset = speech_offset if modality is Modality.B else 0
            low, high = offset, offset + VOCAB_SIZE[modality]
            budget = min(plan.max_tokens, limit - len(seq) - 1)
            if budget < 1:
                logger.warning("no room left in the single stream for a new segment")
                result.generated.append((modality, []))
                result.truncated.append(True)
                continue
            seq = seq.with_segment(modality, [START_TOKEN[modality]])
            finished = False
            for _ in range(budget):
                logits, _ = model(flatten(seq, speech_offset))
                token = low + choose(logits.data[-1, low:high])
                seq = seq.extend_last(token - offset)
                if token - offset == END_TOKEN[modality]:
                    finished = True
                    break
            result.generated.append((modality, list(seq.last.tokens)))
            result.truncated.append(not finished)
    result.sequence = seq
    return result
