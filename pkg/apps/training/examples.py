import enum
import logging

import numpy as np

from apps.interleave.sequences import InterleavedSequence, Modality, Segment
from apps.numeric.seeding import BATCHES, substream
from apps.synthdata.tokenizers import TextTokenizer

logger = logging.getLogger(__name__)

_tokenizer = TextTokenizer()


class Task(str, enum.Enum):
    ASR = "asr"
    TTS = "tts"

    @property
    def target(self):
        return Modality.A if self is Task.ASR else Modality.B


def make_example(pair, task):
    """
    ASR: [speech BOA..EOA][text BOS..EOS]
    TTS: [text BOS..EOS][speech BOA..EOA]
    """
    text = Segment(Modality.A, _tokenizer.encode(pair.text))
    speech = Segment(Modality.B, pair.speech_tokens)
    if Task(task) is Task.ASR:
        return InterleavedSequence((speech, text))
    return InterleavedSequence((text, speech))


def prompt_for(pair, task):
    """Prompt side of an example: the source segment only."""
    if Task(task) is Task.ASR:
        return InterleavedSequence((Segment(Modality.B, pair.speech_tokens),))
    return InterleavedSequence((Segment(Modality.A, _tokenizer.encode(pair.text)),))


class ExampleSampler:
    """
    Seeded stream of mixed ASR/TTS examples. ``task_mix`` is the (ASR, TTS)
    ratio; the realised batch order depends on nothing but the seed and the
    number of batches drawn so far.
    """

    def __init__(self, pairs, task_mix=(1.0, 1.0), seed=0):
        if not pairs:
            raise ValueError("sampler needs at least one pair")
        asr, tts = task_mix
        if asr < 0 or tts < 0 or asr + tts <= 0:
            raise ValueError(f"invalid task mix {task_mix}")
        self.pairs = list(pairs)
        self.asr_probability = asr / (asr + tts)
        self.rng = substream(seed, BATCHES)

    def sample_tasks(self, n):
        return [Task.ASR if u < self.asr_probability else Task.TTS for u in self.rng.random(n)]

    def next_batch(self, batch_size):
        indices = self.rng.integers(0, len(self.pairs), size=batch_size)
        tasks = self.sample_tasks(batch_size)
        return [make_example(self.pairs[i], task) for i, task in zip(indices, tasks)]

    def state(self):
        return self.rng.bit_generator.state

    def set_state(self, state):
        self.rng.bit_generator.state = state


def asr_fraction(tasks):
    tasks = list(tasks)
    return float(np.mean([t is Task.ASR for t in tasks])) if tasks else 0.0
