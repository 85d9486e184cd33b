"""
Next-token losses for the zipped model and for the single-stream baseline.

Each tower predicts the next token of its own stream. With the
``target_segment_only`` scope a position only counts when the token it
predicts belongs to the final segment of the sequence.
"""
import numpy as np

from apps.interleave.sequences import Modality, build_streams, flatten
from apps.numeric.tensor import add, cross_entropy, multiply
from apps.synthdata.tokenizers import TEXT_VOCAB_SIZE

ALL_TOKENS = "all_tokens"
TARGET_SEGMENT_ONLY = "target_segment_only"
LOSS_SCOPES = (ALL_TOKENS, TARGET_SEGMENT_ONLY)


def next_token_targets(tokens, linear, scope, target_span):
    tokens = np.asarray(tokens, dtype=np.int64)
    targets = np.append(tokens[1:], 0)
    ignore = np.zeros(len(tokens), dtype=bool)
    ignore[-1] = True
    if scope == TARGET_SEGMENT_ONLY:
        start, stop = target_span
        following = np.asarray(linear[1:])
        ignore[:-1] |= ~((following >= start) & (following < stop))
    return targets, ignore


def mean_of(terms):
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return multiply(total, 1.0 / len(terms))


class ZipperObjective:

    def __init__(self, model):
        self.model = model

    def parameters(self):
        return self.model.trainable_parameters()

    def loss(self, seq, scope=ALL_TOKENS, train_mode=True):
        """Mean over towers of each tower's cross-entropy; None when nothing is scored."""
        output = self.model.forward_zipped(seq, train_mode=train_mode)
        streams = build_streams(seq)
        span = seq.segment_span(len(seq.segments) - 1)
        terms = []
        for modality in Modality:
            logits = output.logits(modality)
            tokens = streams.stream(modality)
            if logits is None or len(tokens) < 2:
                continue
            targets, ignore = next_token_targets(tokens, streams.linear(modality), scope, span)
            if ignore.all():
                continue
            terms.append(cross_entropy(logits, targets, ignore))
        return mean_of(terms) if terms else None


class SingleDecoderObjective:
    """Baseline: one tower over the flattened sequence, speech ids shifted past the text ids."""

    def __init__(self, model, speech_offset=TEXT_VOCAB_SIZE):
        self.model = model
        self.speech_offset = speech_offset

    def parameters(self):
        return [(name, p) for name, p in self.model.named_parameters() if p.requires_grad]

    def loss(self, seq, scope=ALL_TOKENS, train_mode=True):
        self.model.train(train_mode)
        flat = flatten(seq, self.speech_offset)
        if len(flat) < 2:
            return None
        logits, _ = self.model(flat)
        span = seq.segment_span(len(seq.segments) - 1)
        targets, ignore = next_token_targets(flat, range(len(flat)), scope, span)
        if ignore.all():
            return None
        return cross_entropy(logits, targets, ignore)
