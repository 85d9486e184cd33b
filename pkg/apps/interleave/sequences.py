"""
Interleaved two-modality sequences and the masks derived from them.

A sequence is an ordered list of modality-tagged segments. Flattening the
segments gives every token a global linear index; each tower sees only its own
tokens, in order, and may cross-attend to a token of the other tower only if
that token's linear index is strictly smaller.
"""
import enum
from dataclasses import dataclass, field

import numpy as np

# linear index carried by padding positions; never smaller than a real index
PAD_INDEX = np.inf


class SequenceError(ValueError):
    """Raised when a sequence or an index list breaks its construction rules."""


class Modality(str, enum.Enum):
    A = "A"
    B = "B"

    @property
    def other(self):
        return Modality.B if self is Modality.A else Modality.A


TEXT = Modality.A
SPEECH = Modality.B


@dataclass(frozen=True)
class Segment:
    modality: Modality
    tokens: tuple

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise SequenceError(f"empty {self.modality.value} segment")

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class TowerStreams:
    stream_a: tuple
    stream_b: tuple
    lin_a: tuple
    lin_b: tuple

    def stream(self, modality):
        return self.stream_a if Modality(modality) is Modality.A else self.stream_b

    def linear(self, modality):
        return self.lin_a if Modality(modality) is Modality.A else self.lin_b

    def __iter__(self):
        return iter((self.stream_a, self.stream_b, self.lin_a, self.lin_b))


@dataclass(frozen=True)
class InterleavedSequence:
    segments: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    @classmethod
    def of(cls, *pairs):
        """``InterleavedSequence.of(("B", [5, 6]), ("A", [7]))``."""
        return cls(tuple(Segment(Modality(m), tuple(t)) for m, t in pairs))

    def __len__(self):
        return sum(len(s) for s in self.segments)

    @property
    def last(self):
        return self.segments[-1] if self.segments else None

    def with_segment(self, modality, tokens):
        return InterleavedSequence(self.segments + (Segment(modality, tokens),))

    def extend_last(self, token):
        """Append one token to the final segment."""
        if not self.segments:
            raise SequenceError("cannot extend an empty sequence")
        last = self.segments[-1]
        return InterleavedSequence(self.segments[:-1] + (Segment(last.modality, last.tokens + (int(token),)),))

    def segment_span(self, index):
        """Half-open linear-index range covered by segment ``index``."""
        start = sum(len(s) for s in self.segments[:index])
        return start, start + len(self.segments[index])

    def streams(self):
        return build_streams(self)


def build_streams(seq):
    """
    Order-preserving partition of ``seq`` by modality. Returns the two token
    streams and, for each, the global linear index of every token.
    """
    if not seq.segments:
        raise SequenceError("a sequence needs at least one segment")
    streams = {Modality.A: [], Modality.B: []}
    linear = {Modality.A: [], Modality.B: []}
    position = 0
    for segment in seq.segments:
        if not segment.tokens:
            raise SequenceError(f"empty {segment.modality.value} segment")
        streams[segment.modality].extend(segment.tokens)
        linear[segment.modality].extend(range(position, position + len(segment)))
        position += len(segment)
    return TowerStreams(
        stream_a=tuple(streams[Modality.A]),
        stream_b=tuple(streams[Modality.B]),
        lin_a=tuple(linear[Modality.A]),
        lin_b=tuple(linear[Modality.B]),
    )


def reassemble(stream_a, stream_b, lin_a, lin_b):
    """Inverse of ``build_streams``; adjacent same-modality runs form one segment."""
    tagged = sorted(
        [(i, Modality.A, t) for i, t in zip(lin_a, stream_a)]
        + [(i, Modality.B, t) for i, t in zip(lin_b, stream_b)]
    )
    segments = []
    for _, modality, token in tagged:
        if segments and segments[-1][0] is modality:
            segments[-1][1].append(token)
        else:
            segments.append((modality, [token]))
    return InterleavedSequence(tuple(Segment(m, tuple(t)) for m, t in segments))


@dataclass(frozen=True)
class CrossMask:
    allowed: np.ndarray

    @property
    def shape(self):
        return self.allowed.shape


def _check_increasing(indices, name):
    indices = np.asarray(indices, dtype=np.float64).reshape(-1)
    finite = np.isfinite(indices)
    n_real = int(finite.sum())
    if not finite[:n_real].all():
        raise SequenceError(f"{name} has padding before real positions")
    if np.any(np.diff(indices[:n_real]) <= 0):
        raise SequenceError(f"{name} linear indices must be strictly increasing")
    return indices


def build_cross_mask(lin_query, lin_key):
    """allowed[q][k] is true exactly when key k precedes query q in linear order."""
    q = _check_increasing(lin_query, "query")
    k = _check_increasing(lin_key, "key")
    allowed = k[None, :] < q[:, None]
    # padded queries see nothing
    allowed &= np.isfinite(q)[:, None]
    return CrossMask(allowed)


def build_self_mask(length):
    """Causal mask: position i sees positions j <= i."""
    if length < 1:
        raise SequenceError(f"self mask needs at least one position, got {length}")
    return np.tril(np.ones((length, length), dtype=bool))


def flatten(seq, offset_b):
    """
    Single-stream view used by the vocabulary-expanded decoder: tokens of
    modality A keep their ids, tokens of modality B are shifted by ``offset_b``.
    """
    flat = []
    for segment in seq.segments:
        shift = offset_b if segment.modality is Modality.B else 0
        flat.extend(t + shift for t in segment.tokens)
    return flat
