import io
import logging
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from faker import Faker
from rest_framework.parsers import JSONParser
from rest_framework.renderers import JSONRenderer

from apps.numeric.seeding import CORPUS, substream

from .serializers import CorpusRecordSerializer
from .tokenizers import get_codebook

logger = logging.getLogger(__name__)

WORD = re.compile(r"^[a-z]+$")


@dataclass(frozen=True)
class CorpusSettings:
    seed: int = 0
    n_pairs: int = 10000
    fraction: float = 1.0
    n_unpaired: int = 50000
    n_unpaired_text: int = 10000
    n_heldout: int = 200
    noise: float = 0.05
    min_words: int = 2
    max_words: int = 6
    max_chars: int = 40
    codebook_seed: int = 0
    codes_per_char: int = 2

    def to_dict(self):
        return asdict(self)

    @property
    def codebook(self):
        return get_codebook(self.codebook_seed, self.codes_per_char)


@dataclass(frozen=True)
class Pair:
    id: str
    text: str
    speech_tokens: tuple
    split: str


@dataclass
class SyntheticCorpus:
    settings: CorpusSettings
    paired: list = field(default_factory=list)
    unpaired_speech: list = field(default_factory=list)
    unpaired_text: list = field(default_factory=list)
    heldout_clean: list = field(default_factory=list)
    heldout_other: list = field(default_factory=list)

    @property
    def codebook(self):
        return self.settings.codebook

    def splits(self):
        return {
            "paired": self.paired,
            "unpaired_speech": self.unpaired_speech,
            "unpaired_text": self.unpaired_text,
            "heldout_clean": self.heldout_clean,
            "heldout_other": self.heldout_other,
        }

    def records(self):
        for pairs in self.splits().values():
            yield from pairs


class SentenceSource:
    """Unique seeded sentences drawn from Faker's lorem word list."""

    def __init__(self, seed, min_words, max_words, max_chars):
        self.fake = Faker()
        self.fake.seed_instance(seed)
        self.min_words = min_words
        self.max_words = max_words
        self.max_chars = max_chars
        self.seen = set()

    def take(self, count):
        sentences = []
        attempts = 0
        while len(sentences) < count:
            attempts += 1
            if attempts > 50 * count + 1000:
                raise ValueError(f"could not draw {count} distinct sentences from the word list")
            n_words = self.fake.random_int(self.min_words, self.max_words)
            words = [w.lower() for w in self.fake.words(nb=n_words) if WORD.match(w.lower())]
            sentence = " ".join(words)
            if not words or len(sentence) > self.max_chars or sentence in self.seen:
                continue
            self.seen.add(sentence)
            sentences.append(sentence)
        return sentences


def _pairs(sentences, split, codebook, noise, rng):
    return [
        Pair(
            id=f"{split}-{index:06d}",
            text=text,
            speech_tokens=tuple(codebook.encode(text, noise, rng)),
            split=split,
        )
        for index, text in enumerate(sentences)
    ]


def subsample(pairs, fraction, seed):
    """
    Seeded subset of ``round(fraction * len(pairs))`` pairs. A smaller fraction
    always yields a subset of a larger one under the same seed.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    size = round(fraction * len(pairs))
    if size == 0:
        raise ValueError(f"fraction {fraction} of {len(pairs)} pairs leaves no examples")
    order = substream(seed, "subsample").permutation(len(pairs))
    keep = sorted(order[:size].tolist())
    return [pairs[i] for i in keep]


def build_corpus(settings, unpaired=True):
    """
    Build every split from ``settings``. With ``unpaired=False`` the unpaired
    splits are left empty; the paired and held-out splits are unchanged since
    they are drawn first.
    """
    source = SentenceSource(settings.seed, settings.min_words, settings.max_words, settings.max_chars)
    codebook = settings.codebook
    clean = substream(settings.seed, CORPUS, 0)
    noisy = substream(settings.seed, CORPUS, 1)
    # draw order fixes which sentences land in which split
    paired = _pairs(source.take(settings.n_pairs), "paired", codebook, 0.0, clean)
    heldout_clean = _pairs(source.take(settings.n_heldout), "heldout_clean", codebook, 0.0, clean)
    heldout_other = _pairs(source.take(settings.n_heldout), "heldout_other", codebook, settings.noise, noisy)
    unpaired_speech, unpaired_text = [], []
    if unpaired:
        unpaired_speech = _pairs(source.take(settings.n_unpaired), "unpaired_speech", codebook, 0.0, clean)
        unpaired_text = _pairs(source.take(settings.n_unpaired_text), "unpaired_text", codebook, 0.0, clean)
    corpus = SyntheticCorpus(
        settings=settings,
        paired=subsample(paired, settings.fraction, settings.seed),
        unpaired_speech=unpaired_speech,
        unpaired_text=unpaired_text,
        heldout_clean=heldout_clean,
        heldout_other=heldout_other,
    )
    logger.info(
        f"Built corpus seed={settings.seed}: {len(corpus.paired)} of {settings.n_pairs} pairs, "
        f"{len(unpaired_speech)} unpaired speech, {len(unpaired_text)} unpaired text"
    )
    return corpus


def make_corpus(seed, n_pairs, fraction, **overrides):
    """Deterministic corpus; ``overrides`` are further ``CorpusSettings`` fields."""
    return build_corpus(CorpusSettings(seed=seed, n_pairs=n_pairs, fraction=fraction, **overrides))


def with_fraction(corpus, fraction, unpaired=True):
    """Same corpus with the paired split re-subsampled from the full paired set."""
    return build_corpus(replace(corpus.settings, fraction=fraction), unpaired)


### EXPORT / IMPORT

def export_corpus(corpus, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    renderer = JSONRenderer()
    with path.open("wb") as fh:
        for pair in corpus.records():
            data = CorpusRecordSerializer(
                {"id": pair.id, "text": pair.text, "speech_tokens": list(pair.speech_tokens), "split": pair.split}
            ).data
            fh.write(renderer.render(data) + b"\n")
    return path


def import_records(path):
    parser = JSONParser()
    pairs = []
    with Path(path).open("rb") as fh:
        for number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            serializer = CorpusRecordSerializer(data=parser.parse(io.BytesIO(line)))
            if not serializer.is_valid():
                raise ValueError(f"invalid corpus record on line {number}: {serializer.errors}")
            record = serializer.validated_data
            pairs.append(Pair(record["id"], record["text"], tuple(record["speech_tokens"]), record["split"]))
    return pairs


def import_corpus(path, settings=None):
    corpus = SyntheticCorpus(settings=settings or CorpusSettings())
    splits = corpus.splits()
    for pair in import_records(path):
        splits[pair.split].append(pair)
    return corpus
