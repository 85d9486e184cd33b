"""
Character text tokenizer and the synthetic speech codebook.

Speech is modelled as a seeded, injective character -> code map: every
character becomes ``codes_per_char`` tokens from a 1024-entry codebook. All
codes have the same length, so the code set is prefix-free and decoding is an
exact inverse on clean streams.
"""
import functools
import logging

import numpy as np

from apps.numeric.seeding import substream

logger = logging.getLogger(__name__)

ALPHABET = " abcdefghijklmnopqrstuvwxyz"

TEXT_PAD = 0
TEXT_BOS = 1
TEXT_EOS = 2
TEXT_UNK = 3
TEXT_OFFSET = 4
TEXT_VOCAB_SIZE = TEXT_OFFSET + len(ALPHABET)

CODEBOOK_SIZE = 1024
SPEECH_BOA = CODEBOOK_SIZE
SPEECH_EOA = CODEBOOK_SIZE + 1
SPEECH_VOCAB_SIZE = CODEBOOK_SIZE + 2


class AlphabetError(ValueError):
    """Raised for characters outside the tokenizer alphabet."""


def check_alphabet(text):
    bad = sorted(set(text) - set(ALPHABET))
    if bad:
        raise AlphabetError(f"characters outside the alphabet: {bad}")


class TextTokenizer:
    pad_id = TEXT_PAD
    bos_id = TEXT_BOS
    eos_id = TEXT_EOS
    vocab_size = TEXT_VOCAB_SIZE

    def encode(self, text, add_specials=True):
        check_alphabet(text)
        ids = [TEXT_OFFSET + ALPHABET.index(c) for c in text]
        return [TEXT_BOS] + ids + [TEXT_EOS] if add_specials else ids

    def decode(self, ids):
        """Drop specials and stop at the first EOS."""
        chars = []
        for i in ids:
            i = int(i)
            if i == TEXT_EOS:
                break
            if TEXT_OFFSET <= i < TEXT_VOCAB_SIZE:
                chars.append(ALPHABET[i - TEXT_OFFSET])
        return "".join(chars)


class SpeechCodebook:

    def __init__(self, seed=0, codes_per_char=2):
        if codes_per_char < 1:
            raise ValueError("codes_per_char must be at least 1")
        self.seed = seed
        self.codes_per_char = codes_per_char
        rng = substream(seed, "codebook", codes_per_char)
        flat = rng.choice(CODEBOOK_SIZE ** codes_per_char, size=len(ALPHABET), replace=False)
        digits = [(flat // CODEBOOK_SIZE ** p) % CODEBOOK_SIZE for p in reversed(range(codes_per_char))]
        # row i is the code of ALPHABET[i]
        self.codes = np.stack(digits, axis=1).astype(np.int64)
        self.bos_id = SPEECH_BOA
        self.eos_id = SPEECH_EOA
        self.vocab_size = SPEECH_VOCAB_SIZE

    def code(self, char):
        return tuple(int(t) for t in self.codes[ALPHABET.index(char)])

    def encode(self, text, noise=0.0, rng=None):
        check_alphabet(text)
        if not 0 <= noise <= 1:
            raise ValueError(f"noise must be a probability, got {noise}")
        body = self.codes[[ALPHABET.index(c) for c in text]].reshape(-1) if text else np.zeros(0, np.int64)
        if noise > 0 and body.size:
            rng = rng if rng is not None else np.random.default_rng(0)
            flip = rng.random(body.size) < noise
            body = np.where(flip, rng.integers(0, CODEBOOK_SIZE, size=body.size), body)
        return [SPEECH_BOA] + [int(t) for t in body] + [SPEECH_EOA]

    def decode(self, tokens):
        """
        Best-effort inverse: drops specials, then maps each chunk of
        ``codes_per_char`` tokens to the codeword at the smallest Hamming
        distance (ties go to the earliest character). Never raises.
        """
        content = [int(t) for t in tokens if 0 <= int(t) < CODEBOOK_SIZE]
        c = self.codes_per_char
        chars = []
        for start in range(0, len(content), c):
            chunk = np.asarray(content[start:start + c])
            distances = (self.codes[:, : len(chunk)] != chunk).sum(axis=1)
            chars.append(ALPHABET[int(np.argmin(distances))])
        return "".join(chars)


@functools.lru_cache(maxsize=8)
def get_codebook(seed=0, codes_per_char=2):
    return SpeechCodebook(seed, codes_per_char)


def encode_speech(text, noise=0.0, seed=0, codebook=None):
    """BOA + per-character codes (each token resampled with probability ``noise``) + EOA."""
    codebook = codebook if codebook is not None else get_codebook()
    return codebook.encode(text, noise, substream(seed, "speech_noise"))


def decode_speech(tokens, codebook=None):
    codebook = codebook if codebook is not None else get_codebook()
    return codebook.decode(tokens)
