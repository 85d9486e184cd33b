import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from .corpus import export_corpus, import_corpus, make_corpus, subsample, with_fraction
from .tokenizers import (
    ALPHABET,
    SPEECH_BOA,
    SPEECH_EOA,
    TEXT_BOS,
    TEXT_EOS,
    TEXT_VOCAB_SIZE,
    AlphabetError,
    SpeechCodebook,
    TextTokenizer,
    decode_speech,
    encode_speech,
)


def random_text(rng, max_len=30):
    return "".join(rng.choice(list(ALPHABET), size=rng.integers(0, max_len + 1)))


### TOKENIZER TESTS

class TextTokenizerTest(SimpleTestCase):
    def setUp(self):
        self.tokenizer = TextTokenizer()

    def test_vocabulary_layout(self):
        self.assertEqual(TEXT_VOCAB_SIZE, 31)
        self.assertEqual(self.tokenizer.encode("ab"), [TEXT_BOS, 5, 6, TEXT_EOS])
        self.assertEqual(self.tokenizer.encode(" "), [TEXT_BOS, 4, TEXT_EOS])

    def test_decode_stops_at_eos(self):
        self.assertEqual(self.tokenizer.decode([TEXT_BOS, 5, TEXT_EOS, 6]), "a")

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            text = random_text(rng)
            self.assertEqual(self.tokenizer.decode(self.tokenizer.encode(text)), text)

    def test_foreign_characters_are_rejected(self):
        with self.assertRaises(AlphabetError):
            self.tokenizer.encode("Hello")


class SpeechCodebookTest(SimpleTestCase):
    def test_empty_text(self):
        self.assertEqual(encode_speech(""), [SPEECH_BOA, SPEECH_EOA])

    def test_length_law(self):
        rng = np.random.default_rng(1)
        for codes_per_char in (1, 2, 3):
            codebook = SpeechCodebook(seed=0, codes_per_char=codes_per_char)
            for _ in range(50):
                text = random_text(rng)
                self.assertEqual(len(codebook.encode(text)), 2 + codes_per_char * len(text))

    def test_codes_are_distinct(self):
        codebook = SpeechCodebook(seed=5)
        self.assertEqual(len({codebook.code(c) for c in ALPHABET}), len(ALPHABET))

    def test_clean_round_trip(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            text = random_text(rng)
            self.assertEqual(decode_speech(encode_speech(text)), text)

    def test_codebook_depends_on_seed(self):
        self.assertNotEqual(SpeechCodebook(seed=0).code("a"), SpeechCodebook(seed=1).code("a"))

    def test_noise_is_seeded(self):
        text = "the quick brown fox"
        first = encode_speech(text, noise=0.3, seed=4)
        self.assertEqual(first, encode_speech(text, noise=0.3, seed=4))
        self.assertNotEqual(first, encode_speech(text))
        self.assertEqual(len(first), 2 + 2 * len(text))

    def test_nearest_codeword_decoding(self):
        codebook = SpeechCodebook(seed=0)
        firsts = codebook.codes[:, 0].tolist()
        char = next(c for i, c in enumerate(ALPHABET) if firsts.count(firsts[i]) == 1)
        unused = next(v for v in range(1024) if v not in codebook.codes[:, 1])
        corrupted = [SPEECH_BOA, codebook.code(char)[0], unused, SPEECH_EOA]
        self.assertEqual(codebook.decode(corrupted), char)

    def test_decode_never_raises(self):
        self.assertEqual(decode_speech([SPEECH_BOA, SPEECH_EOA]), "")
        self.assertEqual(len(decode_speech([7])), 1)


### CORPUS TESTS

SMALL = dict(n_unpaired=20, n_unpaired_text=10, n_heldout=10, noise=0.3)


class CorpusTest(SimpleTestCase):
    def setUp(self):
        self.corpus = make_corpus(seed=0, n_pairs=100, fraction=1.0, **SMALL)

    def test_split_sizes(self):
        self.assertEqual(len(self.corpus.paired), 100)
        self.assertEqual(len(self.corpus.heldout_clean), 10)
        self.assertEqual(len(self.corpus.heldout_other), 10)
        self.assertEqual(len(self.corpus.unpaired_speech), 20)
        self.assertEqual(len(self.corpus.unpaired_text), 10)

    def test_same_seed_same_corpus(self):
        again = make_corpus(seed=0, n_pairs=100, fraction=1.0, **SMALL)
        self.assertEqual(again.paired, self.corpus.paired)
        self.assertEqual(again.heldout_other, self.corpus.heldout_other)

    def test_different_seed_differs(self):
        other = make_corpus(seed=1, n_pairs=100, fraction=1.0, **SMALL)
        self.assertNotEqual([p.text for p in other.paired], [p.text for p in self.corpus.paired])

    def test_splits_are_disjoint(self):
        texts = [p.text for p in self.corpus.records()]
        self.assertEqual(len(texts), len(set(texts)))

    def test_sentences_fit_alphabet(self):
        for pair in self.corpus.records():
            self.assertTrue(set(pair.text) <= set(ALPHABET))
            self.assertLessEqual(len(pair.text), 40)

    def test_clean_pairs_decode(self):
        for pair in self.corpus.paired + self.corpus.heldout_clean:
            self.assertEqual(decode_speech(pair.speech_tokens), pair.text)

    def test_other_split_is_noisy(self):
        exact = sum(decode_speech(p.speech_tokens) == p.text for p in self.corpus.heldout_other)
        self.assertLess(exact, len(self.corpus.heldout_other))

    def test_fractions_are_nested(self):
        tenth = with_fraction(self.corpus, 0.1)
        third = with_fraction(self.corpus, 0.3)
        self.assertEqual(len(tenth.paired), 10)
        self.assertEqual(len(third.paired), 30)
        self.assertTrue({p.id for p in tenth.paired} <= {p.id for p in third.paired})
        self.assertEqual(tenth.heldout_clean, self.corpus.heldout_clean)

    def test_without_unpaired_splits(self):
        lean = with_fraction(self.corpus, 1.0, unpaired=False)
        self.assertEqual(lean.unpaired_speech, [])
        self.assertEqual(lean.unpaired_text, [])
        self.assertEqual(lean.paired, self.corpus.paired)
        self.assertEqual(lean.heldout_other, self.corpus.heldout_other)

    def test_configured_codebook_encodes_the_corpus(self):
        corpus = make_corpus(seed=0, n_pairs=5, fraction=1.0, n_unpaired=0, n_unpaired_text=0, n_heldout=2,
                             codebook_seed=4, codes_per_char=3)
        self.assertEqual(corpus.codebook.codes_per_char, 3)
        for pair in corpus.paired:
            self.assertEqual(len(pair.speech_tokens), 2 + 3 * len(pair.text))
            self.assertEqual(corpus.codebook.decode(pair.speech_tokens), pair.text)

    def test_empty_subset_is_rejected(self):
        with self.assertRaises(ValueError):
            subsample(self.corpus.paired, 0.001, seed=0)

    def test_export_then_import(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = export_corpus(self.corpus, Path(tmp) / "corpus.jsonl")
            loaded = import_corpus(path, self.corpus.settings)
        self.assertEqual(loaded.paired, self.corpus.paired)
        self.assertEqual(loaded.unpaired_text, self.corpus.unpaired_text)

    def test_import_rejects_bad_records(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bad.jsonl"
            path.write_text('{"id": "x", "text": "a", "speech_tokens": [1], "split": "nowhere"}\n')
            with self.assertRaises(ValueError):
                import_corpus(path)
