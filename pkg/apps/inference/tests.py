from types import SimpleNamespace

import numpy as np
from django.test import SimpleTestCase

from apps.backbone.towers import BackboneConfig, DecoderBackbone, expand_vocabulary
from apps.fusion.zipper import ZipperConfig, ZipperOutput, build_zipper
from apps.interleave.sequences import InterleavedSequence, Modality
from apps.numeric.tensor import Tensor
from apps.synthdata.tokenizers import (
    SPEECH_BOA,
    SPEECH_VOCAB_SIZE,
    TEXT_BOS,
    TEXT_EOS,
    TEXT_VOCAB_SIZE,
    SpeechCodebook,
    encode_speech,
)

from .generation import TEMPERATURE, DecodePlan, GenerationResult, generate, generate_baseline

TEXT = BackboneConfig(vocab_size=TEXT_VOCAB_SIZE, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=48)
SPEECH = BackboneConfig(vocab_size=SPEECH_VOCAB_SIZE, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=48)


def speech_prompt(text):
    return InterleavedSequence.of(("B", encode_speech(text)))


class FixedLogitsModel:
    """Zipped-model stand-in whose text tower always scores ``row``."""

    def __init__(self, row):
        self.row = np.asarray(row, dtype=np.float32)
        self.calls = 0

    def tower(self, modality):
        return SimpleNamespace(config=SimpleNamespace(max_seq_len=64))

    def eval(self):
        return self

    def forward_zipped(self, seq):
        self.calls += 1
        n_text = sum(len(s) for s in seq.segments if s.modality is Modality.A)
        return ZipperOutput(Tensor(np.tile(self.row, (n_text, 1))), None)


### PLAN TESTS

class DecodePlanTest(SimpleTestCase):
    def test_parse(self):
        self.assertEqual(DecodePlan.parse("text, speech").modalities, (Modality.A, Modality.B))

    def test_unknown_modality(self):
        with self.assertRaises(ValueError):
            DecodePlan.parse("video")

    def test_empty_plan(self):
        with self.assertRaises(ValueError):
            DecodePlan(())

    def test_zero_budget(self):
        with self.assertRaises(ValueError):
            DecodePlan((Modality.A,), max_tokens=0)


### ZIPPED GENERATION TESTS

class GenerateTest(SimpleTestCase):
    def setUp(self):
        self.model = build_zipper(TEXT, SPEECH, ZipperConfig(n_zips=2, proj_hidden=8, input_proj_layers=2), seed=0)

    def test_greedy_ties_go_to_lowest_id(self):
        row = np.zeros(TEXT_VOCAB_SIZE)
        row[[7, 9]] = 5.0
        result = generate(FixedLogitsModel(row), InterleavedSequence(), DecodePlan((Modality.A,), max_tokens=3))
        self.assertEqual(result.segment(), (Modality.A, [TEXT_BOS, 7, 7, 7]))
        self.assertEqual(result.truncated, [True])

    def test_end_token_stops_segment(self):
        row = np.zeros(TEXT_VOCAB_SIZE)
        row[TEXT_EOS] = 5.0
        model = FixedLogitsModel(row)
        result = generate(model, InterleavedSequence(), DecodePlan((Modality.A,), max_tokens=10))
        self.assertEqual(result.segment(), (Modality.A, [TEXT_BOS, TEXT_EOS]))
        self.assertEqual(result.truncated, [False])
        self.assertEqual(model.calls, 1)

    def test_single_token_budget(self):
        result = generate(self.model, speech_prompt("hi"), DecodePlan((Modality.A,), max_tokens=1))
        modality, tokens = result.segment()
        self.assertIs(modality, Modality.A)
        self.assertEqual(len(tokens), 2)
        self.assertEqual(tokens[0], TEXT_BOS)

    def test_plan_appends_one_segment_per_modality(self):
        prompt = speech_prompt("ab")
        result = generate(self.model, prompt, DecodePlan((Modality.A, Modality.B), max_tokens=4))
        self.assertEqual(len(result.sequence.segments), 3)
        self.assertEqual(result.sequence.segments[0], prompt.segments[0])
        self.assertEqual(result.sequence.segments[2].tokens[0], SPEECH_BOA)
        self.assertLessEqual(len(result.sequence), len(prompt) + 2 * 5)

    def test_closed_gates_ignore_prompt(self):
        plan = DecodePlan((Modality.A,), max_tokens=6)
        first = generate(self.model, speech_prompt("hello world"), plan)
        second = generate(self.model, speech_prompt("zebra"), plan)
        self.assertEqual(first.segment(), second.segment())

    def test_longer_budget_extends_output(self):
        short = generate(self.model, speech_prompt("abc"), DecodePlan((Modality.A,), max_tokens=3))
        long = generate(self.model, speech_prompt("abc"), DecodePlan((Modality.A,), max_tokens=6))
        _, short_tokens = short.segment()
        _, long_tokens = long.segment()
        self.assertEqual(long_tokens[: len(short_tokens)], short_tokens)

    def test_sampling_is_seeded(self):
        plan = DecodePlan((Modality.B,), max_tokens=5, sampling=TEMPERATURE, temperature=2.0, seed=9)
        first = generate(self.model, InterleavedSequence.of(("A", [1, 5, 6, 2])), plan)
        second = generate(self.model, InterleavedSequence.of(("A", [1, 5, 6, 2])), plan)
        self.assertEqual(first.segment(), second.segment())

    def test_full_tower_is_flagged(self):
        prompt = InterleavedSequence.of(("A", [5] * 48))
        result = generate(self.model, prompt, DecodePlan((Modality.A,), max_tokens=4))
        self.assertEqual(result.truncated, [True])
        self.assertEqual(result.sequence, prompt)


### DECODED OUTPUT TESTS

class DecodedTest(SimpleTestCase):
    def test_speech_uses_the_given_codebook(self):
        codebook = SpeechCodebook(seed=3, codes_per_char=3)
        tokens = codebook.encode("hello world")
        result = GenerationResult(InterleavedSequence(), [(Modality.B, tokens)], [False])
        self.assertEqual(result.decoded(codebook=codebook), "hello world")
        self.assertNotEqual(result.decoded(), "hello world")

    def test_text_ignores_the_codebook(self):
        result = GenerationResult(InterleavedSequence(), [(Modality.A, [TEXT_BOS, 12, 9, TEXT_EOS])], [False])
        self.assertEqual(result.decoded(codebook=SpeechCodebook(seed=3)), "he")


### BASELINE GENERATION TESTS

class GenerateBaselineTest(SimpleTestCase):
    def setUp(self):
        tower = DecoderBackbone.from_seed(
            BackboneConfig(vocab_size=TEXT_VOCAB_SIZE, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=64),
            seed=0)
        self.model = expand_vocabulary(tower, SPEECH_VOCAB_SIZE, np.random.default_rng(1))

    def test_single_token_budget(self):
        result = generate_baseline(self.model, speech_prompt("ab"), DecodePlan((Modality.A,), max_tokens=1))
        _, tokens = result.segment()
        self.assertEqual(len(tokens), 2)

    def test_choice_stays_in_modality_range(self):
        result = generate_baseline(self.model, InterleavedSequence.of(("A", [1, 5, 2])),
                                   DecodePlan((Modality.B, Modality.A), max_tokens=5))
        speech = result.generated[0][1]
        text = result.generated[1][1]
        self.assertTrue(all(0 <= t < SPEECH_VOCAB_SIZE for t in speech))
        self.assertTrue(all(0 <= t < TEXT_VOCAB_SIZE for t in text))

    def test_greedy_matches_argmax(self):
        prompt = InterleavedSequence.of(("A", [1, 5, 2]))
        result = generate_baseline(self.model, prompt, DecodePlan((Modality.A,), max_tokens=1))
        logits, _ = self.model([1, 5, 2, TEXT_BOS])
        expected = int(np.argmax(logits.data[-1, :TEXT_VOCAB_SIZE]))
        self.assertEqual(result.segment()[1], [TEXT_BOS, expected])
