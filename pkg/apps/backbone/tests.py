import unittest

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase

from apps.numeric.tensor import ShapeError, no_grad

from .pretraining import PretrainSpec, heldout_loss, pretrain
from .towers import (
    BackboneConfig,
    ConfigError,
    DecoderBackbone,
    expand_vocabulary,
    expected_parameter_count,
    with_max_seq_len,
)

TINY = BackboneConfig(vocab_size=31, d_model=16, n_layers=2, n_heads=2, d_ff=64, max_seq_len=32)


def eval_logits(model, tokens):
    model.eval()
    with no_grad():
        logits, _ = model(tokens)
    return logits.data


def reference_logits(state, config, tokens):
    """Forward pass written directly against a state dict, without the autodiff graph."""
    w = {name: value.astype(np.float64) for name, value in state.items()}
    t, d, h = len(tokens), config.d_model, config.n_heads
    d_head = d // h

    def norm(x, prefix):
        centered = x - x.mean(axis=-1, keepdims=True)
        var = (centered ** 2).mean(axis=-1, keepdims=True)
        return centered / np.sqrt(var + 1e-5) * w[f"{prefix}.gain"] + w[f"{prefix}.bias"]

    def linear(x, prefix):
        return x @ w[f"{prefix}.weight"] + w[f"{prefix}.bias"]

    def heads(x):
        return x.reshape(t, h, d_head).transpose(1, 0, 2)

    causal = np.tril(np.ones((t, t), dtype=bool))
    x = w["token_embedding"][tokens] + w["position_embedding"][:t]
    for i in range(config.n_layers):
        block = f"blocks.{i}"
        a = norm(x, f"{block}.attn_norm")
        q, k, v = (heads(linear(a, f"{block}.attn.{n}")) for n in ("query", "key", "value"))
        scores = np.where(causal, q @ k.transpose(0, 2, 1) / np.sqrt(d_head), -np.inf)
        probs = np.exp(scores - scores.max(axis=-1, keepdims=True))
        probs /= probs.sum(axis=-1, keepdims=True)
        x = x + linear((probs @ v).transpose(1, 0, 2).reshape(t, d), f"{block}.attn.output")
        f = norm(x, f"{block}.ffn_norm")
        x = x + linear(np.maximum(linear(f, f"{block}.ffn.up"), 0.0), f"{block}.ffn.down")
    return norm(x, "final_norm") @ w["token_embedding"].T


### CONFIG TESTS

class BackboneConfigTest(SimpleTestCase):
    def test_heads_must_divide_width(self):
        with self.assertRaises(ConfigError):
            BackboneConfig(vocab_size=31, d_model=10, n_heads=3)

    def test_vocabulary_needs_specials(self):
        with self.assertRaises(ConfigError):
            BackboneConfig(vocab_size=2)

    def test_reference_parameter_count(self):
        model = DecoderBackbone.from_seed(TINY, seed=0)
        self.assertEqual(expected_parameter_count(TINY), 7600)
        self.assertEqual(model.count_parameters(), 7600)


### FORWARD TESTS

class ForwardTest(SimpleTestCase):
    def setUp(self):
        self.model = DecoderBackbone.from_seed(TINY, seed=1).eval()

    def test_single_token_shape(self):
        logits, hidden = self.model([5])
        self.assertEqual(logits.shape, (1, 31))
        self.assertEqual(hidden, {})

    def test_hidden_states_are_collected(self):
        _, hidden = self.model([1, 5, 6], collect_hidden={1, 2})
        self.assertEqual(sorted(hidden), [1, 2])
        self.assertEqual(hidden[2].shape, (3, 16))

    def test_overlong_sequence_is_rejected(self):
        with self.assertRaises(ShapeError):
            self.model([1] * 33)

    def test_out_of_range_token_is_rejected(self):
        with self.assertRaises(ShapeError):
            self.model([1, 31])

    def test_appending_keeps_earlier_logits(self):
        before = eval_logits(self.model, [1, 8, 9, 10])
        after = eval_logits(self.model, [1, 8, 9, 10, 12])
        np.testing.assert_allclose(after[:4], before, atol=1e-6)

    def test_causality_under_perturbation(self):
        rng = np.random.default_rng(2)
        tokens = rng.integers(0, 31, size=12)
        base = eval_logits(self.model, tokens)
        for t in range(11):
            perturbed = tokens.copy()
            perturbed[t + 1:] = rng.integers(0, 31, size=11 - t)
            np.testing.assert_allclose(eval_logits(self.model, perturbed)[: t + 1], base[: t + 1], atol=1e-6)

    def test_logits_match_plain_numpy_forward(self):
        model = DecoderBackbone.from_seed(TINY, seed=1234, dtype=np.float64)
        tokens = [1, 5, 9, 13, 2]
        expected = reference_logits(model.state_dict(), TINY, tokens)
        np.testing.assert_allclose(eval_logits(model, tokens), expected, rtol=1e-10, atol=1e-10)

    def test_same_seed_same_logits(self):
        first = eval_logits(DecoderBackbone.from_seed(TINY, seed=1234), [1, 5, 9, 13, 2])
        second = eval_logits(DecoderBackbone.from_seed(TINY, seed=1234), [1, 5, 9, 13, 2])
        np.testing.assert_array_equal(first, second)


class WeightTyingTest(SimpleTestCase):
    def test_head_reads_embedding_storage(self):
        model = DecoderBackbone.from_seed(TINY, seed=3).eval()
        tokens = [1, 7, 8]
        before = eval_logits(model, tokens)
        model.token_embedding.data[20] += 1.0
        after = eval_logits(model, tokens)
        changed = np.any(after != before, axis=0)
        self.assertTrue(changed[20])
        self.assertFalse(changed[np.arange(31) != 20].any())

    def test_no_separate_output_matrix(self):
        model = DecoderBackbone.from_seed(TINY, seed=3)
        names = [name for name, _ in model.named_parameters()]
        self.assertNotIn("output", " ".join(names))


### VOCABULARY EXPANSION TESTS

class ExpandVocabularyTest(SimpleTestCase):
    def setUp(self):
        self.model = DecoderBackbone.from_seed(TINY, seed=4)

    def test_zero_extra_is_rejected(self):
        with self.assertRaises(ConfigError):
            expand_vocabulary(self.model, 0, np.random.default_rng(0))

    def test_speech_sized_expansion(self):
        expanded = expand_vocabulary(self.model, 1026, np.random.default_rng(0))
        self.assertEqual(expanded.config.vocab_size, 31 + 1026)
        self.assertEqual(expanded.token_embedding.shape, (1057, 16))

    def test_existing_weights_are_bit_exact(self):
        expanded = expand_vocabulary(self.model, 5, np.random.default_rng(0))
        old, new = self.model.state_dict(), expanded.state_dict()
        for name, value in old.items():
            if name == "token_embedding":
                np.testing.assert_array_equal(new[name][:31], value)
            else:
                np.testing.assert_array_equal(new[name], value)

    def test_old_token_ranking_is_preserved(self):
        tokens = [1, 6, 7, 8]
        before = eval_logits(self.model, tokens)
        after = eval_logits(expand_vocabulary(self.model, 1026, np.random.default_rng(0)), tokens)
        np.testing.assert_allclose(after[:, :31], before, rtol=0, atol=1e-6)
        np.testing.assert_array_equal(after[:, :31].argmax(axis=1), before.argmax(axis=1))

    def test_positional_table_can_grow(self):
        grown = with_max_seq_len(self.model, 64, np.random.default_rng(0))
        np.testing.assert_array_equal(grown.position_embedding.data[:32], self.model.position_embedding.data)
        self.assertEqual(grown.config.max_seq_len, 64)


### PRE-TRAINING TESTS

def toy_corpus(rng, n=40):
    # repeating short patterns, easy to model
    streams = []
    for _ in range(n):
        start = int(rng.integers(3, 10))
        streams.append([1] + [3 + (start + i) % 20 for i in range(10)] + [2])
    return streams


class PretrainTest(SimpleTestCase):
    def test_zero_steps_leave_parameters(self):
        model = DecoderBackbone.from_seed(TINY, seed=5)
        before = model.state_dict()
        report = pretrain(model, toy_corpus(np.random.default_rng(0)), PretrainSpec(steps=0))
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(value, before[name])
        self.assertEqual(report.initial_heldout_loss, report.final_heldout_loss)

    def test_same_seed_same_parameters(self):
        spec = PretrainSpec(steps=5, batch_size=2, seed=9)
        corpus = toy_corpus(np.random.default_rng(1))
        first = pretrain(DecoderBackbone.from_seed(TINY, seed=6), corpus, spec).model.state_dict()
        second = pretrain(DecoderBackbone.from_seed(TINY, seed=6), corpus, spec).model.state_dict()
        for name, value in first.items():
            self.assertEqual(value.tobytes(), second[name].tobytes(), name)

    def test_short_run_lowers_heldout_loss(self):
        model = DecoderBackbone.from_seed(TINY, seed=7)
        report = pretrain(model, toy_corpus(np.random.default_rng(2)), PretrainSpec(steps=60, batch_size=4, seed=1))
        self.assertLess(report.final_heldout_loss, report.initial_heldout_loss)

    def test_empty_corpus_is_rejected(self):
        with self.assertRaises(ValueError):
            pretrain(DecoderBackbone.from_seed(TINY, seed=0), [], PretrainSpec(steps=1))

    @unittest.skipUnless(settings.ZIPPER_SLOW_TESTS, "slow seeded pre-training run")
    def test_speech_tower_learns_synthetic_streams(self):
        from apps.synthdata.corpus import make_corpus
        from apps.synthdata.tokenizers import SPEECH_VOCAB_SIZE

        corpus = make_corpus(seed=0, n_pairs=100, fraction=1.0, n_unpaired=2000, n_heldout=10)
        config = BackboneConfig(vocab_size=SPEECH_VOCAB_SIZE, d_model=64, n_layers=4, n_heads=4, d_ff=256)
        model = DecoderBackbone.from_seed(config, seed=0)
        streams = [p.speech_tokens for p in corpus.unpaired_speech]
        report = pretrain(model, streams, PretrainSpec(steps=2000, batch_size=8, seed=0))
        self.assertLess(report.final_heldout_loss, 0.8 * report.initial_heldout_loss)
        self.assertLess(heldout_loss(model, streams[-8:]), report.initial_heldout_loss)
