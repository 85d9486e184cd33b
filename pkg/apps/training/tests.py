import json
import math
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase

from apps.backbone.towers import BackboneConfig, DecoderBackbone, expand_vocabulary
from apps.fusion.zipper import ZipperConfig, build_zipper
from apps.interleave.sequences import InterleavedSequence, Modality
from apps.numeric.optim import global_grad_norm
from apps.numeric.tensor import no_grad
from apps.synthdata.corpus import make_corpus
from apps.synthdata.tokenizers import SPEECH_BOA, SPEECH_EOA, SPEECH_VOCAB_SIZE, TEXT_BOS, TEXT_EOS, TEXT_VOCAB_SIZE

from .examples import ExampleSampler, Task, asr_fraction, make_example, prompt_for
from .objectives import TARGET_SEGMENT_ONLY, SingleDecoderObjective, ZipperObjective, next_token_targets
from .trainer import (
    LrSearchError,
    MetricsLog,
    Trainer,
    TrainingDivergedError,
    TrainSpec,
    lr_search,
)

TEXT = BackboneConfig(vocab_size=TEXT_VOCAB_SIZE, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=32)
SPEECH = BackboneConfig(vocab_size=SPEECH_VOCAB_SIZE, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=32)
ZIP = ZipperConfig(n_zips=2, proj_hidden=8, input_proj_layers=2)


def tiny_corpus(seed=0):
    return make_corpus(seed=seed, n_pairs=8, fraction=1.0, n_unpaired=0, n_unpaired_text=0,
                       n_heldout=2, max_words=2, max_chars=14)


def tiny_trainer(seed=0, spec=None, metrics_log=None):
    model = build_zipper(TEXT, SPEECH, ZIP, seed=seed)
    spec = spec or TrainSpec(steps=3, batch_size=2, learning_rate=1e-2, seed=seed)
    return Trainer(ZipperObjective(model), spec, tiny_corpus().paired, metrics_log)


### EXAMPLE TESTS

class ExampleTest(SimpleTestCase):
    def setUp(self):
        self.pair = tiny_corpus().paired[0]

    def test_asr_layout(self):
        seq = make_example(self.pair, Task.ASR)
        speech, text = seq.segments
        self.assertIs(speech.modality, Modality.B)
        self.assertEqual((speech.tokens[0], speech.tokens[-1]), (SPEECH_BOA, SPEECH_EOA))
        self.assertIs(text.modality, Modality.A)
        self.assertEqual((text.tokens[0], text.tokens[-1]), (TEXT_BOS, TEXT_EOS))

    def test_tts_layout(self):
        seq = make_example(self.pair, Task.TTS)
        self.assertEqual([s.modality for s in seq.segments], [Modality.A, Modality.B])
        self.assertEqual(prompt_for(self.pair, Task.TTS).segments, seq.segments[:1])

    def test_task_mix_ratio(self):
        sampler = ExampleSampler(tiny_corpus().paired, task_mix=(1.0, 1.26), seed=3)
        fraction = asr_fraction(sampler.sample_tasks(10000))
        self.assertAlmostEqual(fraction, 1.0 / 2.26, delta=0.02)

    def test_sampler_is_seeded(self):
        pairs = tiny_corpus().paired
        first = ExampleSampler(pairs, seed=5).next_batch(6)
        second = ExampleSampler(pairs, seed=5).next_batch(6)
        self.assertEqual(first, second)

    def test_bad_mix_is_rejected(self):
        with self.assertRaises(ValueError):
            ExampleSampler(tiny_corpus().paired, task_mix=(0.0, 0.0))


### OBJECTIVE TESTS

class ObjectiveTest(SimpleTestCase):
    def test_target_segment_scope(self):
        targets, ignore = next_token_targets([5, 6, 7, 8], [0, 1, 2, 3], TARGET_SEGMENT_ONLY, (2, 4))
        self.assertEqual(targets.tolist(), [6, 7, 8, 0])
        self.assertEqual(ignore.tolist(), [True, False, False, True])

    def test_target_scope_follows_linear_index(self):
        # tower stream positions 0, 1 sit at linear 0 and 4; only the step into 4 is scored
        _, ignore = next_token_targets([5, 6], [0, 4], TARGET_SEGMENT_ONLY, (3, 5))
        self.assertEqual(ignore.tolist(), [False, True])

    def test_single_token_sequence_scores_nothing(self):
        model = build_zipper(TEXT, SPEECH, ZIP, seed=0)
        self.assertIsNone(ZipperObjective(model).loss(InterleavedSequence.of(("A", [1]))))

    def test_baseline_loss_is_finite(self):
        tower = DecoderBackbone.from_seed(
            BackboneConfig(vocab_size=TEXT_VOCAB_SIZE, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=64),
            seed=0)
        baseline = expand_vocabulary(tower, SPEECH_VOCAB_SIZE, np.random.default_rng(0))
        seq = make_example(tiny_corpus().paired[0], Task.ASR)
        loss = SingleDecoderObjective(baseline).loss(seq, TARGET_SEGMENT_ONLY)
        self.assertTrue(math.isfinite(loss.item()))


### TRAINER TESTS

class TrainSpecTest(SimpleTestCase):
    def test_learning_rate_must_be_non_negative(self):
        with self.assertRaises(ValueError):
            TrainSpec(learning_rate=-1e-3)
        with self.assertRaises(ValueError):
            TrainSpec(learning_rate=float("nan"))
        self.assertEqual(TrainSpec(learning_rate=0.0).learning_rate, 0.0)

    def test_unknown_scope_is_rejected(self):
        with self.assertRaises(ValueError):
            TrainSpec(loss_scope="everything")


class TrainerTest(SimpleTestCase):
    def test_zero_learning_rate_leaves_weights(self):
        trainer = tiny_trainer(spec=TrainSpec(steps=2, batch_size=2, learning_rate=0.0))
        before = trainer.model.state_dict()
        trainer.fit(2)
        after = trainer.model.state_dict()
        for name in before:
            np.testing.assert_array_equal(before[name], after[name])

    def test_frozen_tower_is_untouched(self):
        trainer = tiny_trainer()
        before = trainer.model.tower_a.state_dict()
        after_b = trainer.model.tower_b.state_dict()
        trainer.fit(3)
        for name, value in trainer.model.tower_a.state_dict().items():
            np.testing.assert_array_equal(value, before[name])
        changed = [n for n, v in trainer.model.tower_b.state_dict().items() if not np.array_equal(v, after_b[n])]
        self.assertTrue(changed)

    def assert_frozen_tower_bit_exact(self, steps):
        trainer = tiny_trainer(spec=TrainSpec(steps=steps, batch_size=2, learning_rate=1e-2, log_every=0))
        model = trainer.model
        frozen = {id(p) for p in model.tower_a.parameters()}
        self.assertFalse(any(id(p) in frozen for _, p in model.trainable_parameters()))
        before = model.tower_a.state_dict()
        trainer.fit()
        self.assertEqual(trainer.step, steps)
        for name, value in model.tower_a.state_dict().items():
            np.testing.assert_array_equal(value, before[name], err_msg=name)

    def test_frozen_tower_stays_bit_exact_over_a_hundred_steps(self):
        self.assert_frozen_tower_bit_exact(100)

    @unittest.skipUnless(settings.ZIPPER_SLOW_TESTS, "slow seeded training run")
    def test_frozen_tower_stays_bit_exact_over_five_hundred_steps(self):
        self.assert_frozen_tower_bit_exact(500)

    def test_without_zips_text_logits_ignore_speech_after_training(self):
        model = build_zipper(TEXT, SPEECH, replace(ZIP, n_zips=0), seed=0)
        spec = TrainSpec(steps=20, batch_size=2, learning_rate=1e-2, seed=0, log_every=0)
        trainer = Trainer(ZipperObjective(model), spec, tiny_corpus().paired)
        trainer.fit()
        text = [TEXT_BOS, 5, 9, 12, TEXT_EOS]
        model.eval()
        with no_grad():
            first = model.forward_zipped(InterleavedSequence.of(("B", [SPEECH_BOA, 3, 4, SPEECH_EOA]), ("A", text)))
            second = model.forward_zipped(InterleavedSequence.of(("B", [SPEECH_BOA, 700, SPEECH_EOA]), ("A", text)))
            alone, _ = model.tower_a.forward(text, input_projection=model.input_proj_a)
        np.testing.assert_array_equal(first.logits_a.data, second.logits_a.data)
        np.testing.assert_array_equal(first.logits_a.data, alone.data)

    def test_gradients_are_clipped(self):
        spec = TrainSpec(steps=1, batch_size=2, learning_rate=1e-3, grad_clip_max_norm=1e-4)
        trainer = tiny_trainer(spec=spec)
        trainer.fit()
        self.assertLessEqual(global_grad_norm(trainer.optimizer.params), 1e-4 * (1 + 1e-4))

    def test_loss_decreases_on_fixed_batch(self):
        trainer = tiny_trainer()
        batch = trainer.sampler.next_batch(2)
        losses = [trainer.train_step(batch) for _ in range(30)]
        self.assertLess(losses[-1], losses[0])

    def test_same_seed_same_run(self):
        first, second = tiny_trainer(seed=2), tiny_trainer(seed=2)
        self.assertEqual(first.fit(3), second.fit(3))

    def test_non_finite_loss_raises(self):
        trainer = tiny_trainer()
        trainer.model.input_proj_a.layers[0].weight.data[...] = np.nan
        with self.assertRaises(TrainingDivergedError) as ctx:
            trainer.fit(1)
        self.assertEqual(ctx.exception.step, 1)

    def test_resume_matches_uninterrupted_run(self):
        straight = tiny_trainer()
        straight.fit(4)

        first = tiny_trainer()
        first.fit(2)
        weights, state = first.model.state_dict(), first.state_dict()
        resumed = tiny_trainer()
        resumed.model.load_state_dict(weights)
        resumed.load_state_dict(state)
        resumed.fit(4)

        self.assertEqual(resumed.step, 4)
        for name, value in straight.model.state_dict().items():
            np.testing.assert_array_equal(resumed.model.state_dict()[name], value)

    def test_metrics_log(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "metrics.jsonl"
            tiny_trainer(metrics_log=MetricsLog(path)).fit(2)
            records = [json.loads(line) for line in path.read_text().splitlines()]
        self.assertEqual([r["step"] for r in records], [1, 2])
        self.assertEqual(records[0]["phase"], "finetune")
        self.assertEqual(set(records[0]), {"phase", "step", "loss", "grad_norm", "learning_rate"})

    def test_baseline_trains(self):
        tower = DecoderBackbone.from_seed(
            BackboneConfig(vocab_size=TEXT_VOCAB_SIZE, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=64),
            seed=0)
        baseline = expand_vocabulary(tower, SPEECH_VOCAB_SIZE, np.random.default_rng(0))
        trainer = Trainer(SingleDecoderObjective(baseline), TrainSpec(steps=2, batch_size=2), tiny_corpus().paired)
        losses = trainer.fit()
        self.assertEqual(len(losses), 2)


### LEARNING-RATE SEARCH TESTS

class LrSearchTest(SimpleTestCase):
    def test_lowest_geometric_mean_wins(self):
        results = {1e-4: (0.5, 0.5), 5e-4: (0.2, 0.8), 1e-3: (0.3, 0.3)}
        outcome = lr_search(results, results.get)
        self.assertEqual(outcome.best_learning_rate, 1e-3)
        self.assertAlmostEqual(outcome.scores[5e-4], 0.4)

    def test_ties_go_to_larger_rate(self):
        results = {1e-4: (0.3, 0.6), 5e-4: (0.3, 0.6)}
        self.assertEqual(lr_search(results, results.get).best_learning_rate, 5e-4)

    def test_diverged_candidate_scores_infinity(self):
        def evaluate(lr):
            if lr > 5e-4:
                raise TrainingDivergedError(7, float("nan"))
            return (0.5, 0.5)

        outcome = lr_search([1e-4, 1e-3], evaluate)
        self.assertEqual(outcome.best_learning_rate, 1e-4)
        self.assertEqual(outcome.scores[1e-3], math.inf)

    def test_all_diverged(self):
        def evaluate(lr):
            raise TrainingDivergedError(1, float("inf"))

        with self.assertRaises(LrSearchError):
            lr_search([1e-4, 1e-3], evaluate)
