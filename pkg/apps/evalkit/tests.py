import itertools
import math
import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
import pandas as pd
from django.test import SimpleTestCase, TestCase
from scipy.stats import rankdata
from scipy.stats import wilcoxon as scipy_wilcoxon

from apps.experiments.config import load_config_dict
from apps.synthdata.corpus import make_corpus
from apps.training.builders import SINGLE_DECODER, ZIPPER, build_model

from .evaluation import EvalSettings, SentenceScore, TaskReport, compare_models, evaluate_oracle, evaluate_task
from .metrics import (
    EvaluationError,
    WerBreakdown,
    bucket_wer_by_ref_length,
    corpus_wer,
    pooled,
    wer,
    wilcoxon_signed_rank,
)
from .models import SweepCell
from .plots import plot_losses, plot_sweep
from .sweeps import (
    ABLATION_COLUMNS,
    BUCKET_COLUMNS,
    DEFAULT_FRACTIONS,
    DEFAULT_KINDS,
    INPUT_PROJ_BOTH,
    N_CROSS_LAYERS,
    SWEEP_COLUMNS,
    SweepRow,
    ablation_variants,
    bucket_frame,
    run_ablation,
    run_cell,
    run_data_fraction_sweep,
)
from .tasks import collect_sweep, dispatch_sweep

TINY = {
    "seed": 0,
    "backbone_a": {"d_model": 8, "n_layers": 2, "n_heads": 2, "d_ff": 16, "max_seq_len": 32},
    "backbone_b": {"d_model": 8, "n_layers": 2, "n_heads": 2, "d_ff": 16, "max_seq_len": 32},
    "zipper": {"n_zips": 2, "proj_hidden": 8, "input_proj_layers": 1},
    "train": {"steps": 2, "batch_size": 2, "learning_rate": 0.01, "log_every": 0},
    "corpus": {"n_pairs": 8, "n_unpaired": 0, "n_unpaired_text": 0, "n_heldout": 2, "max_words": 2, "max_chars": 14},
    "eval": {"max_text_tokens": 4, "max_speech_tokens": 4},
}


def tiny_experiment():
    return load_config_dict(TINY)


def edit_distance(ref, hyp):
    """Plain recursive Levenshtein distance."""
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    return min(
        edit_distance(ref[1:], hyp[1:]) + (ref[0] != hyp[0]),
        edit_distance(ref[1:], hyp) + 1,
        edit_distance(ref, hyp[1:]) + 1,
    )


def sequences(max_len, min_len=0):
    for n in range(min_len, max_len + 1):
        yield from itertools.product("ab", repeat=n)


def enumerated_p_value(diffs):
    """Two-sided p of the signed-rank sum by flipping every sign."""
    diffs = np.asarray(diffs, dtype=np.float64)
    ranks = rankdata(np.abs(diffs))
    observed = abs(np.sum(np.sign(diffs) * ranks))
    hits = 0
    total = 0
    for signs in itertools.product((-1, 1), repeat=len(diffs)):
        total += 1
        if abs(np.dot(signs, ranks)) >= observed - 1e-9:
            hits += 1
    return hits / total


def report(values, task="asr", ids=None):
    ids = ids or [f"s{i}" for i in range(len(values))]
    sentences = [SentenceScore(i, "w", "w", WerBreakdown(v, 0, 0, 1)) for i, v in zip(ids, values)]
    return TaskReport(task, "heldout_clean", sentences)


### WER TESTS

class WerTest(SimpleTestCase):
    def test_matches_brute_force_on_all_short_sequences(self):
        for ref in sequences(4, min_len=1):
            for hyp in sequences(4):
                breakdown = wer(" ".join(ref), " ".join(hyp))
                self.assertEqual(breakdown.errors, edit_distance(ref, hyp), (ref, hyp))
                self.assertEqual(len(hyp), len(ref) - breakdown.deletions + breakdown.insertions)

    def test_counts(self):
        self.assertEqual(wer("the cat sat", "the cat sat"), WerBreakdown(0, 0, 0, 3))
        self.assertEqual(wer("a b", ""), WerBreakdown(0, 2, 0, 2))
        self.assertEqual(wer("a", "a b c").wer, 2.0)

    def test_swap_prefers_substitutions(self):
        self.assertEqual(wer("a b", "b a"), WerBreakdown(2, 0, 0, 2))

    def test_empty_reference(self):
        with self.assertRaises(EvaluationError):
            wer("", "a")
        with self.assertRaises(EvaluationError):
            pooled([])

    def test_pooled_is_not_mean_of_sentences(self):
        refs, hyps = ["a b c d", "e f"], ["a x c d", ""]
        self.assertEqual(corpus_wer(refs, hyps), 0.5)
        self.assertEqual(pooled(wer(r, h) for r, h in zip(refs, hyps)), WerBreakdown(1, 2, 0, 6))

    def test_scale_free(self):
        refs = ["a b c", "d e", "f g h i"]
        hyps = ["a c", "d e x", "f g h i"]
        self.assertEqual(corpus_wer(refs * 2, hyps * 2), corpus_wer(refs, hyps))


### WILCOXON TESTS

class WilcoxonTest(SimpleTestCase):
    def test_five_positive_differences(self):
        result = wilcoxon_signed_rank([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
        self.assertAlmostEqual(result.p_value, 0.0625)
        self.assertEqual(result.statistic, 0.0)
        self.assertTrue(result.exact)
        self.assertFalse(result.significant)

    def test_exact_mode_matches_enumeration(self):
        for n in range(5, 9):
            magnitudes = np.arange(1, n + 1, dtype=np.float64)
            for signs in itertools.product((-1, 1), repeat=n):
                diffs = magnitudes * np.asarray(signs)
                result = wilcoxon_signed_rank(diffs, np.zeros(n))
                self.assertAlmostEqual(result.p_value, enumerated_p_value(diffs), places=12)

    def test_ties_share_ranks(self):
        diffs = np.array([1, -1, 2, 3, 3, -4, 5])
        result = wilcoxon_signed_rank(diffs, np.zeros(len(diffs)))
        self.assertAlmostEqual(result.p_value, enumerated_p_value(diffs), places=12)

    def test_zero_differences_are_dropped(self):
        a = [1, 2, 3, 4, 5, 7, 7]
        b = [0, 0, 0, 0, 0, 7, 7]
        self.assertEqual(wilcoxon_signed_rank(a, b).n, 5)
        with self.assertRaises(EvaluationError):
            wilcoxon_signed_rank([1, 2, 3, 4], [0, 0, 0, 0])

    def test_length_mismatch(self):
        with self.assertRaises(EvaluationError):
            wilcoxon_signed_rank([1, 2, 3, 4, 5], [0, 0, 0, 0])

    def test_symmetric_in_its_arguments(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=10), rng.normal(size=10)
        forward, backward = wilcoxon_signed_rank(a, b), wilcoxon_signed_rank(b, a)
        self.assertEqual(forward.statistic, backward.statistic)
        self.assertAlmostEqual(forward.p_value, backward.p_value, places=12)

    def test_normal_approximation_above_twelve(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=30)
        b = a + rng.normal(0.5, 1.0, size=30)
        result = wilcoxon_signed_rank(a, b)
        self.assertFalse(result.exact)
        expected = scipy_wilcoxon(a, b, correction=False, method="approx")
        self.assertAlmostEqual(result.p_value, float(expected.pvalue), places=10)


### BUCKET TESTS

class BucketTest(SimpleTestCase):
    def test_buckets_and_overflow(self):
        pairs = [("a", "a"), ("a b", "a"), ("a b c", "a b c"), ("a b c d e f g", "a b c d e f")]
        rows = bucket_wer_by_ref_length(pairs, (2, 3))
        self.assertEqual([r.max_ref_words for r in rows], [2, 3, math.inf])
        self.assertEqual([r.sentences for r in rows], [2, 1, 1])
        self.assertEqual(rows[0].breakdown, WerBreakdown(0, 1, 0, 3))

    def test_empty_buckets_are_omitted(self):
        rows = bucket_wer_by_ref_length([("a", "a"), ("a b c d e f g", "a")], (2, 5, 6))
        self.assertEqual([r.max_ref_words for r in rows], [2, math.inf])

    def test_bad_edges(self):
        with self.assertRaises(EvaluationError):
            bucket_wer_by_ref_length([("a", "a")], (3, 2))
        with self.assertRaises(EvaluationError):
            bucket_wer_by_ref_length([("a", "a")], ())

    def test_bucket_frame(self):
        frame = bucket_frame(report([0, 1, 0]), (1, 2))
        self.assertEqual(list(frame.columns), BUCKET_COLUMNS)
        self.assertEqual(frame["sentences"].tolist(), [3])


### EVALUATION TESTS

class EvaluationTest(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.experiment = tiny_experiment()
        cls.corpus = make_corpus(seed=0, n_pairs=8, fraction=1.0, n_unpaired=0, n_unpaired_text=0,
                                 n_heldout=3, max_words=2, max_chars=14)

    def test_oracle_is_exact(self):
        result = evaluate_oracle(self.corpus.heldout_clean, EvalSettings(), "heldout_clean")
        self.assertEqual(result.wer, 0.0)
        self.assertEqual(len(result.sentences), 3)

    def test_oracle_decodes_with_the_corpus_codebook(self):
        for codebook_seed, codes_per_char in ((1, 2), (0, 3)):
            corpus = make_corpus(seed=0, n_pairs=4, fraction=1.0, n_unpaired=0, n_unpaired_text=0, n_heldout=3,
                                 max_words=2, max_chars=14, codebook_seed=codebook_seed, codes_per_char=codes_per_char)
            result = evaluate_oracle(corpus.heldout_clean, EvalSettings(), "heldout_clean", corpus.codebook)
            self.assertEqual(result.wer, 0.0)
            self.assertEqual([s.hypothesis for s in result.sentences], [p.text for p in corpus.heldout_clean])

    def test_every_pair_is_scored(self):
        e = self.experiment
        for kind in (ZIPPER, SINGLE_DECODER):
            model = build_model(kind, e.backbone_a, e.backbone_b, e.zipper, seed=0)
            for task in ("asr", "tts"):
                result = evaluate_task(model, self.corpus.heldout_clean, task, e.eval, "heldout_clean")
                self.assertEqual([s.id for s in result.sentences], [p.id for p in self.corpus.heldout_clean])
                self.assertTrue(all(s.reference == p.text for s, p in zip(result.sentences, self.corpus.heldout_clean)))
                self.assertTrue(math.isfinite(result.wer))

    def test_max_examples(self):
        e = self.experiment
        model = build_model(ZIPPER, e.backbone_a, e.backbone_b, e.zipper, seed=0)
        settings = EvalSettings(max_examples=1, max_text_tokens=2)
        self.assertEqual(len(evaluate_task(model, self.corpus.heldout_clean, "asr", settings).sentences), 1)
        with self.assertRaises(EvaluationError):
            evaluate_task(model, [], "asr", settings)

    def test_compare_models(self):
        result = compare_models(report([1] * 6), report([0] * 6))
        self.assertAlmostEqual(result.p_value, 2 / 64)
        self.assertTrue(result.significant)

    def test_compare_needs_the_same_sentences(self):
        with self.assertRaises(EvaluationError):
            compare_models(report([1] * 6), report([0] * 6, ids=[f"x{i}" for i in range(6)]))
        with self.assertRaises(EvaluationError):
            compare_models(report([1] * 6), report([1] * 6))


### SWEEP TESTS

def fake_cell(experiment, fraction, kind, seed, towers=None):
    return SweepRow(fraction, kind, kind == ZIPPER, False, seed, fraction, 2 * fraction, 0.5)


class SweepTest(SimpleTestCase):
    def test_default_grid_shape(self):
        result = run_data_fraction_sweep(tiny_experiment(), seeds=(0, 1), runner=fake_cell)
        frame = result.frame()
        self.assertEqual(list(frame.columns), SWEEP_COLUMNS)
        self.assertEqual(len(frame), len(DEFAULT_FRACTIONS) * len(DEFAULT_KINDS) * 2)
        self.assertEqual(frame["fraction"].tolist(), sorted(frame["fraction"].tolist()))
        self.assertEqual(result.median_wer(ZIPPER, 0.1), 0.1)

    def test_csv_has_a_header(self):
        result = run_data_fraction_sweep(tiny_experiment(), fractions=(1.0,), runner=fake_cell)
        with tempfile.TemporaryDirectory() as tmp:
            path = result.to_csv(Path(tmp) / "sweep.csv")
            self.assertEqual(path.read_text().splitlines()[0], ",".join(SWEEP_COLUMNS))
            self.assertEqual(len(pd.read_csv(path)), len(DEFAULT_KINDS))

    def test_fraction_without_pairs_is_diverged(self):
        row = run_cell(tiny_experiment(), 0.001, ZIPPER, 0)
        self.assertTrue(row.diverged)
        self.assertEqual(row.clean_wer, math.inf)

    def test_tiny_sweep_is_deterministic(self):
        experiment = tiny_experiment()
        first = run_data_fraction_sweep(experiment, fractions=(0.5, 1.0), seeds=(0,)).frame()
        second = run_data_fraction_sweep(experiment, fractions=(0.5, 1.0), seeds=(0,)).frame()
        pd.testing.assert_frame_equal(first, second)
        self.assertEqual(len(first), 4)
        self.assertFalse(first["diverged"].any())
        zipper = first[first.kind == ZIPPER].iloc[0]
        self.assertTrue(zipper.freeze_a)

    def test_plots_are_written(self):
        frame = run_data_fraction_sweep(tiny_experiment(), runner=fake_cell).frame()
        with tempfile.TemporaryDirectory() as tmp:
            self.assertTrue(plot_sweep(frame, Path(tmp) / "sweep.png").exists())
            self.assertTrue(plot_losses(list(np.linspace(3, 1, 50)), Path(tmp) / "loss.png").exists())


class AblationTest(SimpleTestCase):
    def test_variants(self):
        base = tiny_experiment().zipper
        variants = dict(ablation_variants(INPUT_PROJ_BOTH, base, ()))
        self.assertEqual(list(variants), ["with", "without"])
        without = variants["without"]
        self.assertFalse(without.enable_input_proj_a or without.enable_input_proj_b)
        self.assertTrue(without.freeze_a)
        self.assertFalse(without.freeze_b)
        layers = ablation_variants(N_CROSS_LAYERS, base, (0, 1, 2))
        self.assertEqual([label for label, _ in layers], ["n_zips=0", "n_zips=1", "n_zips=2"])
        with self.assertRaises(ValueError):
            ablation_variants("dropout", base, ())

    def test_one_row_per_variant_and_seed(self):
        frame = run_ablation(tiny_experiment(), N_CROSS_LAYERS, seeds=(0, 1), n_zips_grid=(0, 2))
        self.assertEqual(list(frame.columns), ABLATION_COLUMNS)
        self.assertEqual(frame["variant"].tolist(), ["n_zips=0", "n_zips=0", "n_zips=2", "n_zips=2"])
        self.assertEqual(frame["seed"].tolist(), [0, 1, 0, 1])


### CELERY / ORM TESTS

class SweepCellTest(TestCase):
    def test_store_round_trip(self):
        row = SweepRow(0.1, ZIPPER, True, False, 3, 0.25, math.inf, 0.5, False)
        SweepCell.store("run", row)
        SweepCell.store("run", row)
        self.assertEqual(SweepCell.objects.count(), 1)
        stored = SweepCell.objects.get()
        self.assertIsNone(stored.other_wer)
        self.assertEqual(stored.to_row(), row)

    def test_dispatch_stores_every_cell(self):
        experiment = tiny_experiment()
        with mock.patch("apps.evalkit.tasks.run_cell", side_effect=fake_cell) as run:
            result = dispatch_sweep("r1", experiment, (0.1, 1.0), DEFAULT_KINDS, (0, 1))
        self.assertEqual(run.call_count, 8)
        self.assertEqual(SweepCell.objects.filter(run="r1").count(), 8)
        self.assertEqual(result.frame()["clean_wer"].tolist(), [0.1] * 4 + [1.0] * 4)

    def test_failing_cell_is_stored_as_diverged(self):
        with mock.patch("apps.evalkit.tasks.run_cell", side_effect=RuntimeError("boom")):
            dispatch_sweep("r2", tiny_experiment(), (1.0,), (ZIPPER,), (0,))
        (row,) = collect_sweep("r2").rows
        self.assertTrue(row.diverged)
        self.assertEqual(row.clean_wer, math.inf)
