import numpy as np
from django.test import SimpleTestCase

from apps.backbone.towers import BackboneConfig, ConfigError
from apps.interleave.sequences import InterleavedSequence, Modality, Segment
from apps.numeric.gradcheck import check_gradients
from apps.numeric.tensor import backward, no_grad
from apps.synthdata.corpus import Pair
from apps.synthdata.tokenizers import SPEECH_VOCAB_SIZE, TEXT_VOCAB_SIZE, encode_speech
from apps.training.examples import Task, make_example
from apps.training.objectives import ZipperObjective

from .zipper import ZipperConfig, build_zipper

CONFIG_A = BackboneConfig(vocab_size=11, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=16)
CONFIG_B = BackboneConfig(vocab_size=13, d_model=12, n_layers=2, n_heads=3, d_ff=24, max_seq_len=16)
SMALL = ZipperConfig(n_zips=2, proj_hidden=8, input_proj_layers=2, freeze_a=False, freeze_b=False)
TEXT_16 = BackboneConfig(vocab_size=TEXT_VOCAB_SIZE, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=16)
SPEECH_16 = BackboneConfig(vocab_size=SPEECH_VOCAB_SIZE, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=16)


def small_model(config=SMALL, seed=0, gates=(0.3, -0.4), scale=None):
    model = build_zipper(CONFIG_A, CONFIG_B, config, seed=seed, dtype=np.float64)
    if scale is not None:
        rng = np.random.default_rng(seed + 100)
        for p in model.parameters():
            if p.data.ndim == 2:
                p.data[...] = rng.normal(0.0, scale, size=p.shape)
    if gates is not None:
        for block in model.a_from_b + model.b_from_a:
            block.gate_attn.data[...] = gates[0]
            block.gate_ffn.data[...] = gates[1]
    return model.eval()


def run(model, seq):
    with no_grad():
        return model.forward_zipped(seq)


def random_sequence(rng, max_segments=4, max_len=4):
    segments = []
    for _ in range(rng.integers(1, max_segments + 1)):
        modality = Modality.A if rng.random() < 0.5 else Modality.B
        vocab = CONFIG_A.vocab_size if modality is Modality.A else CONFIG_B.vocab_size
        segments.append(Segment(modality, rng.integers(0, vocab, size=rng.integers(1, max_len + 1))))
    return InterleavedSequence(tuple(segments))


### CONFIG AND STRUCTURE TESTS

class ZipperConfigTest(SimpleTestCase):
    def test_too_many_zips_are_rejected(self):
        with self.assertRaises(ConfigError):
            build_zipper(CONFIG_A, CONFIG_B, ZipperConfig(n_zips=3), seed=0)

    def test_zero_interval_is_rejected(self):
        with self.assertRaises(ConfigError):
            build_zipper(CONFIG_A, CONFIG_B, ZipperConfig(i_a=0), seed=0)

    def test_layer_schedule(self):
        deep_a = BackboneConfig(vocab_size=11, d_model=8, n_layers=8, n_heads=2, d_ff=16, max_seq_len=16)
        deep_b = BackboneConfig(vocab_size=13, d_model=8, n_layers=4, n_heads=2, d_ff=16, max_seq_len=16)
        model = build_zipper(deep_a, deep_b, ZipperConfig(i_a=2, i_b=1, n_zips=4), seed=0)
        self.assertEqual(model.zipped_layer_pairs(), [(2, 1), (4, 2), (6, 3), (8, 4)])
        self.assertEqual([b.query_layer for b in model.a_from_b], [2, 4, 6, 8])
        self.assertEqual([b.query_layer for b in model.b_from_a], [1, 2, 3, 4])

    def test_gates_start_closed(self):
        model = build_zipper(CONFIG_A, CONFIG_B, SMALL, seed=0)
        for block in model.a_from_b + model.b_from_a:
            self.assertEqual(block.gate_attn.data.tolist(), [0.0])
            self.assertEqual(block.gate_ffn.data.tolist(), [0.0])

    def test_frozen_tower_is_not_trainable(self):
        model = build_zipper(CONFIG_A, CONFIG_B, ZipperConfig(n_zips=2), seed=0)
        names = [name for name, _ in model.trainable_parameters()]
        self.assertFalse(any(name.startswith("tower_a.") for name in names))
        self.assertTrue(any(name.startswith("tower_b.") for name in names))
        self.assertTrue(any(name.startswith("a_from_b.") for name in names))
        self.assertTrue(any(name.startswith("input_proj_a.") for name in names))
        self.assertTrue(all(not p.requires_grad for p in model.tower_a.parameters()))

    def test_both_towers_frozen(self):
        model = build_zipper(CONFIG_A, CONFIG_B, ZipperConfig(n_zips=2, freeze_a=True, freeze_b=True), seed=0)
        names = [name for name, _ in model.trainable_parameters()]
        self.assertFalse(any(name.startswith(("tower_a.", "tower_b.")) for name in names))

    def test_shared_cross_projections(self):
        shared = build_zipper(CONFIG_A, CONFIG_B, ZipperConfig(n_zips=2, share_cross_projections=True), seed=0)
        separate = build_zipper(CONFIG_A, CONFIG_B, ZipperConfig(n_zips=2), seed=0)
        self.assertIs(shared.a_from_b[0].key_projection, shared.a_from_b[1].key_projection)
        self.assertIsNot(shared.a_from_b[0].key_projection, shared.b_from_a[0].key_projection)
        g_sizes = (CONFIG_B.d_model * CONFIG_A.d_model + CONFIG_A.d_model) + (
            CONFIG_A.d_model * CONFIG_B.d_model + CONFIG_B.d_model)
        self.assertEqual(separate.count_parameters() - shared.count_parameters(), g_sizes)

    def test_same_seed_builds_same_weights(self):
        first = build_zipper(CONFIG_A, CONFIG_B, SMALL, seed=4).state_dict()
        second = build_zipper(CONFIG_A, CONFIG_B, SMALL, seed=4).state_dict()
        self.assertEqual(list(first), list(second))
        for name in first:
            np.testing.assert_array_equal(first[name], second[name])


### FORWARD TESTS

class ZippedForwardTest(SimpleTestCase):
    def test_no_zips_matches_single_tower(self):
        model = small_model(ZipperConfig(n_zips=0, proj_hidden=8, input_proj_layers=2), gates=None)
        seq = InterleavedSequence.of(("A", [1, 4, 5]), ("B", [2, 3]), ("A", [6, 2]))
        output = run(model, seq)
        with no_grad():
            expected, _ = model.tower_a.forward([1, 4, 5, 6, 2], input_projection=model.input_proj_a)
        np.testing.assert_array_equal(output.logits_a.data, expected.data)

    def test_disabled_input_projection(self):
        config = ZipperConfig(n_zips=0, enable_input_proj_a=False, proj_hidden=8, input_proj_layers=2)
        model = small_model(config, gates=None)
        output = run(model, InterleavedSequence.of(("A", [1, 4, 5])))
        with no_grad():
            expected, _ = model.tower_a.forward([1, 4, 5])
        np.testing.assert_array_equal(output.logits_a.data, expected.data)

    def test_closed_gates_ignore_other_tower(self):
        model = small_model(gates=(0.0, 0.0))
        first = run(model, InterleavedSequence.of(("B", [1, 2, 3]), ("A", [4, 5, 6])))
        second = run(model, InterleavedSequence.of(("B", [9, 8, 7]), ("A", [4, 5, 6])))
        np.testing.assert_allclose(first.logits_a.data, second.logits_a.data, rtol=0, atol=1e-12)

    def test_closed_gates_keep_speech_independent_of_text(self):
        model = small_model(gates=(0.0, 0.0), scale=0.3)
        first = run(model, InterleavedSequence.of(("A", [1, 2, 3]), ("B", [4, 5, 6])))
        second = run(model, InterleavedSequence.of(("A", [9, 8, 7]), ("B", [4, 5, 6])))
        np.testing.assert_allclose(first.logits_b.data, second.logits_b.data, rtol=0, atol=1e-12)
        opened = small_model(scale=0.3)
        first = run(opened, InterleavedSequence.of(("A", [1, 2, 3]), ("B", [4, 5, 6])))
        second = run(opened, InterleavedSequence.of(("A", [9, 8, 7]), ("B", [4, 5, 6])))
        self.assertGreater(np.abs(first.logits_b.data - second.logits_b.data).max(), 1e-8)

    def test_open_gates_use_other_tower(self):
        model = small_model(scale=0.3)
        first = run(model, InterleavedSequence.of(("B", [1, 2, 3]), ("A", [4, 5, 6])))
        second = run(model, InterleavedSequence.of(("B", [9, 8, 7]), ("A", [4, 5, 6])))
        self.assertGreater(np.abs(first.logits_a.data - second.logits_a.data).max(), 1e-8)

    def test_empty_stream_has_no_logits(self):
        model = small_model()
        output = run(model, InterleavedSequence.of(("A", [1, 2, 3])))
        self.assertEqual(output.logits_a.shape, (3, CONFIG_A.vocab_size))
        self.assertIsNone(output.logits_b)
        self.assertIsNone(output.logits(Modality.B))

    def test_overlong_stream_is_rejected(self):
        model = small_model()
        with self.assertRaises(ConfigError):
            run(model, InterleavedSequence.of(("A", [1] * 17)))

    def test_causality_fuzz(self):
        model = small_model(scale=0.3)
        rng = np.random.default_rng(11)
        for _ in range(200):
            seq = random_sequence(rng)
            total = len(seq)
            j = int(rng.integers(0, total))
            segments = list(seq.segments)
            for index, segment in enumerate(segments):
                start, stop = seq.segment_span(index)
                if start <= j < stop:
                    vocab = CONFIG_A.vocab_size if segment.modality is Modality.A else CONFIG_B.vocab_size
                    tokens = list(segment.tokens)
                    tokens[j - start] = (tokens[j - start] + 1) % vocab
                    segments[index] = Segment(segment.modality, tokens)
            changed = InterleavedSequence(tuple(segments))
            before, after = run(model, seq), run(model, changed)
            streams = seq.streams()
            for modality in Modality:
                keep = np.asarray(streams.linear(modality)) < j
                if not keep.any():
                    continue
                np.testing.assert_allclose(
                    after.logits(modality).data[keep], before.logits(modality).data[keep], rtol=0, atol=1e-10)


### GRADIENT TESTS

class ZipperGradientTest(SimpleTestCase):
    def test_full_model_gradients(self):
        model = small_model(scale=0.3)
        objective = ZipperObjective(model)
        seq = InterleavedSequence.of(("B", [1, 5, 7]), ("A", [2, 3]), ("B", [4]), ("A", [9, 1]))

        def loss():
            return objective.loss(seq, train_mode=False)

        tensors = [
            ("token_embedding_a", model.tower_a.token_embedding),
            ("block_b_query", model.tower_b.blocks[0].attn.query.weight),
            ("input_proj_a", model.input_proj_a.layers[0].weight),
            ("cross_projection", model.a_from_b[0].key_projection.linear.weight),
            ("cross_attn_value", model.b_from_a[1].attn.value.weight),
            ("cross_ffn", model.a_from_b[1].ffn.up.weight),
            ("gate_attn", model.a_from_b[0].gate_attn),
            ("gate_ffn", model.b_from_a[1].gate_ffn),
        ]
        errors = check_gradients(loss, tensors, max_entries=6, rng=np.random.default_rng(3))
        for name, error in errors.items():
            self.assertLess(error, 1e-4, name)

    def test_every_parameter_of_the_mixed_task_loss(self):
        model = build_zipper(TEXT_16, SPEECH_16, SMALL, seed=0, dtype=np.float64)
        rng = np.random.default_rng(5)
        for p in model.parameters():
            if p.data.ndim == 2:
                p.data[...] = rng.normal(0.0, 0.3, size=p.shape)
        for block in model.a_from_b + model.b_from_a:
            block.gate_attn.data[...] = 0.3
            block.gate_ffn.data[...] = -0.4
        model.eval()
        objective = ZipperObjective(model)
        pair = Pair("g", "hi", tuple(encode_speech("hi")), "paired")
        asr, tts = make_example(pair, Task.ASR), make_example(pair, Task.TTS)

        def loss():
            return (objective.loss(asr, train_mode=False) + objective.loss(tts, train_mode=False)) * 0.5

        named = list(model.named_parameters())
        errors = check_gradients(loss, named, max_entries=4, rng=np.random.default_rng(3))
        self.assertEqual(set(errors), {name for name, _ in named})
        for name, error in errors.items():
            self.assertLess(error, 1e-4, name)

    def test_closed_gates_still_receive_gradient(self):
        model = small_model(gates=(0.0, 0.0), scale=0.3)
        objective = ZipperObjective(model)
        seq = InterleavedSequence.of(("B", [1, 5, 7]), ("A", [2, 3, 4]))
        backward(objective.loss(seq, train_mode=False))
        self.assertGreater(np.abs(model.a_from_b[0].gate_attn.grad).max(), 0.0)
