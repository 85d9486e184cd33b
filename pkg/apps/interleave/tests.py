import itertools

import numpy as np
from django.test import SimpleTestCase

from .sequences import (
    PAD_INDEX,
    InterleavedSequence,
    Modality,
    Segment,
    SequenceError,
    build_cross_mask,
    build_self_mask,
    build_streams,
    flatten,
    reassemble,
)


def random_sequence(rng, n_segments):
    modality = Modality(rng.choice(["A", "B"]))
    pairs = []
    for _ in range(n_segments):
        length = int(rng.integers(1, 5))
        pairs.append((modality, rng.integers(0, 50, size=length).tolist()))
        modality = modality.other
    return InterleavedSequence.of(*pairs)


### STREAM TESTS

class BuildStreamsTest(SimpleTestCase):
    def test_single_modality(self):
        streams = build_streams(InterleavedSequence.of(("A", [24, 25])))
        self.assertEqual(streams.stream_a, (24, 25))
        self.assertEqual(streams.stream_b, ())
        self.assertEqual(streams.lin_a, (0, 1))

    def test_hand_traced_layout(self):
        stream_a, stream_b, lin_a, lin_b = build_streams(InterleavedSequence.of(("B", [5, 6]), ("A", [7])))
        self.assertEqual(stream_b, (5, 6))
        self.assertEqual(lin_b, (0, 1))
        self.assertEqual(stream_a, (7,))
        self.assertEqual(lin_a, (2,))

    def test_empty_segment_is_an_error(self):
        with self.assertRaises(SequenceError):
            Segment(Modality.A, ())

    def test_no_segments_is_an_error(self):
        with self.assertRaises(SequenceError):
            build_streams(InterleavedSequence())

    def test_reassembly_fuzz(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            seq = random_sequence(rng, 4)
            streams = build_streams(seq)
            self.assertEqual(len(streams.stream_a) + len(streams.stream_b), len(seq))
            self.assertTrue(all(b > a for a, b in zip(streams.lin_a, streams.lin_a[1:])))
            self.assertEqual(reassemble(*streams), seq)

    def test_flatten_shifts_modality_b(self):
        seq = InterleavedSequence.of(("B", [0, 3]), ("A", [1, 2]))
        self.assertEqual(flatten(seq, 31), [31, 34, 1, 2])


### MASK TESTS

class CrossMaskTest(SimpleTestCase):
    def setUp(self):
        # speech then text, the ASR layout
        self.streams = build_streams(InterleavedSequence.of(("B", [1, 2, 3]), ("A", [4, 5])))

    def test_text_queries_see_all_speech(self):
        mask = build_cross_mask(self.streams.lin_a, self.streams.lin_b)
        self.assertTrue(mask.allowed.all())
        self.assertEqual(mask.shape, (2, 3))

    def test_speech_queries_see_no_text(self):
        mask = build_cross_mask(self.streams.lin_b, self.streams.lin_a)
        self.assertFalse(mask.allowed.any())

    def test_three_segment_layout_matches_brute_force(self):
        streams = build_streams(InterleavedSequence.of(("A", [1, 2]), ("B", [3, 4]), ("A", [5])))
        for query, key in [(streams.lin_a, streams.lin_b), (streams.lin_b, streams.lin_a)]:
            mask = build_cross_mask(query, key)
            for q, k in itertools.product(range(len(query)), range(len(key))):
                self.assertEqual(mask.allowed[q, k], key[k] < query[q])

    def test_same_index_is_never_allowed(self):
        mask = build_cross_mask([3], [3])
        self.assertFalse(mask.allowed[0, 0])

    def test_non_monotone_is_an_error(self):
        with self.assertRaises(SequenceError):
            build_cross_mask([2, 1], [0])

    def test_padding_keys_are_never_attended(self):
        mask = build_cross_mask([5, 6], [0, 1, PAD_INDEX])
        self.assertFalse(mask.allowed[:, 2].any())
        self.assertTrue(mask.allowed[:, :2].all())

    def test_padding_before_real_positions_is_an_error(self):
        with self.assertRaises(SequenceError):
            build_cross_mask([PAD_INDEX, 1], [0])


class SelfMaskTest(SimpleTestCase):
    def test_single_position(self):
        self.assertEqual(build_self_mask(1).tolist(), [[True]])

    def test_row_sums(self):
        self.assertEqual(build_self_mask(3).sum(axis=1).tolist(), [1, 2, 3])

    def test_definition(self):
        for length in range(1, 12):
            mask = build_self_mask(length)
            for i, j in itertools.product(range(length), repeat=2):
                self.assertEqual(mask[i, j], j <= i)

    def test_zero_length_is_an_error(self):
        with self.assertRaises(SequenceError):
            build_self_mask(0)
