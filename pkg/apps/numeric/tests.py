import itertools

import numpy as np
from django.test import SimpleTestCase

from .gradcheck import check_gradients, relative_error
from .module import Linear, Parameter
from .optim import Adam, Adafactor, clip_grad_norm, global_grad_norm
from .seeding import substream
from .tensor import (
    Graph,
    GraphError,
    ShapeError,
    Tensor,
    add,
    backward,
    cross_entropy,
    dropout,
    embedding,
    layer_norm,
    matmul,
    multiply,
    no_grad,
    relu,
    scaled_dot_product_attention,
    softmax_rows,
    tanh,
    total,
    transpose,
)


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


### PRIMITIVE TESTS

class MatmulTest(SimpleTestCase):
    def test_identity(self):
        a = Tensor([[1, 0], [0, 1]])
        b = Tensor([[3, 4], [5, 6]])
        np.testing.assert_array_equal(matmul(a, b).data, [[3, 4], [5, 6]])

    def test_hand_computed(self):
        out = matmul(Tensor([[1, 2]]), Tensor([[3], [4]]))
        self.assertEqual(out.data.tolist(), [[11]])

    def test_shape_mismatch_names_both_shapes(self):
        with self.assertRaises(ShapeError) as ctx:
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        self.assertIn("(2, 3) x (2, 3)", str(ctx.exception))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        errors = check_gradients(lambda: total(matmul(a, b) * matmul(a, b)), [("a", a), ("b", b)])
        for name, err in errors.items():
            self.assertLess(err, 1e-6, name)


class SoftmaxTest(SimpleTestCase):
    def test_uniform_row(self):
        out = softmax_rows(Tensor([[0.0, 0.0, 0.0]], dtype=np.float64))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]])

    def test_large_values_do_not_overflow(self):
        out = softmax_rows(Tensor([[1000.0, 0.0]], dtype=np.float64))
        self.assertTrue(np.all(np.isfinite(out.data)))
        self.assertAlmostEqual(out.data[0, 0], 1.0)
        self.assertAlmostEqual(out.data[0, 1], 0.0)

    def test_matches_high_precision_reference(self):
        out = softmax_rows(Tensor([[1.0, 2.0, 3.0]], dtype=np.float64)).data[0]
        # exp(k) / (e + e^2 + e^3), evaluated independently
        expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219]
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.uniform(-1e4, 1e4, size=(20, 9)))
        np.testing.assert_allclose(softmax_rows(x).data.sum(axis=-1), 1.0, atol=1e-6)

    def test_nan_propagates(self):
        out = softmax_rows(Tensor([[np.nan, 0.0]], dtype=np.float64))
        self.assertTrue(np.isnan(out.data).any())

    def test_gradient(self):
        rng = np.random.default_rng(2)
        x, w = leaf(rng, 4, 5), Tensor(rng.normal(size=(4, 5)), dtype=np.float64)
        errors = check_gradients(lambda: total(softmax_rows(x) * w), [("x", x)])
        self.assertLess(errors["x"], 1e-6)


class CrossEntropyTest(SimpleTestCase):
    def test_confident_correct_prediction(self):
        logits = np.zeros((3, 4))
        targets = [1, 3, 0]
        logits[np.arange(3), targets] = 1e6
        loss = cross_entropy(Tensor(logits, dtype=np.float64), targets)
        self.assertAlmostEqual(loss.item(), 0.0)

    def test_uniform_logits(self):
        loss = cross_entropy(Tensor(np.zeros((5, 4)), dtype=np.float64), [0, 1, 2, 3, 0])
        self.assertAlmostEqual(loss.item(), np.log(4))

    def test_all_masked_is_an_error(self):
        with self.assertRaises(ValueError):
            cross_entropy(Tensor(np.zeros((2, 4))), [0, 1], ignore_mask=[True, True])

    def test_masked_rows_receive_no_gradient(self):
        rng = np.random.default_rng(3)
        logits = leaf(rng, 4, 6)
        backward(cross_entropy(logits, [0, 1, 2, 3], ignore_mask=[False, True, False, True]))
        np.testing.assert_array_equal(logits.grad[[1, 3]], 0)
        self.assertTrue(np.any(logits.grad[[0, 2]] != 0))

    def test_gradient(self):
        rng = np.random.default_rng(4)
        logits = leaf(rng, 5, 7)
        targets = rng.integers(0, 7, size=5)
        mask = [False, True, False, False, False]
        errors = check_gradients(lambda: cross_entropy(logits, targets, mask), [("logits", logits)])
        self.assertLess(errors["logits"], 1e-6)


class BackwardTest(SimpleTestCase):
    def test_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True, dtype=np.float64)
        backward(total(x))
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
        backward(total(x * x))
        np.testing.assert_array_equal(x.grad, [2, 4])

    def test_repeated_calls_accumulate(self):
        x = Tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
        loss = total(x * x)
        backward(loss)
        backward(loss)
        np.testing.assert_array_equal(x.grad, [4, 8])
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, [0, 0])

    def test_non_scalar_is_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with self.assertRaises(GraphError):
            backward(x * 2.0)

    def test_graph_is_topological(self):
        rng = np.random.default_rng(5)
        a, b = leaf(rng, 2, 2), leaf(rng, 2, 2)
        shared = matmul(a, b)
        loss = total(add(shared, tanh(shared)))
        graph = Graph(loss)
        position = {id(n): i for i, n in enumerate(graph.nodes)}
        for node in graph.nodes:
            for parent in node._parents:
                if parent.requires_grad:
                    self.assertLess(position[id(parent)], position[id(node)])
        self.assertEqual(len(position), len(graph.nodes))

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 3.0
        self.assertFalse(y.requires_grad)


class PrimitiveGradientTest(SimpleTestCase):
    """Every remaining differentiable primitive against central differences."""

    def setUp(self):
        self.rng = np.random.default_rng(6)

    def assertGradientsClose(self, loss_fn, tensors):
        for name, err in check_gradients(loss_fn, tensors).items():
            self.assertLess(err, 1e-6, name)

    def test_add_and_multiply_with_broadcast(self):
        x, b, s = leaf(self.rng, 3, 4), leaf(self.rng, 4), leaf(self.rng, 1)
        self.assertGradientsClose(
            lambda: total(multiply(add(x, b), s) * x), [("x", x), ("b", b), ("s", s)]
        )

    def test_relu(self):
        x = leaf(self.rng, 4, 3)
        w = Tensor(self.rng.normal(size=(4, 3)), dtype=np.float64)
        self.assertGradientsClose(lambda: total(relu(x) * w), [("x", x)])

    def test_tanh(self):
        x = leaf(self.rng, 4, 3)
        self.assertGradientsClose(lambda: total(tanh(x) * x), [("x", x)])

    def test_layer_norm(self):
        x, gain, bias = leaf(self.rng, 3, 5), leaf(self.rng, 5), leaf(self.rng, 5)
        w = Tensor(self.rng.normal(size=(3, 5)), dtype=np.float64)
        self.assertGradientsClose(
            lambda: total(layer_norm(x, gain, bias) * w), [("x", x), ("gain", gain), ("bias", bias)]
        )

    def test_embedding(self):
        table = leaf(self.rng, 6, 3)
        w = Tensor(self.rng.normal(size=(4, 3)), dtype=np.float64)
        self.assertGradientsClose(lambda: total(embedding(table, [1, 4, 1, 0]) * w), [("table", table)])

    def test_transpose(self):
        x = leaf(self.rng, 2, 3)
        w = Tensor(self.rng.normal(size=(3, 2)), dtype=np.float64)
        self.assertGradientsClose(lambda: total(transpose(x) * w), [("x", x)])

    def test_attention_with_mask(self):
        q, k, v = leaf(self.rng, 4, 6), leaf(self.rng, 3, 6), leaf(self.rng, 3, 6)
        allowed = np.array([[1, 0, 0], [1, 1, 0], [0, 0, 0], [1, 1, 1]], dtype=bool)
        w = Tensor(self.rng.normal(size=(4, 6)), dtype=np.float64)
        self.assertGradientsClose(
            lambda: total(scaled_dot_product_attention(q, k, v, allowed, 2) * w),
            [("q", q), ("k", k), ("v", v)],
        )

    def test_fully_masked_row_outputs_zeros(self):
        q, k, v = leaf(self.rng, 2, 4), leaf(self.rng, 2, 4), leaf(self.rng, 2, 4)
        out = scaled_dot_product_attention(q, k, v, np.zeros((2, 2), dtype=bool), 1)
        np.testing.assert_array_equal(out.data, 0)
        self.assertFalse(np.isnan(out.data).any())

    def test_dropout(self):
        x = leaf(self.rng, 5, 5)
        rng_seed = 11

        def loss():
            return total(dropout(x, 0.3, np.random.default_rng(rng_seed), training=True) * x)

        self.assertGradientsClose(loss, [("x", x)])

    def test_dropout_is_identity_in_eval(self):
        x = Tensor(np.ones((3, 3)))
        self.assertIs(dropout(x, 0.5, np.random.default_rng(0), training=False), x)


class RelativeErrorTest(SimpleTestCase):
    def test_scaled_by_both_norms(self):
        self.assertAlmostEqual(relative_error([1.0, 0.0], [1.1, 0.0]), 0.1 / 2.1)

    def test_round_off_on_a_vanishing_gradient_passes(self):
        self.assertLess(relative_error(np.zeros(4), [3e-10, -2e-10, 0.0, 1e-10]), 1e-4)
        self.assertEqual(relative_error(np.zeros(3), np.zeros(3)), 0.0)

    def test_small_real_mismatch_is_caught(self):
        self.assertGreater(relative_error([1e-5], [0.0]), 1e-4)


class DeterminismTest(SimpleTestCase):
    def test_same_seed_same_bits(self):
        def run():
            rng = substream(7, "init")
            layer = Linear(4, 3, rng)
            x = Tensor(rng.normal(size=(2, 4)))
            loss = total(tanh(layer(x)))
            backward(loss)
            return loss.data.tobytes(), layer.weight.grad.tobytes()

        self.assertEqual(run(), run())


### OPTIMIZER TESTS

class ClipGradNormTest(SimpleTestCase):
    def test_norm_ten_is_scaled_by_a_tenth(self):
        p = Parameter(np.zeros(2), dtype=np.float64)
        p.grad = np.array([6.0, 8.0])
        norm = clip_grad_norm([p], 1.0)
        self.assertAlmostEqual(norm, 10.0)
        np.testing.assert_allclose(p.grad, [0.6, 0.8])

    def test_post_clip_norm_bounded(self):
        rng = np.random.default_rng(8)
        params = [Parameter(np.zeros((3, 3)), dtype=np.float64) for _ in range(3)]
        for p in params:
            p.grad = rng.normal(scale=50, size=(3, 3))
        clip_grad_norm(params, 1.0)
        self.assertLessEqual(global_grad_norm(params), 1.0 + 1e-6)

    def test_small_gradients_untouched(self):
        p = Parameter(np.zeros(2), dtype=np.float64)
        p.grad = np.array([0.3, 0.4])
        clip_grad_norm([p], 1.0)
        np.testing.assert_array_equal(p.grad, [0.3, 0.4])


class OptimizerTest(SimpleTestCase):
    def test_zero_learning_rate_leaves_parameters(self):
        p = Parameter(np.array([1.5, -2.0]))
        before = p.data.copy()
        opt = Adam([("p", p)], 0.0)
        p.grad = np.array([1.0, 1.0], dtype=np.float32)
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_adam_first_step_moves_by_learning_rate(self):
        p = Parameter(np.array([0.0, 0.0]), dtype=np.float64)
        opt = Adam([("p", p)], 0.1)
        p.grad = np.array([2.0, -3.0])
        opt.step()
        np.testing.assert_allclose(p.data, [-0.1, 0.1], rtol=1e-6)

    def test_state_round_trip(self):
        p = Parameter(np.ones(3), dtype=np.float64)
        opt = Adam([("p", p)], 0.01)
        p.grad = np.array([0.5, -0.5, 1.0])
        opt.step()
        q = Parameter(np.ones(3), dtype=np.float64)
        other = Adam([("p", q)], 0.5)
        other.load_state_dict(opt.state_dict())
        self.assertEqual(other.step_count, 1)
        self.assertEqual(other.learning_rate, 0.01)
        np.testing.assert_array_equal(other.slots["p"]["m"], opt.slots["p"]["m"])

    def test_adafactor_descends_on_quadratic(self):
        rng = np.random.default_rng(9)
        w = Parameter(rng.normal(size=(4, 3)), dtype=np.float64)
        opt = Adafactor([("w", w)], 0.05)
        start = float(np.sum(w.data ** 2))
        for _ in itertools.repeat(None, 50):
            w.grad = 2 * w.data
            opt.step()
        self.assertLess(float(np.sum(w.data ** 2)), start)
