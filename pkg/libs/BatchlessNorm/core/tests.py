import unittest

import numpy as np

from BatchlessNorm.core import ops
from BatchlessNorm.core.gradcheck import gradient_check, numerical_gradient, relative_error
from BatchlessNorm.core.tape import Tape, Tensor, active_tape, backward, parameter
from BatchlessNorm.utils.errors import ContractError, DimensionError, DomainError, LabelIndexError, NonFiniteError

TOLERANCE = 1e-6


class GradientCheckTests(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)

    def assertGradientsMatch(self, fn, arrays):
        for error in gradient_check(fn, arrays):
            self.assertLess(error, TOLERANCE)

    def weighted(self, shape):
        weights = self.rng.normal(size=shape)
        return lambda t: ops.sum_all(ops.mul(t, weights))

    def test_binary_arithmetic_with_broadcasting(self):
        a = self.rng.normal(size=(4, 3))
        b = self.rng.normal(size=(1, 3))
        c = self.rng.uniform(0.5, 2.0, size=(3,))
        w = self.weighted((4, 3))
        self.assertGradientsMatch(lambda x, y: w(ops.add(x, y)), [a, b])
        self.assertGradientsMatch(lambda x, y: w(ops.sub(x, y)), [a, b])
        self.assertGradientsMatch(lambda x, y: w(ops.mul(x, y)), [a, b])
        self.assertGradientsMatch(lambda x, y: w(ops.div(x, y)), [a, c])

    def test_unary_functions(self):
        positive = self.rng.uniform(0.5, 2.0, size=(3, 4))
        signed = self.rng.choice([-1.0, 1.0], size=(3, 4)) * self.rng.uniform(0.2, 1.5, size=(3, 4))
        w = self.weighted((3, 4))
        for fn in (ops.exp, ops.log, ops.sqrt, ops.square):
            self.assertGradientsMatch(lambda x, fn=fn: w(fn(x)), [positive])
        self.assertGradientsMatch(lambda x: w(ops.absolute(x)), [signed])
        self.assertGradientsMatch(lambda x: w(ops.isrlu(x, 4.0)), [signed])
        self.assertGradientsMatch(lambda x: w(ops.leaky_relu(x, 0.3)), [signed])
        self.assertGradientsMatch(lambda x: w(ops.scale(x, -2.5)), [signed])

    def test_elementwise_dispatch(self):
        x = self.rng.uniform(0.5, 2.0, size=(2, 3))
        np.testing.assert_allclose(ops.elementwise(x, "log").data, np.log(x))
        np.testing.assert_allclose(ops.elementwise(x, "mul", 3.0).data, x * 3.0)
        np.testing.assert_allclose(ops.elementwise(x, "scale", factor=0.5).data, x * 0.5)
        with self.assertRaises(ContractError):
            ops.elementwise(x, "add")
        with self.assertRaises(ContractError):
            ops.elementwise(x, "tanh")

    def test_reductions_and_reshape(self):
        x = self.rng.normal(size=(2, 3, 4))
        w_keep = self.weighted((2, 1, 4))
        w_flat = self.weighted((6, 4))
        self.assertGradientsMatch(lambda t: w_keep(ops.reduce(t, "mean", (1,), keepdims=True)), [x])
        self.assertGradientsMatch(lambda t: ops.sum_all(ops.square(ops.reduce(t, "sum", (0, 2)))), [x])
        self.assertGradientsMatch(lambda t: w_flat(ops.reshape(t, (-1, 4))), [x])
        t = Tensor(x)
        self.assertIs(ops.reduce(t, "sum", ()), t)

    def test_matmul_conv_and_pool(self):
        a = self.rng.normal(size=(4, 3))
        b = self.rng.normal(size=(3, 5))
        self.assertGradientsMatch(lambda x, y: self.weighted((4, 5))(ops.matmul(x, y)), [a, b])

        images = self.rng.normal(size=(2, 2, 5, 5))
        kernel = self.rng.normal(size=(3, 2, 3, 3))
        w_conv = self.weighted((2, 3, 5, 5))
        self.assertGradientsMatch(lambda x, k: w_conv(ops.conv2d(x, k)), [images, kernel])

        pooled_input = self.rng.normal(size=(2, 3, 5, 4))
        w_pool = self.weighted((2, 3, 2, 2))
        self.assertGradientsMatch(lambda x: w_pool(ops.maxpool2d(x)), [pooled_input])

    def test_softmax_and_cross_entropy(self):
        logits = self.rng.normal(size=(5, 3))
        labels = np.array([0, 2, 1, 1, 0])
        w = self.weighted((5, 3))
        self.assertGradientsMatch(lambda t: w(ops.softmax(t)), [logits])
        self.assertGradientsMatch(lambda t: ops.softmax_cross_entropy(t, labels), [logits])

    def test_numerical_gradient_of_quadratic(self):
        x = np.array([1.0, -2.0, 0.5])
        numeric = numerical_gradient(lambda v: float(np.sum(v * v)), x)
        np.testing.assert_allclose(numeric, 2.0 * x, rtol=1e-8)
        self.assertEqual(relative_error(np.zeros(3), np.zeros(3)), 0.0)


class OpSemanticsTests(unittest.TestCase):
    def test_conv2d_same_padding_matches_direct_sum(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 1, 4, 4))
        k = rng.normal(size=(1, 1, 3, 3))
        out = ops.conv2d(x, k).data
        padded = np.pad(x[0, 0], 1)
        expected = np.array([[np.sum(padded[i : i + 3, j : j + 3] * k[0, 0]) for j in range(4)] for i in range(4)])
        np.testing.assert_allclose(out[0, 0], expected)

    def test_maxpool_drops_odd_edges_and_routes_ties_to_first(self):
        x = np.zeros((1, 1, 3, 3))
        with Tape() as tape:
            t = tape.parameter(x, "x")
            out = ops.maxpool2d(t)
            loss = ops.sum_all(out)
        self.assertEqual(out.shape, (1, 1, 1, 1))
        grad = tape.backward(loss).get_by_name("x")
        expected = np.zeros((1, 1, 3, 3))
        expected[0, 0, 0, 0] = 1.0
        np.testing.assert_array_equal(grad, expected)

    def test_domain_and_shape_errors(self):
        with self.assertRaises(DomainError):
            ops.log(np.array([1.0, 0.0]))
        with self.assertRaises(DomainError):
            ops.div(1.0, np.array([0.0]))
        with self.assertRaises(DomainError):
            ops.sqrt(np.array([-1.0]))
        with self.assertRaises(DimensionError):
            ops.matmul(np.ones((2, 3)), np.ones((2, 3)))
        with self.assertRaises(DimensionError):
            ops.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))
        with self.assertRaises(DimensionError):
            ops.conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 2, 2)))
        with self.assertRaises(DimensionError):
            ops.maxpool2d(np.ones((1, 1, 1, 4)))
        with self.assertRaises(DimensionError):
            ops.reduce(np.ones((2, 2)), "sum", (2,))
        with self.assertRaises(LabelIndexError):
            ops.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    def test_non_finite_results_raise(self):
        with Tape() as tape:
            x = tape.parameter(np.array([1000.0]), "x")
            with self.assertRaises(NonFiniteError):
                ops.exp(x)
        with Tape() as tape:
            with self.assertRaises(NonFiniteError):
                tape.parameter(np.array([np.nan]), "bad")


class TapeTests(unittest.TestCase):
    def test_parameter_without_tape_is_constant(self):
        self.assertIsNone(active_tape())
        t = parameter(np.ones(3), "w")
        self.assertTrue(t.is_constant)
        self.assertTrue(ops.add(t, 1.0).is_constant)

    def test_parameter_is_cached_per_name(self):
        with Tape() as tape:
            a = parameter(np.ones(2), "w")
            b = parameter(np.ones(2), "w")
            loss = ops.sum_all(ops.add(a, b))
        self.assertIs(a, b)
        np.testing.assert_array_equal(backward(loss).by_name()["w"], np.full(2, 2.0))
        self.assertEqual(tape.parameters, {a.node_id: "w"})

    def test_nested_tapes_restore_outer(self):
        with Tape() as outer:
            with Tape() as inner:
                self.assertIs(active_tape(), inner)
            self.assertIs(active_tape(), outer)
        self.assertIsNone(active_tape())

    def test_stop_gradient_blocks_flow_but_keeps_value(self):
        x = np.array([1.5, -2.0])
        with Tape() as tape:
            p = tape.parameter(x, "p")
            blocked = ops.stop_gradient(p)
            loss = ops.sum_all(ops.add(ops.square(blocked), p))
        np.testing.assert_array_equal(blocked.data, x)
        np.testing.assert_array_equal(tape.backward(loss).get_by_name("p"), np.ones(2))

    def test_stop_gradient_inside_mixed_expression(self):
        # d/dp [p * sg(p)] = sg(p)
        x = np.array([3.0, -0.5])
        with Tape() as tape:
            p = tape.parameter(x, "p")
            loss = ops.sum_all(ops.mul(p, ops.stop_gradient(p)))
        np.testing.assert_allclose(tape.backward(loss).get_by_name("p"), x)

    def test_unreachable_parameters_get_zero_gradients(self):
        with Tape() as tape:
            used = tape.parameter(np.ones(2), "used")
            tape.parameter(np.ones((2, 2)), "unused")
            loss = ops.sum_all(used)
        grads = tape.backward(loss).by_name()
        np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))

    def test_backward_contract_errors(self):
        with self.assertRaises(ContractError):
            backward(Tensor(np.array(1.0)))
        with Tape() as tape:
            p = tape.parameter(np.ones(2), "p")
            with self.assertRaises(ContractError):
                tape.backward(ops.scale(p, 2.0))
        with Tape() as first:
            a = first.parameter(np.ones(2), "a")
        with Tape() as second:
            b = second.parameter(np.ones(2), "b")
            with self.assertRaises(ContractError):
                ops.add(a, b)

    def test_repeated_sweeps_are_bit_identical(self):
        rng = np.random.default_rng(5)
        images = rng.normal(size=(2, 3, 6, 6))
        kernel = rng.normal(size=(4, 3, 3, 3))
        weight = rng.normal(size=(36, 5))
        labels = np.array([1, 4])

        def record():
            with Tape() as tape:
                k = tape.parameter(kernel, "k")
                w = tape.parameter(weight, "w")
                h = ops.maxpool2d(ops.isrlu(ops.conv2d(Tensor(images), k), 4.0))
                loss = ops.softmax_cross_entropy(ops.matmul(ops.reshape(h, (2, -1)), w), labels)
            return tape, loss

        tape, loss = record()
        first = tape.backward(loss).by_name()
        again = tape.backward(loss).by_name()
        other_tape, other_loss = record()
        rerecorded = other_tape.backward(other_loss).by_name()
        self.assertEqual(loss.item(), other_loss.item())
        for name in ("k", "w"):
            np.testing.assert_array_equal(again[name], first[name])
            np.testing.assert_array_equal(rerecorded[name], first[name])

    def test_operator_overloads_record_nodes(self):
        with Tape() as tape:
            p = tape.parameter(np.array([2.0]), "p")
            loss = ops.sum_all((p * 3.0 - 1.0) / 2.0 + (-p))
        self.assertAlmostEqual(tape.backward(loss).get_by_name("p")[0], 0.5)


if __name__ == "__main__":
    unittest.main()
