import json
import tempfile
import unittest
from pathlib import Path

import numpy as np

from BatchlessNorm.core import ops
from BatchlessNorm.core.gradcheck import numerical_gradient, relative_error
from BatchlessNorm.core.tape import Tape, Tensor
from BatchlessNorm.nn.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from BatchlessNorm.nn.network import LayerSpec, Model, build_cifar_cnn, build_spiral_mlp, dropout, total_loss
from BatchlessNorm.nn.normalization import (
    BatchNormState,
    NormLayerState,
    Phase,
    Sharing,
    SigmaMode,
    batchless_forward,
    batchnorm_forward,
    batchrenorm_forward,
    exact_nll,
    gauged_losses,
    param_from_sigma,
    renorm_correction,
    sigma_from_param,
)
from BatchlessNorm.nn.optimizers import adam_step, amsgrad_step, apply_weight_decay, make_optimizer
from BatchlessNorm.nn.statistics import (
    finalize_population_stats,
    init_from_sample,
    migrate_from_batchnorm,
    migrate_from_plain,
    sample_gauged_metrics,
)
from BatchlessNorm.utils.errors import (
    ConfigError,
    ContractError,
    DegenerateParameterError,
    DegenerateSampleError,
    DegenerateSigmaError,
    DimensionError,
    InsufficientBatchError,
    MalformedCheckpointError,
)

SPIRAL_PARAMETERS = 2 * 50 + 50 + 50 * 40 + 40 + 40 * 40 + 40 + 40 * 3 + 3


def scalar_state(mu, sigma, gamma=1.0, beta=0.0, lam=0.1, mode=SigmaMode.LOG):
    return NormLayerState(
        name="n",
        mu=np.array([mu], dtype=float),
        sigma_param=param_from_sigma(np.array([sigma], dtype=float), mode),
        gamma=np.array([gamma], dtype=float),
        beta=np.array([beta], dtype=float),
        mode=mode,
        lam=lam,
    )


def standardized(rng, n, means, stds):
    """Sample whose per-feature mean and biased std are exactly ``means`` and ``stds``."""
    x = rng.normal(size=(n, len(means)))
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    return x * np.asarray(stds) + np.asarray(means)


class SigmaParameterTests(unittest.TestCase):
    def test_modes(self):
        self.assertAlmostEqual(float(sigma_from_param(np.array([0.0]), SigmaMode.LOG)[0]), 1.0)
        self.assertAlmostEqual(float(sigma_from_param(np.array([2.0]), SigmaMode.INVERSE)[0]), 0.5)
        self.assertAlmostEqual(float(sigma_from_param(np.array([-3.0]), SigmaMode.DIRECT)[0]), -3.0)
        for mode in SigmaMode:
            sigma = np.array([0.25, 1.0, 7.5])
            np.testing.assert_allclose(sigma_from_param(param_from_sigma(sigma, mode), mode), sigma)

    def test_inverse_zero_is_degenerate(self):
        with self.assertRaises(DegenerateParameterError):
            sigma_from_param(np.array([1.0, 0.0]), SigmaMode.INVERSE)

    def test_sigma_below_floor_is_degenerate(self):
        state = scalar_state(0.0, 1.0, mode=SigmaMode.DIRECT)
        state.sigma_param[...] = 1e-13
        with self.assertRaises(DegenerateSigmaError):
            batchless_forward(np.ones((2, 1)), state)


class BatchlessForwardTests(unittest.TestCase):
    def test_output_examples(self):
        state = NormLayerState.default("n", 3)
        out = batchless_forward(np.zeros((4, 3)), state).a_out.data
        np.testing.assert_array_equal(out, np.zeros((4, 3)))

        state = scalar_state(1.0, 2.0, gamma=4.0, beta=-1.0)
        self.assertAlmostEqual(float(batchless_forward(np.array([[3.0]]), state).a_out.data[0, 0]), 3.0)

    def test_gauged_loss_examples(self):
        state = scalar_state(1.0, 2.0, lam=0.1)
        self.assertAlmostEqual(float(gauged_losses(np.array([[1.0]]), state)[0, 0]), -0.05)
        self.assertAlmostEqual(float(gauged_losses(np.array([[3.0]]), state)[0, 0]), 0.0)
        result = batchless_forward(np.array([[1.0]]), state)
        self.assertAlmostEqual(result.gauged_metric, 0.0025)

    def test_nll_gradients_match_analytic_values(self):
        state = scalar_state(0.0, 1.0, lam=1.0, mode=SigmaMode.DIRECT)
        with Tape() as tape:
            result = batchless_forward(np.array([[2.0]]), state)
        grads = tape.backward(result.nll_loss).by_name()
        self.assertAlmostEqual(float(grads["n.mu"][0]), -2.0)
        self.assertAlmostEqual(float(grads["n.sigma"][0]), -3.0)
        self.assertEqual(float(grads["n.gamma"][0]), 0.0)

    def test_stop_gradient_placement(self):
        rng = np.random.default_rng(3)
        for mode in SigmaMode:
            state = NormLayerState(
                "n",
                rng.normal(size=4),
                param_from_sigma(rng.uniform(0.5, 2.0, size=4), mode),
                rng.normal(size=4),
                rng.normal(size=4),
                mode=mode,
                lam=0.3,
            )
            weights = rng.normal(size=(6, 4))
            with Tape() as tape:
                a_in = tape.parameter(rng.normal(size=(6, 4)), "a_in")
                result = batchless_forward(a_in, state)
                downstream = ops.sum_all(ops.mul(result.a_out, weights))
            nll_grads = tape.backward(result.nll_loss).by_name()
            out_grads = tape.backward(downstream).by_name()
            np.testing.assert_array_equal(nll_grads["a_in"], np.zeros((6, 4)))
            np.testing.assert_array_equal(out_grads["n.mu"], np.zeros(4))
            np.testing.assert_array_equal(out_grads["n.sigma"], np.zeros(4))
            self.assertTrue(np.any(out_grads["a_in"] != 0.0))
            self.assertTrue(np.any(nll_grads["n.mu"] != 0.0))

    def test_gauge_property(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            mu, sigma, lam = rng.normal(0, 3), rng.uniform(0.1, 5.0), rng.uniform(0.01, 1.0)
            state = scalar_state(mu, sigma, lam=lam)
            draws = rng.normal(mu, sigma, size=(100_000, 1))
            self.assertLessEqual(abs(float(gauged_losses(draws, state).mean())), 0.02 * lam)

    def test_exact_nll_adds_constant(self):
        state = scalar_state(0.0, 1.0, lam=1.0)
        self.assertAlmostEqual(exact_nll(np.array([[0.0]]), state), 0.5 * np.log(2 * np.pi))

    def test_per_channel_layout(self):
        state = NormLayerState.default("c", 3)
        state.sharing = Sharing.PER_CHANNEL
        state.mu[...] = [1.0, 2.0, 3.0]
        x = np.broadcast_to(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1), (2, 3, 4, 4))
        np.testing.assert_allclose(batchless_forward(x, state).a_out.data, np.zeros((2, 3, 4, 4)))
        with self.assertRaises(DimensionError):
            batchless_forward(np.zeros((2, 4, 4, 4)), state)

    def test_ml_recovery_in_every_mode(self):
        rng = np.random.default_rng(5)
        samples = rng.normal(2.0, 3.0, size=(5000, 1))
        for mode in SigmaMode:
            state = NormLayerState.default("n", 1, mode=mode, lam=1.0)
            params = {"n.mu": state.mu, "n.sigma": state.sigma_param}
            for lr, steps in ((0.01, 1500), (0.001, 1000), (0.0001, 500)):
                optimizer = make_optimizer("adam", lr)
                for _ in range(steps):
                    with Tape() as tape:
                        result = batchless_forward(samples, state)
                    adam_step(params, tape.backward(result.nll_loss).by_name(), optimizer)
            self.assertLessEqual(abs(float(state.mu[0]) - samples.mean()), 0.01, mode)
            self.assertLessEqual(abs(float(state.sigma()[0]) - samples.std()), 0.03, mode)


class BatchNormTests(unittest.TestCase):
    def test_train_phase_examples(self):
        state = BatchNormState.default("bn", 1)
        out = batchnorm_forward(np.array([[-1.0], [1.0]]), state, Phase.TRAIN).data
        np.testing.assert_allclose(out[:, 0], [-1 / np.sqrt(1 + 1e-5), 1 / np.sqrt(1 + 1e-5)])

        state = BatchNormState.default("bn", 1)
        state.gamma[...] = 2.0
        state.beta[...] = 1.0
        x = np.array([[0.0], [2.0], [4.0]])
        expected = 2.0 * (x - 2.0) / np.sqrt(8.0 / 3.0 + 1e-5) + 1.0
        np.testing.assert_allclose(batchnorm_forward(x, state, "train").data, expected)
        np.testing.assert_allclose(state.moving_mu, [0.02])
        np.testing.assert_allclose(state.moving_var, [0.99 + 0.01 * 8.0 / 3.0])

    def test_constant_batch_gives_beta(self):
        state = BatchNormState.default("bn", 2)
        state.beta[...] = [0.5, -0.5]
        out = batchnorm_forward(np.full((4, 2), 7.0), state, "train").data
        np.testing.assert_allclose(out, np.tile([0.5, -0.5], (4, 1)))

    def test_single_value_batch_is_insufficient(self):
        state = BatchNormState.default("bn", 2)
        with self.assertRaises(InsufficientBatchError):
            batchnorm_forward(np.ones((1, 2)), state, "train")
        with self.assertRaises(InsufficientBatchError):
            batchrenorm_forward(np.ones((1, 2)), state, "train")

    def test_eval_prefers_population_stats(self):
        state = BatchNormState.default("bn", 1)
        x = np.array([[3.0]])
        np.testing.assert_allclose(batchnorm_forward(x, state, "eval").data, 3.0 / np.sqrt(1 + 1e-5))
        state.population_mu = np.array([1.0])
        state.population_var = np.array([4.0])
        np.testing.assert_allclose(batchnorm_forward(x, state, "eval").data, 2.0 / np.sqrt(4 + 1e-5))

    def test_renorm_with_tight_clips_equals_batchnorm(self):
        rng = np.random.default_rng(2)
        x = rng.normal(1.0, 2.0, size=(8, 3))
        plain = BatchNormState.default("bn", 3)
        renorm = BatchNormState.default("brn", 3, renorm=True, r_max=1.0, d_max=0.0)
        for state in (plain, renorm):
            state.moving_mu[...] = [0.3, -0.2, 1.0]
            state.moving_var[...] = [2.0, 0.5, 1.5]
        np.testing.assert_array_equal(
            batchrenorm_forward(x, renorm, "train").data, batchnorm_forward(x, plain, "train").data
        )

    def test_renorm_without_clips_uses_moving_stats(self):
        rng = np.random.default_rng(4)
        x = rng.normal(1.0, 2.0, size=(8, 3))
        state = BatchNormState.default("brn", 3, renorm=True, r_max=np.inf, d_max=np.inf)
        state.moving_mu[...] = [0.3, -0.2, 1.0]
        state.moving_var[...] = [2.0, 0.5, 1.5]
        expected = (x - state.moving_mu) / np.sqrt(state.moving_var + state.epsilon)
        np.testing.assert_allclose(batchrenorm_forward(x, state, "train").data, expected, rtol=0, atol=1e-12)

    def test_renorm_correction_clips(self):
        state = BatchNormState.default("brn", 1, renorm=True)
        r, d = renorm_correction(state, np.array([0.0]), np.array([100.0]))
        self.assertEqual(float(r[0]), 3.0)
        self.assertEqual(float(d[0]), 0.0)
        r, d = renorm_correction(state, np.array([-50.0]), np.array([1.0]))
        self.assertAlmostEqual(float(r[0]), 1.0)
        self.assertEqual(float(d[0]), -5.0)


class NetworkTests(unittest.TestCase):
    def test_spiral_parameter_counts(self):
        self.assertEqual(build_spiral_mlp("none", 0).num_parameters(), SPIRAL_PARAMETERS)
        self.assertEqual(SPIRAL_PARAMETERS, 3953)
        self.assertEqual(build_spiral_mlp("binlog", 0).num_parameters(), SPIRAL_PARAMETERS + 520)
        self.assertEqual(build_spiral_mlp("bn", 0).num_parameters(), SPIRAL_PARAMETERS + 260)

    def test_same_seed_same_weights(self):
        a, b = build_spiral_mlp("bininv", 7), build_spiral_mlp("bininv", 7)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])
        c = build_spiral_mlp("none", 7)
        np.testing.assert_array_equal(a.params["dense2.weight"], c.params["dense2.weight"])

    def test_init_width(self):
        full = build_spiral_mlp("none", 0, init_width="full").params["dense1.weight"]
        half = build_spiral_mlp("none", 0, init_width="half").params["dense1.weight"]
        w = np.sqrt(2.0 / 90.0)
        self.assertLessEqual(np.abs(full).max(), w / 2)
        self.assertLessEqual(np.abs(half).max(), w)
        np.testing.assert_allclose(half, 2.0 * full)
        np.testing.assert_array_equal(build_spiral_mlp("none", 0).params["dense0.bias"], np.zeros(50))

    def test_cifar_shapes(self):
        model = build_cifar_cnn("binlog", 0)
        result = model.forward(np.random.default_rng(0).random((2, 3, 32, 32)))
        self.assertEqual(result.logits.shape, (2, 10))
        self.assertEqual(len(result.nll_losses), 6)
        self.assertEqual(model.norm_states["norm0"].sharing.value, "per-channel")
        self.assertEqual(model.norm_states["norm3"].sharing.value, "per-feature")
        self.assertEqual(model.norm_states["norm_in"].units, 3)
        self.assertEqual(model.decay, {})
        with self.assertRaises(ConfigError):
            build_cifar_cnn("brn", 0)

    def test_dropout(self):
        x = Tensor(np.ones((100, 10)))
        self.assertIs(dropout(x, 0.5, "eval", None), x)
        with self.assertRaises(ContractError):
            dropout(x, 0.5, "train", None)
        with self.assertRaises(ConfigError):
            dropout(x, 1.0, "train", np.random.default_rng(0))
        out = dropout(x, 0.5, "train", np.random.default_rng(0)).data
        self.assertTrue(set(np.unique(out)) <= {0.0, 2.0})
        with self.assertRaises(DimensionError):
            dropout(x, 0.5, "train", None, mask=np.ones((1, 10)))

    def test_dropout_preserves_the_mean(self):
        out = dropout(Tensor(np.ones(1_000_000)), 0.25, "train", np.random.default_rng(3)).data
        self.assertLess(abs(out.mean() - 1.0), 0.005)

    def test_dropout_masks_replay_a_training_forward(self):
        model = build_spiral_mlp("binlog", 0)
        x = np.random.default_rng(1).normal(size=(6, 2))
        drawn = model.forward(x, "train", np.random.default_rng(4)).logits.data
        masks = model.dropout_masks(6, np.random.default_rng(4))
        shapes = {name: m.shape for name, m in masks.items()}
        self.assertEqual(shapes, {"drop0": (6, 50), "drop1": (6, 40), "drop2": (6, 40)})
        np.testing.assert_array_equal(model.forward(x, "train", None, masks).logits.data, drawn)
        self.assertEqual(build_spiral_mlp("none", 0, dropout_rate=0.0).dropout_masks(6, np.random.default_rng(4)), {})

    def test_sigma_modes_share_the_first_forward(self):
        x = np.random.default_rng(2).normal(size=(16, 2))
        results = [
            build_spiral_mlp(kind, 5).forward(x, "train", np.random.default_rng(8)) for kind in ("bin", "binlog", "bininv")
        ]
        for other in results[1:]:
            np.testing.assert_array_equal(other.logits.data, results[0].logits.data)
            self.assertEqual([n.item() for n in other.nll_losses], [n.item() for n in results[0].nll_losses])

    def test_total_loss_examples(self):
        logits = Tensor(np.zeros((4, 3)))
        breakdown = total_loss(logits, np.array([0, 1, 2, 0]), [])
        self.assertAlmostEqual(breakdown.task, np.log(3))
        self.assertLess(total_loss(Tensor(np.array([[10.0, -10.0]])), np.array([0]), []).task, 1e-8)
        decay = total_loss(logits, np.zeros(4, dtype=int), [], [(Tensor(np.full((10, 10), 2.0)), 1e-6)])
        self.assertAlmostEqual(decay.decay, 2e-4)

    def test_decay_skips_norm_parameters(self):
        model = build_spiral_mlp("binlog", 0)
        names = [weight for weight, _ in model.decay_terms()]
        self.assertEqual(len(names), 4)
        with self.assertRaises(ConfigError):
            Model(model.specs, (2,), 0, decay={"missing.weight": 1.0})

    def test_lambda_as_learning_rate(self):
        model = build_spiral_mlp("binlog", 0, lam=0.1, lambda_in_loss=False)
        multipliers = model.lr_multipliers()
        self.assertEqual(multipliers["norm2.sigma"], 0.1)
        self.assertEqual(len(multipliers), 6)
        self.assertEqual(model.norm_states["norm0"].loss_weight, 1.0)
        self.assertEqual(build_spiral_mlp("binlog", 0).lr_multipliers(), {})

    def test_layer_inputs_single_pass_matches_layer_input(self):
        model = build_spiral_mlp("bin", 1)
        x = np.random.default_rng(1).normal(size=(5, 2))
        indices = [model.layer_index("act0"), model.layer_index("dense2")]
        captured = model.layer_inputs(indices, x)
        for index in indices:
            np.testing.assert_array_equal(captured[index], model.layer_input(index, x))

    def assertEndToEndGradients(self, model, names):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(8, 2))
        y = rng.integers(0, 3, size=8)

        def loss_value():
            result = model.forward(x, "train")
            return total_loss(result.logits, y, result.nll_losses, model.decay_terms()).total

        with Tape() as tape:
            loss = loss_value()
        grads = tape.backward(loss).by_name()
        for name in names:
            original = model.params[name].copy()

            def f(v, name=name):
                model.params[name][...] = v
                return loss_value().item()

            numeric = numerical_gradient(f, original)
            model.params[name][...] = original
            self.assertLess(relative_error(grads[name], numeric), 1e-4, name)

    def test_end_to_end_gradients(self):
        self.assertEndToEndGradients(
            build_spiral_mlp("none", 0, dropout_rate=0.0), ["dense0.weight", "dense3.weight", "dense2.bias"]
        )
        self.assertEndToEndGradients(
            build_spiral_mlp("bn", 0, dropout_rate=0.0), ["dense0.weight", "norm1.gamma", "norm2.beta"]
        )
        # With lambda 0 the statistics term vanishes and the remaining loss sees mu, sigma only as constants.
        self.assertEndToEndGradients(
            build_spiral_mlp("binlog", 0, lam=0.0, dropout_rate=0.0), ["dense1.bias", "norm0.gamma", "norm2.beta"]
        )


class OptimizerTests(unittest.TestCase):
    def test_zero_gradient_keeps_parameters(self):
        params = {"w": np.array([1.0, -2.0])}
        adam_step(params, {"w": np.zeros(2)}, make_optimizer("adam", 0.1))
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_first_step_moves_by_learning_rate(self):
        for name, step in (("adam", adam_step), ("amsgrad", amsgrad_step)):
            params = {"w": np.array([0.0])}
            state = make_optimizer(name, 0.1)
            step(params, {"w": np.array([1.0])}, state)
            self.assertAlmostEqual(float(params["w"][0]), -0.1, places=6)
            self.assertEqual(state.name, name)

    def test_amsgrad_keeps_maximum_second_moment(self):
        params = {"w": np.array([0.0])}
        state = make_optimizer("amsgrad", 0.01)
        amsgrad_step(params, {"w": np.array([5.0])}, state)
        peak = state.v_max["w"].copy()
        for _ in range(5):
            amsgrad_step(params, {"w": np.array([0.1])}, state)
            self.assertTrue(np.all(state.v_max["w"] >= state.v["w"]))
        np.testing.assert_array_equal(state.v_max["w"], peak)

    def test_updates_in_place_and_errors(self):
        array = np.array([1.0])
        params = {"w": array}
        adam_step(params, {"w": np.array([1.0])}, make_optimizer("adam", 0.1))
        self.assertIs(params["w"], array)
        self.assertLess(float(array[0]), 1.0)
        with self.assertRaises(ContractError):
            adam_step(params, {}, make_optimizer("adam", 0.1))
        with self.assertRaises(DimensionError):
            adam_step(params, {"w": np.ones(2)}, make_optimizer("adam", 0.1))
        with self.assertRaises(ConfigError):
            make_optimizer("sgd", 0.1)
        with self.assertRaises(ConfigError):
            make_optimizer("adam", 0.0)

    def test_learning_rate_multiplier(self):
        params = {"a": np.array([0.0]), "b": np.array([0.0])}
        state = make_optimizer("adam", 0.1, lr_multipliers={"a": 0.0})
        adam_step(params, {"a": np.array([1.0]), "b": np.array([1.0])}, state)
        self.assertEqual(float(params["a"][0]), 0.0)
        self.assertLess(float(params["b"][0]), 0.0)

    def test_weight_decay_skips_norm_parameters(self):
        params = {"dense0.weight": np.full(2, 2.0), "norm0.gamma": np.full(2, 2.0)}
        grads = {name: np.zeros(2) for name in params}
        decayed = apply_weight_decay(grads, params, {"dense0.weight": 0.5, "norm0.gamma": 0.5})
        np.testing.assert_array_equal(decayed["dense0.weight"], [1.0, 1.0])
        np.testing.assert_array_equal(decayed["norm0.gamma"], [0.0, 0.0])
        np.testing.assert_array_equal(grads["dense0.weight"], [0.0, 0.0])
        with self.assertRaises(ConfigError):
            apply_weight_decay(grads, params, {"other": 1.0})


def raw_input_model(norm_kinds, input_dim=2):
    specs = [LayerSpec("norm", f"norm{i}", {"norm_kind": kind}) for i, kind in enumerate(norm_kinds)]
    specs += [LayerSpec("dense", "dense0", {"units": 3}), LayerSpec("softmax-output", "output")]
    return Model(specs, (input_dim,), 0)


class StatisticsTests(unittest.TestCase):
    def test_init_from_sample_recovers_input_statistics(self):
        rng = np.random.default_rng(0)
        sample = standardized(rng, 2000, [3.0, -1.0], [2.0, 0.5])
        model = raw_input_model(["binlog"])
        fitted = init_from_sample(model, sample, chunk=300)
        state = model.norm_states["norm0"]
        np.testing.assert_allclose(state.mu, [3.0, -1.0], atol=1e-12)
        np.testing.assert_allclose(state.sigma(), [2.0, 0.5], atol=1e-12)
        np.testing.assert_allclose(fitted["norm0"][1], [2.0, 0.5], atol=1e-12)
        np.testing.assert_array_equal(state.gamma, [1.0, 1.0])
        self.assertLess(sample_gauged_metrics(model, sample)["norm0"], 0.05)

    def test_init_from_sample_on_standard_inputs(self):
        sample = standardized(np.random.default_rng(1), 500, [0.0, 0.0], [1.0, 1.0])
        model = raw_input_model(["binlog"])
        init_from_sample(model, sample)
        np.testing.assert_allclose(model.norm_states["norm0"].sigma_param, [0.0, 0.0], atol=1e-12)

    def test_init_from_sample_visits_layers_in_order(self):
        model = build_spiral_mlp("bininv", 3)
        sample = np.random.default_rng(3).uniform(-1, 1, size=(400, 2))
        fitted = init_from_sample(model, sample)
        self.assertEqual(list(fitted), ["norm0", "norm1", "norm2"])
        inputs = model.layer_input(model.layer_index("norm2"), sample)
        np.testing.assert_allclose(model.norm_states["norm2"].mu, inputs.mean(axis=0), atol=1e-10)

    def test_degenerate_sample(self):
        sample = np.column_stack([np.linspace(0, 1, 10), np.full(10, 4.0)])
        with self.assertRaises(DegenerateSampleError):
            init_from_sample(raw_input_model(["bin"]), sample)
        with self.assertRaises(ContractError):
            init_from_sample(raw_input_model(["bin"]), np.empty((0, 2)))

    def test_finalize_population_stats(self):
        rng = np.random.default_rng(6)
        data = rng.normal([1.0, -3.0], [0.5, 2.0], size=(101, 2))
        model = raw_input_model(["bn", "bn"])
        finalize_population_stats(model, data, chunk=7)
        first, second = model.norm_states["norm0"], model.norm_states["norm1"]
        np.testing.assert_allclose(first.population_mu, data.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(first.population_var, data.var(axis=0), atol=1e-12)
        normalized = (data - data.mean(axis=0)) / np.sqrt(data.var(axis=0) + 1e-5)
        np.testing.assert_allclose(second.population_mu, normalized.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(second.population_var, normalized.var(axis=0), atol=1e-12)

    def test_finalize_repeated_instance_and_errors(self):
        model = raw_input_model(["bn"])
        finalize_population_stats(model, np.tile([[2.0, 5.0]], (10, 1)))
        np.testing.assert_allclose(model.norm_states["norm0"].population_var, [0.0, 0.0], atol=1e-24)
        out = model.forward(np.array([[2.0, 5.0]])).logits.data
        self.assertTrue(np.all(np.isfinite(out)))
        with self.assertRaises(ContractError):
            finalize_population_stats(model, np.empty((0, 2)))
        with self.assertRaises(ContractError):
            finalize_population_stats(raw_input_model(["binlog"]), np.ones((3, 2)))


class CheckpointTests(unittest.TestCase):
    def test_round_trip_is_exact(self):
        model = build_spiral_mlp("binlog", 4)
        rng = np.random.default_rng(4)
        for array in model.params.values():
            array[...] = rng.normal(size=array.shape) / 3.0
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(model.to_checkpoint(), Path(tmp) / "model.json")
            restored = Model.from_checkpoint(load_checkpoint(path))
        for name, array in model.params.items():
            np.testing.assert_array_equal(restored.params[name], array)
        x = rng.normal(size=(5, 2))
        np.testing.assert_array_equal(model.forward(x).logits.data, restored.forward(x).logits.data)
        self.assertEqual(restored.norm_slots, model.norm_slots)

    def test_population_stats_survive_round_trip(self):
        model = raw_input_model(["bn"])
        finalize_population_stats(model, np.random.default_rng(0).normal(size=(20, 2)))
        restored = Model.from_checkpoint(Checkpoint.from_dict(model.to_checkpoint().to_dict()))
        np.testing.assert_array_equal(
            restored.norm_states["norm0"].population_var, model.norm_states["norm0"].population_var
        )

    def test_malformed_checkpoints(self):
        document = build_spiral_mlp("none", 0).to_checkpoint().to_dict()
        for mutate in (
            lambda d: d.pop("layers"),
            lambda d: d.update(format="other"),
            lambda d: d.update(version=99),
            lambda d: d["layers"][0]["arrays"]["weight"]["values"].pop(),
        ):
            broken = json.loads(json.dumps(document))
            mutate(broken)
            with self.assertRaises(MalformedCheckpointError):
                Model.from_checkpoint(Checkpoint.from_dict(broken))
        broken = json.loads(json.dumps(document))
        broken["layers"][0]["arrays"]["weight"] = {"shape": [3, 50], "values": [0.0] * 150}
        with self.assertRaises(MalformedCheckpointError):
            Model.from_checkpoint(Checkpoint.from_dict(broken))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bad.json"
            path.write_text("{not json", encoding="utf-8")
            with self.assertRaises(MalformedCheckpointError):
                load_checkpoint(path)


class MigrationTests(unittest.TestCase):
    def setUp(self):
        self.inputs = np.random.default_rng(8).uniform(-1.5, 1.5, size=(100, 2))

    def max_difference(self, a, b):
        return float(np.max(np.abs(a.forward(self.inputs).logits.data - b.forward(self.inputs).logits.data)))

    def test_migrate_from_batchnorm_preserves_outputs(self):
        model = build_spiral_mlp("bn", 2)
        rng = np.random.default_rng(2)
        for state in model.batchnorm_states():
            state.moving_mu[...] = rng.normal(size=state.units)
            state.moving_var[...] = rng.uniform(0.2, 3.0, size=state.units)
            state.gamma[...] = rng.normal(size=state.units)
            state.beta[...] = rng.normal(size=state.units)
        source = model.to_checkpoint()
        migrated = migrate_from_batchnorm(source)
        self.assertEqual(migrated.norm_kind, "binlog")
        self.assertEqual(len(migrated.layers), len(source.layers))
        self.assertEqual(migrated.metadata["migrated_from"], "bn")
        self.assertLessEqual(self.max_difference(model, Model.from_checkpoint(migrated)), 1e-6)

    def test_migrate_identity_statistics(self):
        migrated = Model.from_checkpoint(migrate_from_batchnorm(build_spiral_mlp("bn", 0).to_checkpoint()))
        state = migrated.norm_states["norm0"]
        np.testing.assert_array_equal(state.mu, np.zeros(50))
        np.testing.assert_allclose(state.sigma(), np.full(50, np.sqrt(1 + 1e-5)))
        np.testing.assert_array_equal(state.gamma, np.ones(50))

    def test_migrate_from_batchnorm_errors(self):
        with self.assertRaises(MalformedCheckpointError):
            migrate_from_batchnorm(build_spiral_mlp("none", 0).to_checkpoint())
        checkpoint = build_spiral_mlp("bn", 0).to_checkpoint()
        del checkpoint.layer("norm1").arrays["moving_var"]
        with self.assertRaises(MalformedCheckpointError):
            migrate_from_batchnorm(checkpoint)

    def test_migrate_from_plain_is_identity(self):
        model = build_spiral_mlp("none", 5)
        sample = np.random.default_rng(5).uniform(-1, 1, size=(600, 2))
        migrated = migrate_from_plain(model.to_checkpoint(), sample, sigma_mode=SigmaMode.INVERSE)
        target = Model.from_checkpoint(migrated)
        self.assertEqual([name for name in target.norm_states], ["norm_act0", "norm_act1", "norm_act2"])
        self.assertLessEqual(self.max_difference(model, target), 1e-9)
        metrics = sample_gauged_metrics(target, sample)
        self.assertEqual(set(metrics), {"norm_act0", "norm_act1", "norm_act2"})

    def test_migrate_from_plain_statistics(self):
        specs = [LayerSpec("dense", "dense0", {"units": 2}), LayerSpec("softmax-output", "output")]
        model = Model(specs, (1,), 0)
        sample = standardized(np.random.default_rng(0), 1000, [5.0], [3.0])
        migrated = migrate_from_plain(model.to_checkpoint(), sample, ["dense0"])
        state = Model.from_checkpoint(migrated).norm_states["norm_dense0"]
        for values in (state.mu, state.beta):
            np.testing.assert_allclose(values, [5.0])
        for values in (state.sigma(), state.gamma):
            np.testing.assert_allclose(values, [3.0])
        self.assertLess(sample_gauged_metrics(Model.from_checkpoint(migrated), sample)["norm_dense0"], 0.05)

    def test_migrate_from_plain_errors(self):
        sample = np.ones((4, 2))
        with self.assertRaises(MalformedCheckpointError):
            migrate_from_plain(build_spiral_mlp("binlog", 0).to_checkpoint(), sample)
        with self.assertRaises(ConfigError):
            migrate_from_plain(build_spiral_mlp("none", 0).to_checkpoint(), sample, ["nowhere"])
        with self.assertRaises(DegenerateSampleError):
            migrate_from_plain(build_spiral_mlp("none", 0).to_checkpoint(), sample, ["dense0"])


if __name__ == "__main__":
    unittest.main()
