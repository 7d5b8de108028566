"""Tests for sensitivity families, the network reverse mode, Adam and checkpoints."""
import numpy as np
import pytest

from engine.occupation import CorridorPartition
from engine.schemas import NetworkConfig, SensitivityConfig, SensitivityError
from engine.sensitivity import (
    AdamState,
    Constant,
    EmaLog,
    Neural,
    NeuralParams,
    OneFactorCorridor,
    Tanh,
    Zero,
    adam_step,
    backprop,
    build_sensitivity,
    init_params,
    load_checkpoint,
    network_forward,
    parameter_count,
    save_checkpoint,
    vjp,
)


@pytest.fixture
def small_net() -> NeuralParams:
    return init_params(horizon=1.0, x0=100.0, layer_sizes=(3, 8, 8, 1), seed=3)


def _rows(n: int = 6) -> np.ndarray:
    rng = np.random.default_rng(5)
    return np.column_stack([rng.uniform(0, 1, n), rng.uniform(80, 120, n), rng.uniform(60, 140, n)])


class TestParametricFamilies:
    def test_zero(self) -> None:
        spec = Zero()
        assert spec.is_zero
        assert spec.eval_batch(0.1, np.ones(4), np.ones(3)).shape == (4, 3)
        assert spec.parameters.size == 0

    def test_constant(self) -> None:
        spec = Constant(value=0.3)
        np.testing.assert_array_equal(spec.eval_batch(0.0, np.ones(2), np.ones(5)), 0.3)
        assert spec.with_parameters([0.7]).value == 0.7

    def test_tanh_value(self) -> None:
        assert Tanh(scale=0.01).eval(0.5, 100.0, 100.0) == pytest.approx(0.0076159416, rel=1e-8)

    def test_tanh_spot_gradient(self) -> None:
        spec = Tanh(scale=0.01, alpha=1.3)
        spots = np.array([90.0, 110.0])
        nodes = np.array([80.0, 100.0, 125.0])
        h = 1e-5
        fd = (spec.eval_batch(0, spots + h, nodes) - spec.eval_batch(0, spots - h, nodes)) / (2 * h)
        np.testing.assert_allclose(spec.spot_gradient_batch(0, spots, nodes), fd, rtol=1e-6, atol=1e-12)

    def test_tanh_bound(self, flat_lv) -> None:
        assert Tanh.for_surface(flat_lv, 1.0).scale == pytest.approx(0.01)
        with pytest.raises(SensitivityError):
            Tanh(scale=0.02).validate_against(flat_lv, 1.0)

    def test_tanh_negative_scale(self) -> None:
        with pytest.raises(SensitivityError):
            Tanh(scale=-0.01)

    def test_ema_log(self) -> None:
        assert EmaLog(beta=0.02).eval(0.0, 50.0, np.e) == pytest.approx(0.02)

    def test_one_factor_indicator(self) -> None:
        part = CorridorPartition(nodes=np.array([50.0, 100.0, 150.0]))
        spec = OneFactorCorridor.from_corridors(part, [2], beta=0.1)
        np.testing.assert_allclose(spec.eval_batch(0, np.ones(1), part.nodes), [[0.0, 0.0, 0.1]])

    def test_one_factor_multiplicative_bound(self) -> None:
        with pytest.raises(SensitivityError):
            OneFactorCorridor(beta=0.5, intervals=((100.0, np.inf),), multiplicative=True)

    def test_one_factor_bad_index(self) -> None:
        part = CorridorPartition(nodes=np.array([50.0, 100.0]))
        with pytest.raises(SensitivityError):
            OneFactorCorridor.from_corridors(part, [5], beta=0.1)

    @pytest.mark.parametrize("spec", [Constant(value=0.2), EmaLog(beta=0.03), Tanh(scale=0.01, alpha=0.8)])
    def test_parameter_vjp_matches_difference(self, spec) -> None:
        spots = np.array([95.0, 105.0])
        nodes = np.array([70.0, 100.0, 130.0])
        upstream = np.array([[1.0, -0.5, 2.0], [0.3, 0.0, -1.0]])
        theta = spec.parameters
        grad = spec.parameter_vjp(0.2, spots, nodes, upstream)
        h = 1e-6
        for k in range(theta.size):
            bump = np.zeros_like(theta)
            bump[k] = h
            up = np.sum(upstream * spec.with_parameters(theta + bump).eval_batch(0.2, spots, nodes))
            down = np.sum(upstream * spec.with_parameters(theta - bump).eval_batch(0.2, spots, nodes))
            assert grad[k] == pytest.approx((up - down) / (2 * h), rel=1e-6, abs=1e-9)


class TestNetwork:
    def test_parameter_count(self) -> None:
        assert parameter_count((3, 64, 64, 1)) == 4481
        assert init_params(1.0, 100.0).size == 4481

    def test_zero_theta_is_ln2(self) -> None:
        params = NeuralParams(layer_sizes=(3, 64, 64, 1), theta=np.zeros(4481), horizon=1.0, x0=100.0)
        np.testing.assert_allclose(network_forward(params, _rows()), np.log(2.0), rtol=1e-15)

    def test_output_nonnegative(self, small_net) -> None:
        rng = np.random.default_rng(0)
        theta = rng.normal(scale=3.0, size=small_net.size)
        out = network_forward(small_net.with_theta(theta), _rows(500))
        assert np.all(out >= 0)

    def test_wrong_theta_length(self) -> None:
        with pytest.raises(SensitivityError):
            NeuralParams(layer_sizes=(3, 4, 1), theta=np.zeros(3), horizon=1.0, x0=1.0)

    def test_backprop_matches_difference(self, small_net) -> None:
        inputs = _rows()
        upstream = np.linspace(-1.0, 1.0, inputs.shape[0])
        grad = backprop(small_net, inputs, upstream)
        assert grad.shape == (small_net.size,)
        h = 1e-6
        for k in np.random.default_rng(1).choice(small_net.size, size=20, replace=False):
            bump = np.zeros(small_net.size)
            bump[k] = h
            up = upstream @ network_forward(small_net.with_theta(small_net.theta + bump), inputs)
            down = upstream @ network_forward(small_net.with_theta(small_net.theta - bump), inputs)
            assert grad[k] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-8)

    def test_input_gradient_matches_difference(self, small_net) -> None:
        inputs = _rows(3)
        _, input_grad = vjp(small_net, inputs, np.ones(3))
        h = 1e-4
        bump = np.array([0.0, h, 0.0])
        fd = (network_forward(small_net, inputs + bump) - network_forward(small_net, inputs - bump)) / (2 * h)
        np.testing.assert_allclose(input_grad[:, 1], fd, rtol=1e-5, atol=1e-9)

    def test_output_shift_gradient(self) -> None:
        params = init_params(1.0, 100.0, layer_sizes=(3, 4, 1), output_shift=True)
        grad = backprop(params, _rows(4), np.ones(4))
        assert grad[-1] == pytest.approx(4.0)

    def test_non_finite_upstream(self, small_net) -> None:
        with pytest.raises(SensitivityError):
            vjp(small_net, _rows(2), np.array([1.0, np.nan]))

    def test_neural_spec_batch_layout(self, small_net) -> None:
        spec = Neural(params=small_net)
        spots = np.array([95.0, 105.0])
        nodes = np.array([80.0, 100.0, 120.0])
        batch = spec.eval_batch(0.3, spots, nodes)
        assert batch[1, 2] == pytest.approx(spec.eval(0.3, 105.0, 120.0))


class TestAdam:
    def test_first_step_moves_by_learning_rate(self) -> None:
        state = AdamState.zeros(3, learning_rate=0.01)
        theta = np.array([1.0, -2.0, 0.5])
        grad = np.array([0.5, -3.0, 1e-2])
        new_state, new_theta = adam_step(state, theta, grad)
        np.testing.assert_allclose(new_theta, theta - 0.01 * np.sign(grad), rtol=1e-5)
        assert new_state.step == 1 and state.step == 0
        np.testing.assert_array_equal(theta, [1.0, -2.0, 0.5])

    def test_minimises_quadratic(self) -> None:
        state = AdamState.zeros(2, learning_rate=0.05)
        theta = np.array([3.0, -2.0])
        for _ in range(3000):
            state, theta = adam_step(state, theta, 2 * theta)
        np.testing.assert_allclose(theta, 0.0, atol=0.05)

    def test_length_mismatch(self) -> None:
        with pytest.raises(SensitivityError):
            adam_step(AdamState.zeros(2), np.zeros(3), np.zeros(3))

    def test_non_finite_gradient(self) -> None:
        with pytest.raises(SensitivityError):
            adam_step(AdamState.zeros(1), np.zeros(1), np.array([np.inf]))


class TestCheckpoint:
    def test_round_trip(self, small_net, tmp_path) -> None:
        path = save_checkpoint(tmp_path / "theta.csv", small_net)
        loaded = load_checkpoint(path)
        np.testing.assert_array_equal(loaded.theta, small_net.theta)
        assert loaded.layer_sizes == small_net.layer_sizes
        assert loaded.x0 == small_net.x0 and loaded.horizon == small_net.horizon

    def test_missing(self, tmp_path) -> None:
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "none.csv")


class TestBuildSensitivity:
    def test_zero_default(self) -> None:
        assert isinstance(build_sensitivity(SensitivityConfig()), Zero)

    def test_one_factor_default_corridors(self, partition) -> None:
        spec = build_sensitivity(SensitivityConfig(variant="one_factor", beta=0.1), partition=partition)
        row = spec.eval_batch(0, np.ones(1), partition.nodes)[0]
        assert row[-1] == 0.1 and row[0] == 0.0

    def test_tanh_needs_surface(self) -> None:
        with pytest.raises(SensitivityError):
            build_sensitivity(SensitivityConfig(variant="tanh"))

    def test_neural_from_config(self) -> None:
        cfg = SensitivityConfig(variant="neural", network=NetworkConfig(hidden_sizes=[4, 4]))
        spec = build_sensitivity(cfg, horizon=0.5, x0=100.0)
        assert isinstance(spec, Neural)
        assert spec.parameters.size == parameter_count((3, 4, 4, 1))

    def test_neural_from_checkpoint(self, small_net, tmp_path) -> None:
        path = save_checkpoint(tmp_path / "theta.csv", small_net)
        spec = build_sensitivity(SensitivityConfig(variant="neural", checkpoint=str(path)))
        np.testing.assert_array_equal(spec.parameters, small_net.theta)
