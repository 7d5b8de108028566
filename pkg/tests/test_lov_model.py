"""Tests for LOV variance assembly, clamping and the positivity check."""
import numpy as np
import pytest

from engine.lov_model import LovModel, check_positivity_bound
from engine.occupation import CorridorPartition
from engine.schemas import LovError
from engine.sensitivity import Constant, EmaLog, OneFactorCorridor, Tanh, Zero


@pytest.fixture
def nodes3() -> CorridorPartition:
    return CorridorPartition(nodes=np.array([50.0, 100.0, 150.0]))


@pytest.fixture
def occupation():
    times = np.array([[0.1, 0.6, 0.3], [0.5, 0.5, 0.0]])
    projected = np.array([[0.3, 0.4, 0.3], [0.3, 0.4, 0.3]])
    return times, projected, 1.0


class TestVariance:
    def test_zero_spec_is_local_variance(self, flat_lv, nodes3, occupation) -> None:
        model = LovModel(surface=flat_lv, partition=nodes3, spec=Zero())
        times, projected, mass = occupation
        out = model.variance(0.5, np.array([90.0, 110.0]), times, projected, mass)
        np.testing.assert_array_equal(out.variance, 0.2 ** 2)

    def test_constant_spec_is_bit_exact(self, flat_lv, nodes3, occupation) -> None:
        times, projected, mass = occupation
        lv = LovModel(surface=flat_lv, partition=nodes3).variance(0.5, np.array([90.0, 110.0]), times, projected, mass)
        const = LovModel(surface=flat_lv, partition=nodes3, spec=Constant(value=0.37)).variance(
            0.5, np.array([90.0, 110.0]), times, projected, mass
        )
        np.testing.assert_array_equal(const.variance, lv.variance)
        np.testing.assert_array_equal(const.pairing, 0.0)

    def test_additive_one_factor(self, flat_lv, nodes3, occupation) -> None:
        spec = OneFactorCorridor.from_corridors(nodes3, [2], beta=0.1)
        model = LovModel(surface=flat_lv, partition=nodes3, spec=spec)
        times, projected, mass = occupation
        out = model.variance(0.5, np.array([100.0, 100.0]), times, projected, mass)
        # pairings: 0.1 * (0.3 - 0.3) = 0 and 0.1 * (0.0 - 0.3) = -0.03
        np.testing.assert_allclose(out.variance, [0.04, 0.01], atol=1e-15)

    def test_multiplicative(self, flat_lv, nodes3, occupation) -> None:
        spec = OneFactorCorridor.from_corridors(nodes3, [2], beta=0.4, multiplicative=True)
        model = LovModel(surface=flat_lv, partition=nodes3, spec=spec, mode="multiplicative")
        times, projected, mass = occupation
        out = model.variance(0.5, np.array([100.0, 100.0]), times, projected, mass)
        np.testing.assert_allclose(out.variance, [0.04, 0.04 * (1 - 0.12)], atol=1e-15)

    def test_gamma_is_inverse_mass(self, flat_lv, nodes3, occupation) -> None:
        spec = OneFactorCorridor.from_corridors(nodes3, [2], beta=0.1)
        model = LovModel(surface=flat_lv, partition=nodes3, spec=spec)
        times, projected, _ = occupation
        out = model.variance(0.5, np.array([100.0, 100.0]), 2 * times, 2 * projected, 2.0)
        assert out.gamma == 0.5
        np.testing.assert_allclose(out.variance, [0.04, 0.01], atol=1e-15)

    def test_continuous_gamma(self, flat_lv, nodes3) -> None:
        model = LovModel(surface=flat_lv, partition=nodes3, kappa=12.0, discrete_gamma=False)
        assert model.gamma_at(1.0, 5.0) == pytest.approx(12.0 / np.expm1(12.0))

    def test_empty_measure_gives_local_variance(self, flat_lv, nodes3) -> None:
        model = LovModel(surface=flat_lv, partition=nodes3, spec=EmaLog(beta=1.0))
        out = model.variance(0.0, np.array([100.0]), np.zeros((1, 3)), np.zeros((1, 3)), 0.0)
        assert out.gamma == 0.0
        np.testing.assert_array_equal(out.variance, [0.04])

    def test_clamp_counts_events(self, flat_lv, nodes3, occupation) -> None:
        spec = OneFactorCorridor.from_corridors(nodes3, [2], beta=10.0)
        model = LovModel(surface=flat_lv, partition=nodes3, spec=spec)
        times, projected, mass = occupation
        out = model.variance(0.5, np.array([100.0, 100.0]), times, projected, mass)
        assert out.variance[1] == model.floor
        assert out.clamp_events == 1 and model.clamp_events == 1
        model.variance(0.5, np.array([100.0, 100.0]), times, projected, mass, record=False)
        assert model.clamp_events == 1

    def test_uncentered_pairs_against_zero(self, flat_lv, nodes3, occupation) -> None:
        model = LovModel(surface=flat_lv, partition=nodes3, spec=Constant(value=0.01), uncentered=True)
        times, projected, mass = occupation
        out = model.variance(0.5, np.array([100.0, 100.0]), times, projected, mass)
        np.testing.assert_allclose(out.variance, 0.05)

    def test_invalid_clamp(self, flat_lv, nodes3) -> None:
        with pytest.raises(LovError):
            LovModel(surface=flat_lv, partition=nodes3, floor=1.0, cap=0.5)


class TestVarianceDerivatives:
    def test_spot_derivative_matches_difference(self, skew_lv, nodes3, occupation) -> None:
        model = LovModel(surface=skew_lv, partition=nodes3, spec=Tanh(scale=0.005))
        times, projected, mass = occupation
        spots = np.array([95.0, 105.0])
        evaluation = model.variance(0.3, spots, times, projected, mass)
        d_spot, weights = model.variance_derivatives(0.3, spots, times, projected, mass, evaluation)
        h = 1e-5
        up = model.variance(0.3, spots + h, times, projected, mass, record=False).variance
        down = model.variance(0.3, spots - h, times, projected, mass, record=False).variance
        np.testing.assert_allclose(d_spot, (up - down) / (2 * h), rtol=1e-5)
        np.testing.assert_allclose(weights, times - projected)

    def test_clamped_paths_have_zero_derivative(self, flat_lv, nodes3, occupation) -> None:
        spec = OneFactorCorridor.from_corridors(nodes3, [2], beta=10.0)
        model = LovModel(surface=flat_lv, partition=nodes3, spec=spec)
        times, projected, mass = occupation
        evaluation = model.variance(0.5, np.array([100.0, 100.0]), times, projected, mass)
        d_spot, weights = model.variance_derivatives(0.5, np.array([100.0, 100.0]), times, projected, mass, evaluation)
        assert d_spot[1] == 0.0
        np.testing.assert_array_equal(weights[1], 0.0)


class TestPositivityBound:
    def test_admissible_tanh_passes(self, flat_lv, partition) -> None:
        model = LovModel(surface=flat_lv, partition=partition, spec=Tanh.for_surface(flat_lv, 1.0))
        report = check_positivity_bound(model, 1.0)
        assert report["passed"]
        assert report["worst_margin"] > 0

    def test_large_one_factor_fails(self, flat_lv, partition) -> None:
        spec = OneFactorCorridor.from_corridors(partition, [20], beta=0.05)
        report = check_positivity_bound(LovModel(surface=flat_lv, partition=partition, spec=spec), 1.0)
        assert not report["passed"]
        assert report["worst_margin"] == pytest.approx(0.02 - 0.05)
