"""Tests for surface lookup, CSV I/O and Dupire extraction."""
import numpy as np
import pytest

from engine.schemas import SurfaceError
from services.localvol import (
    ImpliedVolSurface,
    LocalVolSurface,
    atm_forward_vol,
    dupire_from_implied,
    flat_surface,
    load_surface_csv,
    lv_at,
    min_local_variance,
    write_surface_csv,
)


class TestLvAt:
    def test_constant_surface(self, flat_lv) -> None:
        for t, x in ((0.0, 100.0), (0.7, 35.0), (5.0, 1e4)):
            assert lv_at(flat_lv, t, x) == pytest.approx(0.2, abs=1e-15)

    def test_node_value_exact(self, skew_lv) -> None:
        assert lv_at(skew_lv, 0.5, 110.0) == pytest.approx(skew_lv.values[2, 4], abs=1e-15)

    def test_geometric_midpoint(self) -> None:
        surface = LocalVolSurface(
            time_grid=np.array([0.0, 1.0]),
            strike_grid=np.array([80.0, 125.0]),
            values=np.array([[0.2, 0.3], [0.2, 0.3]]),
        )
        assert lv_at(surface, 0.5, 100.0) == pytest.approx(0.25, abs=1e-12)

    def test_flat_extrapolation(self, skew_lv) -> None:
        assert lv_at(skew_lv, 10.0, 1.0) == pytest.approx(skew_lv.values[-1, 0])
        assert lv_at(skew_lv, 10.0, 1e6) == pytest.approx(skew_lv.values[-1, -1])

    def test_vectorised_and_positive(self, skew_lv) -> None:
        x = np.linspace(10, 400, 200)
        values = lv_at(skew_lv, 0.3, x)
        assert values.shape == (200,)
        assert np.all(values > 0)

    def test_slope_zero_in_wings(self, skew_lv) -> None:
        assert skew_lv.slope_log_spot(0.5, 10.0) == 0.0

    def test_slope_matches_difference(self, skew_lv) -> None:
        x, h = 95.0, 1e-6
        fd = (lv_at(skew_lv, 0.3, x * np.exp(h)) - lv_at(skew_lv, 0.3, x * np.exp(-h))) / (2 * h)
        assert skew_lv.slope_log_spot(0.3, x) == pytest.approx(fd, rel=1e-6)


class TestSurfaceValidation:
    def test_nonpositive_vol(self) -> None:
        with pytest.raises(SurfaceError):
            LocalVolSurface(time_grid=np.array([0.0, 1.0]), strike_grid=np.array([50.0, 150.0]), values=np.array([[0.2, 0.0], [0.2, 0.2]]))

    def test_unsorted_grid(self) -> None:
        with pytest.raises(SurfaceError):
            LocalVolSurface(time_grid=np.array([1.0, 0.0]), strike_grid=np.array([50.0, 150.0]), values=np.full((2, 2), 0.2))

    def test_shape_mismatch(self) -> None:
        with pytest.raises(SurfaceError):
            LocalVolSurface(time_grid=np.array([0.0, 1.0]), strike_grid=np.array([50.0, 150.0]), values=np.full((3, 2), 0.2))


class TestMinLocalVariance:
    def test_constant(self, flat_lv) -> None:
        assert min_local_variance(flat_lv, 1.0) == pytest.approx(0.04)

    def test_minimum_of_squares(self) -> None:
        surface = LocalVolSurface(
            time_grid=np.array([0.0, 1.0]),
            strike_grid=np.array([80.0, 100.0, 120.0]),
            values=np.array([[0.2, 0.3, 0.25], [0.3, 0.3, 0.3]]),
        )
        assert min_local_variance(surface, 2.0) == pytest.approx(0.04)

    def test_restricted_to_early_times(self) -> None:
        surface = LocalVolSurface(
            time_grid=np.array([0.0, 0.5, 1.0]),
            strike_grid=np.array([80.0, 120.0]),
            values=np.array([[0.3, 0.4], [0.3, 0.35], [0.1, 0.3]]),
        )
        assert min_local_variance(surface, 0.75) == pytest.approx(0.09)
        assert min_local_variance(surface, 1.0) == pytest.approx(0.01)

    def test_nonpositive_horizon(self, flat_lv) -> None:
        with pytest.raises(SurfaceError):
            min_local_variance(flat_lv, 0.0)


class TestSurfaceCsv:
    def test_round_trip(self, skew_lv, tmp_path) -> None:
        path = write_surface_csv(tmp_path / "lv.csv", skew_lv)
        loaded = load_surface_csv(path)
        assert isinstance(loaded, LocalVolSurface)
        np.testing.assert_array_equal(loaded.values, skew_lv.values)
        np.testing.assert_array_equal(loaded.strike_grid, skew_lv.strike_grid)
        np.testing.assert_array_equal(loaded.time_grid, skew_lv.time_grid)

    def test_implied_kind(self, skew_lv, tmp_path) -> None:
        path = write_surface_csv(tmp_path / "iv.csv", skew_lv)
        assert isinstance(load_surface_csv(path, "implied"), ImpliedVolSurface)

    def test_missing(self, tmp_path) -> None:
        with pytest.raises(FileNotFoundError):
            load_surface_csv(tmp_path / "none.csv")


class TestDupire:
    @pytest.fixture
    def grid(self):
        return np.array([0.25, 0.5, 1.0, 1.5, 2.0]), np.array([60.0, 80.0, 100.0, 120.0, 150.0])

    def test_flat_fixed_point(self, grid, env_rates) -> None:
        times, strikes = grid
        iv = ImpliedVolSurface(time_grid=times, strike_grid=strikes, values=np.full((5, 5), 0.2))
        local = dupire_from_implied(iv, env_rates)
        np.testing.assert_allclose(local.values[1:-1, 1:-1], 0.2, atol=1e-10)
        assert local.adjusted_nodes == ()

    def test_linear_total_variance(self, grid, env_rates) -> None:
        times, strikes = grid
        a, b = 0.01, 0.04
        vols = np.sqrt((a + b * times) / times)
        iv = ImpliedVolSurface(time_grid=times, strike_grid=strikes, values=np.repeat(vols[:, None], 5, axis=1))
        local = dupire_from_implied(iv, env_rates)
        np.testing.assert_allclose(local.values[1:-1, 1:-1] ** 2, b, atol=1e-6)

    def test_butterfly_arbitrage_node_is_floored(self, grid, env_rates) -> None:
        times, strikes = grid
        values = np.full((5, 5), 0.2)
        values[:, 2] = 0.02
        values[:, 1] = values[:, 3] = 0.6
        local = dupire_from_implied(ImpliedVolSurface(time_grid=times, strike_grid=strikes, values=values), env_rates)
        assert local.adjusted_nodes
        assert np.all(local.values ** 2 >= 1e-4 - 1e-15)
        assert np.all(local.values ** 2 <= 4.0 + 1e-12)

    def test_small_grid(self, env_rates) -> None:
        iv = ImpliedVolSurface(time_grid=np.array([0.5, 1.0]), strike_grid=np.array([90.0, 110.0]), values=np.full((2, 2), 0.2))
        with pytest.raises(SurfaceError):
            dupire_from_implied(iv, env_rates)


class TestAtmForwardVol:
    def test_flat(self, env_rates) -> None:
        assert atm_forward_vol(flat_surface(0.3, 1.0, 100.0), env_rates, 1.0) == pytest.approx(0.3)
