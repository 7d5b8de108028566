"""Tests for Black-Scholes price, Vega and implied volatility."""
import numpy as np
import pytest

from engine.schemas import ArbitrageViolationError
from services.black_scholes import bs_price, bs_vega, implied_vol, no_arbitrage_bounds

# S=100, K=100, T=1, sigma=0.2, r=q=0: price = 100 (2 N(0.1) - 1)
ATM_PRICE = 7.965567455405804
ATM_VEGA = 39.69525474770118


class TestBsPrice:
    def test_atm_put(self) -> None:
        assert bs_price(100, 100, 1, 0.2, 0, 0, -1) == pytest.approx(ATM_PRICE, abs=1e-10)

    def test_atm_call_equals_put_at_zero_carry(self) -> None:
        call = bs_price(100, 100, 1, 0.2, 0, 0, 1)
        put = bs_price(100, 100, 1, 0.2, 0, 0, -1)
        assert call == pytest.approx(put, abs=1e-12)

    def test_expired_out_of_the_money_put_is_worthless(self) -> None:
        assert bs_price(100, 80, 0, 0.3, 0.05, 0, -1) == 0.0

    def test_expired_in_the_money_is_intrinsic(self) -> None:
        assert bs_price(100, 120, 0, 0.3, 0.05, 0, -1) == pytest.approx(20.0)

    def test_zero_vol_is_discounted_forward_intrinsic(self) -> None:
        expected = 100 - 90 * np.exp(-0.05)
        assert bs_price(100, 90, 1, 0.0, 0.05, 0, 1) == pytest.approx(expected, abs=1e-12)

    def test_vectorised(self) -> None:
        out = bs_price(100, np.array([90.0, 100.0, 110.0]), 1, 0.2)
        assert out.shape == (3,)
        assert np.all(np.diff(out) < 0)

    def test_put_call_parity(self) -> None:
        rng = np.random.default_rng(0)
        for _ in range(1000):
            spot, strike = rng.uniform(20, 200, size=2)
            expiry = rng.uniform(0.01, 3)
            sigma = rng.uniform(0.01, 1.5)
            rate, div = rng.uniform(-0.02, 0.1), rng.uniform(0, 0.05)
            call = bs_price(spot, strike, expiry, sigma, rate, div, 1)
            put = bs_price(spot, strike, expiry, sigma, rate, div, -1)
            parity = spot * np.exp(-div * expiry) - strike * np.exp(-rate * expiry)
            assert call - put == pytest.approx(parity, abs=1e-10)


class TestBsVega:
    def test_atm_value(self) -> None:
        assert bs_vega(100, 100, 1, 0.2) == pytest.approx(ATM_VEGA, rel=1e-10)

    def test_vanishes_far_out_of_the_money(self) -> None:
        assert bs_vega(100, 1e6, 1, 0.2) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("strike,expiry,sigma", [(80, 0.5, 0.3), (100, 1.0, 0.2), (130, 2.0, 0.4)])
    def test_matches_central_difference(self, strike: float, expiry: float, sigma: float) -> None:
        h = 1e-5
        fd = (bs_price(100, strike, expiry, sigma + h, 0.03, 0.01) - bs_price(100, strike, expiry, sigma - h, 0.03, 0.01)) / (2 * h)
        assert bs_vega(100, strike, expiry, sigma, 0.03, 0.01) == pytest.approx(fd, rel=1e-6)

    def test_positive(self) -> None:
        strikes = np.linspace(50, 150, 11)
        assert np.all(bs_vega(100, strikes, 0.5, 0.25) > 0)


class TestImpliedVol:
    def test_inverts_atm_put(self) -> None:
        assert implied_vol(ATM_PRICE, 100, 100, 1, 0, 0, -1) == pytest.approx(0.2, abs=1e-9)

    @pytest.mark.parametrize("sigma", np.linspace(0.01, 2.0, 25))
    def test_round_trip(self, sigma: float) -> None:
        price = bs_price(100, 100, 1.0, sigma, 0.0, 0.0, 1)
        assert implied_vol(price, 100, 100, 1.0, 0.0, 0.0, 1) == pytest.approx(sigma, abs=1e-8)

    def test_intrinsic_price_returns_zero(self) -> None:
        lower, _ = no_arbitrage_bounds(100, 80, 1, 0.0, 0.0, 1)
        assert implied_vol(lower, 100, 80, 1, 0.0, 0.0, 1) == 0.0

    def test_call_above_spot_is_arbitrage(self) -> None:
        with pytest.raises(ArbitrageViolationError):
            implied_vol(101.0, 100, 100, 1, 0.0, 0.0, 1)

    def test_below_intrinsic_is_arbitrage(self) -> None:
        with pytest.raises(ArbitrageViolationError):
            implied_vol(15.0, 100, 80, 1, 0.0, 0.0, 1)
