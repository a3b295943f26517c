import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ammfactors.amm_core import (AllocationError, EmissionPolicy, InvalidPoolError, PoolState,
                                 allocate_emissions_flow, allocate_emissions_price,
                                 price_impact_approx, slippage_one_way, spot_price, stake)

reserves = st.floats(min_value=1e-3, max_value=1e9, allow_nan=False, allow_infinity=False)
fractions = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)


def test_spot_price_examples():
    assert spot_price(PoolState(100.0, 1000.0)) == 0.1
    for c in (0.5, 3.0, 7e6):
        assert spot_price(PoolState(c, c)) == 1.0


@pytest.mark.parametrize("tau,alpha", [(100.0, 0.0), (0.0, 5.0), (-1.0, 5.0), (math.nan, 1.0)])
def test_invalid_pool(tau, alpha):
    with pytest.raises(InvalidPoolError):
        PoolState(tau, alpha)


def test_stake_zero_is_identity():
    pool = PoolState(100.0, 1000.0)
    new, out, ret = stake(pool, 0.0)
    assert new == pool
    assert out == 0.0 and ret == 0.0


def test_stake_one_tao():
    new, out, ret = stake(PoolState(100.0, 1000.0), 1.0)
    assert ret == pytest.approx(0.0201, rel=1e-14)
    # oracle: recompute the post-trade alpha reserve from the invariant
    assert out == pytest.approx(1000.0 - 100_000.0 / 101.0, rel=1e-14)
    assert new.tau_reserve * new.alpha_reserve == pytest.approx(100_000.0, rel=1e-14)


def test_negative_stake_rejected():
    with pytest.raises(ValueError):
        stake(PoolState(100.0, 1000.0), -1.0)


def test_price_impact_and_gap():
    pool = PoolState(100.0, 1000.0)
    assert price_impact_approx(pool, 1.0) == 0.02
    assert price_impact_approx(pool, 0.0) == 0.0
    for r in (1e-4, 1e-3, 1e-2, 1e-1):
        _, _, exact = stake(pool, r * 100.0)
        assert exact - price_impact_approx(pool, r * 100.0) == pytest.approx(r * r, rel=1e-9)


def test_slippage_examples():
    assert slippage_one_way(PoolState(540.0, 1.0), 540.0) == 1.0
    pool = PoolState(540.0, 1.0)
    s = slippage_one_way(pool, 0.0064 * 540.0)
    assert s == pytest.approx(0.0064, rel=1e-14)
    assert slippage_one_way(pool, 10 * 0.0064 * 540.0) == pytest.approx(0.064, rel=1e-14)


@settings(max_examples=300)
@given(reserves, reserves, fractions)
def test_constant_product_preserved(tau, alpha, r):
    pool = PoolState(tau, alpha)
    new, _, _ = stake(pool, r * tau)
    assert abs(new.tau_reserve * new.alpha_reserve - tau * alpha) <= 1e-12 * tau * alpha


@settings(max_examples=300)
@given(reserves, fractions)
def test_exact_minus_approx_is_square(tau, r):
    pool = PoolState(tau, 1.0)
    d = r * tau
    _, _, exact = stake(pool, d)
    ratio = d / tau
    assert exact - 2 * ratio == pytest.approx(ratio ** 2, abs=1e-12)


@settings(max_examples=200)
@given(reserves, reserves)
def test_inverse_size_law(t1, t2):
    # same TAO amount, at 1e-4 of the smaller pool
    d = 1e-4 * min(t1, t2)
    _, _, r1 = stake(PoolState(t1, 1.0), d)
    _, _, r2 = stake(PoolState(t2, 1.0), d)
    assert r1 / r2 == pytest.approx(t2 / t1, rel=1e-3)


@settings(max_examples=200)
@given(reserves, fractions, st.one_of(st.just(0.0), st.floats(min_value=1e-6, max_value=1e3)))
def test_slippage_linear(tau, r, c):
    pool = PoolState(tau, 1.0)
    d = r * tau
    assert slippage_one_way(pool, c * d) == pytest.approx(c * slippage_one_way(pool, d), rel=4e-16, abs=0)


def test_vectorized_stake_matches_scalar(rng):
    tau = rng.uniform(10, 1000, 50)
    alpha = rng.uniform(10, 1000, 50)
    d = rng.uniform(0, 5, 50)
    new, out, ret = stake(PoolState(tau, alpha), d)
    for i in range(50):
        n1, o1, r1 = stake(PoolState(tau[i], alpha[i]), d[i])
        assert new.tau_reserve[i] == n1.tau_reserve
        assert out[i] == o1 and ret[i] == r1


def test_price_allocation_examples():
    np.testing.assert_allclose(allocate_emissions_price([1, 1, 1, 1], 8), [2, 2, 2, 2])
    np.testing.assert_allclose(allocate_emissions_price([1, 3], 4), [1, 3])
    with pytest.raises(AllocationError):
        allocate_emissions_price([0, 0], 1.0)


def test_flow_policy_decay():
    assert EmissionPolicy("flow", 30).decay == pytest.approx(0.97716, abs=5e-6)
    with pytest.raises(ValueError):
        EmissionPolicy("volume")


def test_flow_allocation_symmetric_and_halving():
    pol = EmissionPolicy("flow", 30)
    state, em = allocate_emissions_flow(np.zeros(4), np.full(4, 2.0), 10.0, pol)
    np.testing.assert_allclose(em, 2.5)
    # one unit of flow, then 30 days of nothing: the EMA halves
    s, _ = allocate_emissions_flow(np.zeros(2), np.array([1.0, 1.0]), 1.0, pol)
    day0 = s.copy()
    for _ in range(30):
        s, _ = allocate_emissions_flow(s, np.zeros(2), 1.0, pol)
    np.testing.assert_allclose(s, 0.5 * day0, rtol=1e-9)


def test_flow_allocation_clips_negatives():
    pol = EmissionPolicy("flow", 30)
    state, em = allocate_emissions_flow(np.array([-5.0, 1.0, 1.0]), np.zeros(3), 6.0, pol)
    assert state[0] < 0
    np.testing.assert_allclose(em, [0.0, 3.0, 3.0])
    with pytest.raises(AllocationError):
        allocate_emissions_flow(np.array([-1.0, -1.0]), np.zeros(2), 1.0, pol)


@settings(max_examples=200)
@given(st.lists(st.floats(min_value=0, max_value=1e6), min_size=1, max_size=40),
       st.floats(min_value=0, max_value=1e4))
def test_price_allocation_conserves(prices, total):
    prices = np.asarray(prices)
    if prices.sum() <= 0:
        return
    em = allocate_emissions_price(prices, total)
    assert (em >= 0).all()
    assert em.sum() == pytest.approx(total, rel=1e-9, abs=1e-12)


@settings(max_examples=200)
@given(st.lists(st.floats(min_value=-1e3, max_value=1e3), min_size=1, max_size=40),
       st.floats(min_value=0, max_value=1e4))
def test_flow_allocation_conserves(flows, total):
    flows = np.asarray(flows)
    pol = EmissionPolicy("flow", 30)
    state = np.zeros_like(flows)
    if not (np.clip((1 - pol.decay) * flows, 0, None).sum() > 0):
        return
    _, em = allocate_emissions_flow(state, flows, total, pol)
    assert (em >= 0).all()
    assert em.sum() == pytest.approx(total, rel=1e-9, abs=1e-12)
