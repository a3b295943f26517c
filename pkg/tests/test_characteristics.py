import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ammfactors.characteristics import (ALL_CHARACTERISTICS, UnknownCharacteristicError,
                                        all_characteristics, characteristic, rolling_risk)
from ammfactors.panel import build_panel
from conftest import make_rows


def _panel_from_returns(returns: dict, **kw):
    paths = {k: list(np.cumprod(np.r_[1.0, 1.0 + np.asarray(r)])) for k, r in returns.items()}
    return build_panel(make_rows(paths, **kw), bound=10.0, min_history=1)


def test_state_characteristics_are_lagged():
    prices = {1: [1.0, 2.0, 4.0], 2: [1.0, 1.0, 1.0]}
    emission = {1: [5e9, 6e9, 7e9], 2: [1e9, 1e9, 1e9]}
    p = build_panel(make_rows(prices, emission=emission), min_history=1)
    mcap = characteristic("MCAP", p).values
    assert np.isnan(mcap.iloc[0, 0])
    # mcap for netuid 1 is price * 2000 in the fixture
    assert mcap[1].tolist()[1:] == [2000.0, 4000.0]
    ey = characteristic("EY", p).values
    assert ey[1].iloc[1] == pytest.approx(5e9 / (2000.0 * 1e9))
    assert ey[1].iloc[2] == pytest.approx(6e9 / (4000.0 * 1e9))
    liq = characteristic("LIQ", p).values
    assert liq[2].iloc[1] == 300.0
    stake = characteristic("STAKE", p).values
    assert stake[2].iloc[2] == 30.0


def test_zero_mcap_gives_missing_ey():
    p = build_panel(make_rows({1: [1.0, 1.0]}, mcap={1: [0.0, 0.0]}), min_history=1)
    assert characteristic("EY", p).values[1].isna().all()


def test_momentum_and_reversal():
    path = [1.0 + 0.1 * t for t in range(12)]
    p = build_panel(make_rows({1: path}), bound=10.0, min_history=1)
    mom7 = characteristic("MOM7", p).values[1]
    assert mom7.iloc[:8].isna().all()
    assert mom7.iloc[8] == pytest.approx(path[7] / path[0] - 1.0)
    rev = characteristic("REV", p).values[1]
    assert rev.iloc[2] == pytest.approx(path[1] / path[0] - 1.0)


def test_momentum_masks_windows_with_gaps():
    path = [1.0] * 5 + [None] + [1.0] * 10
    p = build_panel(make_rows({1: path}), min_history=1)
    m = characteristic("MOM7", p)
    # every window that contains day 5 is nulled even though endpoints exist
    assert m.values[1].iloc[:14].isna().all()
    assert m.values[1].iloc[14] == 0.0
    assert m.n_masked > 0


def test_momentum_masks_lifecycle_change():
    path = [1.0] * 6 + [2.0] + [1.0] * 10
    p = build_panel(make_rows({1: path}, startup={1: {6}}), min_history=1)
    m = characteristic("MOM7", p)
    assert m.values[1].iloc[7:15].isna().all()
    assert m.n_masked > 0


def test_unknown_names():
    p = build_panel(make_rows({1: [1.0, 1.1]}), min_history=1)
    with pytest.raises(UnknownCharacteristicError):
        characteristic("BOOK", p)
    with pytest.raises(UnknownCharacteristicError):
        characteristic("VOL30", p)
    with pytest.raises(UnknownCharacteristicError):
        rolling_risk("MCAP", p)


def test_risk_measures_against_oracles(rng):
    r = rng.normal(0.0, 0.05, 60)
    p = _panel_from_returns({1: r})
    ret = p.r_tao[1].to_numpy()
    for t in (31, 45, 60):
        w = ret[t - 30:t]
        vol = rolling_risk("VOL30", p).values[1].iloc[t]
        assert vol == pytest.approx(np.std(w, ddof=1), rel=1e-12)
        skew = rolling_risk("SKEW30", p).values[1].iloc[t]
        assert skew == pytest.approx(stats.skew(w, bias=False), rel=1e-9)
        down = rolling_risk("DOWNVOL30", p).values[1].iloc[t]
        assert down == pytest.approx(np.sqrt(np.mean(np.where(w < 0, w, 0) ** 2)), rel=1e-12)
    assert rolling_risk("VOL30", p).values[1].iloc[:31].isna().all()


def test_semideviation_decomposition(rng):
    p = _panel_from_returns({1: rng.normal(0.01, 0.05, 50)})
    vol = rolling_risk("VOL30", p).values[1]
    up = rolling_risk("UPVOL30", p).values[1]
    down = rolling_risk("DOWNVOL30", p).values[1]
    r = p.r_tao[1]
    mean = r.shift(1).rolling(30).mean()
    lhs = up ** 2 + down ** 2
    rhs = vol ** 2 * 29 / 30 + mean ** 2
    pd.testing.assert_series_equal(lhs.dropna(), rhs.dropna(), check_names=False, rtol=1e-10)


def test_beta_and_ivol_exact_multiple(rng):
    m = rng.normal(0.0, 0.02, 45)
    p = _panel_from_returns({1: 2.0 * m, 2: m + 0.001})
    market = pd.Series(np.r_[np.nan, m], index=p.dates)
    beta = rolling_risk("BETA30", p, market).values
    ivol = rolling_risk("IVOL30", p, market).values
    np.testing.assert_allclose(beta[1].iloc[31:], 2.0, rtol=1e-10)
    np.testing.assert_allclose(beta[2].iloc[31:], 1.0, rtol=1e-10)
    np.testing.assert_allclose(ivol[1].iloc[31:], 0.0, atol=1e-12)


def test_beta_ivol_against_lstsq(rng):
    m = rng.normal(0.0, 0.02, 40)
    r = 0.5 * m + rng.normal(0.0, 0.03, 40)
    p = _panel_from_returns({1: r})
    market = pd.Series(np.r_[np.nan, m], index=p.dates)
    t = 38
    y = p.r_tao[1].to_numpy()[t - 30:t]
    x = market.to_numpy()[t - 30:t]
    X = np.column_stack([np.ones(30), x])
    coef, ssr, *_ = np.linalg.lstsq(X, y, rcond=None)
    assert rolling_risk("BETA30", p, market).values[1].iloc[t] == pytest.approx(coef[1], rel=1e-10)
    assert rolling_risk("IVOL30", p, market).values[1].iloc[t] == pytest.approx(
        np.sqrt(ssr[0] / 28), rel=1e-10)


def test_beta_needs_market():
    p = _panel_from_returns({1: [0.01] * 35})
    with pytest.raises(ValueError, match="market"):
        rolling_risk("BETA30", p)


def test_constant_returns_have_no_skew():
    p = _panel_from_returns({1: [0.01] * 40})
    assert rolling_risk("SKEW30", p).values[1].isna().all()
    assert rolling_risk("VOL30", p).values[1].iloc[31] == pytest.approx(0.0, abs=1e-15)


def test_all_characteristics_names(rng):
    p = _panel_from_returns({1: rng.normal(0, 0.01, 40), 2: rng.normal(0, 0.01, 40)})
    assert set(all_characteristics(p)) == set(ALL_CHARACTERISTICS) - {"BETA30", "IVOL30"}
    market = p.r_tao.mean(axis=1)
    assert set(all_characteristics(p, market)) == set(ALL_CHARACTERISTICS)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=44), st.integers(0, 2 ** 32 - 1))
def test_no_lookahead(cut, seed):
    # changing data from day `cut` onward never changes a characteristic dated <= cut
    g = np.random.default_rng(seed)
    base = g.normal(0.0, 0.05, 45)
    alt = base.copy()
    alt[cut - 1:] = g.normal(0.0, 0.05, 45 - cut + 1)
    em = {1: list(g.uniform(1e8, 1e10, 46))}
    em_alt = {1: em[1][:cut] + list(g.uniform(1e8, 1e10, 46 - cut))}
    p = _panel_from_returns({1: base}, emission=em)
    q = _panel_from_returns({1: alt}, emission=em_alt)
    market = p.r_tao[1] * 0.5
    market_q = q.r_tao[1] * 0.5
    for name in ALL_CHARACTERISTICS:
        if name in ("BETA30", "IVOL30"):
            a = rolling_risk(name, p, market).values
            b = rolling_risk(name, q, market_q).values
        elif name.endswith("30") and name not in ("MOM30",):
            a, b = rolling_risk(name, p).values, rolling_risk(name, q).values
        else:
            a, b = characteristic(name, p).values, characteristic(name, q).values
        pd.testing.assert_frame_equal(a.iloc[:cut + 1], b.iloc[:cut + 1], obj=name)
