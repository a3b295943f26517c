import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ammfactors.amm_core import PoolState, slippage_one_way
from ammfactors.characteristics import CharacteristicMatrix
from ammfactors.econometrics import SingularDesignError
from ammfactors.experiments import (capacity_table, event_regression, halving_event_study,
                                    halving_series, placebo_scan, slippage_capacity,
                                    subsample_split, vol_sorts, window_bounds)
from ammfactors.panel import build_panel
from conftest import make_rows

IDX = pd.date_range("2025-06-01", periods=300)
EVENT = pd.Timestamp("2025-10-01")


def test_subsample_constant_zero():
    f = pd.DataFrame({"SMB": 0.0}, index=IDX)
    tab = subsample_split(f, "2025-08-01")
    assert tab.loc["SMB", "first_mean"] == 0.0 and tab.loc["SMB", "second_mean"] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 298), st.integers(0, 2 ** 32 - 1))
def test_subsample_weighted_mean_identity(cut, seed):
    g = np.random.default_rng(seed)
    f = pd.DataFrame({"A": g.normal(0.001, 0.02, 300), "B": g.normal(0, 0.01, 300)}, index=IDX)
    f.iloc[g.choice(300, 20), 0] = np.nan
    tab = subsample_split(f, IDX[cut])
    for c in f.columns:
        r = tab.loc[c]
        assert r.first_n + r.second_n == r.full_n
        assert r.full_mean * r.full_n == pytest.approx(
            r.first_mean * r.first_n + r.second_mean * r.second_n, rel=1e-10, abs=1e-14)


def test_subsample_split_outside_sample():
    f = pd.DataFrame({"A": 0.0}, index=IDX)
    with pytest.raises(ValueError, match="inside"):
        subsample_split(f, "2030-01-01")
    with pytest.raises(ValueError, match="inside"):
        subsample_split(f, IDX[-1])


def test_window_bounds_symmetric_and_inclusive():
    start, end = window_bounds(EVENT, 30)
    assert start == EVENT - pd.Timedelta(days=30)
    assert end == EVENT + pd.Timedelta(days=29)
    smb = pd.Series(np.arange(300.0) * 1e-4, index=IDX)
    res = halving_event_study(smb, None, EVENT, windows=(30,), full_sample=False)[0]
    assert res.available and res.n_pre == 30 and res.n_post == 30


def test_event_beta_is_raw_mean_difference(rng):
    smb = pd.Series(rng.normal(0.001, 0.01, 300), index=IDX)
    res = event_regression(smb, None, EVENT)
    pre, post = smb[smb.index < EVENT], smb[smb.index >= EVENT]
    assert res.beta == pytest.approx(post.mean() - pre.mean(), rel=1e-10, abs=1e-16)
    assert res.alpha == pytest.approx(pre.mean(), rel=1e-10)
    assert res.ratio == pytest.approx(post.mean() / pre.mean())
    assert res.gamma == 0.0


def test_event_with_market_matches_normal_equations(rng):
    mkt = pd.Series(rng.normal(0, 0.02, 300), index=IDX)
    smb = 0.5 * mkt + pd.Series(rng.normal(0.001, 0.01, 300), index=IDX)
    res = event_regression(smb, mkt, EVENT)
    X = np.column_stack([np.ones(300), (IDX >= EVENT).astype(float), mkt])
    coef = np.linalg.solve(X.T @ X, X.T @ smb.to_numpy())
    assert [res.alpha, res.beta, res.gamma] == pytest.approx(list(coef), rel=1e-10)


def test_constant_smb_zero_market_gives_zero_beta():
    smb = pd.Series(0.002, index=IDX)
    mkt = pd.Series(0.0, index=IDX)
    res = event_regression(smb, None, EVENT)
    assert res.beta == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(SingularDesignError):
        # a zero market column makes the design rank-deficient
        event_regression(smb, mkt, EVENT)


def test_window_outside_sample_unavailable(rng):
    smb = pd.Series(rng.normal(0, 0.01, 300), index=IDX)
    rows = halving_event_study(smb, None, EVENT, windows=(30, 200))
    assert rows[0].available and not rows[1].available
    assert rows[-1].label == "full" and rows[-1].available
    assert math.isnan(rows[1].beta)


def test_placebo_offset_zero_reproduces_event(rng):
    mkt = pd.Series(rng.normal(0, 0.02, 300), index=IDX)
    smb = pd.Series(rng.normal(0.001, 0.01, 300), index=IDX)
    true, rows = placebo_scan(smb, mkt, EVENT, offsets=(0, 30, 500), window=60)
    assert rows[0].result.beta == true.beta and rows[0].result.t_nw == true.t_nw
    assert not rows[0].exceeds_true
    assert not rows[2].result.available


def test_halving_series(rng):
    smb = pd.Series(rng.normal(0, 0.01, 40), index=IDX[:40])
    s = halving_series(smb)
    assert s["cumulative"].iloc[-1] == pytest.approx(np.prod(1 + smb))
    assert s["rolling_mean_30"].iloc[:29].isna().all()
    assert s["rolling_mean_30"].iloc[29] == pytest.approx(smb.iloc[:30].mean())


def test_capacity_exact_decades():
    unit = {"small": 6.387e-9, "medium": 1.86e-10, "large": 9.5e-11}
    rep = capacity_table(unit, gross_smb=0.0101, gross_std=0.0501)
    tab = rep.table
    for col in ("small", "medium", "large", "rt_cost"):
        v = tab[col].to_numpy()
        assert (v[1:] == v[:-1] * 10.0).all()
    assert tab.loc[1e4, "rt_cost"] == pytest.approx((6.387e-9 + 9.5e-11) * 1e4)
    assert tab.loc[1e4, "net_smb"] == pytest.approx(0.0101 - tab.loc[1e4, "rt_cost"])


def test_capacity_limits():
    unit = {"small": 1e-6, "medium": 1e-7, "large": 1e-7}
    tab = capacity_table(unit, aum_grid=(0.0, 1e4, 1e6), gross_smb=0.01, gross_std=0.05).table
    assert tab.loc[0.0, "small"] == 0.0 and tab.loc[0.0, "net_smb"] == 0.01
    # 1e4 -> rt = 0.011, net = -0.001 (still bounded by 3 sigma)
    assert not math.isnan(tab.loc[1e4, "net_sharpe"])
    # 1e6 -> rt >= 100%: net return itself unavailable
    assert math.isnan(tab.loc[1e6, "net_smb"]) and math.isnan(tab.loc[1e6, "net_sharpe"])


def test_certain_loss_hides_sharpe():
    unit = {"small": 1e-7, "medium": 1e-8, "large": 1e-8}
    tab = capacity_table(unit, aum_grid=(1e6,), gross_smb=0.0, gross_std=0.01).table
    # net = -0.11, more than 3 std below zero
    assert tab.loc[1e6, "net_smb"] == pytest.approx(-0.11)
    assert math.isnan(tab.loc[1e6, "net_sharpe"])


def test_turnover_scales_round_trip():
    unit = {"small": 1e-7, "medium": 1e-8, "large": 1e-8}
    a = capacity_table(unit, aum_grid=(1e4,), turnover=1.0).table
    b = capacity_table(unit, aum_grid=(1e4,), turnover=0.25).table
    assert b.loc[1e4, "rt_cost"] == pytest.approx(0.25 * a.loc[1e4, "rt_cost"])


def test_slippage_capacity_against_pool_oracle():
    reserves = {"small": {1: 100.0, 2: 200.0}, "medium": {3: 500.0, 4: 600.0},
                "large": {5: 2000.0}}
    tao_usd, aum = 345.0, 1e4
    rep = slippage_capacity(reserves, tao_usd, aum_grid=(aum,))
    notional = aum / 5 / tao_usd
    for k, members in reserves.items():
        oracle = np.mean([slippage_one_way(PoolState(t, 1.0), notional) for t in members.values()])
        assert rep.table.loc[aum, k] == pytest.approx(oracle, rel=1e-12)
    assert rep.notes["n_eligible"] == 5
    assert rep.notes["median_reserve_small"] == 150.0


def test_slippage_capacity_errors():
    with pytest.raises(ValueError, match="subnet 9"):
        slippage_capacity({"small": {9: 0.0}, "medium": {1: 1.0}, "large": {2: 1.0}}, 345.0)
    with pytest.raises(ValueError, match="tao_usd"):
        slippage_capacity({"small": {1: 1.0}, "medium": {2: 1.0}, "large": {3: 1.0}}, 0.0)


def _vol_panel(rng, n_sub=30, n_days=80):
    paths = {k: list(np.cumprod(np.r_[1.0, 1 + rng.normal(0, 0.03, n_days - 1)]))
             for k in range(1, n_sub + 1)}
    return build_panel(make_rows(paths), min_history=1)


def test_vol_sorts_high_minus_low(rng):
    panel = _vol_panel(rng)
    ch = CharacteristicMatrix("VOL30", pd.DataFrame(rng.normal(size=panel.r_tao.shape),
                                                    index=panel.dates, columns=panel.subnets))
    table, hl = vol_sorts(panel, {"VOL30": ch})
    assert table.loc["VOL30", "label"] == "Total Volatility"
    assert table.loc["VOL30", "hl"] == pytest.approx(hl["VOL30"].mean())
    assert table.loc["VOL30", "n"] == hl["VOL30"].notna().sum()


def test_vol_sorts_permutation_oracle(rng):
    # returns independent of the sort variable -> H-L mean within 2 se of zero in most draws
    panel = _vol_panel(rng, n_sub=60, n_days=200)
    inside = 0
    for _ in range(40):
        ch = CharacteristicMatrix("X", pd.DataFrame(rng.normal(size=panel.r_tao.shape),
                                                    index=panel.dates, columns=panel.subnets))
        table, _ = vol_sorts(panel, {"X": ch})
        inside += abs(table.loc["X", "t_hl"]) < 2.0
    assert inside >= 34
