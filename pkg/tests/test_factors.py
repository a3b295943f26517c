import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ammfactors.characteristics import CharacteristicMatrix
from ammfactors.factors import (FACTOR_ORDER, annualize, build_all_factors, build_factor,
                                factor_frame, market_factor, tercile_bounds, tercile_legs,
                                tercile_sort, tercile_table)
from ammfactors.panel import build_panel
from conftest import make_rows


@pytest.mark.parametrize("n,ceil,floor", [
    (3, (1, 2), (1, 2)), (4, (2, 3), (1, 2)), (5, (2, 4), (1, 3)),
    (10, (4, 7), (3, 6)), (12, (4, 8), (4, 8)),
])
def test_bounds(n, ceil, floor):
    assert tercile_bounds(n) == ceil
    assert tercile_bounds(n, "floor") == floor


def test_bounds_bad_convention():
    with pytest.raises(ValueError, match="convention"):
        tercile_bounds(9, "round")


def test_sort_example_with_ties():
    v = pd.Series({7: 1.0, 3: 1.0, 9: 0.5, 1: 2.0, 4: np.nan})
    assert tercile_sort(v) == ([9, 3], [7], [1])
    assert tercile_sort(v, "floor") == ([9], [3], [7, 1])
    assert tercile_sort(pd.Series({1: 1.0, 2: np.nan, 3: 2.0})) is None


values_strategy = st.dictionaries(
    st.integers(0, 500), st.integers(-5, 5).map(float), min_size=3, max_size=60)


@settings(max_examples=200)
@given(values_strategy, st.sampled_from(["ceil", "floor"]))
def test_sort_partitions(values, convention):
    s = pd.Series(values)
    b, m, t = tercile_sort(s, convention)
    assert sorted(b + m + t) == sorted(values)
    sizes = [len(b), len(m), len(t)]
    assert max(sizes) - min(sizes) <= 1 and min(sizes) >= 1
    assert max(s[b]) <= min(s[m]) and max(s[m]) <= min(s[t])


@settings(max_examples=100)
@given(values_strategy, st.randoms(use_true_random=False))
def test_sort_ignores_input_order(values, rnd):
    items = list(values.items())
    rnd.shuffle(items)
    assert tercile_sort(pd.Series(dict(items))) == tercile_sort(pd.Series(values))


@settings(max_examples=100)
@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=60, unique=True).filter(
    lambda v: len(v) % 3 == 0))
def test_negation_swaps_extremes(vals):
    s = pd.Series(vals, index=range(len(vals)))
    b, m, t = tercile_sort(s)
    nb, nm, nt = tercile_sort(-s)
    assert set(nb) == set(t) and set(nt) == set(b) and set(nm) == set(m)


def _random_panel(rng, n_sub=10, n_days=25):
    paths = {}
    for k in range(1, n_sub + 1):
        path = list(np.cumprod(np.r_[1.0, 1 + rng.normal(0, 0.05, n_days - 1)]))
        for t in rng.choice(n_days, 2, replace=False):
            path[t] = None
        paths[k] = path
    return build_panel(make_rows(paths), min_history=2)


def _oracle_legs(values, panel, convention):
    r = panel.r_tao
    out = []
    for d in r.index:
        members = [(values.at[d, k], k) for k in r.columns
                   if panel.eligibility.at[d, k] and not np.isnan(values.at[d, k])
                   and not np.isnan(r.at[d, k])]
        if len(members) < 3:
            out.append([np.nan] * 3)
            continue
        ranked = [k for _, k in sorted(members)]
        n = len(ranked)
        b1, b2 = ((-(-n // 3), -(-2 * n // 3)) if convention == "ceil" else (n // 3, 2 * n // 3))
        out.append([np.mean([r.at[d, k] for k in g]) for g in (ranked[:b1], ranked[b1:b2], ranked[b2:])])
    return pd.DataFrame(out, index=r.index, columns=["bottom", "middle", "top"])


@pytest.mark.parametrize("convention", ["ceil", "floor"])
def test_legs_match_naive_oracle(rng, convention):
    panel = _random_panel(rng)
    values = pd.DataFrame(rng.integers(0, 4, panel.r_tao.shape).astype(float),
                          index=panel.dates, columns=panel.subnets)
    values.iloc[5, 2] = np.nan
    legs, counts = tercile_legs(values, panel, convention=convention)
    pd.testing.assert_frame_equal(legs, _oracle_legs(values, panel, convention), rtol=1e-13)
    assert (counts.sum(axis=1)[legs["top"].notna()] >= 3).all()


def test_factor_sign_conventions(rng):
    panel = _random_panel(rng)
    ch = CharacteristicMatrix("MCAP", pd.DataFrame(rng.normal(size=panel.r_tao.shape),
                                                   index=panel.dates, columns=panel.subnets))
    smb = build_factor("SMB", ch, panel)
    pd.testing.assert_series_equal(smb.returns, (smb.legs["bottom"] - smb.legs["top"]).rename("SMB"))
    hml = build_factor("HML_EMIS", ch, panel)
    pd.testing.assert_series_equal(hml.returns, -smb.returns.rename("HML_EMIS"))
    with pytest.raises(KeyError):
        build_factor("QMJ", ch, panel)
    assert build_factor("QMJ", ch, panel, long_leg="top").short_leg == "bottom"


def test_market_factor_is_eligible_mean(rng):
    panel = _random_panel(rng)
    mkt = market_factor(panel)
    oracle = panel.r_tao.where(panel.eligibility).mean(axis=1)
    pd.testing.assert_series_equal(mkt.returns, oracle.rename("MKT"))


def test_too_few_members_gives_missing():
    panel = build_panel(make_rows({1: [1.0, 1.1, 1.2], 2: [1.0, 1.2, 1.1]}), min_history=1)
    ch = CharacteristicMatrix("MCAP", panel.r_tao * 0 + 1.0)
    assert build_factor("SMB", ch, panel).returns.isna().all()


def test_build_all_and_frame_order(rng):
    panel = _random_panel(rng)
    shape = panel.r_tao.shape
    chars = {c: CharacteristicMatrix(c, pd.DataFrame(rng.normal(size=shape), index=panel.dates,
                                                     columns=panel.subnets))
             for c in ("MCAP", "EY", "MOM7", "REV")}
    frame = factor_frame(build_all_factors(panel, chars))
    assert list(frame.columns) == [n for n in FACTOR_ORDER if n in ("MKT", "SMB", "HML_EMIS", "WML7", "REV")]


def test_annualize():
    ret, std, sharpe = annualize(0.001, 0.01)
    assert ret == pytest.approx(0.365)
    assert std == pytest.approx(0.01 * math.sqrt(365))
    assert sharpe == pytest.approx(0.1 * math.sqrt(365))
    assert math.isnan(annualize(0.001, 0.0)[2])


def test_tercile_table(rng):
    panel = _random_panel(rng)
    ch = CharacteristicMatrix("MCAP", pd.DataFrame(rng.normal(size=panel.r_tao.shape),
                                                   index=panel.dates, columns=panel.subnets))
    f = build_factor("SMB", ch, panel)
    tab = tercile_table(f)
    assert list(tab.index) == ["bottom", "middle", "top", "SMB"]
    s = f.returns.dropna()
    assert tab.loc["SMB", "ann_return"] == pytest.approx(s.mean() * 365)
    assert tab.loc["SMB", "n"] == len(s)
