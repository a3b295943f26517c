"""Daily tercile sorts and equal-weighted long-short factors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .characteristics import CharacteristicMatrix
from .panel import ReturnPanel

DAYS_PER_YEAR = 365
LEGS = ("bottom", "middle", "top")
TERCILE_CONVENTIONS = ("ceil", "floor")

# factor -> (sort characteristic, long leg); the short leg is the other extreme
FACTOR_SPECS: dict[str, tuple[str, str]] = {
    "SMB": ("MCAP", "bottom"),
    "HML_EMIS": ("EY", "top"),
    "WML7": ("MOM7", "top"),
    "WML30": ("MOM30", "top"),
    "REV": ("REV", "bottom"),
    "LIQ": ("LIQ", "bottom"),
    "STAKE": ("STAKE", "top"),
}
FACTOR_ORDER = ("MKT", "SMB", "HML_EMIS", "WML7", "WML30", "REV", "LIQ", "STAKE")


@dataclass(frozen=True)
class FactorSeries:
    name: str
    returns: pd.Series
    characteristic: str | None = None
    long_leg: str | None = None
    short_leg: str | None = None
    legs: pd.DataFrame | None = None      # bottom/middle/top equal-weighted returns
    counts: pd.DataFrame | None = None    # members per leg per day

    def dropna(self) -> pd.Series:
        return self.returns.dropna()


def tercile_bounds(n: int, convention: str = "ceil") -> tuple[int, int]:
    """Rank cut points: ``ceil(n/3), ceil(2n/3)`` or, with ``floor``, ``floor(n/3), floor(2n/3)``."""
    if convention == "ceil":
        return math.ceil(n / 3), math.ceil(2 * n / 3)
    if convention == "floor":
        return n // 3, 2 * n // 3
    raise ValueError(f"unknown tercile convention {convention!r}; expected one of {TERCILE_CONVENTIONS}")


def tercile_sort(values: pd.Series, convention: str = "ceil"):
    """Split one day's characteristic values into (bottom, middle, top) netuid lists.

    Ordering is ascending by value with ties broken by ascending netuid.
    Returns ``None`` when fewer than three valid values are available.
    """
    values = values.dropna()
    if len(values) < 3:
        return None
    ids = np.asarray(values.index)
    order = np.lexsort((ids, values.to_numpy(float)))
    ranked = ids[order]
    b1, b2 = tercile_bounds(len(ranked), convention)
    return list(ranked[:b1]), list(ranked[b1:b2]), list(ranked[b2:])


def tercile_legs(values: pd.DataFrame, panel: ReturnPanel,
                 denomination: str = "tao",
                 convention: str = "ceil") -> tuple[pd.DataFrame, pd.DataFrame]:
    """Equal-weighted bottom/middle/top returns for every day.

    Members on day t are eligible subnets with a non-missing characteristic
    and a non-missing day-t return.
    """
    r = panel.returns(denomination)
    values = values.reindex(index=r.index, columns=r.columns)
    usable = panel.eligibility.to_numpy() & values.notna().to_numpy() & r.notna().to_numpy()
    v = values.to_numpy(float)
    rr = r.to_numpy(float)
    ids = np.asarray(r.columns)
    T = len(r.index)
    legs = np.full((T, 3), np.nan)
    counts = np.zeros((T, 3), dtype=int)
    for t in range(T):
        cols = np.flatnonzero(usable[t])
        if len(cols) < 3:
            continue
        order = cols[np.lexsort((ids[cols], v[t, cols]))]
        b1, b2 = tercile_bounds(len(order), convention)
        for k, members in enumerate((order[:b1], order[b1:b2], order[b2:])):
            legs[t, k] = rr[t, members].mean()
            counts[t, k] = len(members)
    return (pd.DataFrame(legs, index=r.index, columns=list(LEGS)),
            pd.DataFrame(counts, index=r.index, columns=[f"n_{l}" for l in LEGS]))


def long_short(name: str, legs: pd.DataFrame, long_leg: str, counts=None,
               characteristic: str | None = None) -> FactorSeries:
    short_leg = "top" if long_leg == "bottom" else "bottom"
    ret = (legs[long_leg] - legs[short_leg]).rename(name)
    return FactorSeries(name, ret, characteristic, long_leg, short_leg, legs, counts)


def build_factor(name: str, characteristic: CharacteristicMatrix, panel: ReturnPanel,
                 denomination: str = "tao", long_leg: str | None = None,
                 convention: str = "ceil") -> FactorSeries:
    """Long-short tercile factor with the sign convention in :data:`FACTOR_SPECS`."""
    if long_leg is None:
        if name not in FACTOR_SPECS:
            raise KeyError(f"no sign convention for factor {name!r}; pass long_leg")
        long_leg = FACTOR_SPECS[name][1]
    legs, counts = tercile_legs(characteristic.values, panel, denomination, convention)
    return long_short(name, legs, long_leg, counts, characteristic.name)


def market_factor(panel: ReturnPanel, denomination: str = "tao") -> FactorSeries:
    """Equal-weighted mean return of all eligible subnets."""
    r = panel.returns(denomination).where(panel.eligibility)
    n = r.notna().sum(axis=1)
    ret = r.mean(axis=1).where(n > 0).rename("MKT")
    return FactorSeries("MKT", ret, counts=n.rename("n").to_frame())


def build_all_factors(panel: ReturnPanel, chars: dict[str, CharacteristicMatrix],
                      denomination: str = "tao", convention: str = "ceil") -> dict[str, FactorSeries]:
    out = {"MKT": market_factor(panel, denomination)}
    for name, (cname, _) in FACTOR_SPECS.items():
        if cname in chars:
            out[name] = build_factor(name, chars[cname], panel, denomination, convention=convention)
    return out


def factor_frame(factors) -> pd.DataFrame:
    """Wide date x factor frame in canonical order."""
    if isinstance(factors, dict):
        factors = list(factors.values())
    cols = {f.name: f.returns for f in factors}
    order = [n for n in FACTOR_ORDER if n in cols] + [n for n in cols if n not in FACTOR_ORDER]
    return pd.DataFrame({n: cols[n] for n in order})


def annualize(mean: float, std: float) -> tuple[float, float, float]:
    """Arithmetic annualization: ``(mean*365, std*sqrt(365), Sharpe)``."""
    ann_ret = mean * DAYS_PER_YEAR
    ann_std = std * math.sqrt(DAYS_PER_YEAR)
    sharpe = ann_ret / ann_std if ann_std > 0 else float("nan")
    return ann_ret, ann_std, sharpe


def tercile_table(factor: FactorSeries) -> pd.DataFrame:
    """Mean, annualized return/std and Sharpe for each leg and the long-short series."""
    series = {leg: factor.legs[leg] for leg in LEGS}
    series[factor.name] = factor.returns
    rows = {}
    for label, s in series.items():
        s = s.dropna()
        mean = float(s.mean()) if len(s) else float("nan")
        std = float(s.std(ddof=1)) if len(s) > 1 else float("nan")
        ann_ret, ann_std, sharpe = annualize(mean, std)
        rows[label] = {"mean": mean, "ann_return": ann_ret, "ann_std": ann_std,
                       "sharpe": sharpe, "n": len(s)}
    return pd.DataFrame.from_dict(rows, orient="index")
