"""Applied studies on factor series: subsamples, the halving break, capacity, risk sorts."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .characteristics import CharacteristicMatrix
from .econometrics import NW_LAGS, ols
from .factors import DAYS_PER_YEAR, tercile_bounds, tercile_legs
from .panel import ReturnPanel

HALVING_DATE = pd.Timestamp("2025-12-14")
SPLIT_DATE = pd.Timestamp("2025-09-05")
EVENT_WINDOWS = (30, 45, 60, 90)
PLACEBO_OFFSETS = (-90, -60, -30, 30, 60, 90)
AUM_GRID = (1e4, 1e5, 1e6, 1e7)
CERTAIN_LOSS_SIGMAS = 3.0

RISK_LABELS = {
    "VOL30": "Total Volatility",
    "DOWNVOL30": "Downside Vol",
    "UPVOL30": "Upside Vol",
    "IVOL30": "Idiosyncratic Vol",
    "BETA30": "Market Beta",
    "SKEW30": "Skewness",
}


def _mean_t(s: pd.Series) -> tuple[float, float, int]:
    s = s.dropna()
    n = len(s)
    if n < 2:
        return (float(s.mean()) if n else math.nan), math.nan, n
    mean, std = float(s.mean()), float(s.std(ddof=1))
    t = mean / (std / math.sqrt(n)) if std > 0 else math.nan
    return mean, t, n


def subsample_split(factors: pd.DataFrame, split_date=SPLIT_DATE) -> pd.DataFrame:
    """Per-factor mean and OLS t for the full sample and the halves ``<= split`` / ``> split``."""
    split_date = pd.Timestamp(split_date)
    idx = factors.dropna(how="all").index
    if len(idx) == 0 or not (idx[0] <= split_date < idx[-1]):
        raise ValueError(f"split date {split_date.date()} is not inside the sample")
    rows = {}
    for name in factors.columns:
        s = factors[name]
        parts = {"full": s, "first": s[s.index <= split_date], "second": s[s.index > split_date]}
        row = {}
        for label, part in parts.items():
            m, t, n = _mean_t(part)
            row.update({f"{label}_mean": m, f"{label}_t": t, f"{label}_n": n})
        rows[name] = row
    return pd.DataFrame.from_dict(rows, orient="index")


# -- event study ----------------------------------------------------------

@dataclass(frozen=True)
class EventStudyResult:
    label: str
    event_date: pd.Timestamp
    window: int | None
    available: bool
    pre_mean: float = math.nan
    post_mean: float = math.nan
    ratio: float = math.nan
    beta: float = math.nan
    t_nw: float = math.nan
    p_value: float = math.nan
    alpha: float = math.nan
    gamma: float = math.nan
    n_pre: int = 0
    n_post: int = 0

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["event_date"] = self.event_date.date().isoformat()
        return d


def event_regression(smb: pd.Series, mkt: pd.Series | None, event_date, start=None,
                     end=None, hac_lags: int = NW_LAGS, label: str = "",
                     window: int | None = None) -> EventStudyResult:
    """SMB on a constant, a post-event dummy (event day counts as post) and MKT.

    Pass ``mkt=None`` to drop the market control, in which case the dummy
    coefficient is exactly the post-minus-pre mean difference.
    """
    event_date = pd.Timestamp(event_date)
    cols = {"SMB": smb}
    if mkt is not None:
        cols["MKT"] = mkt
    data = pd.DataFrame(cols).dropna()
    if start is not None:
        data = data[data.index >= pd.Timestamp(start)]
    if end is not None:
        data = data[data.index <= pd.Timestamp(end)]
    post = (data.index >= event_date).astype(float)
    pre_s, post_s = data["SMB"][post == 0], data["SMB"][post == 1]
    if len(pre_s) < 2 or len(post_s) < 2 or len(data) <= hac_lags + 3:
        return EventStudyResult(label, event_date, window, False)
    X = pd.DataFrame({"post": post}, index=data.index)
    if mkt is not None:
        X["MKT"] = data["MKT"]
    res = ols(data["SMB"], X, intercept=True, hac_lags=hac_lags)
    pre_mean, post_mean = float(pre_s.mean()), float(post_s.mean())
    return EventStudyResult(
        label=label, event_date=event_date, window=window, available=True,
        pre_mean=pre_mean, post_mean=post_mean,
        ratio=post_mean / pre_mean if pre_mean != 0 else math.nan,
        beta=res.param("post"), t_nw=float(res.hac_tvalues[1]),
        p_value=float(res.hac_pvalues[1]), alpha=res.param("const"),
        gamma=res.param("MKT") if mkt is not None else 0.0,
        n_pre=len(pre_s), n_post=len(post_s),
    )


def window_bounds(event_date, window: int) -> tuple[pd.Timestamp, pd.Timestamp]:
    """``window`` days before the event and ``window`` days from the event on."""
    event_date = pd.Timestamp(event_date)
    return event_date - pd.Timedelta(days=window), event_date + pd.Timedelta(days=window - 1)


def _symmetric(smb, mkt, event_date, window, hac_lags, label) -> EventStudyResult:
    start, end = window_bounds(event_date, window)
    valid = smb.dropna().index
    if mkt is not None:
        valid = valid.intersection(mkt.dropna().index)
    if len(valid) == 0 or start < valid[0] or end > valid[-1]:
        return EventStudyResult(label, pd.Timestamp(event_date), window, False)
    return event_regression(smb, mkt, event_date, start, end, hac_lags, label, window)


def halving_event_study(smb: pd.Series, mkt: pd.Series | None, event_date=HALVING_DATE,
                        windows=EVENT_WINDOWS, hac_lags: int = NW_LAGS,
                        full_sample: bool = True) -> list[EventStudyResult]:
    """One row per symmetric window plus an all-data row."""
    out = [_symmetric(smb, mkt, event_date, w, hac_lags, f"+/-{w}") for w in windows]
    if full_sample:
        out.append(event_regression(smb, mkt, event_date, hac_lags=hac_lags, label="full"))
    return out


@dataclass(frozen=True)
class PlaceboResult:
    offset: int
    result: EventStudyResult
    exceeds_true: bool
    significant: bool


def placebo_scan(smb: pd.Series, mkt: pd.Series | None, event_date=HALVING_DATE,
                 offsets=PLACEBO_OFFSETS, window: int = 60, hac_lags: int = NW_LAGS,
                 alpha: float = 0.05) -> tuple[EventStudyResult, list[PlaceboResult]]:
    """Re-run the windowed break regression at shifted (false) event dates."""
    event_date = pd.Timestamp(event_date)
    true = _symmetric(smb, mkt, event_date, window, hac_lags, "event")
    rows = []
    for off in offsets:
        d = event_date + pd.Timedelta(days=int(off))
        r = _symmetric(smb, mkt, d, window, hac_lags, f"{off:+d}")
        exceeds = bool(r.available and true.available and abs(r.beta) > abs(true.beta))
        rows.append(PlaceboResult(int(off), r, exceeds, bool(r.available and r.p_value < alpha)))
    return true, rows


def halving_series(smb: pd.Series, rolling: int = 30) -> pd.DataFrame:
    """Cumulative SMB wealth and its trailing mean, for the halving figure."""
    s = smb.dropna()
    return pd.DataFrame({"smb": s, "cumulative": (1.0 + s).cumprod(),
                         f"rolling_mean_{rolling}": s.rolling(rolling, min_periods=rolling).mean()})


# -- slippage and capacity -------------------------------------------------

@dataclass(frozen=True)
class SlippageReport:
    table: pd.DataFrame           # index AUM (USD); fractions, not percent
    unit_slippage: dict           # tercile -> one-way slippage per USD of AUM
    gross: float
    gross_std: float | None
    turnover: float
    notes: dict = field(default_factory=dict)


def capacity_table(unit_slippage: dict, aum_grid=AUM_GRID, gross_smb: float = 0.0,
                   gross_std: float | None = None, turnover: float = 1.0) -> SlippageReport:
    """Slippage, round-trip cost and net SMB at each AUM from per-USD slippage rates.

    Round trip = buy the small tercile + sell the large tercile, times
    turnover. Net SMB is unavailable once the round-trip cost reaches 100%;
    net Sharpe is unavailable when the net mean is more than three gross
    standard deviations below zero (a certain loss).
    """
    rows = {}
    prev_aum, prev = None, None
    for aum in sorted(float(a) for a in aum_grid):
        if prev_aum:
            # chain from the previous row so a x10 grid step is exactly x10
            step = aum / prev_aum
            slip = {k: v * step for k, v in prev.items() if k in unit_slippage}
            rt = prev["rt_cost"] * step
        else:
            slip = {k: aum * v for k, v in unit_slippage.items()}
            rt = (slip["small"] + slip["large"]) * turnover
        net = gross_smb - rt if rt < 1.0 else math.nan
        if gross_std and not math.isnan(net) and net + CERTAIN_LOSS_SIGMAS * gross_std >= 0:
            sharpe = net * DAYS_PER_YEAR / (gross_std * math.sqrt(DAYS_PER_YEAR))
        else:
            sharpe = math.nan
        rows[aum] = {**slip, "rt_cost": rt, "net_smb": net, "net_sharpe": sharpe}
        prev_aum, prev = aum, rows[aum]
    table = pd.DataFrame.from_dict(rows, orient="index")
    table.index.name = "aum_usd"
    return SlippageReport(table, dict(unit_slippage), gross_smb, gross_std, turnover)


def slippage_capacity(reserves_by_tercile: dict, tao_usd: float, aum_grid=AUM_GRID,
                      gross_smb: float = 0.0, gross_std: float | None = None,
                      turnover: float = 1.0, n_eligible: int | None = None) -> SlippageReport:
    """Capacity table from one cross-section of TAO reserves.

    AUM is converted to TAO and split equally over all ``n_eligible``
    subnets (default: every subnet passed in); a tercile's slippage is the
    mean of ``notional / reserve`` over its members.
    """
    if not tao_usd > 0:
        raise ValueError("tao_usd must be > 0")
    res = {k: pd.Series(v, dtype=float) for k, v in reserves_by_tercile.items()}
    for k, s in res.items():
        bad = s[~(s > 0)]
        if len(bad):
            raise ValueError(f"{k} tercile: non-positive reserve for subnet {bad.index[0]}")
    n = n_eligible or sum(len(s) for s in res.values())
    unit = {k: float((1.0 / s).mean()) / (tao_usd * n) for k, s in res.items()}
    report = capacity_table(unit, aum_grid, gross_smb, gross_std, turnover)
    report.notes.update({f"median_reserve_{k}": float(s.median()) for k, s in res.items()})
    report.notes["n_eligible"] = n
    report.notes["tao_usd"] = tao_usd
    return report


def daily_capacity(panel: ReturnPanel, size: CharacteristicMatrix, reserves: CharacteristicMatrix,
                   tao_usd: pd.Series, aum_grid=AUM_GRID, gross_smb: float = 0.0,
                   gross_std: float | None = None, turnover: float = 1.0,
                   convention: str = "ceil") -> SlippageReport:
    """Capacity table using each day's eligible cross-section and lagged reserves.

    Per-USD tercile slippage is computed day by day (size terciles, daily
    TAO/USD price, daily eligible count) and then averaged over days.
    """
    fx = tao_usd.reindex(panel.dates)
    usable = panel.eligibility & size.values.notna() & reserves.values.notna()
    ids = np.asarray(panel.subnets)
    per_day, pooled = [], {"small": [], "medium": [], "large": []}
    for t, day in enumerate(panel.dates):
        cols = np.flatnonzero(usable.iloc[t].to_numpy())
        if len(cols) < 3 or not fx.iloc[t] > 0:
            continue
        v = size.values.iloc[t].to_numpy(float)
        order = cols[np.lexsort((ids[cols], v[cols]))]
        b1, b2 = tercile_bounds(len(order), convention)
        tau = reserves.values.iloc[t].to_numpy(float)
        scale = 1.0 / (fx.iloc[t] * len(order))
        row = {}
        for k, members in zip(pooled, (order[:b1], order[b1:b2], order[b2:])):
            row[k] = float(np.mean(1.0 / tau[members])) * scale
            pooled[k].extend(tau[members])
        per_day.append(row)
    if not per_day:
        raise ValueError("no day has both an eligible cross-section and a TAO/USD price")
    unit = pd.DataFrame(per_day).mean().to_dict()
    report = capacity_table(unit, aum_grid, gross_smb, gross_std, turnover)
    report.notes.update({f"median_reserve_{k}": float(np.median(v)) for k, v in pooled.items()})
    report.notes["n_days"] = len(per_day)
    report.notes["median_tao_usd"] = float(fx.median())
    return report


# -- risk-sorted portfolios -------------------------------------------------

def vol_sorts(panel: ReturnPanel, risk_chars: dict[str, CharacteristicMatrix],
              denomination: str = "tao", convention: str = "ceil") -> tuple[pd.DataFrame, pd.DataFrame]:
    """Tercile means and the high-minus-low series for each rolling risk measure.

    Returns ``(table, hl_series)``; the table has low/mid/high/hl means and
    the OLS t of the high-minus-low series.
    """
    rows, hl = {}, {}
    for name, char in risk_chars.items():
        legs, _ = tercile_legs(char.values, panel, denomination, convention)
        spread = legs["top"] - legs["bottom"]
        m, t, n = _mean_t(spread)
        rows[name] = {"label": RISK_LABELS.get(name, name), "low": legs["bottom"].mean(),
                      "mid": legs["middle"].mean(), "high": legs["top"].mean(),
                      "hl": m, "t_hl": t, "n": n}
        hl[name] = spread
    return pd.DataFrame.from_dict(rows, orient="index"), pd.DataFrame(hl)
