"""Lagged sorting characteristics.

The value stored at row ``t`` is what an investor knows at the close of
``t - 1``, so it can be used directly to form day-``t`` portfolios.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from .ingest import RAO_PER_TAO
from .panel import ReturnPanel

PRICE_WINDOWS = {"REV": 1, "MOM7": 7, "MOM30": 30}
STATE_CHARACTERISTICS = ("MCAP", "EY", "LIQ", "STAKE")
RISK_CHARACTERISTICS = ("VOL30", "DOWNVOL30", "UPVOL30", "IVOL30", "BETA30", "SKEW30")
ALL_CHARACTERISTICS = STATE_CHARACTERISTICS + tuple(PRICE_WINDOWS) + RISK_CHARACTERISTICS
RISK_WINDOW = 30


class UnknownCharacteristicError(KeyError):
    pass


@dataclass(frozen=True)
class CharacteristicMatrix:
    name: str
    values: pd.DataFrame
    n_masked: int = 0  # values nullified because their window spans a gap


def _lag_state(panel: ReturnPanel, field: str) -> pd.DataFrame:
    m = panel.state[field].where(panel.active)
    return m.shift(1)


def _price_ratio(panel: ReturnPanel, window: int) -> tuple[pd.DataFrame, int]:
    p = panel.prices
    life = panel.lifecycle
    raw = p.shift(1) / p.shift(1 + window) - 1.0
    full = p.notna().astype(int).rolling(window + 1, min_periods=window + 1).sum().shift(1)
    same = life.shift(1).eq(life.shift(1 + window))
    ok = full.eq(window + 1) & same
    masked = int((raw.notna() & ~ok).to_numpy().sum())
    return raw.where(ok), masked


def characteristic(name: str, panel: ReturnPanel) -> CharacteristicMatrix:
    """One of MCAP, EY, MOM7, MOM30, REV, LIQ, STAKE, lagged one day.

    Momentum and reversal are price ratios over complete in-lifecycle
    windows; a ratio whose endpoints exist but whose window contains a
    missing day or a lifecycle change is nulled and counted in ``n_masked``.
    """
    if name in PRICE_WINDOWS:
        values, masked = _price_ratio(panel, PRICE_WINDOWS[name])
        return CharacteristicMatrix(name, values, masked)
    if name == "MCAP":
        values = _lag_state(panel, "mcap_tao")
    elif name == "LIQ":
        values = _lag_state(panel, "tau_reserve")
    elif name == "STAKE":
        values = _lag_state(panel, "alpha_staked")
    elif name == "EY":
        mcap_rao = _lag_state(panel, "mcap_tao") * RAO_PER_TAO
        values = _lag_state(panel, "emission_rao_per_day") / mcap_rao.where(mcap_rao > 0)
    elif name in RISK_CHARACTERISTICS:
        raise UnknownCharacteristicError(f"{name} is a rolling risk measure; use rolling_risk()")
    else:
        raise UnknownCharacteristicError(f"unknown characteristic {name!r}")
    return CharacteristicMatrix(name, values)


def _windows(frame: pd.DataFrame, window: int) -> np.ndarray:
    """Trailing windows of lagged rows: out[t, j, :] covers rows t-window .. t-1."""
    x = frame.to_numpy(float)
    pad = np.full((window, x.shape[1]), np.nan)
    x = np.vstack([pad, x[:-1]]) if len(x) else x
    return sliding_window_view(x, window, axis=0)


def _skew(w: np.ndarray, n: int) -> np.ndarray:
    mu = w.mean(axis=-1, keepdims=True)
    d = w - mu
    m2 = (d ** 2).mean(axis=-1)
    m3 = (d ** 3).mean(axis=-1)
    scale = np.maximum(np.abs(mu[..., 0]), 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        g1 = m3 / m2 ** 1.5
        out = g1 * np.sqrt(n * (n - 1.0)) / (n - 2.0)
    out[~(np.sqrt(m2) > 1e-12 * scale)] = np.nan
    return out


def rolling_risk(name: str, panel: ReturnPanel, market: pd.Series | None = None,
                 window: int = RISK_WINDOW, denomination: str = "tao") -> CharacteristicMatrix:
    """Trailing ``window``-day risk measure from returns on ``t-window .. t-1``.

    Requires ``window`` consecutive non-missing returns (which rules out a
    lifecycle gap). BETA30 and IVOL30 come from an intercept-plus-market OLS
    on the same window; IVOL30 is the residual standard error (n - 2 dof).
    """
    if name not in RISK_CHARACTERISTICS:
        raise UnknownCharacteristicError(f"unknown risk characteristic {name!r}")
    r = panel.returns(denomination)
    w = _windows(r, window)                       # (T, N, window)
    complete = ~np.isnan(w).any(axis=-1)
    n = float(window)
    with np.errstate(invalid="ignore"):
        if name == "VOL30":
            out = w.std(axis=-1, ddof=1)
        elif name == "DOWNVOL30":
            out = np.sqrt((np.minimum(w, 0.0) ** 2).mean(axis=-1))
        elif name == "UPVOL30":
            out = np.sqrt((np.maximum(w, 0.0) ** 2).mean(axis=-1))
        elif name == "SKEW30":
            out = _skew(w, window)
        else:
            if market is None:
                raise ValueError(f"{name} needs a market return series")
            m = market.reindex(r.index).to_frame()
            mw = _windows(m, window)[:, 0, :]     # (T, window)
            complete &= ~np.isnan(mw).any(axis=-1)[:, None]
            mc = mw - mw.mean(axis=-1, keepdims=True)
            var_m = (mc ** 2).sum(axis=-1)
            rc = w - w.mean(axis=-1, keepdims=True)
            cov = np.einsum("tnw,tw->tn", rc, mc)
            with np.errstate(divide="ignore"):
                beta = cov / var_m[:, None]
            beta[~(var_m > 0)] = np.nan
            if name == "BETA30":
                out = beta
            else:
                resid = rc - beta[..., None] * mc[:, None, :]
                out = np.sqrt((resid ** 2).sum(axis=-1) / (n - 2.0))
    out = np.where(complete, out, np.nan)
    values = pd.DataFrame(out, index=r.index, columns=r.columns)
    return CharacteristicMatrix(name, values)


def all_characteristics(panel: ReturnPanel, market: pd.Series | None = None,
                        include_risk: bool = True) -> dict[str, CharacteristicMatrix]:
    out = {n: characteristic(n, panel) for n in STATE_CHARACTERISTICS + tuple(PRICE_WINDOWS)}
    if include_risk:
        for n in RISK_CHARACTERISTICS:
            if n in ("BETA30", "IVOL30") and market is None:
                continue
            out[n] = rolling_risk(n, panel, market)
    return out
