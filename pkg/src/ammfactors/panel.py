"""Survivorship-safe daily return panel.

Layout: every matrix is a ``DataFrame`` indexed by a complete daily
``DatetimeIndex`` with one column per netuid. Missing values are ``NaN``
(``False`` for boolean matrices).

A subnet slot's *lifecycle* ordinal starts at 0 and increments each time the
slot goes active -> startup -> active again (deregistration and re-registration
of the slot). Returns never span two lifecycles.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .ingest import RAO_PER_TAO, RawSnapshotRow

log = logging.getLogger(__name__)

MIN_HISTORY = 7
ROOT_NETUID = 0
STATE_FIELDS = ("price_tao", "mcap_tao", "tau_reserve", "alpha_reserve",
                "alpha_staked", "emission_rao_per_day")


class PanelError(ValueError):
    pass


@dataclass(frozen=True)
class ReturnPanel:
    r_tao: pd.DataFrame
    r_usd: pd.DataFrame
    eligibility: pd.DataFrame
    prices: pd.DataFrame            # active-day prices only
    lifecycle: pd.DataFrame         # ordinal on active days, NaN elsewhere
    state: dict[str, pd.DataFrame] = field(default_factory=dict)
    fx_return: pd.Series | None = None
    quarantined: tuple = ()
    win_bound: float | None = None

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.r_tao.index

    @property
    def subnets(self) -> pd.Index:
        return self.r_tao.columns

    @property
    def active(self) -> pd.DataFrame:
        return self.prices.notna()

    def returns(self, denomination: str = "tao") -> pd.DataFrame:
        if denomination == "tao":
            return self.r_tao
        if denomination == "usd":
            return self.r_usd
        raise ValueError(f"unknown denomination {denomination!r}")

    def eligible_counts(self) -> pd.Series:
        return self.eligibility.sum(axis=1).rename("n_eligible")

    @property
    def emission_tao(self) -> pd.DataFrame:
        return self.state["emission_rao_per_day"] / RAO_PER_TAO


def rows_frame(rows: Sequence[RawSnapshotRow]) -> pd.DataFrame:
    """Long-format frame (one row per subnet-day) of snapshot rows."""
    return pd.DataFrame(
        {
            "date": pd.to_datetime([r.date for r in rows]),
            "netuid": [r.netuid for r in rows],
            "startup_mode": [r.startup_mode for r in rows],
            **{f: [getattr(r, f) for r in rows] for f in STATE_FIELDS},
        }
    )


def _wide(rows):
    frame = rows if isinstance(rows, pd.DataFrame) else rows_frame(rows)
    if frame.duplicated(["date", "netuid"]).any():
        d = frame[frame.duplicated(["date", "netuid"])].iloc[0]
        raise PanelError(f"duplicate (date, netuid) = ({d.date.date()}, {d.netuid})")
    dates = pd.date_range(frame["date"].min(), frame["date"].max(), freq="D")
    subnets = pd.Index(sorted(frame["netuid"].unique()), name="netuid")
    indexed = frame.set_index(["date", "netuid"])

    def flags(series):
        m = series.unstack("netuid", fill_value=False)
        return m.reindex(index=dates, columns=subnets, fill_value=False).astype(bool)

    present = flags(indexed["startup_mode"].notna())
    startup = flags(indexed["startup_mode"].eq(True)) & present
    state = {f: indexed[f].unstack("netuid").reindex(index=dates, columns=subnets).astype(float)
             for f in STATE_FIELDS}
    for m in [startup, present, *state.values()]:
        m.index.name = "date"
    return dates, subnets, present, startup, state


def lifecycle_ordinals(present: pd.DataFrame, startup: pd.DataFrame) -> pd.DataFrame:
    """Lifecycle ordinal for every non-startup observed day (NaN elsewhere)."""
    s = startup.to_numpy()
    a = (present & ~startup).to_numpy()
    prev_s = np.vstack([np.zeros((1, s.shape[1]), bool), s[:-1]])
    episode_start = s & ~prev_s
    seen_active_before = np.vstack(
        [np.zeros((1, a.shape[1]), bool), np.cumsum(a, axis=0)[:-1] > 0]
    )
    ordinal = np.cumsum(episode_start & seen_active_before, axis=0).astype(float)
    ordinal[~a] = np.nan
    return pd.DataFrame(ordinal, index=present.index, columns=present.columns)


def compute_returns(rows: Sequence[RawSnapshotRow] | pd.DataFrame,
                    fx: pd.Series | None = None) -> ReturnPanel:
    """Raw (un-winsorized) TAO and USD simple returns.

    ``rows`` is a sequence of snapshot rows or an equivalent long frame
    (see ``rows_frame``).

    Active days with a missing or non-positive price are quarantined: they
    are reported and treated as missing, which also blanks the adjacent
    returns.
    """
    if len(rows) == 0:
        raise PanelError("no snapshot rows")
    dates, subnets, present, startup, state = _wide(rows)
    if len(dates) < 2:
        raise PanelError("rows must span at least 2 dates")
    lifecycle = lifecycle_ordinals(present, startup)
    price = state["price_tao"]
    active = present & ~startup
    bad = active & ~(price > 0)
    quarantined = tuple(
        (d.date().isoformat(), int(n)) for d, n in bad.stack()[lambda s: s].index
    )
    if quarantined:
        log.warning("quarantined %d active subnet-day(s) with non-positive price", len(quarantined))
    prices = price.where(active & ~bad)
    lifecycle = lifecycle.where(prices.notna())

    same_life = lifecycle.eq(lifecycle.shift(1))
    r_tao = (prices / prices.shift(1) - 1.0).where(same_life)

    if fx is not None:
        fx = fx.reindex(dates)
        fx_ret = (fx / fx.shift(1) - 1.0).rename("r_fx")
        r_usd = (1.0 + r_tao).mul(1.0 + fx_ret, axis=0) - 1.0
    else:
        fx_ret = None
        r_usd = pd.DataFrame(np.nan, index=dates, columns=subnets)
    for m in (r_tao, r_usd, prices, lifecycle):
        m.index.name = "date"
    state = {k: v.where(present) for k, v in state.items()}
    state["startup_mode"] = startup
    elig = pd.DataFrame(False, index=dates, columns=subnets)
    return ReturnPanel(r_tao=r_tao, r_usd=r_usd, eligibility=elig, prices=prices,
                       lifecycle=lifecycle, state=state, fx_return=fx_ret,
                       quarantined=quarantined)


def winsorize(panel: ReturnPanel, bound: float = 1.0) -> ReturnPanel:
    """Clamp every present return into ``[-bound, bound]``."""
    return replace(panel, r_tao=panel.r_tao.clip(-bound, bound),
                   r_usd=panel.r_usd.clip(-bound, bound), win_bound=bound)


def prior_return_counts(panel: ReturnPanel) -> pd.DataFrame:
    """Number of non-missing returns strictly before each day within the current lifecycle."""
    has = panel.r_tao.notna().astype(float)
    before = has.cumsum() - has
    life = panel.lifecycle.ffill()
    starts = life.notna() & life.ne(life.shift(1))
    base = before.where(starts).ffill().fillna(0.0)
    return before - base


def apply_eligibility(panel: ReturnPanel, min_history: int = MIN_HISTORY) -> ReturnPanel:
    """Mark subnet-days usable for portfolio formation.

    Eligible iff the subnet is active that day, is not the root network and
    has at least ``min_history`` returns earlier in the same lifecycle.
    """
    prior = prior_return_counts(panel)
    elig = panel.active & (prior >= min_history)
    if ROOT_NETUID in elig.columns:
        elig[ROOT_NETUID] = False
    return replace(panel, eligibility=elig.astype(bool))


def build_panel(rows: Sequence[RawSnapshotRow] | pd.DataFrame, fx: pd.Series | None = None,
                bound: float = 1.0, min_history: int = MIN_HISTORY) -> ReturnPanel:
    return apply_eligibility(winsorize(compute_returns(rows, fx), bound), min_history)


# -- persistence ----------------------------------------------------------

_MATRICES = ("r_tao", "r_usd", "eligibility", "prices", "lifecycle")


def write_panel(panel: ReturnPanel, directory) -> list[Path]:
    """Write every matrix as a wide ``date x netuid`` CSV."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name in _MATRICES:
        m = getattr(panel, name)
        if name == "eligibility":
            m = m.astype(int)
        p = directory / f"{name}.csv"
        m.to_csv(p, date_format="%Y-%m-%d")
        written.append(p)
    for name, m in panel.state.items():
        p = directory / f"state_{name}.csv"
        (m.astype(int) if m.dtypes.iloc[0] == bool else m).to_csv(p, date_format="%Y-%m-%d")
        written.append(p)
    fx = panel.fx_return if panel.fx_return is not None else pd.Series(np.nan, index=panel.dates)
    p = directory / "fx_return.csv"
    fx.rename("r_fx").to_csv(p, date_format="%Y-%m-%d", index_label="date")
    written.append(p)
    return written


def _read_wide(path: Path) -> pd.DataFrame:
    m = pd.read_csv(path, index_col=0, parse_dates=[0])
    m.columns = pd.Index([int(c) for c in m.columns], name="netuid")
    m.index = pd.DatetimeIndex(m.index, freq="D", name="date")
    return m


def read_panel(directory) -> ReturnPanel:
    directory = Path(directory)
    missing = [n for n in _MATRICES if not (directory / f"{n}.csv").exists()]
    if missing:
        raise FileNotFoundError(f"{directory}: missing panel files {missing}")
    mats = {n: _read_wide(directory / f"{n}.csv") for n in _MATRICES}
    mats["eligibility"] = mats["eligibility"].astype(bool)
    state = {}
    for p in sorted(directory.glob("state_*.csv")):
        name = p.stem[len("state_"):]
        m = _read_wide(p)
        state[name] = m.astype(bool) if name == "startup_mode" else m
    fx = pd.read_csv(directory / "fx_return.csv", index_col=0, parse_dates=[0])["r_fx"]
    fx.index = pd.DatetimeIndex(fx.index, freq="D", name="date")
    if fx.isna().all():
        fx = None
    return ReturnPanel(state=state, fx_return=fx, **mats)
