"""Synthetic network of constant-product pools fed by daily emissions.

Each simulated day:

1. the day's total emission is split across active pools by the configured
   policy (price-proportional, or proportional to an EMA of net TAO inflows);
2. ``restake_fraction`` of each pool's emission is staked into that pool;
3. optional idiosyncratic noise multiplies ``tau`` by a mean-one lognormal
   shock with ``alpha`` rescaled so the constant product is untouched;
4. the close-of-day state is written out in the snapshot schema.
"""
from __future__ import annotations

import configparser
import datetime as dt
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import amm_core
from .amm_core import EmissionPolicy, PoolState
from .characteristics import characteristic
from .experiments import EventStudyResult, halving_event_study
from .factors import build_factor, market_factor
from .ingest import RAO_PER_TAO, RawSnapshotRow
from .panel import build_panel


@dataclass(frozen=True)
class SynthConfig:
    n_subnets: int = 60
    reserve_low: float = 100.0
    reserve_high: float = 10_000.0
    daily_emission: float = 50.0
    policy: str = "price"
    ema_half_life: float = 30.0
    restake_fraction: float = 1.0
    noise_std: float = 0.0          # approx. daily std of the price shock
    halving_day: int | None = None
    n_days: int = 90
    seed: int = 0
    start_date: dt.date = dt.date(2025, 2, 14)
    initial_price: float = 1.0
    staked_ratio: float = 1.0       # alpha held by stakers / alpha in pool, at launch
    tao_usd: float = 345.0
    fx_vol: float = 0.0
    reserves: tuple | None = None   # explicit initial TAO reserves (overrides the draw)
    recycle: tuple = ()             # ((subnet index, first startup day, n startup days), ...)

    def __post_init__(self):
        if self.n_subnets < 1 or self.n_days < 2:
            raise ValueError("need at least one subnet and two days")
        if not (0 < self.reserve_low <= self.reserve_high):
            raise ValueError("reserve bounds must satisfy 0 < low <= high")
        if not 0.0 <= self.restake_fraction <= 1.0:
            raise ValueError("restake_fraction must be in [0, 1]")
        if self.daily_emission < 0 or self.noise_std < 0 or self.fx_vol < 0:
            raise ValueError("emission and noise levels must be >= 0")
        if self.halving_day is not None and not 0 < self.halving_day < self.n_days:
            raise ValueError("halving_day must be inside the simulated period")
        if self.reserves is not None and len(self.reserves) != self.n_subnets:
            raise ValueError("reserves must have one entry per subnet")
        EmissionPolicy(self.policy, self.ema_half_life)

    @property
    def emission_policy(self) -> EmissionPolicy:
        return EmissionPolicy(self.policy, self.ema_half_life)

    @property
    def dates(self) -> pd.DatetimeIndex:
        return pd.date_range(pd.Timestamp(self.start_date), periods=self.n_days, freq="D")

    def total_emission(self, day: int) -> float:
        if self.halving_day is not None and day >= self.halving_day:
            return self.daily_emission / 2.0
        return self.daily_emission


# Pools deep relative to the emission flow keep reserve drift over 200 days
# small, while 900 pools average away 1%/day price noise in the tercile legs.
HALVING_PRESET = dict(n_subnets=900, reserve_low=100.0, reserve_high=1000.0,
                      daily_emission=150.0, n_days=200, halving_day=100)


def halving_config(**overrides) -> SynthConfig:
    return SynthConfig(**{**HALVING_PRESET, **overrides})


def _coerce(value: str, kind):
    kind = str(kind)
    if value.strip().lower() in ("", "none"):
        return None
    if "date" in kind:
        return dt.date.fromisoformat(value.strip())
    if "tuple" in kind:
        parts = [p for p in value.replace(";", ",").split(",") if p.strip()]
        if "reserves" in kind:
            return tuple(float(p) for p in parts)
        nums = [int(p) for p in parts]
        return tuple(tuple(nums[i:i + 3]) for i in range(0, len(nums), 3))
    if kind.startswith("int"):
        return int(value)
    if kind.startswith("float"):
        return float(value)
    return value.strip()


def load_config(path) -> SynthConfig:
    """Read ``key = value`` lines (an optional ``[synth]`` header is allowed).

    Keys are the :class:`SynthConfig` field names; ``recycle`` is a flat
    comma list of ``index, day, length`` triples and ``reserves`` a comma list.
    """
    text = Path(path).read_text(encoding="utf-8")
    if not text.lstrip().startswith("["):
        text = "[synth]\n" + text
    parser = configparser.ConfigParser()
    parser.read_string(text)
    section = parser["synth"] if parser.has_section("synth") else parser[parser.sections()[0]]
    kinds = {f.name: f.type for f in fields(SynthConfig)}
    kwargs = {}
    for key, value in section.items():
        if key not in kinds:
            raise ValueError(f"unknown synth config key {key!r}")
        kind = kinds[key] if key != "reserves" else "tuple reserves"
        kwargs[key] = _coerce(value, kind)
    return SynthConfig(**kwargs)


def _startup_mask(config: SynthConfig) -> np.ndarray:
    mask = np.zeros((config.n_days, config.n_subnets), dtype=bool)
    for idx, first, length in config.recycle:
        mask[first:first + length, idx] = True
    return mask


def simulate(config: SynthConfig) -> dict[str, np.ndarray]:
    """Run the simulator and return ``(n_days, n_subnets)`` state arrays."""
    rng = np.random.default_rng(config.seed)
    n, T = config.n_subnets, config.n_days
    lo, hi = math.log(config.reserve_low), math.log(config.reserve_high)

    def fresh(size):
        return np.exp(rng.uniform(lo, hi, size))

    tau = np.asarray(config.reserves, float) if config.reserves is not None else fresh(n)
    alpha = tau / config.initial_price
    staked = config.staked_ratio * alpha
    startup = _startup_mask(config)
    policy = config.emission_policy
    ema = np.full(n, config.daily_emission / n)
    inflow = np.zeros(n)

    out = {k: np.full((T, n), np.nan) for k in
           ("price", "mcap", "tau", "alpha", "staked", "emission")}
    out["startup"] = startup

    def allocate(day, active, update=True):
        nonlocal ema
        total = config.total_emission(day)
        if not active.any() or total == 0:
            return np.zeros(n)
        if policy.variant == "price":
            prices = np.where(active, amm_core.spot_price(PoolState(tau, alpha)), 0.0)
            return amm_core.allocate_emissions_price(prices, total)
        if not update:
            shares = np.where(active, np.clip(ema, 0.0, None), 0.0)
            return shares / shares.sum() * total
        # subnets in startup mode neither update their EMA nor receive emission
        ema_a, em_a = amm_core.allocate_emissions_flow(ema[active], inflow[active], total, policy)
        ema[active] = ema_a
        em = np.zeros(n)
        em[active] = em_a
        return em

    for day in range(T):
        active = ~startup[day]
        relaunch = active & (startup[day - 1] if day > 0 else False)
        if relaunch.any():
            tau[relaunch] = fresh(int(relaunch.sum()))
            alpha[relaunch] = tau[relaunch] / config.initial_price
            staked[relaunch] = config.staked_ratio * alpha[relaunch]
            ema[relaunch] = config.daily_emission / n
        tau_open = tau.copy()
        if day == 0:
            emission = allocate(day, active, update=False)
        else:
            emission = allocate(day, active)
            buy = np.where(active, config.restake_fraction * emission, 0.0)
            pool, alpha_out, _ = amm_core.stake(PoolState(tau, alpha), buy)
            tau, alpha = np.asarray(pool.tau_reserve), np.asarray(pool.alpha_reserve)
            staked = staked + alpha_out
            if config.noise_std > 0:
                s = config.noise_std / 2.0
                z = np.exp(s * rng.standard_normal(n) - s * s / 2.0)
                z = np.where(active, z, 1.0)
                k = tau * alpha
                new_tau = tau * z
                new_alpha = k / new_tau
                staked = np.maximum(staked + (alpha - new_alpha), 0.0)
                tau, alpha = new_tau, new_alpha
        inflow = tau - tau_open
        price = tau / alpha
        rec = {"price": price, "mcap": price * (alpha + staked), "tau": tau,
               "alpha": alpha, "staked": staked, "emission": emission * RAO_PER_TAO}
        for key, val in rec.items():
            out[key][day] = np.where(active, val, np.nan)
        out["emission"][day] = np.where(active, emission * RAO_PER_TAO, 0.0)
    return out


def to_rows(config: SynthConfig, state: dict[str, np.ndarray]) -> list[RawSnapshotRow]:
    cols = [state[k].tolist() for k in ("price", "mcap", "tau", "alpha", "staked", "emission",
                                         "startup")]
    netuids = range(1, config.n_subnets + 1)
    return [RawSnapshotRow(day, i, *vals)
            for day, *per_day in zip((d.date() for d in config.dates), *cols)
            for i, *vals in zip(netuids, *per_day)]


def to_frame(config: SynthConfig, state: dict[str, np.ndarray]) -> pd.DataFrame:
    """Same content as ``to_rows`` in the long layout ``build_panel`` also accepts."""
    T, n = config.n_days, config.n_subnets
    cols = {"date": np.repeat(config.dates, n), "netuid": np.tile(np.arange(1, n + 1), T),
            "startup_mode": state["startup"].ravel()}
    for key, field_name in (("price", "price_tao"), ("mcap", "mcap_tao"), ("tau", "tau_reserve"),
                            ("alpha", "alpha_reserve"), ("staked", "alpha_staked"),
                            ("emission", "emission_rao_per_day")):
        cols[field_name] = state[key].ravel()
    return pd.DataFrame(cols)


def generate(config: SynthConfig) -> list[RawSnapshotRow]:
    """Snapshot rows for a simulated network (netuids start at 1; root is never simulated)."""
    return to_rows(config, simulate(config))


def synthetic_fx(config: SynthConfig) -> pd.Series:
    """TAO/USD path: a driftless lognormal walk from ``tao_usd`` (constant when fx_vol = 0)."""
    rng = np.random.default_rng([config.seed, 1])
    steps = config.fx_vol * rng.standard_normal(config.n_days - 1) - config.fx_vol ** 2 / 2
    level = config.tao_usd * np.exp(np.concatenate([[0.0], np.cumsum(steps)]))
    return pd.Series(level, index=config.dates, name="tao_usd")


# -- structural experiments -----------------------------------------------

@dataclass(frozen=True)
class Prop1Result:
    measured: float
    predicted: float
    smb: pd.Series
    predicted_daily: pd.Series

    @property
    def relative_gap(self) -> float:
        return abs(self.measured - self.predicted) / abs(self.predicted)


def predicted_smb(state: dict[str, np.ndarray], restake_fraction: float) -> np.ndarray:
    """Closed-form daily SMB: small-minus-large tercile mean of ``2 * dtau / tau``.

    Terciles come from the previous close's market cap; ``dtau`` is the
    restaked emission and ``tau`` the reserve it lands on.
    """
    mcap, tau, em = state["mcap"], state["tau"], state["emission"] / RAO_PER_TAO
    T, n = tau.shape
    out = np.full(T, np.nan)
    for t in range(1, T):
        live = [i for i in range(n) if not np.isnan(mcap[t - 1, i]) and not np.isnan(tau[t, i])]
        if len(live) < 3:
            continue
        ranked = [i for _, i in sorted((mcap[t - 1, i], i) for i in live)]
        cut_lo = -(-len(ranked) // 3)
        cut_hi = -(-2 * len(ranked) // 3)
        impact = {i: 2.0 * restake_fraction * em[t, i] / tau[t - 1, i] for i in ranked}
        small = sum(impact[i] for i in ranked[:cut_lo]) / cut_lo
        large = sum(impact[i] for i in ranked[cut_hi:]) / (len(ranked) - cut_hi)
        out[t] = small - large
    return out


def measured_factors(config: SynthConfig, state=None):
    """Run the generated snapshot through the panel/characteristic/factor pipeline."""
    state = simulate(config) if state is None else state
    panel = build_panel(to_frame(config, state))
    smb = build_factor("SMB", characteristic("MCAP", panel), panel)
    return state, panel, smb, market_factor(panel)


def prop1_experiment(config: SynthConfig) -> Prop1Result:
    state, _, smb, _ = measured_factors(config)
    s = smb.returns.dropna()
    if s.empty:
        raise ValueError("no SMB observations; sample too short for eligibility")
    oracle = pd.Series(predicted_smb(state, config.restake_fraction), index=config.dates)
    oracle = oracle.reindex(s.index)
    return Prop1Result(float(s.mean()), float(oracle.mean()), smb.returns, oracle)


def halving_experiment(config: SynthConfig, hac_lags: int = 5) -> EventStudyResult:
    """Simulate, then estimate the SMB break at the configured halving day (all-data row)."""
    if config.halving_day is None:
        event = config.dates[config.n_days // 2]
    else:
        event = config.dates[config.halving_day]
    _, _, smb, mkt = measured_factors(config)
    return halving_event_study(smb.returns, mkt.returns, event, windows=(), hac_lags=hac_lags)[-1]
