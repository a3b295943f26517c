"""Constant-product pool arithmetic.

A pool holds ``tau`` base tokens (TAO) and ``alpha`` subnet tokens. The spot
price is ``tau / alpha`` and staking preserves ``k = tau * alpha``. All
functions accept scalars or numpy arrays of matching shape, so the simulator
can push a whole cross-section of pools through one call.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidPoolError(ValueError):
    """Pool reserves are not strictly positive."""


class AllocationError(ValueError):
    """Emission shares cannot be formed (nothing to allocate against)."""


@dataclass(frozen=True)
class PoolState:
    tau_reserve: float | np.ndarray
    alpha_reserve: float | np.ndarray

    def __post_init__(self):
        tau = np.asarray(self.tau_reserve, dtype=float)
        alpha = np.asarray(self.alpha_reserve, dtype=float)
        if tau.shape != alpha.shape:
            raise InvalidPoolError("tau and alpha reserves have different shapes")
        if not (np.all(np.isfinite(tau)) and np.all(np.isfinite(alpha))):
            raise InvalidPoolError("pool reserves must be finite")
        if np.any(tau <= 0) or np.any(alpha <= 0):
            raise InvalidPoolError(
                f"pool reserves must be > 0 (tau={self.tau_reserve}, alpha={self.alpha_reserve})"
            )

    @property
    def k(self):
        return self.tau_reserve * self.alpha_reserve


@dataclass(frozen=True)
class EmissionPolicy:
    """How the daily emission is split across subnets.

    ``variant`` is ``"price"`` (share proportional to alpha price) or
    ``"flow"`` (share proportional to a clipped EMA of net TAO inflows).
    """

    variant: str = "price"
    ema_half_life: float = 30.0

    def __post_init__(self):
        if self.variant not in ("price", "flow"):
            raise ValueError(f"unknown emission policy {self.variant!r}")
        if not self.ema_half_life > 0:
            raise ValueError("ema_half_life must be > 0")

    @property
    def decay(self) -> float:
        """Daily EMA weight on the previous state, ``2 ** (-1 / half_life)``."""
        return 2.0 ** (-1.0 / self.ema_half_life)


def spot_price(pool: PoolState):
    return pool.tau_reserve / pool.alpha_reserve


def _check_trade(delta_tau):
    delta_tau = np.asarray(delta_tau, dtype=float)
    if np.any(delta_tau < 0) or not np.all(np.isfinite(delta_tau)):
        raise ValueError(f"delta_tau must be finite and >= 0, got {delta_tau}")
    return delta_tau


def stake(pool: PoolState, delta_tau):
    """Deposit ``delta_tau`` TAO and withdraw alpha at constant product.

    Returns ``(new_pool, alpha_out, exact_return)`` where ``exact_return`` is
    the spot-price return ``(1 + delta_tau / tau) ** 2 - 1``.
    """
    _check_trade(delta_tau)
    tau = pool.tau_reserve
    new_tau = tau + delta_tau
    # a zero trade leaves the pool bit-for-bit unchanged
    new_alpha = np.where(delta_tau == 0, pool.alpha_reserve, pool.k / new_tau)
    alpha_out = pool.alpha_reserve - new_alpha
    ratio = delta_tau / tau
    exact_return = ratio * (2.0 + ratio)
    if np.ndim(new_tau) == 0:
        new_tau, new_alpha = float(new_tau), float(new_alpha)
        alpha_out, exact_return = float(alpha_out), float(exact_return)
    return PoolState(new_tau, new_alpha), alpha_out, exact_return


def price_impact_approx(pool: PoolState, delta_tau):
    """First-order price impact of staking ``delta_tau``: ``2 * delta_tau / tau``."""
    _check_trade(delta_tau)
    return 2.0 * delta_tau / pool.tau_reserve


def slippage_one_way(pool: PoolState, delta_tau):
    """Exact one-way slippage of buying with ``delta_tau`` TAO: ``delta_tau / tau``."""
    _check_trade(delta_tau)
    return delta_tau / pool.tau_reserve


def allocate_emissions_price(prices, total_emission: float) -> np.ndarray:
    """Split ``total_emission`` across subnets in proportion to price."""
    prices = np.asarray(prices, dtype=float)
    if np.any(prices < 0) or not np.all(np.isfinite(prices)):
        raise AllocationError("prices must be finite and non-negative")
    if total_emission < 0:
        raise ValueError("total_emission must be >= 0")
    denom = prices.sum()
    if not denom > 0:
        raise AllocationError("all prices are zero; allocation undefined")
    return prices / denom * total_emission


def allocate_emissions_flow(ema_state, todays_flows, total_emission: float,
                            policy: EmissionPolicy):
    """Update the inflow EMA and allocate ``total_emission`` on its positive part.

    Returns ``(new_ema_state, emissions)``.
    """
    ema_state = np.asarray(ema_state, dtype=float)
    flows = np.asarray(todays_flows, dtype=float)
    if total_emission < 0:
        raise ValueError("total_emission must be >= 0")
    lam = policy.decay
    new_state = lam * ema_state + (1.0 - lam) * flows
    clipped = np.clip(new_state, 0.0, None)
    denom = clipped.sum()
    if not denom > 0:
        raise AllocationError("no subnet has a positive inflow EMA; allocation undefined")
    return new_state, clipped / denom * total_emission
