"""Double-auction clearing with a feeder limit, and price-based dispatch.

Each interval the coordinator collects bids from controllable devices,
forms the descending aggregate demand curve, and intersects it with the
supply offer: unlimited energy at the base price, capped by the feeder
headroom left after uncontrollable demand.  Devices are then dispatched by
broadcasting the clearing price; a device turns on when its bid meets it.

Bids at the same price form one block and clear all-or-nothing: with
discrete device sizes the feeder line can cross inside a price level, in
which case the whole marginal level is priced out and the cleared demand
falls below the limit rather than splitting the level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Bid",
    "MarketInfeasibleError",
    "MarketOutcome",
    "clear_market",
    "clear_market_arrays",
    "dispatch",
    "dispatch_arrays",
    "threshold_to_price",
]


class MarketInfeasibleError(RuntimeError):
    """Uncontrollable demand alone exceeds the feeder limit."""


@dataclass(frozen=True)
class Bid:
    device_id: int
    price: float
    quantity: float
    controllable: bool = True

    def __post_init__(self) -> None:
        if self.quantity <= 0.0:
            raise ValueError(f"bid quantity must be positive, got {self.quantity}")


@dataclass(frozen=True)
class MarketOutcome:
    pi_clr: float
    d_clr: float
    decisions: dict[int, int] = field(default_factory=dict)


def clear_market_arrays(prices, quantities, pi_base, d_feeder, d_other=0.0):
    """Vectorized clearing; returns ``(pi_clr, d_clr, on_flags)``.

    ``prices``/``quantities`` are aligned arrays of the controllable bids.
    When the base-price demand fits under the feeder headroom the market
    clears at the base price; otherwise price levels are admitted in
    descending order while they fit, whole levels at a time, and the price
    of the last admitted level clears.  If not even the top level fits, the
    clearing price is set just above the best bid so nothing runs.
    """
    if d_feeder <= 0.0:
        raise ValueError("feeder limit must be positive")
    if d_other < 0.0:
        raise ValueError("uncontrollable demand cannot be negative")
    if d_other > d_feeder:
        raise MarketInfeasibleError(
            f"uncontrollable demand {d_other} exceeds feeder limit {d_feeder}"
        )
    prices = np.asarray(prices, dtype=float)
    quantities = np.asarray(quantities, dtype=float)
    if prices.shape != quantities.shape:
        raise ValueError("prices and quantities must align")

    at_base = prices >= pi_base
    d_base = float(quantities[at_base].sum())
    if d_other + d_base < d_feeder:
        return pi_base, d_base, at_base

    headroom = d_feeder - d_other
    # group bids at or above the base price into equal-price levels, high first
    levels, inverse = np.unique(prices[at_base], return_inverse=True)
    level_qty = np.bincount(inverse, weights=quantities[at_base])
    levels, level_qty = levels[::-1], level_qty[::-1]
    fits = np.cumsum(level_qty) <= headroom + 1e-9
    n_in = int(np.argmin(fits)) if not fits.all() else len(levels)
    if n_in == 0:
        top = float(prices.max()) if prices.size else pi_base
        pi_clr = float(np.nextafter(top, np.inf))
        return pi_clr, 0.0, np.zeros(prices.shape, dtype=bool)
    pi_clr = float(levels[n_in - 1])
    on = prices >= pi_clr
    return pi_clr, float(quantities[on].sum()), on


def clear_market(bids, pi_base, d_feeder, d_other=0.0) -> MarketOutcome:
    """Object-level wrapper around :func:`clear_market_arrays`."""
    for b in bids:
        if not b.controllable:
            raise ValueError(f"locked device {b.device_id} submitted a bid")
    prices = np.array([b.price for b in bids], dtype=float)
    qty = np.array([b.quantity for b in bids], dtype=float)
    pi_clr, d_clr, on = clear_market_arrays(prices, qty, pi_base, d_feeder, d_other)
    decisions = {b.device_id: int(flag) for b, flag in zip(bids, on)}
    return MarketOutcome(pi_clr=pi_clr, d_clr=d_clr, decisions=decisions)


def dispatch_arrays(pi_clr, bids, m):
    """Per-device on/off flags from a broadcast clearing price.

    ``bids`` are current bid prices, ``m`` the lockout flags; a device runs
    when controllable and bidding at or above the clearing price.
    """
    return (np.asarray(m) == 1) & (np.asarray(bids) >= pi_clr)


def dispatch(pi_clr, states):
    """Flags for a sequence of device states (see :class:`DerState`)."""
    return [int(s.m == 1 and s.bid >= pi_clr) for s in states]


def threshold_to_price(i_max, grid):
    """Price of a clearing threshold expressed as a bin boundary index.

    ``grid`` holds the bin boundary prices from the top of the bid range
    down to the bottom; index 0 is the top boundary, so a threshold of 0
    clears only devices bidding the maximum price.
    """
    grid = np.asarray(grid, dtype=float)
    i = int(i_max)
    if i != i_max or not 0 <= i < grid.size:
        raise IndexError(f"threshold {i_max} outside grid of {grid.size} boundaries")
    return float(grid[i])
