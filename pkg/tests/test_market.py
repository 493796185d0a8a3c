import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transactive.devices import DerState
from transactive.market import (
    Bid,
    MarketInfeasibleError,
    clear_market,
    clear_market_arrays,
    dispatch,
    dispatch_arrays,
    threshold_to_price,
)


def test_unconstrained_clears_at_base_price():
    bids = [Bid(0, 40.0, 1.0), Bid(1, 20.0, 1.0)]
    out = clear_market(bids, pi_base=30.0, d_feeder=10.0, d_other=0.0)
    assert out.pi_clr == 30.0
    assert out.d_clr == 1.0
    assert out.decisions == {0: 1, 1: 0}


def test_feeder_bound_prices_out_marginal_bid():
    bids = [Bid(0, 40.0, 1.0), Bid(1, 20.0, 1.0)]
    out = clear_market(bids, pi_base=10.0, d_feeder=1.5, d_other=0.0)
    assert out.pi_clr == 40.0
    assert out.d_clr == 1.0
    assert out.decisions == {0: 1, 1: 0}


def test_population_pinned_at_feeder_limit():
    # distinct bid prices, 3 kW each; draw would be 3000 kW, limit 70%
    n = 1000
    prices = np.linspace(49.0, 21.0, n)
    qty = np.full(n, 3.0)
    pi_clr, d_clr, on = clear_market_arrays(
        prices, qty, pi_base=20.0, d_feeder=2100.0, d_other=0.0
    )
    assert d_clr == pytest.approx(2100.0)
    assert on.sum() == 700
    assert pi_clr > 20.0
    assert pi_clr == pytest.approx(prices[699])


def test_nothing_fits_prices_above_best_bid():
    # single price level larger than the headroom: all-or-nothing, so the
    # level is priced out and the sentinel price sits just above it
    bids = [Bid(i, 35.0, 3.0) for i in range(4)]
    out = clear_market(bids, pi_base=10.0, d_feeder=5.0, d_other=0.0)
    assert out.d_clr == 0.0
    assert out.pi_clr > 35.0
    assert all(v == 0 for v in out.decisions.values())
    assert out.pi_clr == np.nextafter(35.0, np.inf)


def test_equal_price_level_clears_as_block():
    bids = [Bid(0, 40.0, 1.0), Bid(1, 35.0, 1.0), Bid(2, 35.0, 1.0), Bid(3, 30.0, 1.0)]
    # headroom 2: the 35-level (2 kW total) would overflow after the 40-bid
    out = clear_market(bids, pi_base=10.0, d_feeder=2.0, d_other=0.0)
    assert out.pi_clr == 40.0
    assert out.d_clr == 1.0
    # headroom 3: the whole 35-level fits
    out = clear_market(bids, pi_base=10.0, d_feeder=3.0, d_other=0.0)
    assert out.pi_clr == 35.0
    assert out.d_clr == 3.0
    assert out.decisions == {0: 1, 1: 1, 2: 1, 3: 0}


def test_uncontrollable_demand_consumes_headroom():
    bids = [Bid(0, 40.0, 1.0), Bid(1, 20.0, 1.0)]
    out = clear_market(bids, pi_base=10.0, d_feeder=2.5, d_other=1.0)
    assert out.pi_clr == 40.0
    assert out.d_clr == 1.0


def test_infeasible_when_uncontrollable_exceeds_feeder():
    with pytest.raises(MarketInfeasibleError):
        clear_market([Bid(0, 40.0, 1.0)], pi_base=10.0, d_feeder=1.0, d_other=1.5)


def test_locked_device_bid_rejected():
    with pytest.raises(ValueError):
        clear_market(
            [Bid(0, 40.0, 1.0, controllable=False)], pi_base=10.0, d_feeder=5.0
        )


def test_bid_requires_positive_quantity():
    with pytest.raises(ValueError):
        Bid(0, 40.0, 0.0)


def test_no_bids_clears_empty_at_base():
    out = clear_market([], pi_base=30.0, d_feeder=5.0, d_other=1.0)
    assert out.pi_clr == 30.0
    assert out.d_clr == 0.0
    assert out.decisions == {}


def test_dispatch_rules():
    mk = lambda e, m, bid: DerState(e=e, m=m, v=0, bid=bid)
    states = [mk(0.3, 1, 35.0), mk(0.3, 0, 35.0), mk(0.5, 1, 30.0)]
    assert dispatch(30.0, states) == [1, 0, 1]  # tie at the price clears


def test_dispatch_idempotent_and_monotone_in_price():
    rng = np.random.default_rng(5)
    bids = rng.uniform(10.0, 50.0, 200)
    m = rng.integers(0, 2, 200)
    v1 = dispatch_arrays(30.0, bids, m)
    assert np.array_equal(v1, dispatch_arrays(30.0, bids, m))
    v2 = dispatch_arrays(35.0, bids, m)
    assert not np.any(v2 & ~v1)  # raising the price never turns a device on


bid_lists = st.lists(
    st.tuples(
        st.floats(0.0, 60.0, allow_nan=False),
        st.floats(0.1, 5.0, allow_nan=False),
    ),
    min_size=0,
    max_size=40,
)


@settings(max_examples=300, deadline=None)
@given(
    entries=bid_lists,
    pi_base=st.floats(0.0, 60.0),
    d_feeder=st.floats(0.5, 60.0),
    d_other_frac=st.floats(0.0, 1.0),
)
def test_clearing_invariants(entries, pi_base, d_feeder, d_other_frac):
    prices = np.array([p for p, _ in entries])
    qty = np.array([q for _, q in entries])
    d_other = d_other_frac * d_feeder
    pi_clr, d_clr, on = clear_market_arrays(prices, qty, pi_base, d_feeder, d_other)
    # cleared quantity is the sum over cleared bids
    assert d_clr == pytest.approx(qty[on].sum() if len(entries) else 0.0)
    # up-set property: cleared exactly the bids at or above the price
    assert np.array_equal(on, prices >= pi_clr)
    # feeder safety whenever the limit bound the outcome
    if not (d_other + qty[prices >= pi_base].sum() < d_feeder):
        assert d_other + d_clr <= d_feeder + 1e-6
    # the price never drops below the base offer
    assert pi_clr >= pi_base or d_clr == 0.0


def test_threshold_price_lookup():
    grid = np.linspace(50.0, 10.0, 21)  # 20 bins of width 2
    assert threshold_to_price(0, grid) == 50.0
    assert threshold_to_price(7, grid) == pytest.approx(36.0)
    assert threshold_to_price(20, grid) == 10.0
    with pytest.raises(IndexError):
        threshold_to_price(21, grid)
    with pytest.raises(IndexError):
        threshold_to_price(-1, grid)
