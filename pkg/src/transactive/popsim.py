"""Monte-Carlo population simulator for market-coordinated device fleets.

Thousands of thermostats (or batteries) advance through repeated market
intervals: each interval the controllable devices submit bids, the market
clears (or a broadcast price is applied), the cleared set runs, and the
device states evolve until the next clearing.  Thermostat fleets resolve
their thermal dynamics and lockout switching on a fine inner time step
between clearings; battery fleets advance one linear charge step per
interval.  The simulator reproduces the demand synchronization and
oscillation phenomena that motivate bin-model control, and generates the
trajectories used for model identification and closed-loop validation.

All power quantities are kW, prices $/MWh, temperatures °C.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .aggmodel import (
    BinGrid,
    TransitionModel,
    assign_bins_arrays,
    distribution_from_bins,
    identify_from_pairs,
)
from .market import clear_market_arrays, dispatch_arrays

# A device parameter is a fixed value, a (lo, hi) uniform range resolved per
# device, or an explicit per-device array.
Value = Union[float, tuple, list, np.ndarray]
Series = Union[float, Sequence[float], np.ndarray]


# ---------------------------------------------------------------------------
# fleet specifications


@dataclass(frozen=True)
class TclFleetSpec:
    """Air-conditioner fleet parameters (scalar or heterogeneity range).

    Defaults describe the reference residential unit: 7.04 kWh/°C thermal
    capacitance, 2.84 °C/kW resistance, 10.55 kW cooling at COP 3.5, a
    19-21 °C comfort band in a 32 °C ambient, bids sloping from 50 $/MWh
    at the top of the band down by 40 $/MWh per unit SOC, and lockout
    release at SOC 0.7.
    """

    c_kwh_per_c: Value = 7.04
    r_c_per_kw: Value = 2.84
    p_thermal_kw: Value = 10.55
    cop: Value = 3.5
    theta_min_c: Value = 19.0
    theta_max_c: Value = 21.0
    theta_ambient_c: Value = 32.0
    pi_max: Value = 50.0
    beta: Value = 40.0
    e_set: Value = 0.7
    h_s: float = 10.0


@dataclass(frozen=True)
class BatteryFleetSpec:
    """Linear storage fleet parameters (scalar or heterogeneity range)."""

    a: Value
    gamma: Value
    p_elec_kw: Value
    pi_max: Value = 50.0
    beta: Value = 40.0
    e_set: Value = 0.7


# resolution order is fixed so that a given seed always produces the same
# population regardless of which entry point asked for it
_TCL_FIELDS = (
    "c_kwh_per_c", "r_c_per_kw", "p_thermal_kw", "cop",
    "theta_min_c", "theta_max_c", "theta_ambient_c",
    "pi_max", "beta", "e_set",
)
_BATTERY_FIELDS = ("a", "gamma", "p_elec_kw", "pi_max", "beta", "e_set")


def _resolve(value: Value, n: int, rng: np.random.Generator) -> np.ndarray:
    """One parameter to a length-``n`` array; ranges draw uniformly."""
    if isinstance(value, (tuple, list)) and len(value) == 2:
        lo, hi = float(value[0]), float(value[1])
        if lo > hi:
            raise ValueError(f"empty heterogeneity range ({lo}, {hi})")
        if lo == hi:
            return np.full(n, lo)
        return rng.uniform(lo, hi, n)
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.shape == (n,):
        return arr.astype(float).copy()
    raise ValueError(
        f"device parameter must be a scalar, a (lo, hi) range, or a "
        f"length-{n} array; got shape {arr.shape}"
    )


@dataclass
class Population:
    """Resolved per-device parameter arrays for one run."""

    mode: str  # "tcl" | "battery"
    pi_max: np.ndarray
    beta: np.ndarray
    e_set: np.ndarray
    p_elec_kw: np.ndarray
    # thermostat fleets
    a_tilde: Optional[np.ndarray] = None
    theta_gain_c: Optional[np.ndarray] = None
    theta_min_c: Optional[np.ndarray] = None
    theta_max_c: Optional[np.ndarray] = None
    theta_ambient_c: Optional[np.ndarray] = None
    h_s: float = 10.0
    # battery fleets
    a: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.p_elec_kw.size

    @property
    def installed_kw(self) -> float:
        """Total rated electrical draw of the fleet."""
        return float(self.p_elec_kw.sum())

    @property
    def band_c(self) -> np.ndarray:
        return self.theta_max_c - self.theta_min_c

    @property
    def theta_release_c(self) -> np.ndarray:
        """Temperature above which an expired lockout re-engages."""
        return self.theta_max_c - self.e_set * self.band_c

    def soc(self, theta_c: np.ndarray) -> np.ndarray:
        """Normalized cooling reserve of each thermostat, clipped to [0, 1]."""
        return np.clip((self.theta_max_c - theta_c) / self.band_c, 0.0, 1.0)

    def bids(self, e: np.ndarray) -> np.ndarray:
        return self.pi_max - self.beta * e


def _resolve_fleet(fleet, n: int, rng: np.random.Generator) -> Population:
    if isinstance(fleet, TclFleetSpec):
        p = {name: _resolve(getattr(fleet, name), n, rng) for name in _TCL_FIELDS}
        for name in ("c_kwh_per_c", "r_c_per_kw", "p_thermal_kw", "cop", "beta"):
            if not (p[name] > 0.0).all():
                raise ValueError(f"{name} must be positive")
        if not (p["theta_max_c"] > p["theta_min_c"]).all():
            raise ValueError("comfort band must have positive width")
        if not ((p["e_set"] > 0.0) & (p["e_set"] < 1.0)).all():
            raise ValueError("lockout release SOC must lie strictly inside (0, 1)")
        if fleet.h_s <= 0.0:
            raise ValueError("inner step must be positive")
        return Population(
            mode="tcl",
            pi_max=p["pi_max"], beta=p["beta"], e_set=p["e_set"],
            p_elec_kw=p["p_thermal_kw"] / p["cop"],
            a_tilde=np.exp(-fleet.h_s / (3600.0 * p["c_kwh_per_c"] * p["r_c_per_kw"])),
            theta_gain_c=p["p_thermal_kw"] * p["r_c_per_kw"],
            theta_min_c=p["theta_min_c"], theta_max_c=p["theta_max_c"],
            theta_ambient_c=p["theta_ambient_c"], h_s=fleet.h_s,
        )
    if isinstance(fleet, BatteryFleetSpec):
        p = {name: _resolve(getattr(fleet, name), n, rng) for name in _BATTERY_FIELDS}
        if not ((p["a"] >= 0.0) & (p["a"] <= 1.0)).all():
            raise ValueError("dissipation factor must lie in [0, 1]")
        if not ((p["gamma"] > 0.0) & (p["p_elec_kw"] > 0.0) & (p["beta"] > 0.0)).all():
            raise ValueError("charge rate, rated power and bid slope must be positive")
        if not ((p["e_set"] > 0.0) & (p["e_set"] < 1.0)).all():
            raise ValueError("lockout release SOC must lie strictly inside (0, 1)")
        return Population(
            mode="battery",
            pi_max=p["pi_max"], beta=p["beta"], e_set=p["e_set"],
            p_elec_kw=p["p_elec_kw"], a=p["a"], gamma=p["gamma"],
        )
    raise TypeError(f"unknown fleet spec {type(fleet).__name__}")


# ---------------------------------------------------------------------------
# scenario


@dataclass(frozen=True)
class Scenario:
    """One complete simulation setup.

    ``pi_base``, ``d_other_kw`` and ``d_feeder_kw`` accept a scalar or a
    per-interval series of length >= ``horizon``.  The feeder limit may
    instead be given per-unit of the fleet's installed draw via
    ``d_feeder_pu``; leaving both unset removes the constraint.  Initial
    thermostat temperatures default to uniform draws over each device's
    comfort band; ``init_theta_c`` (or ``init_soc`` for battery fleets)
    overrides with a fixed value or a (lo, hi) range.  ``seed`` fixes the
    heterogeneity draws, initial conditions and thermal noise, making runs
    bit-reproducible.
    """

    fleet: Union[TclFleetSpec, BatteryFleetSpec]
    n_devices: int
    horizon: int
    tau_min: float = 10.0
    pi_base: Series = 50.0
    d_feeder_kw: Optional[Series] = None
    d_feeder_pu: Optional[float] = None
    d_other_kw: Series = 0.0
    noise_c_per_min: float = 0.0
    seed: int = 0
    init_theta_c: Optional[Value] = None
    init_soc: Optional[Value] = None
    avg_window_min: Optional[float] = None
    record_bins: Optional[BinGrid] = None
    device_stride: int = 0

    def __post_init__(self) -> None:
        if self.n_devices < 1:
            raise ValueError("need at least one device")
        if self.horizon < 1:
            raise ValueError("horizon must cover at least one interval")
        if self.tau_min <= 0.0:
            raise ValueError("market interval must be positive")
        if self.d_feeder_kw is not None and self.d_feeder_pu is not None:
            raise ValueError("give the feeder limit in kW or per-unit, not both")
        if self.d_feeder_pu is not None and self.d_feeder_pu <= 0.0:
            raise ValueError("per-unit feeder limit must be positive")
        if self.noise_c_per_min < 0.0:
            raise ValueError("noise amplitude cannot be negative")
        if self.device_stride < 0:
            raise ValueError("device_stride cannot be negative")
        if self.avg_window_min is not None and self.avg_window_min <= 0.0:
            raise ValueError("averaging window must be positive")
        if isinstance(self.fleet, TclFleetSpec):
            if self.init_soc is not None:
                raise ValueError("thermostat fleets take init_theta_c, not init_soc")
        elif isinstance(self.fleet, BatteryFleetSpec):
            if self.init_theta_c is not None:
                raise ValueError("battery fleets take init_soc, not init_theta_c")
            if self.noise_c_per_min > 0.0:
                raise ValueError("thermal noise applies to thermostat fleets only")
        else:
            raise TypeError(f"unknown fleet spec {type(self.fleet).__name__}")


@dataclass
class SimState:
    """Mutable per-device state between market instants."""

    m: np.ndarray  # lockout flag, int8 (1 = controllable)
    v: np.ndarray  # standing clearing decision, int8
    theta_c: Optional[np.ndarray] = None  # thermostat fleets
    e: Optional[np.ndarray] = None  # battery fleets


def _materialize(scenario: Scenario, rng: np.random.Generator):
    """Resolve fleet heterogeneity and draw initial conditions, in a fixed
    order so a seed pins the whole population."""
    n = scenario.n_devices
    pop = _resolve_fleet(scenario.fleet, n, rng)
    m = np.ones(n, dtype=np.int8)  # devices start controllable, not cleared
    v = np.zeros(n, dtype=np.int8)
    if pop.mode == "tcl":
        if scenario.init_theta_c is None:
            theta = rng.uniform(pop.theta_min_c, pop.theta_max_c)
        else:
            theta = _resolve(scenario.init_theta_c, n, rng)
        return pop, SimState(m=m, v=v, theta_c=theta)
    e0 = (0.0, 1.0) if scenario.init_soc is None else scenario.init_soc
    e = _resolve(e0, n, rng)
    if (e < 0.0).any() or (e > 1.0).any():
        raise ValueError("initial SOC must lie in [0, 1]")
    return pop, SimState(m=m, v=v, e=e)


def build_population(scenario: Scenario):
    """The exact population a run of ``scenario`` will simulate.

    Returns ``(Population, SimState)``; pure in the scenario, so model
    fitting and validation can share one fleet.
    """
    return _materialize(scenario, np.random.default_rng(scenario.seed))


# ---------------------------------------------------------------------------
# traces


@dataclass
class Trace:
    """Per-interval record of one run; immutable once produced.

    ``demand_kw`` is the cleared commitment (rated draw of the devices told
    to run); ``demand_avg_kw`` averages the actual inner-step consumption,
    which falls below the commitment when thermostats cut out mid-interval.
    ``bins_pre`` rows are market instants 0..horizon (one more than the
    intervals, so consecutive rows form identification pairs); ``bins_post``
    records occupancy right after each clearing.
    """

    tau_min: float
    time_min: np.ndarray
    demand_kw: np.ndarray
    demand_avg_kw: np.ndarray
    pi_base: np.ndarray
    pi_clr: np.ndarray
    locked_frac: np.ndarray
    on_frac: np.ndarray
    d_other_kw: np.ndarray
    d_feeder_kw: Optional[np.ndarray] = None
    violations: int = 0
    bins_pre: Optional[np.ndarray] = None
    bins_post: Optional[np.ndarray] = None
    device_index: Optional[np.ndarray] = None
    device_soc: Optional[np.ndarray] = None
    device_theta_c: Optional[np.ndarray] = None
    fine_time_min: Optional[np.ndarray] = None
    fine_demand_kw: Optional[np.ndarray] = None

    @property
    def horizon(self) -> int:
        return self.time_min.size

    def to_csv(self, path, header_comments: Sequence[str] = ()) -> None:
        """One row per interval: time, demand, prices, state fractions."""
        with open(path, "w", newline="") as fh:
            for line in header_comments:
                fh.write(f"# {line}\n")
            writer = csv.writer(fh)
            writer.writerow([
                "time_min", "demand_kw", "demand_avg_kw", "pi_base",
                "pi_clr", "locked_frac", "on_frac",
            ])
            for k in range(self.horizon):
                writer.writerow([
                    f"{self.time_min[k]:.6g}", f"{self.demand_kw[k]:.6f}",
                    f"{self.demand_avg_kw[k]:.6f}", f"{self.pi_base[k]:.6f}",
                    f"{self.pi_clr[k]:.6f}", f"{self.locked_frac[k]:.8f}",
                    f"{self.on_frac[k]:.8f}",
                ])

    def device_csv(self, path, header_comments: Sequence[str] = ()) -> None:
        """Thinned per-device samples, long format (one row per device and
        market instant)."""
        if self.device_soc is None:
            raise ValueError("run recorded no per-device samples")
        thermal = self.device_theta_c is not None
        with open(path, "w", newline="") as fh:
            for line in header_comments:
                fh.write(f"# {line}\n")
            writer = csv.writer(fh)
            writer.writerow(["time_min", "device", "soc"] + (["theta_c"] if thermal else []))
            n_inst, n_dev = self.device_soc.shape
            for k in range(n_inst):
                t = k * self.tau_min
                for j in range(n_dev):
                    row = [f"{t:.6g}", int(self.device_index[j]),
                           f"{self.device_soc[k, j]:.8f}"]
                    if thermal:
                        row.append(f"{self.device_theta_c[k, j]:.6f}")
                    writer.writerow(row)


def _grid_bins(bids, m, v, grid: BinGrid) -> np.ndarray:
    """Occupancy bins of possibly off-grid bids.

    Heterogeneous fleets can bid outside the grid's price range; for
    occupancy accounting those devices belong in the edge bins, so the
    bids are clipped into range before assignment.
    """
    return assign_bins_arrays(np.clip(bids, grid.pi_min, grid.pi_max), m, v, grid)


def _series(value: Optional[Series], horizon: int, name: str) -> Optional[np.ndarray]:
    if value is None:
        return None
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(horizon, float(arr))
    arr = arr.ravel()
    if arr.size < horizon:
        raise ValueError(f"{name} series has {arr.size} entries for a "
                         f"{horizon}-interval horizon")
    return arr[:horizon].astype(float).copy()


# ---------------------------------------------------------------------------
# the simulation loop


def _inner_steps(scenario: Scenario, pop: Population) -> int:
    n_inner = scenario.tau_min * 60.0 / pop.h_s
    if abs(n_inner - round(n_inner)) > 1e-9:
        raise ValueError(
            f"market interval {scenario.tau_min} min is not a whole number "
            f"of {pop.h_s} s thermal steps"
        )
    return int(round(n_inner))


def _window_steps(scenario: Scenario, n_inner: int, pop: Population) -> Optional[int]:
    if scenario.avg_window_min is None:
        return None
    w = scenario.avg_window_min * 60.0 / pop.h_s
    if abs(w - round(w)) > 1e-9 or int(round(w)) < 1:
        raise ValueError("averaging window is not a whole number of thermal steps")
    w = int(round(w))
    if n_inner % w != 0:
        raise ValueError("averaging window must divide the market interval")
    return w


def _simulate(scenario: Scenario, prices: Optional[Series]) -> Trace:
    rng = np.random.default_rng(scenario.seed)
    pop, state = _materialize(scenario, rng)
    n, horizon = pop.n, scenario.horizon

    pi_base = _series(scenario.pi_base, horizon, "pi_base")
    d_other = _series(scenario.d_other_kw, horizon, "d_other_kw")
    if (d_other < 0.0).any():
        raise ValueError("uncontrollable demand cannot be negative")
    if scenario.d_feeder_pu is not None:
        feeder = np.full(horizon, scenario.d_feeder_pu * pop.installed_kw)
    else:
        feeder = _series(scenario.d_feeder_kw, horizon, "d_feeder_kw")
    price_series = None if prices is None else _series(prices, horizon, "prices")

    tcl = pop.mode == "tcl"
    if tcl:
        n_inner = _inner_steps(scenario, pop)
        w_steps = _window_steps(scenario, n_inner, pop)
        noise = scenario.noise_c_per_min * (pop.h_s / 60.0)
    else:
        n_inner, w_steps, noise = 1, None, 0.0
        if scenario.avg_window_min is not None:
            frac = scenario.tau_min / scenario.avg_window_min % 1.0
            if min(frac, 1.0 - frac) > 1e-9:
                raise ValueError("averaging window must divide the market interval")

    demand = np.zeros(horizon)
    demand_avg = np.zeros(horizon)
    pi_clr_out = np.zeros(horizon)
    locked_frac = np.zeros(horizon)
    on_frac = np.zeros(horizon)
    violations = 0

    grid = scenario.record_bins
    bins_pre = np.zeros((horizon + 1, n), dtype=np.int32) if grid is not None else None
    bins_post = np.zeros((horizon, n), dtype=np.int32) if grid is not None else None

    stride = scenario.device_stride
    sampled = np.arange(0, n, stride) if stride else None
    dev_soc = np.zeros((horizon + 1, sampled.size)) if stride else None
    dev_theta = np.zeros((horizon + 1, sampled.size)) if (stride and tcl) else None

    fine_t: list[float] = []
    fine_d: list[float] = []

    m, v = state.m, state.v
    theta, e = state.theta_c, state.e

    for k in range(horizon):
        e_now = pop.soc(theta) if tcl else e
        bids = pop.bids(e_now)
        if bins_pre is not None:
            bins_pre[k] = _grid_bins(bids, m, v, grid)
        if stride:
            dev_soc[k] = e_now[sampled]
            if tcl:
                dev_theta[k] = theta[sampled]

        free = m == 1
        if price_series is None:
            limit = np.inf if feeder is None else float(feeder[k])
            pi_clr, _, on_free = clear_market_arrays(
                bids[free], pop.p_elec_kw[free], float(pi_base[k]),
                limit, float(d_other[k]),
            )
            v = np.zeros(n, dtype=np.int8)
            v[free] = on_free.astype(np.int8)
        else:
            pi_clr = float(price_series[k])
            v = dispatch_arrays(pi_clr, bids, m).astype(np.int8)

        d_c = float(pop.p_elec_kw[v == 1].sum())
        if (price_series is not None and feeder is not None
                and d_c + d_other[k] > feeder[k] + 1e-9):
            violations += 1

        demand[k] = d_c
        pi_clr_out[k] = pi_clr
        locked_frac[k] = float((~free).mean())
        on_frac[k] = float(v.mean())
        if bins_post is not None:
            bins_post[k] = _grid_bins(bids, m, v, grid)

        if tcl:
            acc = 0.0
            w_acc, w_count = 0.0, 0
            for i in range(n_inner):
                c = v & m
                draw = float((pop.p_elec_kw * c).sum())
                acc += draw
                theta = pop.a_tilde * theta + (1.0 - pop.a_tilde) * (
                    pop.theta_ambient_c - c * pop.theta_gain_c
                )
                if noise > 0.0:
                    theta = theta + rng.uniform(-noise, noise, n)
                m = np.where(
                    theta <= pop.theta_min_c, 0,
                    np.where(theta > pop.theta_release_c, 1, m),
                ).astype(np.int8)
                if w_steps is not None:
                    w_acc += draw
                    w_count += 1
                    if w_count == w_steps:
                        fine_t.append(k * scenario.tau_min
                                      + (i + 1 - w_steps) * pop.h_s / 60.0)
                        fine_d.append(w_acc / w_steps)
                        w_acc, w_count = 0.0, 0
            demand_avg[k] = acc / n_inner
        else:
            charging = v & m
            m = np.where(e >= 1.0, 0, np.where(e < pop.e_set, 1, m)).astype(np.int8)
            e = np.clip(pop.a * e + pop.gamma * charging, 0.0, 1.0)
            demand_avg[k] = d_c
            if scenario.avg_window_min is not None:
                for j in range(int(round(scenario.tau_min / scenario.avg_window_min))):
                    fine_t.append(k * scenario.tau_min + j * scenario.avg_window_min)
                    fine_d.append(d_c)

    e_now = pop.soc(theta) if tcl else e
    if bins_pre is not None:
        bins_pre[horizon] = _grid_bins(pop.bids(e_now), m, v, grid)
    if stride:
        dev_soc[horizon] = e_now[sampled]
        if tcl:
            dev_theta[horizon] = theta[sampled]

    return Trace(
        tau_min=scenario.tau_min,
        time_min=np.arange(horizon) * scenario.tau_min,
        demand_kw=demand, demand_avg_kw=demand_avg,
        pi_base=pi_base, pi_clr=pi_clr_out,
        locked_frac=locked_frac, on_frac=on_frac,
        d_other_kw=d_other, d_feeder_kw=feeder, violations=violations,
        bins_pre=bins_pre, bins_post=bins_post,
        device_index=sampled, device_soc=dev_soc, device_theta_c=dev_theta,
        fine_time_min=np.asarray(fine_t) if fine_t else None,
        fine_demand_kw=np.asarray(fine_d) if fine_d else None,
    )


def run_exogenous(scenario: Scenario) -> Trace:
    """Closed market loop: bid, clear against the base price and feeder
    limit, dispatch, advance.  Market infeasibility propagates."""
    return _simulate(scenario, None)


def run_priced(scenario: Scenario, prices: Series) -> Trace:
    """Dispatch against a broadcast clearing-price series (no auction).

    Feeder violations are counted in ``Trace.violations``, not prevented.
    """
    return _simulate(scenario, prices)


def rmse(actual, predicted, normalizer: float) -> float:
    """Root-mean-square demand error as a fraction of ``normalizer``."""
    if isinstance(actual, Trace):
        actual = actual.demand_kw
    a = np.asarray(actual, dtype=float).ravel()
    p = np.asarray(predicted, dtype=float).ravel()
    if a.shape != p.shape:
        raise ValueError(f"series lengths differ: {a.size} vs {p.size}")
    if normalizer <= 0.0:
        raise ValueError("normalizer must be positive")
    return float(np.sqrt(np.mean((a - p) ** 2)) / normalizer)


def initial_distribution(scenario: Scenario, grid: BinGrid) -> np.ndarray:
    """Occupancy distribution of the scenario's population at time zero."""
    pop, state = build_population(scenario)
    e = pop.soc(state.theta_c) if pop.mode == "tcl" else state.e
    bins = _grid_bins(pop.bids(e), state.m, state.v, grid)
    return distribution_from_bins(bins, grid)


# ---------------------------------------------------------------------------
# price-independent model identification


def probe_natural_model(
    fleet,
    grid: BinGrid,
    tau_min: float,
    samples_per_bin: int = 600,
    seed: int = 0,
    noise_c_per_min: float = 0.0,
) -> TransitionModel:
    """Identify bin transitions by seeding devices uniformly over all bins.

    For every occupancy bin, devices are placed at bids drawn uniformly
    inside the bin's price range with the bin's lockout/clearing lane, then
    advanced one market interval with their standing decisions held (no
    clearing in between).  Landing frequencies, column-normalized, give a
    transition matrix that is independent of any particular price signal.
    Heterogeneous fleets drop draws whose bid slope cannot realize a bid
    inside the bin; a bin no device can occupy keeps its mass in place.
    """
    if samples_per_bin < 1:
        raise ValueError("need at least one sample per bin")
    rng = np.random.default_rng(seed)
    nb = grid.n_bins
    bounds = grid.boundaries  # descending, length nb + 1
    sent_parts: list[np.ndarray] = []
    landed_parts: list[np.ndarray] = []

    for g in range(1, 3 * nb + 1):
        lane, pbin = divmod(g - 1, nb)
        m0 = 0 if lane == 2 else 1
        v0 = 1 if lane == 0 else 0
        lo, hi = float(bounds[pbin + 1]), float(bounds[pbin])

        pop = _resolve_fleet(fleet, samples_per_bin, rng)
        low = np.maximum(lo, pop.pi_max - pop.beta)
        high = np.minimum(hi, pop.pi_max)
        bid = rng.uniform(low, np.maximum(low, high))
        keep = low < high - 1e-12
        if not keep.any():
            continue  # unoccupiable bin: identification leaves it in place

        e0 = np.clip((pop.pi_max - bid) / pop.beta, 0.0, 1.0)[keep]
        sub = pop if keep.all() else _subset_population(pop, keep)
        n_keep = e0.size
        m = np.full(n_keep, m0, dtype=np.int8)
        v = np.full(n_keep, v0, dtype=np.int8)

        if sub.mode == "tcl":
            n_inner = tau_min * 60.0 / sub.h_s
            if abs(n_inner - round(n_inner)) > 1e-9:
                raise ValueError("market interval is not a whole number of "
                                 "thermal steps")
            noise = noise_c_per_min * (sub.h_s / 60.0)
            theta = sub.theta_max_c - e0 * sub.band_c
            for _ in range(int(round(n_inner))):
                c = v & m
                theta = sub.a_tilde * theta + (1.0 - sub.a_tilde) * (
                    sub.theta_ambient_c - c * sub.theta_gain_c
                )
                if noise > 0.0:
                    theta = theta + rng.uniform(-noise, noise, n_keep)
                m = np.where(
                    theta <= sub.theta_min_c, 0,
                    np.where(theta > sub.theta_release_c, 1, m),
                ).astype(np.int8)
            e1 = sub.soc(theta)
        else:
            charging = v & m
            m = np.where(e0 >= 1.0, 0, np.where(e0 < sub.e_set, 1, m)).astype(np.int8)
            e1 = np.clip(sub.a * e0 + sub.gamma * charging, 0.0, 1.0)

        landed = _grid_bins(sub.bids(e1), m, v, grid)
        sent_parts.append(np.full(n_keep, g, dtype=int))
        landed_parts.append(landed)

    meta = {
        "samples_per_bin": samples_per_bin,
        "seed": seed,
        "mode": "tcl" if isinstance(fleet, TclFleetSpec) else "battery",
        "noise_c_per_min": noise_c_per_min,
    }
    return identify_from_pairs(
        np.concatenate(sent_parts), np.concatenate(landed_parts),
        grid, tau_min, "natural", meta,
    )


def _subset_population(pop: Population, keep: np.ndarray) -> Population:
    take = lambda arr: None if arr is None else arr[keep]
    return Population(
        mode=pop.mode, pi_max=pop.pi_max[keep], beta=pop.beta[keep],
        e_set=pop.e_set[keep], p_elec_kw=pop.p_elec_kw[keep],
        a_tilde=take(pop.a_tilde), theta_gain_c=take(pop.theta_gain_c),
        theta_min_c=take(pop.theta_min_c), theta_max_c=take(pop.theta_max_c),
        theta_ambient_c=take(pop.theta_ambient_c), h_s=pop.h_s,
        a=take(pop.a), gamma=take(pop.gamma),
    )
