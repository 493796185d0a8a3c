"""Device-level models.

A flexible load is represented two ways:

* a normalized "generalized battery" whose state of charge (SOC) lives in
  [0, 1], advances once per market interval, and carries a lockout flag that
  forces the device off after it fills up;
* a first-order thermal model for an air conditioner, stepped at a fine
  inner resolution (seconds) between market intervals.

``tcl_to_battery`` maps the thermal parameters onto battery coefficients so
that the coarse model reproduces the duty cycle of the fine one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "BatteryParams",
    "DerState",
    "TclParams",
    "battery_step",
    "bid_price",
    "tcl_step",
    "tcl_to_battery",
]


@dataclass(frozen=True)
class BatteryParams:
    """Per-interval coefficients of the normalized battery model.

    SOC decays by the factor ``a`` each market interval and gains ``gamma``
    while charging.  The device bids ``pi_max - beta * soc`` into the market.
    After the SOC reaches ``e_max`` the device is locked out (cannot run)
    until the SOC has drifted back below ``e_set``.

    ``e_set_low`` optionally enables the mirrored hold at the bottom of the
    band: a device that drains to ``e_min`` must run until its SOC recovers
    above ``e_set_low``.  Disabled by default.
    """

    a: float
    gamma: float
    e_set: float
    pi_max: float
    beta: float
    p_elec_kw: float
    e_min: float = 0.0
    e_max: float = 1.0
    e_set_low: float | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.a <= 1.0:
            raise ValueError(f"dissipation factor a must be in (0, 1], got {self.a}")
        if self.gamma <= 0.0:
            raise ValueError(f"charge gain gamma must be positive, got {self.gamma}")
        if self.beta < 0.0:
            raise ValueError("bid slope beta must be nonnegative")
        if self.p_elec_kw < 0.0:
            raise ValueError("electrical draw must be nonnegative")
        if not self.e_min < self.e_set < self.e_max:
            raise ValueError(
                f"need e_min < e_set < e_max, got {self.e_min}, {self.e_set}, {self.e_max}"
            )
        if self.e_set_low is not None and not self.e_min < self.e_set_low < self.e_max:
            raise ValueError("e_set_low must lie strictly inside the SOC band")


@dataclass(frozen=True)
class DerState:
    """Snapshot of one device between market intervals.

    ``m`` is the lockout flag (0 = locked off after filling up), ``v`` the
    standing dispatch decision from the last clearing, ``bid`` the price the
    device would submit at its current SOC.  ``m_low`` is only meaningful
    when the lower-boundary hold is enabled; 0 means the device must run.
    """

    e: float
    m: int
    v: int
    bid: float
    m_low: int = 1

    @staticmethod
    def from_soc(e: float, params: BatteryParams, m: int = 1, v: int = 0) -> "DerState":
        return DerState(e=e, m=m, v=v, bid=bid_price(e, params))


def bid_price(e, params: BatteryParams):
    """Bid curve: high price when empty, ``pi_max - beta`` when full.

    Accepts a scalar or an array SOC.
    """
    e_arr = np.asarray(e)
    if np.any(e_arr < -1e-12) or np.any(e_arr > 1.0 + 1e-12):
        raise ValueError("SOC outside [0, 1]")
    out = params.pi_max - params.beta * np.clip(e_arr, 0.0, 1.0)
    return float(out) if np.isscalar(e) or e_arr.ndim == 0 else out


def battery_step(state: DerState, params: BatteryParams) -> DerState:
    """Advance one market interval.

    The SOC update uses the standing decision gated by the lockout flag.
    The lockout flag for the next interval is decided from the SOC *before*
    the update: at or above ``e_max`` the device locks; strictly below
    ``e_set`` it is released; in between it holds its previous value.
    """
    e, m, v = state.e, state.m, state.v

    if e >= params.e_max:
        m_next = 0
    elif e < params.e_set:
        m_next = 1
    else:
        m_next = m

    m_low_next = state.m_low
    charging = v * m
    if params.e_set_low is not None:
        if e <= params.e_min:
            m_low_next = 0
        elif e > params.e_set_low:
            m_low_next = 1
        if state.m_low == 0:
            # forced run while held at the bottom of the band
            charging = m
    e_next = params.a * e + params.gamma * charging
    e_next = min(max(e_next, params.e_min), params.e_max)
    return DerState(
        e=e_next, m=m_next, v=v, bid=bid_price(e_next, params), m_low=m_low_next
    )


def battery_step_arrays(e, m, v, params: BatteryParams):
    """Vectorized battery step used by the population simulator.

    Returns ``(e_next, m_next)``; the standing decisions ``v`` are left to
    the caller.  Semantics match :func:`battery_step` with the lower hold
    disabled.
    """
    m_next = np.where(e >= params.e_max, 0, np.where(e < params.e_set, 1, m))
    e_next = np.clip(params.a * e + params.gamma * (v * m), params.e_min, params.e_max)
    return e_next, m_next.astype(np.int8)


@dataclass(frozen=True)
class TclParams:
    """First-order thermal model of an air-conditioned house.

    ``c_kwh_per_c`` is thermal capacitance, ``r_c_per_kw`` thermal
    resistance, ``p_thermal_kw`` the rated cooling power, ``cop`` the
    coefficient of performance (electrical draw = thermal / cop).  The
    comfort band is [theta_min_c, theta_max_c]; ``theta_ambient_c`` is the
    outdoor temperature and ``h_s`` the inner step in seconds.
    """

    c_kwh_per_c: float
    r_c_per_kw: float
    p_thermal_kw: float
    cop: float
    theta_min_c: float
    theta_max_c: float
    theta_ambient_c: float
    h_s: float = 10.0

    def __post_init__(self) -> None:
        if min(self.c_kwh_per_c, self.r_c_per_kw, self.p_thermal_kw, self.cop) <= 0:
            raise ValueError("thermal parameters must be positive")
        if self.theta_min_c >= self.theta_max_c:
            raise ValueError("comfort band is empty")
        if self.h_s <= 0:
            raise ValueError("inner step must be positive")

    @property
    def a_tilde(self) -> float:
        """Per-inner-step temperature decay factor."""
        return math.exp(-self.h_s / (3600.0 * self.c_kwh_per_c * self.r_c_per_kw))

    @property
    def theta_gain_c(self) -> float:
        """Steady-state temperature drop produced by the compressor."""
        return self.p_thermal_kw * self.r_c_per_kw

    @property
    def p_elec_kw(self) -> float:
        return self.p_thermal_kw / self.cop

    @property
    def band_c(self) -> float:
        return self.theta_max_c - self.theta_min_c

    def soc(self, theta):
        """Map temperature to normalized SOC (cool end of the band is full)."""
        raw = (self.theta_max_c - np.asarray(theta)) / self.band_c
        out = np.clip(raw, 0.0, 1.0)
        return float(out) if np.isscalar(theta) else out

    def theta_of_soc(self, e):
        return self.theta_max_c - np.asarray(e) * self.band_c

    def theta_release_c(self, e_set: float) -> float:
        """Temperature above which the lockout releases."""
        return self.theta_max_c - e_set * self.band_c


def tcl_step(theta, on, tcl: TclParams, rng=None, noise_c_per_min: float = 0.0):
    """One inner thermal step; scalar or vectorized over devices.

    ``on`` is the compressor flag.  Optional process noise is uniform with
    the given amplitude per minute, scaled to the inner step.
    """
    a = tcl.a_tilde
    theta_next = a * np.asarray(theta) + (1.0 - a) * (
        tcl.theta_ambient_c - np.asarray(on) * tcl.theta_gain_c
    )
    if noise_c_per_min > 0.0:
        if rng is None:
            raise ValueError("noise requested but no generator supplied")
        amp = noise_c_per_min * (tcl.h_s / 60.0)
        theta_next = theta_next + rng.uniform(-amp, amp, size=np.shape(theta_next))
    if np.isscalar(theta) and np.ndim(theta_next) == 0:
        return float(theta_next)
    return theta_next


def tcl_to_battery(
    tcl: TclParams,
    tau_min: float,
    pi_max: float = 50.0,
    beta: float = 40.0,
    e_set: float = 0.7,
) -> BatteryParams:
    """Fit battery coefficients to the thermal model at a market interval.

    The always-off and always-on temperature trajectories of the thermal
    model, composed over ``tau_min`` and normalized to SOC, are matched by
    the battery recursion at the anchor points of the recurrent duty cycle
    under market gating:

    * the off branch reproduces the SOC at which a full device re-engages
      -- the drift value after the whole number of off intervals spent
      locked (release crossing rounded up, plus the one-interval decision
      lag both models share);
    * the on branch reproduces the recovery time from that re-engagement
      SOC back to full.

    With both anchors matched, the two recursions lock and release on the
    same market intervals cycle after cycle; the saturated ends of the band
    (SOC 0 and 1) remain exact fixed points.  Cold starts far below the
    release level can lead the fitted model by a few intervals at very
    short market intervals, where the two charge curves differ in shape.

    Raises if the market interval is not a whole number of inner steps, if
    the unit cannot reach the cool end of the band while running, if the
    off drift would never release the lockout, or if the interval is so
    long that the device overshoots the whole band while locked.
    """
    n_float = tau_min * 60.0 / tcl.h_s
    n = round(n_float)
    if abs(n_float - n) > 1e-9 or n < 1:
        raise ValueError(
            f"market interval of {tau_min} min is not a multiple of the "
            f"{tcl.h_s} s inner step"
        )
    a_comp = tcl.a_tilde**n
    band = tcl.band_c
    f_off = (tcl.theta_max_c - tcl.theta_ambient_c) / band
    f_on = f_off + tcl.theta_gain_c / band

    if f_on <= 1.0 + 1e-12:
        raise ValueError(
            "undersized unit: running flat out never reaches the cool end of the band"
        )
    if f_off >= e_set - 1e-12:
        raise ValueError(
            "off drift settles above the release level; lockout would never clear"
        )

    # whole off intervals spent locked: the release crossing time from full
    # SOC, rounded up to the next market instant, plus one interval of
    # decision lag
    t_off = math.log((e_set - f_off) / (1.0 - f_off)) / math.log(a_comp)
    j_off = math.ceil(t_off) + 1
    e_re = f_off + (1.0 - f_off) * a_comp**j_off
    if e_re <= 0.0:
        raise ValueError(
            "market interval too long: the device drifts through the whole "
            "band before it can re-engage"
        )
    a_b = e_re ** (1.0 / j_off)

    # recovery time from the re-engagement SOC back to full
    t_on = math.log((f_on - 1.0) / (f_on - e_re)) / math.log(a_comp)
    r = a_b**t_on
    e_target = (1.0 - r * e_re) / (1.0 - r)
    gamma_b = (1.0 - a_b) * e_target

    return BatteryParams(
        a=a_b,
        gamma=gamma_b,
        e_set=e_set,
        pi_max=pi_max,
        beta=beta,
        p_elec_kw=tcl.p_elec_kw,
    )
