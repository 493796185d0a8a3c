"""Finite-horizon clearing-schedule optimization over binned fleet dynamics.

Plans a schedule of market-clearing thresholds for a device fleet whose
population state lives on a price/status bin grid.  Two formulations:

* an exact mixed-integer one in which each period clears a whole prefix
  of price bins (every device in a cleared bin turns on), solved by
  branch-and-bound on the per-period prefix length with convex
  relaxation bounds, and
* a purely continuous relaxation that drops the whole-bin logic and
  instead discourages clearing deep into the bin order with
  geometrically growing per-bin on-costs.

Both yield a clearing-price schedule that a population simulator (or a
real market) can replay.  Supply is a set of quadratic-cost sources; the
marginal electricity price per period is the marginal supply cost at
the optimal dispatch, which coincides with the power-balance dual of
the continuous program.

Units: demand and supply in MW, prices in $/MWh, fleet state as
fractions of the population.  Distributions are column vectors over
3·n_bins global bins (on / responsive-off / locked lanes).
"""

from __future__ import annotations

import csv
import heapq
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .aggmodel import BinGrid, TransitionModel, on_fraction, split_and_reset
from .popsim import Scenario, Trace, build_population, run_priced
from .qp import solve_qp as _qp_solve

_FEAS_TOL = 1e-8


class MpcInfeasibleError(RuntimeError):
    """No feasible schedule exists; names the violated constraint class."""

    def __init__(self, constraint_class: str, message: str):
        super().__init__(f"[{constraint_class}] {message}")
        self.constraint_class = constraint_class


class MpcSolverError(RuntimeError):
    """The numerical engine failed to produce a usable solution."""


@dataclass(frozen=True)
class SupplySource:
    """Quadratic-cost generator: cost(p) = c0 + c1·p + c2·p²  [$ per period]."""

    c1: float
    c2: float = 0.0
    c0: float = 0.0
    p_max_mw: float = math.inf

    def cost(self, p: float) -> float:
        return self.c0 + self.c1 * p + self.c2 * p * p

    def marginal(self, p: float) -> float:
        return self.c1 + 2.0 * self.c2 * p


@dataclass
class MpcProblem:
    """One planning instance over ``n_periods`` market intervals.

    ``x_ini`` is the pre-clearing bin distribution entering period 1;
    ``scale`` (derived from ``n_devices`` and ``p_elec_kw``) converts
    cleared fleet fractions to MW.  ``energy_floor_mw`` bounds the total
    controllable energy dispatched over the horizon from below (in
    MW-periods), preventing the optimizer from starving the fleet.
    """

    model: TransitionModel
    n_periods: int
    x_ini: np.ndarray
    d_other_mw: object  # scalar or length-n_periods series
    sources: tuple[SupplySource, ...]
    n_devices: int
    p_elec_kw: float
    d_feeder_mw: float = math.inf
    energy_floor_mw: float = 0.0
    mu_w: float = 0.0
    mu_s: float = 0.0
    b_max: float = 1.0
    w_o: float = 3.0
    zeta: Optional[float] = None
    spread_terminal_only: bool = False
    feas_tol: float = _FEAS_TOL

    def __post_init__(self) -> None:
        if self.n_periods < 1:
            raise ValueError("horizon must be at least one period")
        if self.model.conditioning != "natural":
            raise ValueError(
                "the planner embeds clearing explicitly, so the transition "
                "model must capture natural (between-clearing) dynamics only"
            )
        n_states = self.model.grid.n_states
        x = np.asarray(self.x_ini, dtype=float).ravel()
        if x.size != n_states:
            raise ValueError(f"initial distribution must have {n_states} entries")
        if x.min() < -1e-12 or abs(x.sum() - 1.0) > 1e-9:
            raise ValueError("initial distribution must be a probability vector")
        self.x_ini = np.clip(x, 0.0, None)
        d_o = np.asarray(self.d_other_mw, dtype=float)
        if d_o.ndim == 0:
            d_o = np.full(self.n_periods, float(d_o))
        if d_o.shape != (self.n_periods,):
            raise ValueError("uncontrollable demand series length must match the horizon")
        if d_o.min() < 0:
            raise ValueError("uncontrollable demand must be nonnegative")
        self.d_other_mw = d_o
        if not self.sources:
            raise ValueError("at least one supply source is required")
        self.sources = tuple(self.sources)
        for src in self.sources:
            if src.c2 < 0:
                raise ValueError("supply costs must be convex (c2 >= 0)")
            if src.c1 < 0:
                raise ValueError("marginal supply cost at zero must be nonnegative")
            if src.p_max_mw <= 0:
                raise ValueError("source capacity must be positive")
        if len(self.sources) > 1 and any(s.c2 == 0 for s in self.sources):
            raise ValueError("multi-source dispatch requires strictly convex costs")
        if self.n_devices < 0:
            raise ValueError("device count must be nonnegative")
        if self.p_elec_kw <= 0:
            raise ValueError("per-device electric draw must be positive")
        if self.d_feeder_mw <= 0:
            raise ValueError("feeder limit must be positive")
        if self.energy_floor_mw < 0:
            raise ValueError("energy floor must be nonnegative")
        if self.mu_w < 0 or self.mu_s < 0:
            raise ValueError("objective weights must be nonnegative")
        n_b = self.model.grid.n_bins
        if not (1.0 / (3 * n_b) - 1e-12 <= self.b_max <= 1.0 + 1e-12):
            raise ValueError("bin cap must lie in [1/(3 n_bins), 1]")
        if self.w_o <= 1.0:
            raise ValueError("per-bin on-cost base must exceed 1 to order the bins")
        if self.zeta is not None and self.zeta <= 0:
            raise ValueError("dispatch threshold must be positive")

    @property
    def grid(self) -> BinGrid:
        return self.model.grid

    @property
    def scale_mw(self) -> float:
        """Fleet fraction to MW conversion."""
        return self.n_devices * self.p_elec_kw / 1000.0

    @property
    def zeta_effective(self) -> float:
        if self.zeta is not None:
            return self.zeta
        return 1.0 / self.n_devices if self.n_devices else math.inf

    @property
    def b_avg(self) -> float:
        return 1.0 / self.grid.n_states


@dataclass
class MpcSolution:
    """Schedule, trajectories, and diagnostics for one solved instance."""

    method: str  # "mip" or "qp"
    i_max: np.ndarray  # (K,) cleared prefix length per period
    pi_clr: np.ndarray  # (K,) clearing price per period [$ / MWh]
    x: np.ndarray  # (K, 3 n_bins) pre-clearing distributions
    x_on: np.ndarray  # (K, 2 n_bins) cleared fractions
    x_off: np.ndarray  # (K, 3 n_bins) parked fractions
    p_mw: np.ndarray  # (K, n_sources) supply schedule
    d_c_mw: np.ndarray  # (K,) controllable demand
    d_other_mw: np.ndarray  # (K,)
    lambda_elec: np.ndarray  # (K,) marginal electricity price
    objective: float
    status: str  # "optimal" or "budget_exhausted"
    gap: float
    nodes_explored: int
    wall_time_s: float
    zeta: float

    @property
    def d_total_mw(self) -> np.ndarray:
        return self.d_c_mw + self.d_other_mw

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "i_max": self.i_max.tolist(),
            "pi_clr": self.pi_clr.tolist(),
            "p_mw": self.p_mw.tolist(),
            "d_c_mw": self.d_c_mw.tolist(),
            "d_other_mw": self.d_other_mw.tolist(),
            "d_total_mw": self.d_total_mw.tolist(),
            "lambda_elec": self.lambda_elec.tolist(),
            "objective": self.objective,
            "status": self.status,
            "gap": self.gap,
            "nodes_explored": self.nodes_explored,
            "wall_time_s": self.wall_time_s,
            "zeta": self.zeta,
        }

    def to_csv(self, path, header_comments: Sequence[str] = ()) -> None:
        """Per-period schedule as CSV, with optional '#' header lines."""
        n_src = self.p_mw.shape[1]
        with open(path, "w", newline="") as fh:
            for line in header_comments:
                fh.write(f"# {line}\n")
            writer = csv.writer(fh)
            writer.writerow(
                ["period", "i_max", "pi_clr"]
                + [f"p{s + 1}_mw" for s in range(n_src)]
                + ["d_c_mw", "d_other_mw", "d_total_mw", "lambda_elec"]
            )
            for k in range(self.i_max.size):
                writer.writerow(
                    [k + 1, int(self.i_max[k]), repr(float(self.pi_clr[k]))]
                    + [repr(float(v)) for v in self.p_mw[k]]
                    + [
                        repr(float(self.d_c_mw[k])),
                        repr(float(self.d_other_mw[k])),
                        repr(float(self.d_total_mw[k])),
                        repr(float(self.lambda_elec[k])),
                    ]
                )


# --------------------------------------------------------------------------
# supply dispatch
# --------------------------------------------------------------------------


def dispatch_supply(problem: MpcProblem, demand_mw: float) -> tuple[np.ndarray, float, float]:
    """Least-cost allocation of ``demand_mw`` over the sources.

    Returns (per-source power, total cost, marginal price).  Marginals
    are equalized across interior sources; capped sources saturate.
    """
    srcs = problem.sources
    if demand_mw < -1e-9:
        raise ValueError("demand must be nonnegative")
    demand_mw = max(demand_mw, 0.0)
    if len(srcs) == 1:
        src = srcs[0]
        if demand_mw > src.p_max_mw + 1e-9:
            raise MpcInfeasibleError(
                "supply capacity", f"demand {demand_mw:.3f} MW exceeds source capacity"
            )
        return np.array([demand_mw]), src.cost(demand_mw), src.marginal(demand_mw)
    cap = sum(s.p_max_mw for s in srcs)
    if demand_mw > cap + 1e-9:
        raise MpcInfeasibleError(
            "supply capacity", f"demand {demand_mw:.3f} MW exceeds total capacity"
        )

    def total_at(lam: float) -> float:
        return sum(
            min(max((lam - s.c1) / (2.0 * s.c2), 0.0), s.p_max_mw) for s in srcs
        )

    lo = min(s.c1 for s in srcs)
    hi = max(s.c1 + 2.0 * s.c2 * min(demand_mw, s.p_max_mw) for s in srcs) + 1.0
    while total_at(hi) < demand_mw:
        hi = 2.0 * hi + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if total_at(mid) < demand_mw:
            lo = mid
        else:
            hi = mid
    lam = 0.5 * (lo + hi)
    p = np.array(
        [min(max((lam - s.c1) / (2.0 * s.c2), 0.0), s.p_max_mw) for s in srcs]
    )
    if p.sum() > 0:
        p *= demand_mw / p.sum()  # close the bisection residual exactly
    cost = sum(s.cost(pi) for s, pi in zip(srcs, p))
    return p, cost, lam


# --------------------------------------------------------------------------
# shared quadratic-program assembly
# --------------------------------------------------------------------------


class _Layout:
    """Variable indexing for the stacked per-period decision vector.

    Per period: x (3N), x_on (2N), x_off (3N), P (n_src), and — in the
    relaxation used for branch-and-bound — one threshold activation u per
    price bin (N).
    """

    def __init__(self, n_bins: int, n_sources: int, n_periods: int, with_u: bool):
        self.nb = n_bins
        self.n3 = 3 * n_bins
        self.n2 = 2 * n_bins
        self.ns = n_sources
        self.with_u = with_u
        self.stride = self.n3 + self.n2 + self.n3 + n_sources + (n_bins if with_u else 0)
        self.n_periods = n_periods
        self.n_vars = self.stride * n_periods

    def x(self, k: int) -> int:
        return k * self.stride

    def x_on(self, k: int) -> int:
        return k * self.stride + self.n3

    def x_off(self, k: int) -> int:
        return k * self.stride + self.n3 + self.n2

    def p(self, k: int) -> int:
        return k * self.stride + 2 * self.n3 + self.n2

    def u(self, k: int) -> int:
        return k * self.stride + 2 * self.n3 + self.n2 + self.ns


@dataclass
class QpModel:
    """Assembled convex program plus the index maps needed to read it back."""

    problem: MpcProblem
    start_period: int
    layout: _Layout
    h_diag: np.ndarray
    q: np.ndarray
    a_eq: sp.csc_matrix
    b_eq: np.ndarray
    g_ineq: sp.csc_matrix
    h_ineq: np.ndarray
    balance_rows: np.ndarray
    init_rows: slice
    floor_row: Optional[int]
    constant: float
    # CSC data positions of the first-period clearing-link coefficients
    # (present only on logic-relaxed templates; rewritten per search node)
    u_on_pos: Optional[np.ndarray] = None
    u_off_pos: Optional[np.ndarray] = None
    u_off_rows: Optional[np.ndarray] = None


def _assemble(
    problem: MpcProblem,
    start_period: int,
    x_start: np.ndarray,
    floor_rhs: float,
    *,
    relax_logic: bool,
    proximal: float = 0.0,
) -> QpModel:
    """Build the stacked QP for periods ``start_period``..end.

    ``relax_logic=False`` gives the continuous formulation (no threshold
    variables; geometric per-bin on-costs).  ``relax_logic=True`` keeps
    the whole-bin clearing logic with thresholds relaxed to [0, 1] — the
    bound used inside branch-and-bound.  ``proximal`` adds a tiny strictly
    convex term on the split variables (zero natural curvature there makes
    the optimal face degenerate and the duals ill-determined); the supply
    variables are never perturbed, so marginal-price duals stay exact.
    """
    grid = problem.grid
    nb, n3, n2 = grid.n_bins, 3 * grid.n_bins, 2 * grid.n_bins
    ns = len(problem.sources)
    K = problem.n_periods - start_period
    lay = _Layout(nb, ns, K, with_u=relax_logic)
    scale = problem.scale_mw
    a_nat = problem.model.a_matrix
    m_on = a_nat @ problem.model.b_on  # (3N, 2N)
    m_off = a_nat @ problem.model.b_off  # (3N, 3N)

    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    b_eq: list[float] = []
    n_eq = 0

    def add(r: int, c: int, v: float) -> None:
        rows.append(r)
        cols.append(c)
        vals.append(v)

    # initial condition: x(0) = x_start
    for i in range(n3):
        add(n_eq + i, lay.x(0) + i, 1.0)
    b_eq.extend(x_start.tolist())
    init_rows = slice(0, n3)
    n_eq += n3

    balance_rows = np.empty(K, dtype=int)
    for k in range(K):
        # decomposition: x = x_on + x_off (on/responsive lanes), x = x_off (locked)
        for i in range(n3):
            add(n_eq + i, lay.x(k) + i, 1.0)
            add(n_eq + i, lay.x_off(k) + i, -1.0)
            if i < n2:
                add(n_eq + i, lay.x_on(k) + i, -1.0)
        b_eq.extend([0.0] * n3)
        n_eq += n3
        # power balance: sum_s P_s - scale * sum_i x_on = d_other
        for s in range(ns):
            add(n_eq, lay.p(k) + s, 1.0)
        for i in range(n2):
            add(n_eq, lay.x_on(k) + i, -scale)
        b_eq.append(float(problem.d_other_mw[start_period + k]))
        balance_rows[k] = n_eq
        n_eq += 1
        # dynamics: x(k+1) = A (B_on x_on + B_off x_off)
        if k + 1 < K:
            for i in range(n3):
                add(n_eq + i, lay.x(k + 1) + i, 1.0)
                for j in range(n2):
                    if m_on[i, j] != 0.0:
                        add(n_eq + i, lay.x_on(k) + j, -m_on[i, j])
                for j in range(n3):
                    if m_off[i, j] != 0.0:
                        add(n_eq + i, lay.x_off(k) + j, -m_off[i, j])
            b_eq.extend([0.0] * n3)
            n_eq += n3

    a_eq = sp.csc_matrix(
        (vals, (rows, cols)), shape=(n_eq, lay.n_vars)
    )
    b_vec = np.array(b_eq)

    # inequalities
    rows, cols, vals = [], [], []
    h_ineq: list[float] = []
    n_in = 0
    cap_feeder = math.isfinite(problem.d_feeder_mw)
    cap_bins = problem.b_max < 1.0 - 1e-12
    link_cap: Optional[np.ndarray] = None
    link_on_rows: list[int] = []
    link_off_rows: list[int] = []
    if relax_logic:
        reach = np.maximum(m_on.max(axis=1), m_off.max(axis=1))[:n2]
        link_cap = np.minimum(problem.b_max, reach)
    for k in range(K):
        for i in range(n2):  # x_on >= 0
            add(n_in, lay.x_on(k) + i, -1.0)
            h_ineq.append(0.0)
            n_in += 1
        for i in range(n3):  # x_off >= 0
            add(n_in, lay.x_off(k) + i, -1.0)
            h_ineq.append(0.0)
            n_in += 1
        for s, src in enumerate(problem.sources):  # 0 <= P <= cap
            add(n_in, lay.p(k) + s, -1.0)
            h_ineq.append(0.0)
            n_in += 1
            if math.isfinite(src.p_max_mw):
                add(n_in, lay.p(k) + s, 1.0)
                h_ineq.append(src.p_max_mw)
                n_in += 1
        if cap_feeder:
            for i in range(n2):
                add(n_in, lay.x_on(k) + i, scale)
            h_ineq.append(problem.d_feeder_mw - float(problem.d_other_mw[start_period + k]))
            n_in += 1
        if cap_bins and k > 0:
            # period 0's distribution is fixed by the initial condition and
            # validated up front; capping it again would only add degenerate rows
            for i in range(n3):
                add(n_in, lay.x(k) + i, 1.0)
                h_ineq.append(problem.b_max)
                n_in += 1
        if relax_logic:
            # chain u_1 >= u_2 >= ... >= u_N >= 0, u_1 <= 1
            for pbin in range(nb - 1):
                add(n_in, lay.u(k) + pbin, -1.0)
                add(n_in, lay.u(k) + pbin + 1, 1.0)
                h_ineq.append(0.0)
                n_in += 1
            add(n_in, lay.u(k) + nb - 1, -1.0)
            h_ineq.append(0.0)
            n_in += 1
            add(n_in, lay.u(k), 1.0)
            h_ineq.append(1.0)
            n_in += 1
            # cleared bins take everything, uncleared bins take nothing:
            # x_on_i <= u_p·M_i, x_off_i <= (1 - u_p)·M_i on the responsive
            # lanes, with M_i the tightest known cap on the pre-clearing
            # mass of bin i.  For the first period the cap is the exact
            # entering distribution (rewritten in place per search node);
            # later periods use a one-step reachability bound: a unit of
            # mass at j lands on i with weight at most max(on, off), so
            # no bin can ever hold more than the largest such weight.
            for i in range(n2):
                pbin = i % nb
                m_cap = 1.0 if k == 0 else float(link_cap[i])
                add(n_in, lay.x_on(k) + i, 1.0)
                add(n_in, lay.u(k) + pbin, -m_cap)
                h_ineq.append(0.0)
                if k == 0:
                    link_on_rows.append(n_in)
                n_in += 1
                add(n_in, lay.x_off(k) + i, 1.0)
                add(n_in, lay.u(k) + pbin, m_cap)
                h_ineq.append(m_cap)
                if k == 0:
                    link_off_rows.append(n_in)
                n_in += 1
    floor_row: Optional[int] = None
    if problem.energy_floor_mw > 0.0:
        for k in range(K):
            for i in range(n2):
                add(n_in, lay.x_on(k) + i, -scale)
        h_ineq.append(-floor_rhs)
        floor_row = n_in
        n_in += 1

    g_ineq = sp.csc_matrix((vals, (rows, cols)), shape=(n_in, lay.n_vars))
    h_vec = np.array(h_ineq)

    # Locate the first-period link coefficients inside the CSC storage so
    # a search node can rewrite them with its exact entering masses.
    u_on_pos = u_off_pos = u_off_rows = None
    if relax_logic:
        u_on_pos = np.empty(n2, dtype=np.int64)
        u_off_pos = np.empty(n2, dtype=np.int64)
        for i in range(n2):
            c = lay.u(0) + (i % nb)
            lo = g_ineq.indptr[c]
            seg = g_ineq.indices[lo:g_ineq.indptr[c + 1]]
            u_on_pos[i] = lo + np.searchsorted(seg, link_on_rows[i])
            u_off_pos[i] = lo + np.searchsorted(seg, link_off_rows[i])
        u_off_rows = np.array(link_off_rows, dtype=np.int64)

    # objective
    h_diag = np.zeros(lay.n_vars)
    q = np.zeros(lay.n_vars)
    constant = 0.0
    b_avg = problem.b_avg
    terminal_rel = problem.n_periods - 1 - start_period
    for k in range(K):
        spread_here = (not problem.spread_terminal_only) or k == terminal_rel
        if problem.mu_s > 0.0 and spread_here:
            for i in range(n3):
                h_diag[lay.x(k) + i] += 2.0 * problem.mu_s
                q[lay.x(k) + i] += -2.0 * problem.mu_s * b_avg
            constant += problem.mu_s * n3 * b_avg * b_avg
        for s, src in enumerate(problem.sources):
            h_diag[lay.p(k) + s] += 2.0 * src.c2
            q[lay.p(k) + s] += src.c1
            constant += src.c0
        if problem.mu_w > 0.0:
            if relax_logic:
                for pbin in range(nb):
                    q[lay.u(k) + pbin] += 2.0 * problem.mu_w
            else:
                for i in range(n2):
                    q[lay.x_on(k) + i] += problem.mu_w * problem.w_o ** ((i % nb) + 1)
        if proximal > 0.0:
            h_diag[lay.x_on(k):lay.x_on(k) + n2] += 2.0 * proximal
            h_diag[lay.x_off(k):lay.x_off(k) + n3] += 2.0 * proximal

    return QpModel(
        problem=problem,
        start_period=start_period,
        layout=lay,
        h_diag=h_diag,
        q=q,
        a_eq=a_eq,
        b_eq=b_vec,
        g_ineq=g_ineq,
        h_ineq=h_vec,
        balance_rows=balance_rows,
        init_rows=init_rows,
        floor_row=floor_row,
        constant=constant,
        u_on_pos=u_on_pos,
        u_off_pos=u_off_pos,
        u_off_rows=u_off_rows,
    )


def _precheck(problem: MpcProblem) -> None:
    tol = problem.feas_tol
    if problem.x_ini.max(initial=0.0) > problem.b_max + tol:
        raise MpcInfeasibleError(
            "bin cap", "initial distribution already exceeds the per-bin cap"
        )
    over = np.flatnonzero(problem.d_other_mw > problem.d_feeder_mw + tol)
    if over.size:
        raise MpcInfeasibleError(
            "feeder limit",
            f"uncontrollable demand alone exceeds the feeder limit in period {over[0] + 1}",
        )
    if problem.energy_floor_mw > 0.0:
        headroom = np.minimum(
            problem.scale_mw, problem.d_feeder_mw - problem.d_other_mw
        ).clip(min=0.0)
        if headroom.sum() + tol < problem.energy_floor_mw:
            raise MpcInfeasibleError(
                "energy floor",
                "controllable-energy floor is incompatible with the feeder limit",
            )


# --------------------------------------------------------------------------
# continuous formulation
# --------------------------------------------------------------------------


# Curvature added to the split variables of the continuous formulation.
# They carry no natural quadratic cost, which leaves the optimal face
# degenerate and the active-set refinement of the duals unstable; a fixed
# small convexifier pins them down.  Reported objectives have the term
# removed again, and supply variables keep their exact marginal costs.
_SPLIT_PROXIMAL = 1e-6


def build_qp(problem: MpcProblem) -> QpModel:
    """Continuous formulation: no whole-bin logic, geometric on-costs."""
    _precheck(problem)
    return _assemble(
        problem,
        0,
        problem.x_ini,
        problem.energy_floor_mw,
        relax_logic=False,
        proximal=_SPLIT_PROXIMAL,
    )


def solve_qp(model: QpModel, *, tol: float = 1e-9) -> MpcSolution:
    """Solve the continuous model.

    Marginal prices are recovered from the optimality condition of the
    supply variables rather than read off the solver's multiplier vector:
    supply enters only the power balance and its own smooth cost, so at
    any optimum the balance multiplier equals the marginal cost of the
    dispatched supply.  That closed form stays exact even when the
    geometric on-cost weights (which span many orders of magnitude)
    leave the solver's own duals poorly determined.
    """
    t0 = time.perf_counter()
    problem = model.problem
    res = _qp_solve(
        sp.diags(model.h_diag),
        model.q,
        model.a_eq,
        model.b_eq,
        model.g_ineq,
        model.h_ineq,
        tol=tol,
    )
    if res.status == "infeasible":
        raise MpcInfeasibleError(
            "coupled constraints",
            "the continuous program admits no feasible point "
            "(certificate from the interior-point method)",
        )
    if res.status != "optimal":
        raise MpcSolverError(
            f"interior-point method stopped after {res.iterations} iterations "
            f"(primal residual {res.primal_residual:.2e}, "
            f"dual residual {res.dual_residual:.2e})"
        )
    lay = model.layout
    K = lay.n_periods
    nb, n3, n2, ns = lay.nb, lay.n3, lay.n2, lay.ns
    x = np.empty((K, n3))
    x_on = np.empty((K, n2))
    x_off = np.empty((K, n3))
    p_mw = np.empty((K, ns))
    for k in range(K):
        x[k] = res.x[lay.x(k):lay.x(k) + n3]
        x_on[k] = res.x[lay.x_on(k):lay.x_on(k) + n2]
        x_off[k] = res.x[lay.x_off(k):lay.x_off(k) + n3]
        p_mw[k] = res.x[lay.p(k):lay.p(k) + ns]
    d_c = problem.scale_mw * x_on.sum(axis=1)
    # Solver-tolerance overshoot of a capacity bound must not trip the
    # strict feasibility check inside the dispatch recovery.
    p_cap = sum(s.p_max_mw for s in problem.sources)
    lam = np.array(
        [
            dispatch_supply(problem, min(float(p), p_cap))[2]
            for p in p_mw.sum(axis=1)
        ]
    )
    zeta = problem.zeta_effective
    i_max = _thresholds_from_fractions(x_on, nb, zeta)
    pi = np.array([problem.grid.threshold_price(int(i)) for i in i_max])
    return MpcSolution(
        method="qp",
        i_max=i_max,
        pi_clr=pi,
        x=x,
        x_on=x_on,
        x_off=x_off,
        p_mw=p_mw,
        d_c_mw=d_c,
        d_other_mw=problem.d_other_mw.copy(),
        lambda_elec=lam,
        objective=res.objective
        + model.constant
        - _SPLIT_PROXIMAL * (float(np.square(x_on).sum()) + float(np.square(x_off).sum())),
        status="optimal",
        gap=0.0,
        nodes_explored=0,
        wall_time_s=time.perf_counter() - t0,
        zeta=zeta,
    )


def _thresholds_from_fractions(x_on: np.ndarray, n_bins: int, zeta: float) -> np.ndarray:
    """Deepest price bin holding at least ``zeta`` cleared mass, per period."""
    out = np.zeros(x_on.shape[0], dtype=int)
    for k in range(x_on.shape[0]):
        hits = np.flatnonzero(x_on[k] >= zeta - 1e-15)
        if hits.size:
            out[k] = int((hits % n_bins).max()) + 1
    return out


def extract_prices(
    solution: MpcSolution, grid: BinGrid, zeta: Optional[float] = None
) -> np.ndarray:
    """Clearing-price schedule from a solution.

    Integer solutions carry their thresholds directly; continuous ones
    are thresholded at ``zeta`` (cleared mass below it is ignored).  A
    period clearing nothing prices at the top of the grid.
    """
    if solution.method == "mip" or zeta is None:
        i_max = solution.i_max
    else:
        i_max = _thresholds_from_fractions(solution.x_on, grid.n_bins, zeta)
    return np.array([grid.threshold_price(int(i)) for i in i_max])


# --------------------------------------------------------------------------
# integer formulation: branch-and-bound on per-period prefix lengths
# --------------------------------------------------------------------------


@dataclass
class MipBudget:
    """Search limits; exhaustion returns the incumbent with its gap."""

    max_nodes: int = 20000
    time_limit_s: Optional[float] = None
    rel_gap: float = 1e-6
    abs_gap: float = 1e-8


@dataclass
class MipModel:
    """Integer instance plus cached relaxations keyed by remaining horizon."""

    problem: MpcProblem
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_binary_decisions(self) -> int:
        """Independent on/off bin decisions: one prefix length choice per
        period spans n_bins binaries (the two responsive lanes share them)."""
        return self.problem.n_periods * self.problem.grid.n_bins

    def relaxation(self, start_period: int):
        if start_period not in self._cache:
            self._cache[start_period] = _assemble(
                self.problem,
                start_period,
                np.zeros(3 * self.problem.grid.n_bins),
                max(self.problem.energy_floor_mw, 0.0),
                relax_logic=True,
            )
        return self._cache[start_period]


def build_mip(problem: MpcProblem) -> MipModel:
    """Integer formulation handle (validates the instance)."""
    _precheck(problem)
    return MipModel(problem=problem)


@dataclass
class _Node:
    depth: int
    x: np.ndarray  # pre-clearing distribution entering period `depth`
    cost: float  # committed cost of periods < depth (incl. their spread)
    d_c_sum: float
    seq: tuple
    bound: float  # inherited lower bound (parent's relaxation value)


def _period_outcome(problem: MpcProblem, x: np.ndarray, i_max: int, k: int):
    """Deterministic consequences of clearing prefix ``i_max`` at period k.

    Returns (x_plus, d_c, added_cost) or None if the choice is infeasible
    (feeder).  ``added_cost`` covers supply, threshold on-cost, and the
    spread penalty of this period's pre-clearing distribution.
    """
    tol = problem.feas_tol
    x_plus = split_and_reset(x, i_max, problem.grid)
    d_c = problem.scale_mw * float(x_plus[: problem.grid.n_bins].sum())
    d_total = d_c + float(problem.d_other_mw[k])
    if d_total > problem.d_feeder_mw + tol * max(1.0, problem.d_feeder_mw):
        return None
    try:
        _, supply_cost, _ = dispatch_supply(problem, d_total)
    except MpcInfeasibleError:
        return None
    added = supply_cost + problem.mu_w * 2.0 * i_max
    spread_here = (not problem.spread_terminal_only) or k == problem.n_periods - 1
    if problem.mu_s > 0.0 and spread_here:
        added += problem.mu_s * float(((x - problem.b_avg) ** 2).sum())
    return x_plus, d_c, added


def _relaxation_solve(model: MipModel, node: _Node, tol: float = 1e-8):
    """Solve the logic-relaxed suffix program with the node's data patched in."""
    problem = model.problem
    template = model.relaxation(node.depth)
    b_vec = template.b_eq.copy()
    b_vec[template.init_rows] = node.x
    h_vec = template.h_ineq.copy()
    if template.floor_row is not None:
        h_vec[template.floor_row] = -(problem.energy_floor_mw - node.d_c_sum)
    # The first suffix period's pre-clearing masses are known exactly here:
    # rewrite its clearing-link big-Ms with them (every node rewrites every
    # position, so the shared template never leaks stale values).
    xr = np.maximum(node.x[: template.layout.n2], 0.0)
    template.g_ineq.data[template.u_on_pos] = -xr
    template.g_ineq.data[template.u_off_pos] = xr
    h_vec[template.u_off_rows] = xr
    res = _qp_solve(
        sp.diags(template.h_diag),
        template.q,
        template.a_eq,
        b_vec,
        template.g_ineq,
        h_vec,
        tol=tol,
        polish=False,
    )
    return template, res


def _solve_node_relaxation(model: MipModel, node: _Node, tol: float = 1e-8):
    """Suffix lower bound from the logic-relaxed QP; None when infeasible."""
    template, res = _relaxation_solve(model, node, tol)
    if res.status == "infeasible":
        return None
    lay = template.layout
    cleared_next = float(res.x[lay.x_on(0):lay.x_on(0) + lay.n2].sum())
    if res.status != "optimal":
        return -math.inf, cleared_next
    suffix = res.objective + template.constant
    # The bound comes from an iterative solve; shave off its remaining
    # duality gap (total complementarity) plus a tolerance-sized hair so
    # a value accurate to solver precision can never prune the true
    # optimum.  The gap term matters when the geometric on-cost weights
    # stretch the objective range beyond what the solver resolves.
    slack = 1e-6 * (1.0 + abs(suffix)) + res.gap * len(res.s)
    return node.cost + suffix - slack, cleared_next


def _greedy_dive(model: MipModel) -> Optional[tuple[float, tuple]]:
    """One depth-first pass following each node's fractional clearing level.

    Fallback incumbent constructor for instances where no simple seed
    sequence replays feasibly; costs one relaxation solve per period.
    """
    problem = model.problem
    K, nb = problem.n_periods, problem.grid.n_bins
    tol = problem.feas_tol
    node = _Node(
        depth=0,
        x=problem.x_ini.copy(),
        cost=0.0,
        d_c_sum=0.0,
        seq=(),
        bound=-math.inf,
    )
    for d in range(K - 1):
        outcome = _solve_node_relaxation(model, node)
        if outcome is None:
            return None
        level = _fractional_level(node.x, outcome[1], nb)
        order = sorted(range(nb + 1), key=lambda i: (abs(i - level), i))
        nxt = None
        for i_max in order:
            step = _period_outcome(problem, node.x, i_max, d)
            if step is None:
                continue
            x_plus, d_c, added = step
            x_next = problem.model.a_matrix @ x_plus
            if d + 1 < K and problem.b_max < 1.0 - 1e-12:
                if x_next.max() > problem.b_max + tol:
                    continue
            nxt = _Node(
                depth=d + 1,
                x=x_next,
                cost=node.cost + added,
                d_c_sum=node.d_c_sum + d_c,
                seq=node.seq + (i_max,),
                bound=-math.inf,
            )
            break
        if nxt is None:
            return None
        node = nxt
    best = None
    for i_max in range(nb + 1):
        step = _period_outcome(problem, node.x, i_max, K - 1)
        if step is None:
            continue
        _, d_c, added = step
        if node.d_c_sum + d_c < problem.energy_floor_mw - tol * max(
            1.0, problem.energy_floor_mw
        ):
            continue
        if best is None or node.cost + added < best[0]:
            best = (node.cost + added, node.seq + (i_max,))
    return best


def _fractional_level(x: np.ndarray, cleared_mass: float, n_bins: int) -> float:
    """Equivalent prefix depth clearing ``cleared_mass`` from distribution x."""
    avail = x[:n_bins] + x[n_bins: 2 * n_bins]
    if cleared_mass <= 1e-12:
        return 0.0
    cum = 0.0
    for p in range(n_bins):
        if cum + avail[p] >= cleared_mass - 1e-12:
            frac = (cleared_mass - cum) / avail[p] if avail[p] > 0 else 1.0
            return p + min(max(frac, 0.0), 1.0)
        cum += avail[p]
    return float(n_bins)


def _replay_sequence(problem: MpcProblem, seq: Sequence[int]) -> Optional[float]:
    """Exact cost of a threshold sequence; None if it is infeasible.

    Mirrors the branch-and-bound child logic (feeder and supply checks per
    period, occupancy cap on every intermediate state, aggregate energy
    floor at the end) so any sequence accepted here is tree-feasible.
    """
    K = problem.n_periods
    tol = problem.feas_tol
    cap_bins = problem.b_max < 1.0 - 1e-12
    state = problem.x_ini
    cost = 0.0
    d_c_sum = 0.0
    for k, i_max in enumerate(seq):
        step = _period_outcome(problem, state, int(i_max), k)
        if step is None:
            return None
        x_plus, d_c, added = step
        cost += added
        d_c_sum += d_c
        state = problem.model.a_matrix @ x_plus
        if k + 1 < K and cap_bins and state.max() > problem.b_max + tol:
            return None
    if d_c_sum < problem.energy_floor_mw - tol * max(1.0, problem.energy_floor_mw):
        return None
    return cost


def _local_search(
    problem: MpcProblem, seq: list, cost: float, max_sweeps: int = 25
) -> tuple[float, tuple]:
    """Descent over per-period thresholds from a feasible start.

    Alternates full single-period scans with windowed two-period moves;
    the pair moves matter because an aggregate energy floor lets clearing
    volume shift between periods at nearly constant total.
    """
    nb = problem.grid.n_bins
    K = problem.n_periods
    best_cost, best_seq = cost, tuple(seq)
    for _ in range(max_sweeps):
        improved = False
        for k in range(K):
            cur = seq[k]
            pick, pick_cost = cur, best_cost
            for cand in range(nb + 1):
                if cand == cur:
                    continue
                seq[k] = cand
                c = _replay_sequence(problem, seq)
                if c is not None and c < pick_cost - 1e-12:
                    pick, pick_cost = cand, c
            seq[k] = pick
            if pick != cur:
                best_cost, best_seq = pick_cost, tuple(seq)
                improved = True
        for k in range(K - 1):
            cur = (seq[k], seq[k + 1])
            pick, pick_cost = cur, best_cost
            for da in range(-3, 4):
                a = cur[0] + da
                if not 0 <= a <= nb:
                    continue
                for db in range(-3, 4):
                    b = cur[1] + db
                    if (da == 0 and db == 0) or not 0 <= b <= nb:
                        continue
                    seq[k], seq[k + 1] = a, b
                    c = _replay_sequence(problem, seq)
                    if c is not None and c < pick_cost - 1e-12:
                        pick, pick_cost = (a, b), c
            seq[k], seq[k + 1] = pick
            if pick != cur:
                best_cost, best_seq = pick_cost, tuple(seq)
                improved = True
        if not improved:
            break
    return best_cost, best_seq


def solve_mip(model: MipModel, budget: Optional[MipBudget] = None) -> MpcSolution:
    """Branch-and-bound over per-period cleared-prefix lengths.

    Nodes fix a chronological prefix of thresholds (whose trajectory is
    then fully determined — cleared bins empty their off-slack), and the
    remaining periods are bounded by the logic-relaxed QP.  The search is
    best-first on those bounds, seeded with an incumbent from coordinate
    descent over exact replays, so most of the tree prunes immediately
    and the queue's least bound certifies the optimality gap directly.
    Deterministic for a fixed instance and budget (time limits excepted).
    """
    if budget is None:
        budget = MipBudget()
    problem = model.problem
    _precheck(problem)
    t0 = time.perf_counter()
    K = problem.n_periods
    nb = problem.grid.n_bins
    tol = problem.feas_tol

    # Primal heuristic: coordinate descent from a spread of cheap starting
    # sequences (constants and shallow ramps), then a few deterministic
    # perturb-and-redescend rounds.  The landscape has many near-optimal
    # local minima, so breadth of starts matters more than any single
    # clever construction.  A near-optimal incumbent up front turns most
    # of the search into pure bound certification.
    incumbent: Optional[tuple[float, tuple]] = None
    inc_val = math.inf
    starts: list[list[int]] = [[j] * K for j in range(nb + 1)]
    for j in range(1, nb):
        ramp = np.clip(np.round(np.linspace(j - 2, j + 2, K)), 0, nb)
        up = [int(v) for v in ramp]
        starts.append(up)
        starts.append(up[::-1])
    feasible: list[tuple[float, tuple]] = []
    for s in starts:
        c = _replay_sequence(problem, s)
        if c is not None:
            feasible.append((c, tuple(s)))
    feasible.sort(key=lambda t: t[0])
    for c0, s0 in feasible[:8]:
        c1, s1 = _local_search(problem, list(s0), c0)
        if c1 < inc_val:
            inc_val, incumbent = c1, (c1, s1)
    if incumbent is None:
        dive = _greedy_dive(model)
        if dive is not None:
            inc_val, incumbent = dive[0], dive
    if incumbent is not None:
        for r in range(4 * K):
            s = list(incumbent[1])
            k1, k2 = r % K, (r * 7 + 3) % K
            s[k1] = min(nb, s[k1] + 2 + r % 3)
            s[k2] = max(0, s[k2] - 2)
            c = _replay_sequence(problem, s)
            if c is None:
                continue
            c1, s1 = _local_search(problem, s, c)
            if c1 < inc_val - 1e-12:
                inc_val, incumbent = c1, (c1, s1)

    # Periods k..K-1 cost at least the supply cost of the uncontrollable
    # demand alone (marginal costs are nonnegative): an O(1) pre-filter
    # for hopeless children.
    min_suffix = np.zeros(K + 1)
    for k in range(K - 1, -1, -1):
        _, c_floor, _ = dispatch_supply(problem, float(problem.d_other_mw[k]))
        min_suffix[k] = min_suffix[k + 1] + c_floor

    min_outside = math.inf  # lowest bound among gap-pruned subtrees
    nodes = 0
    counter = 0
    heap: list[tuple[float, int, _Node]] = [
        (
            -math.inf,
            0,
            _Node(
                depth=0,
                x=problem.x_ini.copy(),
                cost=0.0,
                d_c_sum=0.0,
                seq=(),
                bound=-math.inf,
            ),
        )
    ]
    stopped_early = False
    while heap:
        gap_tol = max(budget.abs_gap, budget.rel_gap * abs(inc_val)) if incumbent else 0.0
        if incumbent and heap[0][0] >= inc_val - gap_tol:
            # best-first invariant: the queue's least bound certifies all
            # remaining subtrees at once
            min_outside = min(min_outside, heap[0][0])
            heap.clear()
            break
        if nodes >= budget.max_nodes or (
            budget.time_limit_s is not None
            and time.perf_counter() - t0 > budget.time_limit_s
        ):
            stopped_early = True
            break
        node = heapq.heappop(heap)[2]
        nodes += 1
        level = nb / 2.0
        if node.depth <= K - 2:
            outcome = _solve_node_relaxation(model, node)
            if outcome is None:
                continue  # provably infeasible subtree
            bound, cleared_next = outcome
            if incumbent and bound >= inc_val - gap_tol:
                min_outside = min(min_outside, bound)
                continue
            node.bound = max(node.bound, bound)
            level = _fractional_level(node.x, cleared_next, nb)

        order = sorted(range(nb + 1), key=lambda i: (abs(i - level), i))
        for i_max in order:
            step = _period_outcome(problem, node.x, i_max, node.depth)
            if step is None:
                continue
            x_plus, d_c, added = step
            x_next = problem.model.a_matrix @ x_plus
            child_depth = node.depth + 1
            if child_depth < K and problem.b_max < 1.0 - 1e-12:
                if x_next.max() > problem.b_max + tol:
                    continue
            child_cost = node.cost + added
            if child_depth == K:
                floor_ok = (
                    node.d_c_sum + d_c
                    >= problem.energy_floor_mw - tol * max(1.0, problem.energy_floor_mw)
                )
                if floor_ok and child_cost < inc_val - 1e-15:
                    inc_val = child_cost
                    incumbent = (child_cost, node.seq + (i_max,))
                    gap_tol = max(budget.abs_gap, budget.rel_gap * abs(inc_val))
                continue
            child_bound = max(node.bound, child_cost + min_suffix[child_depth])
            if incumbent and child_bound >= inc_val - gap_tol:
                min_outside = min(min_outside, child_bound)
                continue
            counter += 1
            heapq.heappush(
                heap,
                (
                    child_bound,
                    counter,
                    _Node(
                        depth=child_depth,
                        x=x_next,
                        cost=child_cost,
                        d_c_sum=node.d_c_sum + d_c,
                        seq=node.seq + (i_max,),
                        bound=child_bound,
                    ),
                ),
            )

    if incumbent is None:
        if stopped_early:
            raise MpcSolverError(
                "search budget exhausted before any feasible schedule was found"
            )
        raise MpcInfeasibleError(
            "coupled constraints", "no threshold sequence satisfies all constraints"
        )
    open_bounds = [entry[0] for entry in heap]
    glb = min([min_outside, inc_val] + open_bounds)
    status = "budget_exhausted" if stopped_early else "optimal"
    gap = max(0.0, (inc_val - glb) / max(1e-12, abs(inc_val)))

    solution = _solution_from_sequence(problem, incumbent[1], inc_val)
    solution.status = status
    solution.gap = gap
    solution.nodes_explored = nodes
    solution.wall_time_s = time.perf_counter() - t0
    return solution


def _solution_from_sequence(
    problem: MpcProblem, seq: Sequence[int], objective: float
) -> MpcSolution:
    """Reconstruct full trajectories from a threshold sequence."""
    grid = problem.grid
    K = problem.n_periods
    nb, n3, n2 = grid.n_bins, 3 * grid.n_bins, 2 * grid.n_bins
    ns = len(problem.sources)
    x = np.empty((K, n3))
    x_on = np.empty((K, n2))
    x_off = np.empty((K, n3))
    p_mw = np.empty((K, ns))
    d_c = np.empty(K)
    lam = np.empty(K)
    state = problem.x_ini.copy()
    for k, i_max in enumerate(seq):
        x[k] = state
        mask = np.zeros(nb)
        mask[:i_max] = 1.0
        both = np.tile(mask, 2)
        x_on[k] = state[:n2] * both
        x_off[k] = np.concatenate([state[:n2] * (1.0 - both), state[n2:]])
        x_plus = split_and_reset(state, int(i_max), grid)
        d_c[k] = problem.scale_mw * float(x_plus[:nb].sum())
        p_mw[k], _, lam[k] = dispatch_supply(
            problem, d_c[k] + float(problem.d_other_mw[k])
        )
        state = problem.model.a_matrix @ x_plus
    i_arr = np.array(seq, dtype=int)
    pi = np.array([grid.threshold_price(int(i)) for i in i_arr])
    return MpcSolution(
        method="mip",
        i_max=i_arr,
        pi_clr=pi,
        x=x,
        x_on=x_on,
        x_off=x_off,
        p_mw=p_mw,
        d_c_mw=d_c,
        d_other_mw=problem.d_other_mw.copy(),
        lambda_elec=lam,
        objective=objective,
        status="optimal",
        gap=0.0,
        nodes_explored=0,
        wall_time_s=0.0,
        zeta=problem.zeta_effective,
    )


# --------------------------------------------------------------------------
# closed-loop evaluation
# --------------------------------------------------------------------------


@dataclass
class CaseMetrics:
    """Closed-loop validation summary for one planning case."""

    method: str
    mean_system_mw: float
    mean_controllable_mw: float
    peak_system_mw: float
    rmse_pct: float
    lambda_mean: float
    lambda_min: float
    lambda_max: float
    max_bin_fraction: float
    terminal_spread: int
    objective: float
    gap: float
    status: str
    nodes_explored: int
    wall_time_s: float
    solution: Optional[MpcSolution] = None
    trace: Optional[Trace] = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "mean_system_mw": self.mean_system_mw,
            "mean_controllable_mw": self.mean_controllable_mw,
            "peak_system_mw": self.peak_system_mw,
            "rmse_pct": self.rmse_pct,
            "lambda_mean": self.lambda_mean,
            "lambda_min": self.lambda_min,
            "lambda_max": self.lambda_max,
            "max_bin_fraction": self.max_bin_fraction,
            "terminal_spread": self.terminal_spread,
            "objective": self.objective,
            "gap": self.gap,
            "status": self.status,
            "nodes_explored": self.nodes_explored,
            "wall_time_s": self.wall_time_s,
        }


def evaluate_closed_loop(
    problem: MpcProblem,
    scenario: Scenario,
    *,
    method: str = "mip",
    budget: Optional[MipBudget] = None,
    normalizer_mw: float = 8.0,
) -> CaseMetrics:
    """Plan, broadcast the price schedule to the fleet, and score the result.

    The scenario must describe the same fleet the planner's transition
    model was identified on (device count, per-device draw, clearing
    cadence).  RMSE compares realized system demand against the plan's
    prediction, as a percentage of ``normalizer_mw``.
    """
    if method not in ("mip", "qp"):
        raise ValueError("method must be 'mip' or 'qp'")
    if method == "mip":
        solution = solve_mip(build_mip(problem), budget)
    else:
        solution = solve_qp(build_qp(problem))

    K = problem.n_periods
    d_other = problem.d_other_mw
    predicted = solution.d_c_mw + d_other

    if problem.n_devices == 0:
        actual_c = np.zeros(K)
        max_bin_fraction = 0.0
        terminal_spread = 0
        trace = None
    else:
        if scenario.n_devices != problem.n_devices:
            raise ValueError(
                "scenario population size differs from the planning instance"
            )
        if abs(scenario.tau_min - problem.model.tau_min) > 1e-9:
            raise ValueError("scenario clearing cadence differs from the model's")
        pop = build_population(scenario)
        if abs(pop.installed_kw / 1000.0 - problem.scale_mw) > 1e-6 * max(
            1.0, problem.scale_mw
        ):
            raise ValueError(
                "scenario installed power is inconsistent with the planning scale"
            )
        feeder_kw = (
            problem.d_feeder_mw * 1000.0
            if math.isfinite(problem.d_feeder_mw)
            else None
        )
        scenario = replace(
            scenario,
            horizon=K,
            tau_min=problem.model.tau_min,
            d_feeder_kw=feeder_kw,
            d_feeder_pu=None,
            d_other_kw=d_other * 1000.0,
            record_bins=problem.grid,
        )
        trace = run_priced(scenario, solution.pi_clr)
        actual_c = trace.demand_kw / 1000.0
        counts = trace.bins_pre[:K]
        max_bin_fraction = float(counts.max()) / problem.n_devices
        terminal_spread = int((counts[K - 1] >= 1).sum())

    actual = actual_c + d_other
    rmse_pct = 100.0 * float(np.sqrt(np.mean((actual - predicted) ** 2))) / normalizer_mw
    return CaseMetrics(
        method=method,
        mean_system_mw=float(actual.mean()),
        mean_controllable_mw=float(actual_c.mean()),
        peak_system_mw=float(actual.max()),
        rmse_pct=rmse_pct,
        lambda_mean=float(solution.lambda_elec.mean()),
        lambda_min=float(solution.lambda_elec.min()),
        lambda_max=float(solution.lambda_elec.max()),
        max_bin_fraction=max_bin_fraction,
        terminal_spread=terminal_spread,
        objective=solution.objective,
        gap=solution.gap,
        status=solution.status,
        nodes_explored=solution.nodes_explored,
        wall_time_s=solution.wall_time_s,
        solution=solution,
        trace=trace,
    )
