"""Aggregate abstractions of a device population.

Two levels of abstraction live here.  The first is a scalar first-order
model of the population's average charging fraction under a proportional
bid response, with its closed-form equilibrium and stability
classification.  The second is the bin transition system: device states
are histogrammed over price bins split into three operating lanes
(on, off-but-controllable, locked), market clearing becomes a linear
"split and reset" map on the histogram, and the natural inter-interval
dynamics become a column-stochastic matrix identified from simulation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "SimpleAggModel",
    "BinGrid",
    "TransitionModel",
    "simple_equilibrium",
    "simple_classify",
    "simple_trajectory",
    "assign_bin",
    "price_bins_of",
    "lane_of",
    "identify_from_pairs",
    "identify_from_bin_series",
    "propagate",
    "split_and_reset",
    "reset_matrix",
    "spectrum",
    "cleared_fraction",
    "on_fraction",
    "predict_demand_fractions",
    "distribution_from_bins",
    "uniform_distribution",
    "save_model",
    "load_model",
]


# ---------------------------------------------------------------------------
# scalar first-order population model


@dataclass(frozen=True)
class SimpleAggModel:
    """Average charging-fraction dynamics u' = alpha*u + K_c.

    ``k_p`` is the proportional constant linking the population bid price
    to the charging fraction.
    """

    a: float
    gamma: float
    beta: float
    pi_max: float
    k_p: float

    def __post_init__(self) -> None:
        if not 0.0 < self.a <= 1.0:
            raise ValueError("dissipation factor a must be in (0, 1]")
        if min(self.gamma, self.beta, self.k_p) < 0.0:
            raise ValueError("gamma, beta and k_p must be nonnegative")

    @property
    def alpha(self) -> float:
        return self.a - self.gamma * self.beta * self.k_p

    @property
    def k_c(self) -> float:
        return self.pi_max * self.k_p * (1.0 - self.a)


def simple_equilibrium(model: SimpleAggModel) -> tuple[float, float, float]:
    """Equilibrium (u*, e*, pi*) of the scalar recursion."""
    alpha = model.alpha
    if alpha == 1.0:
        raise ValueError("alpha = 1: the recursion has no unique equilibrium")
    u_star = model.k_c / (1.0 - alpha)
    e_star = model.gamma * model.pi_max * model.k_p / (1.0 - alpha)
    pi_star = model.pi_max * (1.0 - model.a) / (1.0 - alpha)
    return u_star, e_star, pi_star


def simple_classify(model: SimpleAggModel) -> str:
    """Qualitative behavior of the recursion by the sign/size of alpha."""
    alpha = model.alpha
    if abs(alpha) == 1.0:
        return "marginal"
    if alpha < -1.0:
        return "oscillatory-divergent"
    if alpha < 0.0:
        return "oscillatory-stable"
    return "monotone-stable"


def simple_trajectory(model: SimpleAggModel, u0: float, k: int) -> np.ndarray:
    """Closed-form series u_0 .. u_k of the scalar recursion."""
    if k < 0:
        raise ValueError("horizon must be nonnegative")
    alpha, k_c = model.alpha, model.k_c
    j = np.arange(k + 1)
    powers = alpha**j
    if alpha == 1.0:
        geom = j.astype(float)
    else:
        geom = (1.0 - powers) / (1.0 - alpha)
    return powers * u0 + k_c * geom


# ---------------------------------------------------------------------------
# bin geometry

I1, I2, I3 = 0, 1, 2  # lane codes: on, off-controllable, locked


@dataclass(frozen=True)
class BinGrid:
    """Uniform price-bin geometry shared by the three operating lanes.

    Boundaries run from ``pi_max`` (top) down to ``pi_min``; price-bin j
    (1-based) spans the half-open interval (boundary_j, boundary_{j-1}],
    with a bid of exactly ``pi_max`` closed into bin 1 and ``pi_min``
    clipped into bin ``n_bins``.
    """

    n_bins: int
    pi_max: float = 50.0
    pi_min: float = 10.0

    def __post_init__(self) -> None:
        if self.n_bins < 1:
            raise ValueError("need at least one bin")
        if self.pi_max <= self.pi_min:
            raise ValueError("price range is empty")

    @property
    def width(self) -> float:
        return (self.pi_max - self.pi_min) / self.n_bins

    @property
    def boundaries(self) -> np.ndarray:
        """Descending boundary prices, length n_bins + 1."""
        return np.linspace(self.pi_max, self.pi_min, self.n_bins + 1)

    @property
    def soc_levels(self) -> np.ndarray:
        """Increasing SOC boundary levels for the homogeneous bid curve."""
        return (self.pi_max - self.boundaries) / (self.pi_max - self.pi_min)

    @property
    def n_states(self) -> int:
        return 3 * self.n_bins

    def price_bins(self, bids) -> np.ndarray:
        """1-based price-bin index for each bid; vectorized."""
        bids = np.asarray(bids, dtype=float)
        if np.any(bids < self.pi_min - 1e-9) or np.any(bids > self.pi_max + 1e-9):
            raise ValueError("bid outside the grid price range")
        asc = self.boundaries[::-1]
        idx = np.searchsorted(asc, bids, side="left")
        pbin = self.n_bins - idx + 1
        return np.clip(pbin, 1, self.n_bins).astype(int)

    def threshold_price(self, i_max: int) -> float:
        """Boundary price of the clearing threshold index."""
        if not 0 <= i_max <= self.n_bins:
            raise IndexError(f"threshold {i_max} out of 0..{self.n_bins}")
        return float(self.boundaries[i_max])

    def i_max_for_price(self, price: float) -> int:
        """Largest threshold whose boundary price is at or above ``price``.

        Bins 1..i_max are exactly the bins whose whole bid range clears at
        the given price.
        """
        if price > self.pi_max + 1e-9:
            return 0
        asc = self.boundaries[::-1]
        pos = np.searchsorted(asc, price - 1e-9, side="left")
        return int(np.clip(self.n_bins - pos, 0, self.n_bins))


def lane_of(bins_1based, n_bins: int) -> np.ndarray:
    """Lane code (0 on, 1 off-controllable, 2 locked) of global bin indices."""
    return (np.asarray(bins_1based) - 1) // n_bins


def price_bins_of(bins_1based, n_bins: int) -> np.ndarray:
    """1-based price bin of global bin indices."""
    return (np.asarray(bins_1based) - 1) % n_bins + 1


def global_bins(price_bins_1based, lanes, n_bins: int) -> np.ndarray:
    """Compose global 1-based bin indices from price bins and lane codes."""
    return np.asarray(lanes) * n_bins + np.asarray(price_bins_1based)


def assign_bin(state, grid: BinGrid) -> int:
    """Global 1-based bin of one device state (see :class:`DerState`)."""
    pbin = int(grid.price_bins(state.bid))
    if state.m == 0:
        lane = I3
    elif state.v == 1:
        lane = I1
    else:
        lane = I2
    return int(global_bins(pbin, lane, grid.n_bins))


def assign_bins_arrays(bids, m, v, grid: BinGrid) -> np.ndarray:
    """Vectorized :func:`assign_bin` over aligned device arrays."""
    pbin = grid.price_bins(bids)
    m = np.asarray(m)
    v = np.asarray(v)
    lanes = np.where(m == 0, I3, np.where(v == 1, I1, I2))
    return global_bins(pbin, lanes, grid.n_bins)


# ---------------------------------------------------------------------------
# transition model


@dataclass
class TransitionModel:
    """Column-stochastic bin dynamics with the clearing reset maps."""

    grid: BinGrid
    a_matrix: np.ndarray
    tau_min: float
    conditioning: str  # "price" or "natural"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = self.grid.n_states
        self.a_matrix = np.asarray(self.a_matrix, dtype=float)
        if self.a_matrix.shape != (n, n):
            raise ValueError(f"transition matrix must be {n}x{n}")
        if self.conditioning not in ("price", "natural"):
            raise ValueError("conditioning must be 'price' or 'natural'")

    @property
    def b_on(self) -> np.ndarray:
        """Reset map collecting cleared fractions into the on lane."""
        n = self.grid.n_bins
        b = np.zeros((3 * n, 2 * n))
        for i in range(n):
            b[i, i] = 1.0
            b[i, n + i] = 1.0
        return b

    @property
    def b_off(self) -> np.ndarray:
        """Reset map collecting uncleared fractions into the off lanes."""
        n = self.grid.n_bins
        b = np.zeros((3 * n, 3 * n))
        for i in range(n):
            b[n + i, i] = 1.0
            b[n + i, n + i] = 1.0
            b[2 * n + i, 2 * n + i] = 1.0
        return b


def _normalize_columns_exact(counts: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Column-normalize transition counts; empty columns become self-loops.

    The largest entry of each column is recomputed as one minus the rest so
    the column sums to 1 without floating dust accumulating.
    """
    n = counts.shape[0]
    a = np.zeros_like(counts, dtype=float)
    empty: list[int] = []
    for j in range(n):
        total = counts[:, j].sum()
        if total == 0:
            a[j, j] = 1.0
            empty.append(j + 1)
            continue
        col = counts[:, j] / total
        top = int(np.argmax(col))
        others = col.sum() - col[top]
        col[top] = 1.0 - others
        a[:, j] = col
    return a, empty


def identify_from_pairs(
    sent_bins,
    landed_bins,
    grid: BinGrid,
    tau_min: float,
    conditioning: str,
    metadata: dict | None = None,
) -> TransitionModel:
    """Empirical transition matrix from (sending bin, landing bin) samples.

    Bins are global 1-based indices.  Sending bins that never occur keep
    their mass in place (self-transition) and are listed in the metadata.
    """
    sent = np.asarray(sent_bins, dtype=int).ravel()
    landed = np.asarray(landed_bins, dtype=int).ravel()
    if sent.shape != landed.shape:
        raise ValueError("sending and landing bins must align")
    n = grid.n_states
    if sent.size and (sent.min() < 1 or sent.max() > n):
        raise ValueError("sending bin out of range")
    if landed.size and (landed.min() < 1 or landed.max() > n):
        raise ValueError("landing bin out of range")
    counts = np.zeros((n, n))
    np.add.at(counts, (landed - 1, sent - 1), 1.0)
    a, empty = _normalize_columns_exact(counts)
    meta = dict(metadata or {})
    meta.update(n_samples=int(sent.size), empty_bins=empty)
    return TransitionModel(
        grid=grid, a_matrix=a, tau_min=tau_min, conditioning=conditioning,
        metadata=meta,
    )


def identify_from_bin_series(
    bins_by_interval,
    grid: BinGrid,
    tau_min: float,
    metadata: dict | None = None,
) -> TransitionModel:
    """Fixed-price transition matrix from consecutive bin snapshots.

    ``bins_by_interval`` has one row per market instant (global 1-based
    bins, one column per device); consecutive rows form the transition
    pairs.  The result carries the clearing of the price regime the traces
    were generated under, so propagation applies it directly.
    """
    b = np.asarray(bins_by_interval, dtype=int)
    if b.ndim != 2 or b.shape[0] < 2:
        raise ValueError("need at least two interval snapshots")
    return identify_from_pairs(
        b[:-1].ravel(), b[1:].ravel(), grid, tau_min, "price", metadata
    )


# ---------------------------------------------------------------------------
# propagation, reset, demand readout


def _check_distribution(x, n_states: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (n_states,):
        raise ValueError(f"distribution must have {n_states} entries")
    if np.any(x < -1e-12):
        raise ValueError("distribution entries must be nonnegative")
    return x


def propagate(x, model: TransitionModel, k: int = 1) -> np.ndarray:
    """Apply the natural/conditioned dynamics ``k`` times."""
    x = _check_distribution(x, model.grid.n_states)
    for _ in range(k):
        x = model.a_matrix @ x
    return x


def split_and_reset(x, i_max: int, grid: BinGrid) -> np.ndarray:
    """Clearing as a linear map on the histogram.

    Controllable mass in price bins 1..i_max is cleared into the on lane;
    the remaining controllable mass parks in the off lane; locked mass
    stays put.  Total mass is preserved.
    """
    x = _check_distribution(x, grid.n_states)
    n = grid.n_bins
    if not 0 <= i_max <= n:
        raise IndexError(f"threshold {i_max} out of 0..{n}")
    out = np.zeros_like(x)
    on_slice = np.zeros(n)
    on_slice[:i_max] = 1.0
    cleared = (x[:n] + x[n : 2 * n]) * on_slice
    parked = (x[:n] + x[n : 2 * n]) * (1.0 - on_slice)
    out[:n] = cleared
    out[n : 2 * n] = parked
    out[2 * n :] = x[2 * n :]
    return out


def reset_matrix(i_max: int, grid: BinGrid) -> np.ndarray:
    """Matrix form of :func:`split_and_reset` at a fixed threshold."""
    n = grid.n_states
    r = np.zeros((n, n))
    eye = np.eye(grid.n_states)
    for j in range(n):
        r[:, j] = split_and_reset(eye[:, j], i_max, grid)
    return r


def on_fraction(x, grid: BinGrid) -> float:
    """Mass currently in the on lane."""
    x = _check_distribution(x, grid.n_states)
    return float(x[: grid.n_bins].sum())


def cleared_fraction(x, i_max: int, grid: BinGrid) -> float:
    """Controllable mass that clears at the given threshold."""
    return on_fraction(split_and_reset(x, i_max, grid), grid)


def predict_demand_fractions(x0, prices, model: TransitionModel) -> np.ndarray:
    """Cleared-fraction series predicted by the bin model.

    ``x0`` is the pre-clearing distribution at the first instant; each
    interval the broadcast price is mapped to the largest fully-clearing
    threshold, the cleared fraction is read out, and the distribution is
    advanced.  Price-conditioned models embed the clearing in their
    dynamics; natural models interleave the reset explicitly.
    """
    grid = model.grid
    x = _check_distribution(x0, grid.n_states)
    out = np.empty(len(prices))
    for k, price in enumerate(prices):
        i_max = grid.i_max_for_price(price)
        x_plus = split_and_reset(x, i_max, grid)
        out[k] = on_fraction(x_plus, grid)
        if model.conditioning == "price":
            x = model.a_matrix @ x
        else:
            x = model.a_matrix @ x_plus
    return out


def distribution_from_bins(bins_1based, grid: BinGrid) -> np.ndarray:
    """Normalized histogram of global 1-based bin indices."""
    bins = np.asarray(bins_1based, dtype=int).ravel()
    n = grid.n_states
    if bins.size == 0:
        raise ValueError("no devices to histogram")
    if bins.min() < 1 or bins.max() > n:
        raise ValueError("bin index out of range")
    counts = np.bincount(bins - 1, minlength=n).astype(float)
    return counts / bins.size


def uniform_distribution(grid: BinGrid) -> np.ndarray:
    """Equal mass in every bin of every lane."""
    n = grid.n_states
    return np.full(n, 1.0 / n)


# ---------------------------------------------------------------------------
# spectrum


def spectrum(model: TransitionModel, i_max: int | None = None) -> np.ndarray:
    """Eigenvalues of the closed-loop bin dynamics, largest modulus first.

    Price-conditioned models are analyzed as-is; natural models need the
    clearing threshold that closes the loop.
    """
    if model.conditioning == "price":
        closed = model.a_matrix
    else:
        if i_max is None:
            raise ValueError("natural-conditioned model needs a threshold")
        closed = model.a_matrix @ reset_matrix(i_max, model.grid)
    try:
        eig = np.linalg.eigvals(closed)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - rare
        raise RuntimeError(f"eigensolver did not converge: {exc}") from exc
    return eig[np.argsort(-np.abs(eig))]


# ---------------------------------------------------------------------------
# serialization


def save_model(model: TransitionModel, path) -> None:
    """Write a transition model to a structured text file."""
    payload = {
        "n_bins": model.grid.n_bins,
        "pi_max": model.grid.pi_max,
        "pi_min": model.grid.pi_min,
        "tau_min": model.tau_min,
        "conditioning": model.conditioning,
        "a_matrix": model.a_matrix.tolist(),
        "metadata": model.metadata,
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_model(path) -> TransitionModel:
    payload = json.loads(Path(path).read_text())
    grid = BinGrid(
        n_bins=payload["n_bins"], pi_max=payload["pi_max"], pi_min=payload["pi_min"]
    )
    return TransitionModel(
        grid=grid,
        a_matrix=np.array(payload["a_matrix"], dtype=float),
        tau_min=payload["tau_min"],
        conditioning=payload["conditioning"],
        metadata=payload.get("metadata", {}),
    )
