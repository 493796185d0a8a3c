import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transactive.aggmodel import (
    BinGrid,
    SimpleAggModel,
    TransitionModel,
    assign_bin,
    cleared_fraction,
    distribution_from_bins,
    identify_from_bin_series,
    identify_from_pairs,
    load_model,
    on_fraction,
    predict_demand_fractions,
    propagate,
    reset_matrix,
    save_model,
    simple_classify,
    simple_equilibrium,
    simple_trajectory,
    spectrum,
    split_and_reset,
    uniform_distribution,
)
from transactive.devices import DerState

CASE_I = SimpleAggModel(a=0.9, gamma=0.1, beta=50.0, pi_max=50.0, k_p=0.02)
CASE_II = SimpleAggModel(a=0.7, gamma=0.25, beta=150.0, pi_max=150.0, k_p=0.05)


# ---------------------------------------------------------------------------
# scalar model


def test_case_i_equilibrium_exact():
    assert CASE_I.alpha == pytest.approx(0.8, abs=1e-15)
    u, e, pi = simple_equilibrium(CASE_I)
    assert u == pytest.approx(0.5, abs=1e-12)
    assert e == pytest.approx(0.5, abs=1e-12)
    assert pi == pytest.approx(25.0, abs=1e-12)


def test_case_ii_alpha():
    assert CASE_II.alpha == pytest.approx(-1.175, abs=1e-12)


def test_no_feedback_full_charging():
    m = SimpleAggModel(a=0.9, gamma=0.1, beta=0.0, pi_max=50.0, k_p=1.0 / 50.0)
    assert m.alpha == pytest.approx(m.a)
    u, _, _ = simple_equilibrium(m)
    assert u == pytest.approx(1.0)


def test_classification_cases():
    assert simple_classify(CASE_I) == "monotone-stable"
    assert simple_classify(CASE_II) == "oscillatory-divergent"
    osc = SimpleAggModel(a=0.5, gamma=0.1, beta=100.0, pi_max=50.0, k_p=0.1)
    assert osc.alpha == pytest.approx(-0.5)
    assert simple_classify(osc) == "oscillatory-stable"
    dead = SimpleAggModel(a=0.5, gamma=0.1, beta=50.0, pi_max=50.0, k_p=0.1)
    assert dead.alpha == pytest.approx(0.0)
    assert simple_classify(dead) == "monotone-stable"
    marg = SimpleAggModel(a=1.0, gamma=0.1, beta=100.0, pi_max=50.0, k_p=0.2)
    assert marg.alpha == pytest.approx(-1.0)
    assert simple_classify(marg) == "marginal"


def test_oscillatory_stable_alternates_and_decays():
    osc = SimpleAggModel(a=0.5, gamma=0.1, beta=100.0, pi_max=50.0, k_p=0.1)
    u_star, _, _ = simple_equilibrium(osc)
    u = simple_trajectory(osc, 0.9, 12)
    dev = u - u_star
    assert np.all(dev[:-1] * dev[1:] < 0)  # sign alternates
    assert np.all(np.abs(dev[1:]) < np.abs(dev[:-1]))  # amplitude decays


def test_equilibrium_undefined_at_alpha_one():
    m = SimpleAggModel(a=1.0, gamma=0.0, beta=0.0, pi_max=50.0, k_p=0.02)
    assert m.alpha == 1.0
    with pytest.raises(ValueError):
        simple_equilibrium(m)


def test_trajectory_fixed_point_and_one_step():
    u_star, _, _ = simple_equilibrium(CASE_I)
    series = simple_trajectory(CASE_I, u_star, 20)
    assert np.allclose(series, u_star, atol=1e-12)
    one = simple_trajectory(CASE_I, 0.3, 1)
    assert one[1] == pytest.approx(CASE_I.alpha * 0.3 + CASE_I.k_c, abs=1e-15)


def test_case_i_converges_to_half():
    series = simple_trajectory(CASE_I, 0.0, 200)
    assert series[-1] == pytest.approx(0.5, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    a=st.floats(0.05, 1.0),
    gamma=st.floats(0.0, 0.5),
    beta=st.floats(0.0, 200.0),
    k_p=st.floats(0.0, 0.1),
    u0=st.floats(-1.0, 2.0),
)
def test_closed_form_matches_iteration(a, gamma, beta, k_p, u0):
    m = SimpleAggModel(a=a, gamma=gamma, beta=beta, pi_max=50.0, k_p=k_p)
    series = simple_trajectory(m, u0, 30)
    u = u0
    for k in range(31):
        assert series[k] == pytest.approx(u, abs=1e-9 * max(1.0, abs(u)))
        u = m.alpha * u + m.k_c


# ---------------------------------------------------------------------------
# bin geometry

G20 = BinGrid(n_bins=20, pi_max=50.0, pi_min=10.0)


def test_grid_boundaries_and_levels():
    assert G20.width == pytest.approx(2.0)
    assert G20.boundaries[0] == 50.0
    assert G20.boundaries[-1] == 10.0
    assert G20.soc_levels[0] == 0.0
    assert G20.soc_levels[-1] == pytest.approx(1.0)
    assert np.all(np.diff(G20.soc_levels) > 0)


def test_price_bin_assignment():
    assert G20.price_bins(50.0) == 1
    assert G20.price_bins(10.0) == 20
    assert G20.price_bins(36.5) == 7  # (36, 38]
    assert G20.price_bins(36.0) == 8  # boundary closes the lower bin
    with pytest.raises(ValueError):
        G20.price_bins(9.0)


def test_assign_bin_lane_offsets():
    top = DerState(e=0.0, m=1, v=1, bid=50.0)
    assert assign_bin(top, G20) == 1
    mid_off = DerState(e=0.3375, m=1, v=0, bid=36.5)
    assert assign_bin(mid_off, G20) == 27
    locked_bottom = DerState(e=1.0, m=0, v=0, bid=10.0)
    assert assign_bin(locked_bottom, G20) == 60


def test_threshold_price_and_inverse():
    assert G20.threshold_price(0) == 50.0
    assert G20.threshold_price(7) == pytest.approx(36.0)
    assert G20.threshold_price(20) == 10.0
    assert G20.i_max_for_price(30.0) == 10
    assert G20.i_max_for_price(10.0) == 20
    assert G20.i_max_for_price(50.0) == 0
    assert G20.i_max_for_price(60.0) == 0
    # price inside bin 10's range only partially clears it, so it is
    # rounded out of the threshold
    assert G20.i_max_for_price(31.0) == 9
    # round trip: every boundary price maps back to its own index
    for j in range(21):
        assert G20.i_max_for_price(G20.threshold_price(j)) == j


# ---------------------------------------------------------------------------
# split / reset


def test_reset_clear_nothing_moves_on_mass_off():
    x = np.zeros(60)
    x[2] = 0.4  # on lane, price-bin 3
    x[45] = 0.6  # locked lane
    out = split_and_reset(x, 0, G20)
    assert out[2] == 0.0
    assert out[22] == pytest.approx(0.4)  # parked in off lane, same price bin
    assert out[45] == pytest.approx(0.6)
    assert out.sum() == pytest.approx(1.0, abs=1e-15)


def test_reset_clear_everything_controllable():
    rng = np.random.default_rng(0)
    x = rng.dirichlet(np.ones(60))
    out = split_and_reset(x, 20, G20)
    assert np.allclose(out[20:40], 0.0)
    assert np.allclose(out[:20], x[:20] + x[20:40])
    assert np.allclose(out[40:], x[40:])


def test_reset_merges_cleared_bins():
    # mass confined to price-bins 6 and 7 of both controllable lanes;
    # threshold 7 clears all four populations into the on lane
    x = np.zeros(60)
    x[5], x[6] = 0.2, 0.3  # on lane bins 6, 7
    x[25], x[26] = 0.4, 0.1  # off lane bins 6, 7
    out = split_and_reset(x, 7, G20)
    assert out[5] == pytest.approx(0.6)
    assert out[6] == pytest.approx(0.4)
    assert out.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.allclose(out[20:], 0.0)


@settings(max_examples=200, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    i_max=st.integers(0, 20),
)
def test_reset_conserves_mass_and_is_idempotent(seed, i_max):
    rng = np.random.default_rng(seed)
    x = rng.dirichlet(np.ones(60))
    out = split_and_reset(x, i_max, G20)
    assert abs(out.sum() - x.sum()) < 1e-12
    again = split_and_reset(out, i_max, G20)
    assert np.allclose(again, out, atol=1e-15)


def test_reset_matrix_matches_function_and_is_unit_columned():
    r = reset_matrix(7, G20)
    rng = np.random.default_rng(1)
    x = rng.dirichlet(np.ones(60))
    assert np.allclose(r @ x, split_and_reset(x, 7, G20), atol=1e-15)
    assert np.all(r.sum(axis=0) == 1.0)
    assert np.all((r == 0.0) | (r == 1.0))


# ---------------------------------------------------------------------------
# identification and propagation


def _random_identified_model(seed, n_bins=10, n_samples=20000):
    rng = np.random.default_rng(seed)
    grid = BinGrid(n_bins=n_bins)
    n = grid.n_states
    sent = rng.integers(1, n + 1, n_samples)
    landed = np.clip(sent + rng.integers(-3, 4, n_samples), 1, n)
    return identify_from_pairs(sent, landed, grid, 10.0, "natural")


def test_identified_columns_sum_to_one_exactly():
    model = _random_identified_model(2)
    sums = model.a_matrix.sum(axis=0)
    assert np.max(np.abs(sums - 1.0)) < 1e-12
    assert np.all(model.a_matrix >= 0.0)


def test_empty_sending_bins_become_self_loops():
    grid = BinGrid(n_bins=4)
    sent = np.array([1, 1, 2])
    landed = np.array([2, 2, 3])
    model = identify_from_pairs(sent, landed, grid, 10.0, "natural")
    assert model.metadata["empty_bins"] == [3, 4, 5, 6, 7, 8, 9, 10, 11, 12]
    for j in model.metadata["empty_bins"]:
        assert model.a_matrix[j - 1, j - 1] == 1.0


def test_frozen_locked_devices_identify_as_identity():
    # devices parked in the locked lane with no dissipation never move
    grid = BinGrid(n_bins=6)
    locked = np.arange(2 * 6 + 1, 3 * 6 + 1)
    sent = np.repeat(locked, 50)
    model = identify_from_pairs(sent, sent, grid, 10.0, "natural")
    block = model.a_matrix[12:, 12:]
    assert np.allclose(block, np.eye(6))


def test_propagation_preserves_mass_long_run():
    model = _random_identified_model(3)
    x = uniform_distribution(model.grid)
    x = propagate(x, model, 1000)
    assert abs(x.sum() - 1.0) < 1e-12
    assert np.all(x >= -1e-15)


def test_propagate_zero_steps_is_identity():
    model = _random_identified_model(4)
    x = uniform_distribution(model.grid)
    assert np.array_equal(propagate(x, model, 0), x)


def _shift_natural_matrix(grid):
    """Deterministic bin-shift dynamics: charging walks down the bid axis,
    draining walks up, full devices lock, cool locked devices release."""
    n = grid.n_bins
    a = np.zeros((3 * n, 3 * n))
    for i in range(n):  # on lane: SOC rises, bid falls, price bin grows
        if i < n - 1:
            a[i + 1, i] = 1.0
        else:
            a[3 * n - 1, i] = 1.0  # full: lock in place
    for i in range(n):  # off lane: SOC falls, bid rises, price bin shrinks
        a[n + max(i - 1, 0), n + i] = 1.0
    for i in range(n):  # locked lane: drift up, release once below bin 3
        j = max(i - 1, 0)
        if j < 2:
            a[n + j, 2 * n + i] = 1.0
        else:
            a[2 * n + j, 2 * n + i] = 1.0
    return a


def test_conditioned_equals_reset_plus_natural():
    # a price-conditioned matrix identified from deterministic shift
    # dynamics equals the natural matrix composed with the reset, and the
    # two propagation formulations agree step for step
    grid = BinGrid(n_bins=8)
    n = grid.n_states
    a_nat = _shift_natural_matrix(grid)
    i_max = 5
    r = reset_matrix(i_max, grid)
    # generate one transition per sending bin under reset-then-advance
    sent = np.arange(1, n + 1)
    landed = np.array(
        [int(np.argmax(a_nat @ (r @ np.eye(n)[:, j - 1]))) + 1 for j in sent]
    )
    cond = identify_from_pairs(sent, landed, grid, 10.0, "price")
    assert np.allclose(cond.a_matrix, a_nat @ r, atol=1e-15)
    nat = TransitionModel(grid=grid, a_matrix=a_nat, tau_min=10.0,
                          conditioning="natural")
    rng = np.random.default_rng(9)
    x_c = x_n = rng.dirichlet(np.ones(n))
    for _ in range(12):
        x_c = cond.a_matrix @ x_c
        x_n = nat.a_matrix @ split_and_reset(x_n, i_max, grid)
        assert np.allclose(x_c, x_n, atol=1e-12)


def test_identify_from_bin_series_pairs_rows():
    grid = BinGrid(n_bins=2)
    bins = np.array([[1, 2], [2, 3], [2, 4]])  # two devices, three instants
    model = identify_from_bin_series(bins, grid, 10.0)
    # device 1: 1->2, 2->2; device 2: 2->3, 3->4
    assert model.a_matrix[1, 0] == 1.0
    assert model.a_matrix[1, 1] == pytest.approx(0.5)
    assert model.a_matrix[2, 1] == pytest.approx(0.5)
    assert model.a_matrix[3, 2] == 1.0
    assert model.conditioning == "price"


# ---------------------------------------------------------------------------
# demand readout and prediction


def test_fraction_readouts():
    x = np.zeros(60)
    x[0], x[25], x[59] = 0.5, 0.3, 0.2
    assert on_fraction(x, G20) == pytest.approx(0.5)
    # threshold 7 clears on-lane bin 1 and off-lane bin 6
    assert cleared_fraction(x, 7, G20) == pytest.approx(0.8)
    assert cleared_fraction(x, 0, G20) == 0.0


def test_predict_demand_natural_vs_manual():
    model = _random_identified_model(7, n_bins=5)
    nat = TransitionModel(grid=model.grid, a_matrix=model.a_matrix,
                          tau_min=10.0, conditioning="natural")
    grid = nat.grid
    prices = [30.0, 30.0, 20.0]
    x0 = uniform_distribution(grid)
    pred = predict_demand_fractions(x0, prices, nat)
    x = x0.copy()
    for k, p in enumerate(prices):
        i_max = grid.i_max_for_price(p)
        xp = split_and_reset(x, i_max, grid)
        assert pred[k] == pytest.approx(on_fraction(xp, grid))
        x = nat.a_matrix @ xp


def test_predict_demand_price_conditioned_propagates_raw():
    model = _random_identified_model(8, n_bins=5)
    grid = model.grid
    cond = TransitionModel(grid=grid, a_matrix=model.a_matrix, tau_min=10.0,
                           conditioning="price")
    x0 = uniform_distribution(grid)
    prices = [20.0, 20.0]
    pred = predict_demand_fractions(x0, prices, cond)
    i_max = grid.i_max_for_price(20.0)
    assert pred[0] == pytest.approx(
        on_fraction(split_and_reset(x0, i_max, grid), grid)
    )
    x1 = cond.a_matrix @ x0
    assert pred[1] == pytest.approx(
        on_fraction(split_and_reset(x1, i_max, grid), grid)
    )


def test_distribution_from_bins_counts():
    grid = BinGrid(n_bins=2)
    x = distribution_from_bins([1, 1, 4, 6], grid)
    assert x[0] == pytest.approx(0.5)
    assert x[3] == pytest.approx(0.25)
    assert x[5] == pytest.approx(0.25)
    assert x.sum() == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# spectrum


def test_spectrum_stochastic_structure():
    model = _random_identified_model(11)
    eig = spectrum(model, i_max=4)
    assert np.min(np.abs(eig - 1.0)) < 1e-9  # an eigenvalue at one
    assert np.max(np.abs(eig)) <= 1.0 + 1e-9
    assert np.all(np.diff(np.abs(eig)) <= 1e-12)  # sorted by modulus


def test_spectrum_price_conditioned_direct():
    model = _random_identified_model(12)
    cond = TransitionModel(grid=model.grid, a_matrix=model.a_matrix,
                           tau_min=10.0, conditioning="price")
    eig = spectrum(cond)
    ref = np.linalg.eigvals(model.a_matrix)
    assert np.allclose(sorted(np.abs(eig)), sorted(np.abs(ref)), atol=1e-12)


def test_spectrum_natural_requires_threshold():
    model = _random_identified_model(13)
    with pytest.raises(ValueError):
        spectrum(model)


# ---------------------------------------------------------------------------
# serialization


def test_save_load_round_trip(tmp_path):
    model = _random_identified_model(14, n_bins=6)
    path = tmp_path / "model.json"
    save_model(model, path)
    back = load_model(path)
    assert back.grid.n_bins == 6
    assert back.tau_min == model.tau_min
    assert back.conditioning == model.conditioning
    assert np.array_equal(back.a_matrix, model.a_matrix)
    assert back.metadata["n_samples"] == model.metadata["n_samples"]
