import numpy as np
import pytest
import scipy.linalg

from ctbp.branching import (
    BranchingModel,
    CtbpTransition,
    augment_immigration,
    build_omega,
    build_variance_source,
    compute_moment_operators,
    conditional_mean,
    conditional_var,
    simulate,
    simulate_events,
)
from ctbp.errors import DimensionError, InvalidInputError
from ctbp.models import SeirParams, build_seir

BETA, DELTA, LAM = 0.3, 0.375, 3 / 28


def pure_death(rate=1.0):
    return BranchingModel(omega=[rate], progeny=((((0,), 1.0),),))


def yule(rate=0.5):
    return BranchingModel(omega=[rate], progeny=((((2,), 1.0),),))


def seir2(beta=BETA, delta=DELTA, lam=LAM):
    q = beta / (beta + lam)
    return BranchingModel(
        omega=[delta, beta + lam],
        progeny=((((0, 1), 1.0),), (((1, 1), q), ((0, 0), 1 - q))),
    )


def seir3(p=0.75):
    return build_seir(SeirParams(BETA, DELTA, LAM, p))[0]


def mc_moments(model, z0, n, seed):
    """Monte-Carlo unit-step mean/covariance and their standard errors."""
    particles = np.tile(np.asarray(z0, dtype=np.int64), (n, 1))
    out = CtbpTransition(model).propagate(particles, np.random.default_rng(seed)).astype(float)
    mean = out.mean(axis=0)
    d = out - mean
    prods = d[:, :, None] * d[:, None, :]
    cov = prods.mean(axis=0)
    return mean, out.std(axis=0) / np.sqrt(n), cov, prods.std(axis=0) / np.sqrt(n)


# --- model construction -----------------------------------------------------


def test_omega_two_type_seir():
    np.testing.assert_allclose(build_omega(seir2()), [[-0.375, 0.375], [0.3, -3 / 28]], atol=1e-15)


def test_omega_three_type_seir():
    expected = [[-0.375, 0.375, 0.28125], [0.3, -3 / 28, 0.0], [0.0, 0.0, 0.0]]
    np.testing.assert_allclose(build_omega(seir3()), expected, atol=1e-15)


def test_omega_pure_death():
    np.testing.assert_array_equal(build_omega(pure_death()), [[-1.0]])


def test_seir_spectrum():
    w, v = np.linalg.eig(build_omega(seir2()).T)
    order = np.argsort(w)
    np.testing.assert_allclose(w[order], [-0.6022, 0.1201], atol=1e-4)
    dominant = v[:, order[1]]
    assert dominant[1] / dominant[0] == pytest.approx(1.65, abs=5e-3)


def test_variance_source_single_type():
    assert build_variance_source(pure_death(2.5))[0, 0] == 2.5
    assert build_variance_source(yule(0.5))[0, 0] == 0.5


def test_variance_source_seir_by_enumeration():
    model = seir2()
    c = build_variance_source(model)
    expected = np.zeros((2, 2))
    q = BETA / (BETA + LAM)
    for j, prob in (((1, 1), q), ((0, 0), 1 - q)):
        step = np.array(j, float) - np.array([0.0, 1.0])
        expected += prob * np.outer(step, step)
    expected *= BETA + LAM
    np.testing.assert_allclose(c[:, 1].reshape(2, 2, order="F"), expected, atol=1e-15)


def test_model_validation():
    with pytest.raises(InvalidInputError):
        BranchingModel(omega=[1.0], progeny=((((0,), 0.5),),))
    with pytest.raises(InvalidInputError):
        BranchingModel(omega=[1.0, 1.0], progeny=((((0, 0), 1.0),), (((0, 0), 1.0),)), counter_types={1})
    with pytest.raises(DimensionError):
        BranchingModel(omega=[1.0], progeny=())
    with pytest.raises(InvalidInputError):
        BranchingModel(omega=[-1.0], progeny=((((0,), 1.0),),))


# --- immigration ------------------------------------------------------------


def test_augment_without_immigration_is_identity():
    m = seir2()
    assert augment_immigration(m) is m


def test_augment_immigration_structure():
    m = BranchingModel(omega=[0.0, 0.0], progeny=((), ()), alpha=[2.0, 0.0])
    aug = augment_immigration(m)
    assert aug.r == 3
    assert aug.omega[2] == 2.0
    np.testing.assert_array_equal(aug.offspring[2], [[1, 0, 1]])
    np.testing.assert_array_equal(aug.probabilities[2], [1.0])
    ops = compute_moment_operators(aug)
    np.testing.assert_allclose(conditional_mean(np.array([0.0, 0.0, 1.0]), ops), [2.0, 0.0, 1.0], atol=1e-12)


def test_immigration_rejected_before_augmentation():
    m = BranchingModel(omega=[1.0], progeny=((((0,), 1.0),),), alpha=[1.0])
    with pytest.raises(InvalidInputError):
        compute_moment_operators(m)


def test_augmented_mean_matches_direct_immigration_simulation():
    q = BETA / (BETA + LAM)
    direct = BranchingModel(
        omega=[DELTA, BETA + LAM],
        progeny=((((0, 1), 1.0),), (((1, 1), q), ((0, 0), 1 - q))),
        alpha=[1.5, 0.5],
    )
    ops = compute_moment_operators(augment_immigration(direct))
    z0 = np.array([3, 2])
    analytic = conditional_mean(np.array([3.0, 2.0, 1.0]), ops)[:2]
    rng = np.random.default_rng(7)
    sims = np.array([simulate(direct, z0, [1.0], rng)[0] for _ in range(20000)], dtype=float)
    se = sims.std(axis=0) / np.sqrt(len(sims))
    assert np.all(np.abs(sims.mean(axis=0) - analytic) < 4 * se)


# --- moment operators ---------------------------------------------------------


def test_pure_death_operators_closed_form():
    ops = compute_moment_operators(pure_death())
    e = np.exp(-1.0)
    assert abs(ops.F[0, 0] - e) < 1e-8
    assert abs(ops.V[0, 0, 0] - e * (1 - e)) < 1e-8


def test_yule_operators_closed_form():
    ops = compute_moment_operators(yule(0.5))
    g = np.exp(0.5)
    assert abs(ops.F[0, 0] - g) < 1e-8
    assert abs(ops.V[0, 0, 0] - g * (g - 1)) < 1e-8


def test_seir_mean_matches_eigen_closed_form():
    ops = compute_moment_operators(seir3())
    disc = np.sqrt(4 * BETA * DELTA + (LAM - DELTA) ** 2)
    th1, th2 = 0.5 * (-disc - LAM - DELTA), 0.5 * (disc - LAM - DELTA)
    h1, h2 = LAM + th1, LAM + th2
    e1, e2 = np.exp(th1), np.exp(th2)
    closed = np.array(
        [[h1 * e1 - h2 * e2, h1 * h2 / BETA * (e2 - e1)], [BETA * (e1 - e2), h1 * e2 - h2 * e1]]
    ) / (h1 - h2)
    z0 = np.array([6.0, 0.0, 0.0])
    np.testing.assert_allclose(conditional_mean(z0, ops)[:2], z0[:2] @ closed, rtol=1e-10)


def test_operators_properties():
    ops = compute_moment_operators(seir3())
    for v in ops.V:
        np.testing.assert_allclose(v, v.T, atol=1e-10)
        assert np.linalg.eigvalsh(v).min() > -1e-8
    assert ops.counter_types == (2,)


def test_conservative_model_rows_sum_to_one():
    # each agent is replaced by exactly one agent, so Omega has zero row sums
    m = BranchingModel(omega=[1.0, 2.0], progeny=((((0, 1), 1.0),), (((1, 0), 1.0),)))
    np.testing.assert_allclose(compute_moment_operators(m).F.sum(axis=1), 1.0, atol=1e-10)


def test_two_unit_step_composes_unit_steps():
    model = seir3()
    one = compute_moment_operators(model, step=1.0)
    two = compute_moment_operators(model, step=2.0)
    np.testing.assert_allclose(two.F, one.F @ one.F, atol=1e-8)
    for i in range(model.r):
        composed = np.tensordot(one.F[i], one.V, axes=1) + one.F.T @ one.V[i] @ one.F
        np.testing.assert_allclose(two.V[i], composed, atol=1e-8)


def test_conditional_moment_examples():
    ops = compute_moment_operators(pure_death())
    np.testing.assert_array_equal(conditional_mean(np.zeros(1), ops), [0.0])
    np.testing.assert_array_equal(conditional_var(np.zeros(1), ops), [[0.0]])
    e = np.exp(-1.0)
    assert conditional_var(np.array([10.0]), ops)[0, 0] == pytest.approx(10 * e * (1 - e), rel=1e-10)
    with pytest.raises(DimensionError):
        conditional_mean(np.zeros(2), ops)


@pytest.mark.parametrize("model,z0", [(pure_death(), [1]), (yule(), [1]), (seir3(), [6, 0, 0]), (seir3(), [3, 4, 0])])
def test_operators_match_monte_carlo(model, z0):
    ops = compute_moment_operators(model)
    mean, mean_se, cov, cov_se = mc_moments(model, z0, 100_000, seed=11)
    z = np.asarray(z0, float)
    assert np.all(np.abs(mean - conditional_mean(z, ops)) <= 4 * mean_se + 1e-12)
    assert np.all(np.abs(cov - conditional_var(z, ops)) <= 4 * cov_se + 1e-12)


# --- simulation ---------------------------------------------------------------


def test_zero_rates_give_constant_paths(rng):
    m = BranchingModel(omega=[0.0, 0.0], progeny=((), ()))
    states = simulate(m, [4, 7], np.arange(1, 6), rng)
    np.testing.assert_array_equal(states, np.tile([4, 7], (5, 1)))


def test_pure_death_survival_mean(rng):
    particles = np.full((10_000, 1), 1000, dtype=np.int64)
    out = CtbpTransition(pure_death()).propagate(particles, rng)[:, 0]
    se = out.std() / np.sqrt(out.size)
    assert abs(out.mean() - 1000 * np.exp(-1)) < 4 * se


def test_seir_ensemble_tracks_mean(rng):
    model = seir3()
    omega = build_omega(model)
    z0 = np.array([6, 0, 0])
    grid = [5.0, 15.0, 25.0]
    sims = np.array([simulate(model, z0, grid, rng) for _ in range(3000)], dtype=float)
    for g, t in enumerate(grid):
        expected = z0 @ scipy.linalg.expm(omega * t)
        got = sims[:, g, :2]
        se = got.std(axis=0) / np.sqrt(len(got))
        assert np.all(np.abs(got.mean(axis=0) - expected[:2]) < 4 * se)


def test_simulation_is_deterministic_per_seed():
    model = seir3()
    a = simulate(model, [6, 0, 0], np.arange(1, 26), np.random.default_rng(3))
    b = simulate(model, [6, 0, 0], np.arange(1, 26), np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)


def test_counter_is_incidence_per_interval(rng):
    # with p = 1 every E -> I transition is counted; deaths of type E per
    # interval must equal the recorded counter
    model = seir3(p=1.0)
    states, deaths = simulate(model, [20, 5, 0], np.arange(1, 11), rng, return_deaths=True)
    np.testing.assert_array_equal(states[:, 2], deaths[:, 0])


def test_event_log_counts_observed_transitions(rng):
    model = seir3(p=1.0)
    times, types, final = simulate_events(model, [10, 3, 0], 15.0, rng)
    assert np.all(np.diff(times) >= 0)
    assert final[2] == np.sum(types == 0)


def test_counter_non_decreasing_without_resets(rng):
    counted = seir3(p=0.5)
    # same dynamics with the counter left as an ordinary zero-rate type
    plain = BranchingModel(omega=counted.omega, progeny=seir3(p=0.5).progeny)
    states = simulate(plain, [10, 3, 0], np.arange(1, 31), rng)
    assert np.all(np.diff(states[:, 2]) >= 0)
    assert states[-1, 2] > 0


def test_simulate_rejects_bad_state(rng):
    with pytest.raises(DimensionError):
        simulate(seir3(), [1, 2], [1.0], rng)
    with pytest.raises(InvalidInputError):
        simulate(seir3(), [-1, 0, 0], [1.0], rng)
