import numpy as np
import pytest
import scipy.linalg
from scipy import stats

from ctbp.branching import build_omega, compute_moment_operators, simulate, simulate_events
from ctbp.errors import ConfigError, InvalidInputError
from ctbp.models import (
    OperatorCache,
    PiecewiseParams,
    PiecewiseSeirLikelihood,
    SeirParams,
    StagedSeirParams,
    Window,
    build_piecewise,
    build_seir,
    build_staged_seir,
    seir_operator_stack,
    weekly_windows,
)

PAPER = SeirParams(0.3, 0.375, 3 / 28, 0.75)


def test_seir_structure():
    model, obs = build_seir(PAPER)
    np.testing.assert_allclose(model.omega, [0.375, 0.3 + 3 / 28, 0.0])
    assert model.counter_types == frozenset({2})
    np.testing.assert_array_equal(obs.H, [[0.0, 0.0, 1.0]])
    np.testing.assert_allclose(
        build_omega(model), [[-0.375, 0.375, 0.28125], [0.3, -3 / 28, 0.0], [0.0, 0.0, 0.0]], atol=1e-15
    )
    assert PAPER.r0 == pytest.approx(2.8)


def test_unobserved_seir_has_zero_counter_column():
    model, _ = build_seir(SeirParams(0.3, 0.375, 3 / 28, 0.0))
    np.testing.assert_array_equal(build_omega(model)[:, 2], 0.0)


def test_params_validation():
    with pytest.raises(InvalidInputError):
        SeirParams(0.0, 0.375, 0.1)
    with pytest.raises(InvalidInputError):
        SeirParams(0.3, 0.375, 0.1, p=1.5)
    with pytest.raises(InvalidInputError):
        StagedSeirParams(0.3, 0.375, 0.1, 0.75, k_e=0)


def test_staged_reduces_to_seir():
    staged, sobs = build_staged_seir(StagedSeirParams(0.3, 0.375, 3 / 28, 0.75, 1, 1))
    plain, pobs = build_seir(PAPER)
    np.testing.assert_allclose(build_omega(staged), build_omega(plain), atol=1e-15)
    a, b = compute_moment_operators(staged), compute_moment_operators(plain)
    np.testing.assert_allclose(a.F, b.F, atol=1e-14)
    np.testing.assert_allclose(a.V, b.V, atol=1e-14)
    np.testing.assert_array_equal(sobs.H, pobs.H)


def test_staged_stage_rates_and_size():
    p = StagedSeirParams(0.3, 0.375, 3 / 28, 0.75, 8, 8)
    assert p.stage_delta == pytest.approx(3.0)
    assert p.stage_lam == pytest.approx(0.8571, abs=1e-4)
    model, _ = build_staged_seir(p)
    assert model.r == 17
    r = model.r
    assert r * r + r == 306
    ops = compute_moment_operators(model)
    assert ops.V.shape == (17, 17, 17)


def test_staged_exposed_period_is_erlang():
    # a lone E_1 agent with no infectious feedback: time until it reaches I_1
    p = StagedSeirParams(1e-12, 0.375, 3 / 28, 1.0, 8, 8)
    model, _ = build_staged_seir(p)
    rng = np.random.default_rng(0)
    z0 = np.zeros(model.r, dtype=np.int64)
    z0[0] = 1
    durations = []
    for _ in range(10_000):
        times, types, _ = simulate_events(model, z0, 200.0, rng)
        durations.append(times[np.flatnonzero(types == 7)[0]])
    res = stats.kstest(durations, stats.gamma(8, scale=1 / 3.0).cdf)
    assert res.pvalue > 0.01


@pytest.mark.parametrize("stages", [1, 8])
def test_expected_cumulative_cases_match_simulation(stages):
    # with the counter never reset it accumulates every observed case
    counted, _ = build_staged_seir(StagedSeirParams(0.3, 0.375, 3 / 28, 0.75, stages, stages))
    plain = type(counted)(omega=counted.omega, progeny=counted.progeny)
    z0 = np.zeros(plain.r, dtype=np.int64)
    z0[0] = 6
    expected = (z0 @ scipy.linalg.expm(25 * build_omega(plain)))[-1]
    rng = np.random.default_rng(stages)
    finals = np.array([simulate(plain, z0, [25.0], rng)[0, -1] for _ in range(4000)], dtype=float)
    assert abs(finals.mean() - expected) < 4 * finals.std() / np.sqrt(finals.size)


def test_staging_changes_growth_despite_matched_periods():
    # equal mean periods do not give equal expected incidence: the Erlang
    # periods shift the Malthusian parameter
    def cumulative(stages):
        m, _ = build_staged_seir(StagedSeirParams(0.3, 0.375, 3 / 28, 0.75, stages, stages))
        z0 = np.zeros(m.r)
        z0[0] = 6
        return (z0 @ scipy.linalg.expm(25 * build_omega(m)))[-1]

    assert cumulative(8) > 1.3 * cumulative(1)


def test_piecewise_single_window_matches_direct():
    pw = PiecewiseParams((Window(0, 10, PAPER),))
    ((w, ops),) = build_piecewise(pw)
    direct = compute_moment_operators(build_seir(PAPER)[0])
    np.testing.assert_array_equal(ops.F, direct.F)
    np.testing.assert_array_equal(ops.V, direct.V)


def test_piecewise_computes_each_distinct_window_once():
    r_values = np.linspace(0.8, 2.1, 14)
    pw = weekly_windows(r_values, 0.5, 1.0, 0.75)
    assert pw.T == 98
    cache = OperatorCache()
    out = build_piecewise(pw, cache)
    assert len(out) == 14
    assert cache.computations == 14
    assert pw.windows[3].params.beta == pytest.approx(1.0 * r_values[3])


def test_identical_windows_share_operators():
    pw = PiecewiseParams((Window(0, 7, PAPER), Window(7, 14, PAPER)))
    cache = OperatorCache()
    (w1, a), (w2, b) = build_piecewise(pw, cache)
    assert a is b
    assert cache.computations == 1


def test_window_validation():
    with pytest.raises(ConfigError, match="gap"):
        PiecewiseParams((Window(0, 7, PAPER), Window(8, 14, PAPER)))
    with pytest.raises(ConfigError, match="overlap"):
        PiecewiseParams((Window(0, 7, PAPER), Window(6, 14, PAPER)))
    with pytest.raises(ConfigError):
        PiecewiseParams((Window(1, 7, PAPER),))


def test_fast_operator_stack_matches_generic():
    betas = np.array([0.2, 0.5, 1.3])
    f, v = seir_operator_stack(betas, 0.5, 1.0, 0.6, 1.0)
    for k, b in enumerate(betas):
        ops = compute_moment_operators(build_seir(SeirParams(b, 0.5, 1.0, 0.6))[0])
        np.testing.assert_allclose(f[k], ops.F, atol=1e-13)
        np.testing.assert_allclose(v[k], ops.V, atol=1e-13)


def test_fast_likelihood_matches_general_filter():
    from ctbp.gaussian import GaussianBelief, run_gaussian_filter

    rng = np.random.default_rng(3)
    r_values = rng.uniform(0.7, 2.0, 14)
    pw = weekly_windows(r_values, 0.5, 1.0, 0.75)
    ys = rng.poisson(30, size=98).astype(float)
    lik = PiecewiseSeirLikelihood(ys, pw.window_index(), 0.5, 1.0, 0.75, 400.0)
    fast = lik(r_values, [10.0, 10.0, 0.0])
    assert lik.operator_computations == 14
    per_window = build_piecewise(pw)
    steps = [per_window[k][1] for k in pw.window_index()]
    _, obs = build_seir(pw.windows[0].params, 400.0)
    slow = run_gaussian_filter(steps, obs, GaussianBelief.point_mass([10.0, 10.0, 0.0]), ys.reshape(-1, 1))
    assert fast == pytest.approx(slow.loglik, rel=1e-12)
