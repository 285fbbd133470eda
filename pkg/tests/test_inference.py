import numpy as np
import pytest
from scipy import stats

from ctbp.branching import BranchingModel, compute_moment_operators
from ctbp.errors import DimensionError, InvalidInputError, NumericalError
from ctbp.gaussian import ObservationModel
from ctbp.inference import (
    Flat,
    Gamma,
    GaussianProcessGrid,
    MHConfig,
    MultivariateNormal,
    ParameterSpace,
    PriorSpec,
    ess,
    log_prior,
    mh_run,
    posterior_predictive,
    rhat,
)
from ctbp.models import SeirParams, build_seir
from ctbp.particle import fixed_initial


def test_gamma_mode():
    prior = PriorSpec(((0, Gamma(4.4, 0.5)),), 1)
    at_mode = log_prior([1.7], prior)
    for x in (0.5, 1.0, 1.6, 1.8, 2.2, 3.0, 5.0):
        assert at_mode > log_prior([x], prior)
    assert log_prior([0.0], prior) == -np.inf
    assert log_prior([-1.0], prior) == -np.inf


def test_gp_grid_correlation():
    gp = GaussianProcessGrid(0.7**2, 136.47, 7.0 * np.arange(14))
    cov = gp.covariance()
    corr = cov[1, 0] / np.sqrt(cov[0, 0] * cov[1, 1])
    assert corr == pytest.approx(np.exp(-7 / 136.47), abs=1e-15)
    assert corr == pytest.approx(0.950, abs=1e-3)
    np.testing.assert_allclose(np.diag(cov), 0.49)


def test_mvn_density_at_mean():
    prior = PriorSpec((((0, 1), MultivariateNormal([0.0, 0.0], 10 * np.eye(2))),), 2)
    assert log_prior([0.0, 0.0], prior) == pytest.approx(-np.log(2 * np.pi * 10), abs=1e-12)


def test_truncated_mvn():
    mvn = MultivariateNormal([10.0, 10.0], 10 * np.eye(2), lower=0.0)
    assert mvn.logpdf([-0.1, 5.0]) == -np.inf
    assert np.isfinite(mvn.logpdf([0.1, 5.0]))


def test_log_scale_jacobian():
    # Gamma prior on theta sampled as x = log(theta): density of x is
    # gamma.pdf(e^x) * e^x
    prior = PriorSpec(((0, Gamma(2.0, 1.5)),), 1)
    space = ParameterSpace(("R0",), ("log",))
    x = 0.3
    expected = stats.gamma.logpdf(np.exp(x), 2.0, scale=1.5) + x
    assert log_prior([x], prior, space) == pytest.approx(expected, abs=1e-12)


def test_gp_on_log_scale_is_plain_gaussian_in_x():
    times = np.arange(4) * 7.0
    gp = GaussianProcessGrid(0.49, 136.47, times)
    prior = PriorSpec(((tuple(range(4)), gp),), 4)
    space = ParameterSpace(tuple("abcd"), ("log",) * 4)
    x = np.array([0.1, -0.2, 0.3, 0.0])
    expected = stats.multivariate_normal(np.zeros(4), gp.covariance()).logpdf(x)
    assert log_prior(x, prior, space) == pytest.approx(expected, abs=1e-10)


def test_prior_errors():
    with pytest.raises(InvalidInputError):
        Gamma(0.0, 1.0)
    with pytest.raises(InvalidInputError):
        PriorSpec(((0, Flat()),), 2)
    with pytest.raises(DimensionError):
        log_prior([1.0, 2.0], PriorSpec(((0, Flat()),), 1))


def std_normal_loglik(theta):
    return float(stats.norm.logpdf(theta[0]))


def test_mh_standard_normal_target():
    prior = PriorSpec(((0, Flat()),), 1)
    cfg = MHConfig(steps=60_000, burn_in=8192, adapt_window=2048, initial_cov=np.eye(1))
    trace = mh_run(std_normal_loglik, prior, [0.5], cfg, np.random.default_rng(1))
    x = trace.samples[:, 0]
    n_eff = ess(x)
    assert abs(x.mean()) < 3 / np.sqrt(n_eff)
    # SE of the sample variance with ESS draws is about sqrt(2 / ESS)
    assert abs(x.var() - 1.0) < 3 * np.sqrt(2 / n_eff)
    assert 0.0 < trace.acceptance_rate < 1.0
    assert trace.samples.shape == (60_000 - 8192, 1)


def test_mh_prior_only_gamma_mean():
    prior = PriorSpec(((0, Gamma(4.4, 0.5)),), 1)
    cfg = MHConfig(steps=60_000, burn_in=8192, adapt_window=2048)
    trace = mh_run(lambda th: 0.0, prior, [2.2], cfg, np.random.default_rng(2))
    x = trace.samples[:, 0]
    assert abs(x.mean() - 2.2) < 3 * x.std() / np.sqrt(ess(x))


def test_mh_ks_convergence():
    prior = PriorSpec(((0, Flat()),), 1)
    cfg = MHConfig(steps=120_000, burn_in=20_000, adapt_window=4096, initial_cov=np.eye(1))
    trace = mh_run(std_normal_loglik, prior, [0.0], cfg, np.random.default_rng(3))
    res = stats.kstest(trace.samples[:, 0], stats.norm.cdf)
    assert res.statistic < 0.02


def test_adaptation_uses_scaled_window_covariance():
    # a flat target accepts every proposal, so the window is the raw path
    prior = PriorSpec((((0, 1), Flat()),), 2)
    cfg = MHConfig(steps=3000, burn_in=1000, adapt_window=500, scale=0.7)
    trace = mh_run(lambda th: 0.0, prior, [0.0, 0.0], cfg, np.random.default_rng(4))
    assert [k for k, _ in trace.cov_history] == [0, 500, 1000]
    assert trace.burn_accepted.all()
    # replay the same stream to rebuild the first window
    rng = np.random.default_rng(4)
    x = np.zeros(2)
    chol = np.linalg.cholesky(0.01 * np.eye(2))
    window = []
    for _ in range(500):
        x = x + chol @ rng.standard_normal(2)
        rng.random()
        window.append(x.copy())
    np.testing.assert_allclose(trace.cov_history[1][1], 0.7 * np.cov(np.array(window), rowvar=False), rtol=1e-12)


def test_proposal_frozen_after_burn_in():
    prior = PriorSpec(((0, Flat()),), 1)
    cfg = MHConfig(steps=10_000, burn_in=2048, adapt_window=1024)
    trace = mh_run(std_normal_loglik, prior, [0.0], cfg, np.random.default_rng(5))
    assert all(k <= cfg.burn_in for k, _ in trace.cov_history)


def test_minus_infinity_never_accepted():
    prior = PriorSpec(((0, Flat()),), 1)

    def half_line(theta):
        return -np.inf if theta[0] < 0 else float(-0.5 * theta[0] ** 2)

    cfg = MHConfig(steps=20_000, burn_in=4096, adapt_window=1024, initial_cov=np.eye(1))
    trace = mh_run(half_line, prior, [1.0], cfg, np.random.default_rng(6))
    assert np.all(trace.samples >= 0)
    assert np.all(np.isfinite(trace.logliks))


def test_nan_likelihood_is_an_error():
    prior = PriorSpec(((0, Flat()),), 1)
    with pytest.raises(NumericalError):
        mh_run(lambda th: np.nan, prior, [0.0], MHConfig(100, 0, 10), np.random.default_rng(0))


def test_start_with_zero_density_rejected():
    prior = PriorSpec(((0, Gamma(2.0, 1.0)),), 1)
    with pytest.raises(InvalidInputError):
        mh_run(lambda th: 0.0, prior, [-1.0], MHConfig(100, 0, 10), np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(InvalidInputError):
        MHConfig(steps=100, burn_in=100)
    with pytest.raises(InvalidInputError):
        MHConfig(steps=1000, burn_in=50, adapt_window=100)


# --- diagnostics --------------------------------------------------------------


def test_ess_iid(rng):
    x = rng.standard_normal(10_000)
    assert 8000 <= ess(x) <= 12_000


def ar1(rho, n, rng):
    x = np.empty(n)
    x[0] = rng.standard_normal() / np.sqrt(1 - rho**2)
    noise = rng.standard_normal(n)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + noise[t]
    return x


def test_ess_ar1(rng):
    n, rho = 10_000, 0.9
    target = n * (1 - rho) / (1 + rho)
    values = [ess(ar1(rho, n, rng)) for _ in range(20)]
    assert abs(np.mean(values) - target) < 0.3 * target


def test_ess_alternating_is_capped():
    x = np.tile([1.0, -1.0], 500)
    assert ess(x) == 1000


def test_ess_constant_and_short():
    assert ess(np.ones(200)) == 0.0
    with pytest.raises(InvalidInputError):
        ess(np.arange(50.0))


def test_diagnostics_affine_invariant(rng):
    x = ar1(0.5, 2000, rng)
    y = ar1(0.5, 2000, rng)
    assert ess(3 * x - 7) == pytest.approx(ess(x), rel=1e-9)
    assert rhat([2 * x + 1, 2 * y + 1]) == pytest.approx(rhat([x, y]), rel=1e-9)


def test_rhat_examples(rng):
    chains = [rng.standard_normal(10_000) for _ in range(4)]
    assert 1.0 <= rhat(chains) < 1.01
    assert rhat([rng.standard_normal(1000), rng.standard_normal(1000) + 10]) > 1.1
    single = np.concatenate(chains[:2])
    assert rhat([single]) < 1.01
    with pytest.raises(InvalidInputError):
        rhat([np.ones(3)])
    with pytest.raises(InvalidInputError):
        rhat([np.ones(100), np.ones(120)])


# --- posterior predictive -----------------------------------------------------


def test_predictive_constant_for_frozen_model(rng):
    frozen = BranchingModel(omega=[0.0, 0.0], progeny=((), ()))
    obs = ObservationModel([[1.0, 1.0]], [[0.0]])
    paths = posterior_predictive(lambda th: (frozen, obs), [[1.0]], fixed_initial([2, 3]), 6, 5, rng)
    np.testing.assert_array_equal(paths, 5.0)


def test_predictive_first_step_mean(rng):
    params = SeirParams(0.3, 0.375, 3 / 28, 0.75)

    def builder(theta):
        return build_seir(SeirParams(theta[0] * 3 / 28, 0.375, 3 / 28, 0.75), 1.0)

    paths = posterior_predictive(builder, [[2.8]], fixed_initial([20, 10, 0]), 1, 20_000, rng)
    model, obs = build_seir(params, 1.0)
    expected = obs.H @ (np.array([20.0, 10.0, 0.0]) @ compute_moment_operators(model).F)
    y = paths[:, 0, 0]
    assert abs(y.mean() - expected[0]) < 4 * y.std() / np.sqrt(y.size)


def test_predictive_covers_synthetic_truth():
    from ctbp.experiments import r0_loglik, r0_prior, synthetic_seir

    params = SeirParams(0.3, 0.375, 3 / 28, 0.75)
    _, ys, _ = synthetic_seir(params, [6, 0, 0], 25, 0)
    prior, space = r0_prior()
    loglik = r0_loglik(ys, [6, 0, 0], 0.375, 3 / 28, 0.75, 1.0)
    trace = mh_run(loglik, prior, [2.2], MHConfig(12_000, 4096, 1024), np.random.default_rng(0), space)

    def builder(theta):
        return build_seir(SeirParams(theta[0] * 3 / 28, 0.375, 3 / 28, 0.75), 1.0)

    paths = posterior_predictive(builder, trace.samples, fixed_initial([6, 0, 0]), 25, 1000, np.random.default_rng(1))
    lo, hi = np.quantile(paths[:, :, 0], [0.05, 0.95], axis=0)
    inside = (ys[:, 0] >= lo) & (ys[:, 0] <= hi)
    assert inside.mean() >= 0.8
