"""Likelihood engines and data generators for the SEIR experiments."""

import numpy as np

from .branching import compute_moment_operators, simulate
from .errors import InvalidInputError
from .gaussian import GaussianBelief
from .hybrid import SwitchPolicy, run_hybrid
from .inference import Gamma, GaussianProcessGrid, MultivariateNormal, ParameterSpace, PriorSpec
from .models import PiecewiseSeirLikelihood, SeirParams, build_seir
from .particle import fixed_initial, gaussian_initial, run_pf

__all__ = [
    "ENGINES",
    "simulate_observations",
    "synthetic_seir",
    "r0_loglik",
    "r0_prior",
    "piecewise_loglik",
    "piecewise_prior",
]

ENGINES = ("gaussian", "particle", "hybrid")


def simulate_observations(model, obs, z0, T, rng):
    """Latent states and noisy observations at days ``1..T``.

    Returns ``(states, ys)`` with shapes ``(T, r)`` and ``(T, d)``.
    """
    states = simulate(model, z0, np.arange(1, T + 1, dtype=float), rng)
    ys = states @ obs.H.T
    if np.any(obs.R != 0):
        ys = ys + rng.multivariate_normal(np.zeros(obs.d), obs.R, size=T, method="eigh")
    return states, ys


def synthetic_seir(params, z0, T, seed, obs_var=0.0, min_cases=1, max_tries=1000):
    """Seeded SEIR data set that has not died out by day ``T``.

    Seeds ``seed, seed + 1, ...`` are tried in order; the first realization
    with a live exposed or infectious agent at day ``T`` and at least
    ``min_cases`` observed cases is returned together with the seed used.
    """
    model, obs = build_seir(params, obs_var)
    for k in range(max_tries):
        rng = np.random.default_rng(seed + k)
        states, ys = simulate_observations(model, obs, z0, T, rng)
        if states[-1, :2].sum() > 0 and states[:, 2].sum() >= min_cases:
            return states, ys, seed + k
    raise InvalidInputError(f"no surviving epidemic in {max_tries} seeds")


def r0_prior(shape=4.4, scale=0.5):
    """Gamma prior on the basic reproduction number."""
    return PriorSpec(((0, Gamma(shape, scale)),), 1), ParameterSpace(("R0",))


def r0_loglik(ys, z0, delta, lam, p, obs_var, engine="gaussian", n=256, threshold=10.0, rng=None,
              include_counters=False, scheme="multinomial"):
    """Log-likelihood of ``R0 = beta / lam`` for SEIR data.

    Returns a callable taking a length-1 parameter vector. Particle and
    hybrid engines draw from ``rng`` and give unbiased noisy estimates.
    """
    ys = np.asarray(ys, dtype=float).reshape(-1, 1)
    z0 = np.asarray(z0)
    if engine == "gaussian":
        lik = PiecewiseSeirLikelihood(ys[:, 0], np.zeros(ys.shape[0], dtype=np.int64), delta, lam, p, obs_var)
        mean0 = z0.astype(float)
        return lambda theta: lik([theta[0]], mean0)
    if engine not in ENGINES:
        raise InvalidInputError(f"unknown engine {engine!r}")
    if rng is None:
        raise InvalidInputError("particle-based engines need a random generator")
    sampler = fixed_initial(z0)
    policy = SwitchPolicy(threshold, include_counters)

    def loglik(theta):
        if theta[0] <= 0:
            return -np.inf
        model, obs = build_seir(SeirParams(theta[0] * lam, delta, lam, p), obs_var)
        if engine == "particle":
            return run_pf(model, obs, sampler, ys, n, rng, scheme).loglik
        ops = compute_moment_operators(model)
        init = GaussianBelief.point_mass(z0)
        return run_hybrid(model, ops, obs, init, ys, n, policy, rng, z0_sampler=sampler, scheme=scheme).loglik

    return loglik


def piecewise_prior(n_windows, window_length=7.0, gp_variance=0.7**2, length_scale=136.47,
                    init_mean=(10.0, 10.0), init_var=10.0):
    """GP prior on ``log R_n`` and a positive-truncated Gaussian on ``(E0, I0)``."""
    times = window_length * np.arange(n_windows)
    gp = GaussianProcessGrid(gp_variance, length_scale, times)
    init = MultivariateNormal(np.asarray(init_mean, float), init_var * np.eye(2), lower=0.0)
    prior = PriorSpec(((tuple(range(n_windows)), gp), ((n_windows, n_windows + 1), init)), n_windows + 2)
    names = tuple(f"R{k + 1}" for k in range(n_windows)) + ("E0", "I0")
    space = ParameterSpace(names, ("log",) * n_windows + ("identity", "identity"))
    return prior, space


def piecewise_loglik(ys, window_index, delta, lam, p, obs_var):
    """Gaussian-engine log-likelihood of ``(R_1..R_N, E0, I0)``.

    The initial state is the point ``(E0, I0, 0)``.
    """
    lik = PiecewiseSeirLikelihood(ys, window_index, delta, lam, p, obs_var)
    n_windows = lik.n_windows
    mean0 = np.zeros(3)

    def loglik(theta):
        mean0[0] = theta[n_windows]
        mean0[1] = theta[n_windows + 1]
        return lik(theta[:n_windows], mean0)

    loglik.engine = lik
    return loglik


def gaussian_z0_sampler(mean, cov):
    """Rounded, censored Gaussian initial states."""
    return gaussian_initial(GaussianBelief(mean, cov))
