"""Bootstrap particle filter.

Particles are propagated with the model's own transition (exact event
simulation for a CTBP), weighted by the Gaussian observation density and
resampled at every step. The product of the per-step mean weights is an
unbiased estimate of the marginal likelihood.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .branching import BranchingModel, CtbpTransition
from .errors import DimensionError, InvalidInputError
from .gaussian import ZERO_WEIGHTS, GaussianBelief, _as_series, _empty_trace, _per_step

__all__ = [
    "ParticleEnsemble",
    "LinearGaussianTransition",
    "fixed_initial",
    "gaussian_initial",
    "observation_logpdf",
    "resample",
    "pf_step",
    "run_pf",
]


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """``n`` state vectors with log-weights."""

    particles: np.ndarray
    logweights: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.particles)
        if p.ndim != 2:
            raise DimensionError(f"particles must be 2-d, got shape {p.shape}")
        lw = np.asarray(self.logweights, dtype=float).ravel()
        if lw.size != p.shape[0]:
            raise DimensionError("one log-weight per particle is required")
        object.__setattr__(self, "particles", p)
        object.__setattr__(self, "logweights", lw)

    @classmethod
    def uniform(cls, particles):
        particles = np.asarray(particles)
        return cls(particles, np.full(particles.shape[0], -np.log(particles.shape[0])))

    @property
    def n(self):
        return self.particles.shape[0]

    def weights(self):
        return np.exp(self.logweights - logsumexp(self.logweights))

    def mean(self):
        return self.weights() @ self.particles


class LinearGaussianTransition:
    """``z_{t+1} = z_t F + e``, ``e ~ N(0, Q)``; for testing the filters."""

    def __init__(self, F, Q):
        self.F = np.asarray(F, dtype=float)
        self.Q = np.asarray(Q, dtype=float)
        self._chol = np.linalg.cholesky(self.Q)

    @property
    def r(self):
        return self.F.shape[0]

    counter_types = ()

    def propagate(self, particles, rng):
        noise = rng.standard_normal(particles.shape) @ self._chol.T
        return particles @ self.F + noise


def fixed_initial(z0):
    """Initial-state sampler returning ``n`` copies of ``z0``."""
    z0 = np.asarray(z0, dtype=np.int64)

    def sample(n, rng):
        return np.tile(z0, (n, 1))

    return sample


def gaussian_initial(belief):
    """Initial-state sampler drawing rounded, censored Gaussian states."""
    from .hybrid import particles_from_gaussian

    def sample(n, rng):
        return particles_from_gaussian(belief, n, rng).particles

    return sample


def _as_transition(model):
    if isinstance(model, BranchingModel):
        return CtbpTransition(model)
    if not hasattr(model, "propagate"):
        raise TypeError("model must be a BranchingModel or expose propagate(particles, rng)")
    return model


def observation_logpdf(y, particles, obs):
    """``log phi(y; H z_k^T, R)`` for each particle row ``z_k``.

    A singular ``R`` is handled as a degenerate Gaussian: the density is
    taken on the range of ``R`` and residuals off that range get ``-inf``.
    """
    means = particles @ obs.H.T
    resid = y[None, :] - means
    try:
        chol = np.linalg.cholesky(obs.R)
    except np.linalg.LinAlgError:
        return _degenerate_logpdf(resid, obs.R)
    w = np.linalg.solve(chol, resid.T)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (obs.d * np.log(2 * np.pi) + logdet + np.sum(w * w, axis=0))


def _degenerate_logpdf(resid, cov):
    w, q = np.linalg.eigh(cov)
    tol = 1e-12 * max(1.0, float(np.abs(w).max()))
    pos = w > tol
    proj = resid @ q
    off = np.abs(proj[:, ~pos]).max(axis=1) if (~pos).any() else np.zeros(len(resid))
    quad = np.sum(proj[:, pos] ** 2 / w[pos], axis=1)
    out = -0.5 * (pos.sum() * np.log(2 * np.pi) + np.sum(np.log(w[pos])) + quad)
    return np.where(off <= 1e-9 * max(1.0, float(np.abs(resid).max(initial=0.0))), out, -np.inf)


def resample(logweights, rng, scheme="multinomial"):
    """Ancestor indices drawn proportionally to ``exp(logweights)``."""
    n = logweights.size
    w = np.exp(logweights - logsumexp(logweights))
    if scheme == "multinomial":
        return rng.choice(n, size=n, p=w)
    if scheme == "systematic":
        positions = (rng.random() + np.arange(n)) / n
        idx = np.searchsorted(np.cumsum(w), positions, side="right")
        return np.minimum(idx, n - 1)
    raise InvalidInputError(f"unknown resampling scheme {scheme!r}")


def pf_step(ens, model, obs, y, rng, scheme="multinomial"):
    """One propagate-weight-resample step.

    Returns ``(ensemble, increment, predicted_particles)``. When every weight
    is zero the increment is ``-inf`` and the input ensemble is returned
    unchanged.
    """
    transition = _as_transition(model)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if np.isnan(y).any():
        raise InvalidInputError("observation contains NaN")
    moved = transition.propagate(ens.particles, rng)
    logw = observation_logpdf(y, moved, obs)
    total = logsumexp(logw + ens.logweights - logsumexp(ens.logweights))
    if not np.isfinite(total):
        return ens, -np.inf, moved
    idx = resample(logw, rng, scheme)
    return ParticleEnsemble.uniform(moved[idx]), float(total), moved


def _moments(particles):
    p = np.asarray(particles, dtype=float)
    mu = p.mean(axis=0)
    d = p - mu
    return mu, d.T @ d / p.shape[0]


def _pf_segment(ens, transitions, obs, ys, t0, rng, trace, scheme, policy=None):
    """Run particle steps from ``t0``; stop early when ``policy(mean)`` is true.

    Returns ``(next_t, ensemble, aborted)``.
    """
    T = ys.shape[0]
    t = t0
    while t < T:
        ens, inc, moved = pf_step(ens, transitions[t], obs, ys[t], rng, scheme)
        trace.predicted_means[t], trace.predicted_covs[t] = _moments(moved)
        trace.increments[t] = inc
        trace.engines.append("particle")
        trace.ensembles.append(ens)
        if not np.isfinite(inc):
            return t + 1, ens, True
        trace.filtered_means[t], trace.filtered_covs[t] = _moments(ens.particles)
        t += 1
        if policy is not None and policy(trace.filtered_means[t - 1]):
            break
    return t, ens, False


def run_pf(model, obs, z0_sampler, ys, n, rng, scheme="multinomial"):
    """Bootstrap particle filter over a whole series.

    Parameters
    ----------
    model : BranchingModel, transition object, or a per-step sequence of them
    obs : ObservationModel
    z0_sampler : callable ``(n, rng) -> (n, r) array``
    ys : array_like, shape (T, d)
    n : int
        Number of particles, at least 2.
    rng : numpy.random.Generator

    Returns
    -------
    FilterTrace
        Engine tag ``"particle"`` on every step; ``trace.ensembles`` holds the
        resampled ensemble after each step.
    """
    if n < 2:
        raise InvalidInputError("the particle filter needs at least two particles")
    ys = _as_series(ys, obs.d)
    T = ys.shape[0]
    if T < 1:
        raise InvalidInputError("need at least one observation")
    transitions = [_as_transition(m) for m in _per_step(model, T)]
    ens = ParticleEnsemble.uniform(z0_sampler(n, rng))
    trace = _empty_trace(T, ens.particles.shape[1])
    _, _, aborted = _pf_segment(ens, transitions, obs, ys, 0, rng, trace, scheme)
    if aborted:
        trace.status = ZERO_WEIGHTS
    return trace


def ensemble_belief(ens):
    """Equal-weight moment summary of an ensemble (denominator ``n``)."""
    mu, cov = _moments(ens.particles)
    return GaussianBelief(mu, cov)
