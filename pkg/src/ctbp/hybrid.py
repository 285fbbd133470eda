"""Switching between the particle filter and the Gaussian filter.

A step is filtered with the Gaussian approximation when every (non-counter)
coordinate of the previous filtered mean is at least the threshold ``s``;
otherwise the particle filter is used. The log-likelihood is the sum of
the Gaussian increments over the Gaussian steps and the particle-filter
increments over the rest.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NumericalError
from .gaussian import (
    ABORTED,
    ZERO_WEIGHTS,
    GaussianBelief,
    _as_series,
    _counter_mask,
    _empty_trace,
    _gaussian_segment,
    _per_step,
    stack_operators,
)
from .particle import ParticleEnsemble, _as_transition, _pf_segment

__all__ = [
    "SwitchPolicy",
    "in_gaussian_regime",
    "moments_from_particles",
    "particles_from_gaussian",
    "run_hybrid",
]


@dataclass(frozen=True)
class SwitchPolicy:
    """Threshold rule for using the Gaussian filter.

    Parameters
    ----------
    threshold : float
        Minimum mean agent count ``s``; ``0`` means always Gaussian,
        ``inf`` always particle.
    include_counters : bool
        Whether counter coordinates take part in the minimum. They are reset
        every step, so including them usually keeps the filter on particles.
    """

    threshold: float
    include_counters: bool = False

    def __post_init__(self):
        if not self.threshold >= 0:
            raise InvalidInputError(f"threshold must be non-negative, got {self.threshold}")

    def mask(self, r, counter_types=()):
        keep = np.ones(r, dtype=np.bool_)
        if not self.include_counters:
            keep[list(counter_types)] = False
        return keep


def in_gaussian_regime(mean, policy, counter_types=()):
    """True when ``min(mean)`` over the policy's coordinates is at least ``s``."""
    mean = np.asarray(mean, dtype=float).ravel()
    keep = policy.mask(mean.size, counter_types)
    if not keep.any():
        return True
    return bool(mean[keep].min() >= policy.threshold)


def moments_from_particles(ens):
    """Sample mean and covariance (denominator ``n``) of an ensemble."""
    if ens.n < 2:
        raise InvalidInputError("need at least two particles to estimate a covariance")
    p = np.asarray(ens.particles, dtype=float)
    mu = p.mean(axis=0)
    d = p - mu
    return GaussianBelief(mu, d.T @ d / ens.n)


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def particles_from_gaussian(belief, n, rng):
    """Draw ``n`` Gaussian samples, round to integers and censor at zero."""
    cov = 0.5 * (belief.cov + belief.cov.T)
    w, q = np.linalg.eigh(cov)
    scale = max(1.0, float(np.abs(np.diag(cov)).max()) if cov.size else 1.0)
    if w.size and w.min() < -1e-8 * scale:
        raise NumericalError(f"belief covariance is not positive semidefinite (eigenvalue {w.min():.3g})")
    root = q * np.sqrt(np.clip(w, 0.0, None))
    draws = belief.mean + rng.standard_normal((n, belief.r)) @ root.T
    states = np.maximum(_round_half_away(draws), 0.0).astype(np.int64)
    return ParticleEnsemble.uniform(states)


def run_hybrid(model, ops, obs, initial, ys, n, policy, rng, z0_sampler=None, scheme="multinomial"):
    """Filter a series, switching engines step by step.

    Parameters
    ----------
    model : BranchingModel or per-step sequence
        Used for particle steps.
    ops : MomentOperators or per-step sequence
        Used for Gaussian steps.
    obs : ObservationModel
    initial : GaussianBelief
        Belief at time 0; decides the first engine. Particle starts draw from
        ``z0_sampler`` when given, else from this belief.
    ys : array_like, shape (T, d)
    n : int
        Particle count.
    policy : SwitchPolicy
    rng : numpy.random.Generator

    Returns
    -------
    FilterTrace
    """
    if n < 2:
        raise InvalidInputError("the particle filter needs at least two particles")
    ys = _as_series(ys, obs.d)
    T = ys.shape[0]
    transitions = [_as_transition(m) for m in _per_step(model, T)]
    ops_seq = _per_step(ops, T)
    r = initial.r
    counters = tuple(ops_seq[0].counter_types)
    f, v, noise, widx = stack_operators(ops_seq)
    cmask = _counter_mask(r, counters)
    pmask = policy.mask(r, counters)
    h = np.ascontiguousarray(obs.H)
    rmat = np.ascontiguousarray(obs.R)
    trace = _empty_trace(T, r)

    def leave_particles(mean):
        return in_gaussian_regime(mean, policy, counters)

    gaussian = in_gaussian_regime(initial.mean, policy, counters)
    belief = initial
    ens = None
    t = 0
    while t < T:
        if gaussian:
            t_next, status = _gaussian_segment(
                belief.mean, np.ascontiguousarray(belief.cov), t, f, v, noise, widx, cmask, h, rmat, obs.joseph,
                ys, float(policy.threshold), pmask, True,
                trace.predicted_means, trace.predicted_covs, trace.filtered_means, trace.filtered_covs,
                trace.increments,
            )
            trace.engines.extend(["gaussian"] * (t_next - t))
            trace.ensembles.extend([None] * (t_next - t))
            if status == 2:
                raise NumericalError(f"innovation covariance not positive definite at step {t_next}")
            if status == 1:
                trace.status = ABORTED
                break
            t = t_next
            if t < T:
                ens = particles_from_gaussian(trace.filtered(t), n, rng)
                gaussian = False
        else:
            if ens is None:
                start = z0_sampler(n, rng) if z0_sampler is not None else particles_from_gaussian(initial, n, rng).particles
                ens = ParticleEnsemble.uniform(start)
            t, ens, aborted = _pf_segment(ens, transitions, obs, ys, t, rng, trace, scheme, policy=leave_particles)
            if aborted:
                trace.status = ZERO_WEIGHTS
                break
            if t < T:
                belief = moments_from_particles(ens)
                gaussian = True
    return trace
