"""Priors, adaptive random-walk Metropolis-Hastings and chain diagnostics."""

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .branching import simulate
from .errors import DimensionError, InvalidInputError, NumericalError

__all__ = [
    "Gamma",
    "MultivariateNormal",
    "GaussianProcessGrid",
    "Flat",
    "PriorSpec",
    "ParameterSpace",
    "log_prior",
    "MHConfig",
    "ChainTrace",
    "mh_run",
    "ess",
    "rhat",
    "posterior_predictive",
]


# --------------------------------------------------------------------------
# priors; every ``logpdf`` takes values on the natural scale


@dataclass(frozen=True)
class Gamma:
    """Independent Gamma(shape, scale) on each covered coordinate."""

    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise InvalidInputError("gamma shape and scale must be positive")

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            return -np.inf
        return float(np.sum(stats.gamma.logpdf(x, self.shape, scale=self.scale)))

    def sample(self, rng, size=None):
        return rng.gamma(self.shape, self.scale, size=size)


@dataclass(frozen=True, eq=False)
class MultivariateNormal:
    """Gaussian prior, optionally truncated below at ``lower`` (unnormalised)."""

    mean: np.ndarray
    cov: np.ndarray
    lower: np.ndarray = None

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise DimensionError("covariance does not match the mean")
        if np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() <= 0:
            raise InvalidInputError("prior covariance must be positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_dist", stats.multivariate_normal(mean, cov))
        if self.lower is not None:
            object.__setattr__(self, "lower", np.broadcast_to(np.asarray(self.lower, dtype=float), mean.shape))

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.lower is not None and np.any(x < self.lower):
            return -np.inf
        return float(self._dist.logpdf(x))

    def sample(self, rng, size=None):
        return rng.multivariate_normal(self.mean, self.cov, size=size)


@dataclass(frozen=True, eq=False)
class GaussianProcessGrid:
    """Gaussian process on ``log x`` at fixed grid times.

    ``cov(log x_m, log x_n) = variance * exp(-|t_m - t_n| / length_scale)``.
    ``logpdf`` is the density of ``x`` itself, so it includes the
    ``-sum(log x)`` change-of-variables term.
    """

    variance: float
    length_scale: float
    times: np.ndarray
    mean: float = 0.0

    def __post_init__(self):
        if not (self.variance > 0 and self.length_scale > 0):
            raise InvalidInputError("GP variance and length scale must be positive")
        times = np.asarray(self.times, dtype=float).ravel()
        object.__setattr__(self, "times", times)
        cov = self.covariance()
        object.__setattr__(self, "_dist", stats.multivariate_normal(np.full(times.size, self.mean), cov))

    def covariance(self):
        gap = np.abs(self.times[:, None] - self.times[None, :])
        return self.variance * np.exp(-gap / self.length_scale)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            return -np.inf
        logx = np.log(x)
        return float(self._dist.logpdf(logx) - logx.sum())

    def sample(self, rng, size=None):
        return np.exp(rng.multivariate_normal(np.full(self.times.size, self.mean), self.covariance(), size=size))


@dataclass(frozen=True)
class Flat:
    """Improper uniform prior, optionally restricted to ``x > lower``."""

    lower: float = -np.inf

    def logpdf(self, x):
        return -np.inf if np.any(np.asarray(x) <= self.lower) else 0.0


@dataclass(frozen=True)
class PriorSpec:
    """Independent prior blocks, each covering a list of coordinates.

    Parameters
    ----------
    blocks : sequence of (indices, distribution)
    dim : int
    """

    blocks: tuple
    dim: int

    def __post_init__(self):
        seen = []
        blocks = []
        for idx, dist in self.blocks:
            idx = tuple(int(i) for i in np.atleast_1d(idx))
            seen.extend(idx)
            blocks.append((idx, dist))
        if sorted(seen) != list(range(self.dim)):
            raise InvalidInputError("prior blocks must cover every coordinate exactly once")
        object.__setattr__(self, "blocks", tuple(blocks))


@dataclass(frozen=True)
class ParameterSpace:
    """Names and per-coordinate sampling transforms (``identity`` or ``log``)."""

    names: tuple
    transforms: tuple = None

    def __post_init__(self):
        names = tuple(self.names)
        transforms = ("identity",) * len(names) if self.transforms is None else tuple(self.transforms)
        if len(transforms) != len(names):
            raise DimensionError("one transform per parameter is required")
        for tf in transforms:
            if tf not in ("identity", "log"):
                raise InvalidInputError(f"unknown transform {tf!r}")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "transforms", transforms)
        object.__setattr__(self, "_log", np.array([tf == "log" for tf in transforms]))

    @property
    def dim(self):
        return len(self.names)

    def to_natural(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(self._log, np.exp(np.where(self._log, x, 0.0)), x)

    def to_sampling(self, theta):
        theta = np.asarray(theta, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self._log, np.log(np.where(self._log, theta, 1.0)), theta)

    def log_jacobian(self, x):
        """``log |d theta / d x|`` at sampling-scale point ``x``."""
        return float(np.sum(np.asarray(x, dtype=float)[..., self._log], axis=-1))


def log_prior(x, prior, space=None):
    """Log prior density at sampling-scale point ``x``.

    Includes the Jacobian of every log-scale coordinate. Returns ``-inf``
    outside the support.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (prior.dim,):
        raise DimensionError(f"parameter has shape {x.shape}, prior expects ({prior.dim},)")
    theta = x if space is None else space.to_natural(x)
    total = 0.0 if space is None else space.log_jacobian(x)
    for idx, dist in prior.blocks:
        lp = dist.logpdf(theta[list(idx)])
        if lp == -np.inf:
            return -np.inf
        total += lp
    return float(total)


# --------------------------------------------------------------------------
# Metropolis-Hastings


@dataclass(frozen=True)
class MHConfig:
    """Chain length and adaptation schedule.

    ``steps`` counts every iteration including burn-in. During burn-in the
    proposal covariance is replaced every ``adapt_window`` steps by
    ``scale`` times the empirical covariance of the last ``adapt_window``
    states. ``scale`` defaults to ``2.38**2 / dim``.
    """

    steps: int = 81920
    burn_in: int = 20480
    adapt_window: int = 4096
    scale: float = None
    initial_cov: np.ndarray = None

    def __post_init__(self):
        if not self.steps > self.burn_in:
            raise InvalidInputError("steps must exceed burn_in")
        if self.adapt_window < 2:
            raise InvalidInputError("adapt_window must be at least 2")
        if self.burn_in < self.adapt_window and self.burn_in != 0:
            raise InvalidInputError("burn_in must be zero or at least one adapt window")


@dataclass(eq=False)
class ChainTrace:
    """Post-burn-in output of one chain.

    ``samples`` are on the natural scale; ``raw`` on the sampling scale.
    ``cov_history`` lists ``(step, proposal covariance)`` pairs, starting
    with the initial proposal at step 0.
    """

    names: tuple
    samples: np.ndarray
    raw: np.ndarray
    logliks: np.ndarray
    logposts: np.ndarray
    accepted: np.ndarray
    cov_history: list
    burn_in: int
    seconds: float = 0.0
    burn_accepted: np.ndarray = field(default=None, repr=False)

    @property
    def acceptance_rate(self):
        return float(np.mean(self.accepted)) if self.accepted.size else 0.0


def mh_run(loglik, prior, x0, config, rng, space=None):
    """Adaptive Gaussian random-walk Metropolis-Hastings.

    Parameters
    ----------
    loglik : callable
        Natural-scale parameter vector to log-likelihood. May be a noisy
        unbiased estimate (PMMH); the current state's estimate is kept.
        Must return a float or ``-inf``; ``NaN`` raises.
    prior : PriorSpec
    x0 : array_like
        Starting point on the natural scale.
    config : MHConfig
    rng : numpy.random.Generator
    space : ParameterSpace, optional

    Returns
    -------
    ChainTrace
    """
    space = ParameterSpace(tuple(f"theta{i}" for i in range(prior.dim))) if space is None else space
    dim = space.dim
    if dim != prior.dim:
        raise DimensionError("parameter space and prior disagree on the dimension")
    scale = 2.38**2 / dim if config.scale is None else float(config.scale)
    prop_cov = 0.01 * np.eye(dim) if config.initial_cov is None else np.atleast_2d(np.asarray(config.initial_cov, float))
    prop_chol = np.linalg.cholesky(prop_cov)

    def evaluate(x):
        lp = log_prior(x, prior, space)
        if lp == -np.inf:
            return -np.inf, -np.inf
        ll = loglik(space.to_natural(x))
        if ll is None or np.isnan(ll):
            raise NumericalError(f"likelihood engine returned NaN at {space.to_natural(x)}")
        ll = float(ll)
        if ll == np.inf:
            raise NumericalError("likelihood engine returned +inf")
        return ll, lp + ll

    x = space.to_sampling(np.atleast_1d(np.asarray(x0, dtype=float)))
    cur_ll, cur_lp = evaluate(x)
    if cur_lp == -np.inf:
        raise InvalidInputError("the starting point has zero posterior density")

    steps, burn = config.steps, config.burn_in
    keep = steps - burn
    raw = np.empty((keep, dim))
    logliks = np.empty(keep)
    logposts = np.empty(keep)
    accepted = np.zeros(keep, dtype=bool)
    burn_acc = np.zeros(burn, dtype=bool)
    window = np.empty((config.adapt_window, dim))
    history = [(0, prop_cov.copy())]

    start = time.perf_counter()
    for k in range(steps):
        proposal = x + prop_chol @ rng.standard_normal(dim)
        log_u = np.log(rng.random())
        prop_ll, prop_lp = evaluate(proposal)
        move = prop_lp > -np.inf and log_u < prop_lp - cur_lp
        if move:
            x, cur_ll, cur_lp = proposal, prop_ll, prop_lp
        if k < burn:
            burn_acc[k] = move
            window[k % config.adapt_window] = x
            if (k + 1) % config.adapt_window == 0:
                emp = np.atleast_2d(np.cov(window, rowvar=False))
                new_cov = scale * emp
                try:
                    prop_chol = np.linalg.cholesky(new_cov)
                    prop_cov = new_cov
                    history.append((k + 1, prop_cov.copy()))
                except np.linalg.LinAlgError:
                    pass
        else:
            j = k - burn
            raw[j] = x
            logliks[j] = cur_ll
            logposts[j] = cur_lp
            accepted[j] = move
    seconds = time.perf_counter() - start
    return ChainTrace(
        names=space.names,
        samples=space.to_natural(raw),
        raw=raw,
        logliks=logliks,
        logposts=logposts,
        accepted=accepted,
        cov_history=history,
        burn_in=burn,
        seconds=seconds,
        burn_accepted=burn_acc,
    )


# --------------------------------------------------------------------------
# diagnostics


def _autocorr(x):
    n = x.size
    size = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(x - x.mean(), size)
    acov = np.fft.irfft(spec * np.conj(spec), size)[:n] / n
    return acov / acov[0]


def ess(samples):
    """Effective sample size by Geyer's initial monotone sequence estimator.

    Parameters
    ----------
    samples : array_like, shape (S,)

    Returns
    -------
    float
        In ``(0, S]``; ``0`` for a constant series.
    """
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n < 100:
        raise InvalidInputError(f"need at least 100 samples for an ESS estimate, got {n}")
    if np.ptp(x) == 0:
        return 0.0
    rho = _autocorr(x)
    pairs = rho[: 2 * (n // 2)].reshape(-1, 2).sum(axis=1)
    total = 0.0
    running = np.inf
    for g in pairs:
        if g < 0:
            break
        running = min(running, g)
        total += running
    tau = -1.0 + 2.0 * total
    if tau <= 1.0 / n:
        return float(n)
    return float(min(n, n / tau))


def rhat(chains):
    """Split potential scale reduction factor.

    Each chain is cut in half and the halves are treated as separate
    chains, so a single chain is accepted. Values are floored at 1.
    """
    arrs = [np.asarray(c, dtype=float).ravel() for c in chains]
    if not arrs:
        raise InvalidInputError("need at least one chain")
    n = min(a.size for a in arrs)
    if any(a.size != n for a in arrs):
        raise InvalidInputError("chains must have equal length")
    half = n // 2
    if half < 2:
        raise InvalidInputError("chains are too short to split")
    splits = []
    for a in arrs:
        splits.append(a[:half])
        splits.append(a[n - half :])
    if len(splits) < 2:
        raise InvalidInputError("need at least two split chains")
    splits = np.array(splits)
    means = splits.mean(axis=1)
    w = splits.var(axis=1, ddof=1).mean()
    b = half * means.var(ddof=1)
    if w == 0:
        return 1.0 if b == 0 else np.inf
    var_plus = (half - 1) / half * w + b / half
    return float(max(1.0, np.sqrt(var_plus / w)))


def posterior_predictive(builder, samples, z0_sampler, T, reps, rng, observation_noise=True):
    """Simulate observation paths with parameters drawn from posterior samples.

    Parameters
    ----------
    builder : callable
        Parameter row to ``(BranchingModel, ObservationModel)``.
    samples : array_like, shape (S, dim)
    z0_sampler : callable ``(n, rng) -> (n, r)``
    T : int
        Number of unit steps.
    reps : int
    rng : numpy.random.Generator

    Returns
    -------
    ndarray, shape (reps, T, d)
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise InvalidInputError("no posterior samples")
    grid = np.arange(1, T + 1, dtype=float)
    out = None
    for k in range(reps):
        theta = samples[rng.integers(samples.shape[0])]
        model, obs = builder(theta)
        z0 = np.asarray(z0_sampler(1, rng))[0]
        states = simulate(model, z0, grid, rng)
        ys = states @ obs.H.T
        if observation_noise and np.any(obs.R != 0):
            ys = ys + rng.multivariate_normal(np.zeros(obs.d), obs.R, size=T, method="eigh")
        if out is None:
            out = np.empty((reps, T, obs.d))
        out[k] = ys
    return out
