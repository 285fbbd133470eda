"""Gaussian (Kalman) filtering with branching-process moment propagation.

The one-step predictive law of the state is replaced by a Gaussian with
the exact CTBP mean and covariance::

    mu'    = mu F
    Sigma' = sum_i mu_i V_i + F^T Sigma F

after which the ordinary Kalman update applies. The filter stops with a
log-likelihood of ``-inf`` as soon as a filtered mean has a negative
coordinate, since branching-process states cannot be negative.
"""

from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import DimensionError, InvalidInputError, NumericalError, UnsupportedOperationError
from .linalg import as_matrix, chol_kernel

__all__ = [
    "GaussianBelief",
    "ObservationModel",
    "FilterTrace",
    "predict",
    "update",
    "reset_counters",
    "run_gaussian_filter",
    "rts_smooth",
    "OK",
    "ABORTED",
    "ZERO_WEIGHTS",
]

OK = "ok"
ABORTED = "aborted-negative-mean"
ZERO_WEIGHTS = "aborted-zero-weights"


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    """Mean vector and covariance of the state."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise DimensionError(f"covariance shape {cov.shape} does not match mean of length {mean.size}")
        if np.isnan(mean).any() or np.isnan(cov).any():
            raise InvalidInputError("belief contains NaN")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def point_mass(cls, z0):
        z0 = np.asarray(z0, dtype=float).ravel()
        return cls(z0, np.zeros((z0.size, z0.size)))

    @property
    def r(self):
        return self.mean.size


@dataclass(frozen=True, eq=False)
class ObservationModel:
    """``y_t | z_t ~ N(H z_t^T, R)``."""

    H: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        h = as_matrix(self.H, "H")
        r = as_matrix(np.atleast_2d(self.R), "R")
        if r.shape != (h.shape[0], h.shape[0]):
            raise DimensionError(f"R has shape {r.shape}, expected {(h.shape[0], h.shape[0])}")
        if np.abs(r - r.T).max() > 1e-10 * max(1.0, np.abs(r).max()):
            raise InvalidInputError("R must be symmetric")
        if np.linalg.eigvalsh(r).min() < -1e-10 * max(1.0, np.abs(r).max()):
            raise InvalidInputError("R must be positive semidefinite")
        object.__setattr__(self, "H", h)
        object.__setattr__(self, "R", r)

    @property
    def d(self):
        return self.H.shape[0]

    @property
    def joseph(self):
        return bool(np.any(np.diag(self.R) == 0.0))


@dataclass(eq=False)
class FilterTrace:
    """Per-step output of any of the filters.

    Arrays are indexed by step ``t = 1..T`` at position ``t - 1``. Only the
    first ``steps`` rows are meaningful when the run aborted early.
    """

    predicted_means: np.ndarray
    predicted_covs: np.ndarray
    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    increments: np.ndarray
    engines: list
    status: str = OK
    ensembles: list = field(default_factory=list)

    @property
    def steps(self):
        return len(self.engines)

    @property
    def loglik(self):
        return float(np.sum(self.increments[: self.steps]))

    def filtered(self, t):
        """Filtered belief at 1-based step ``t``."""
        return GaussianBelief(self.filtered_means[t - 1], self.filtered_covs[t - 1])

    def predicted(self, t):
        return GaussianBelief(self.predicted_means[t - 1], self.predicted_covs[t - 1])


def _empty_trace(T, r):
    return FilterTrace(
        predicted_means=np.full((T, r), np.nan),
        predicted_covs=np.full((T, r, r), np.nan),
        filtered_means=np.full((T, r), np.nan),
        filtered_covs=np.full((T, r, r), np.nan),
        increments=np.zeros(T),
        engines=[],
    )


# --------------------------------------------------------------------------
# compiled kernels


@numba.njit(cache=True)
def _symmetrize(a):
    n = a.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            m = 0.5 * (a[i, j] + a[j, i])
            a[i, j] = m
            a[j, i] = m


@numba.njit(cache=True)
def _predict_k(mu, cov, f, v, noise):
    r = mu.shape[0]
    new_mu = np.zeros(r)
    tmp = np.zeros((r, r))
    for i in range(r):
        mi = mu[i]
        for j in range(r):
            new_mu[j] += mi * f[i, j]
            s = 0.0
            for k in range(r):
                s += cov[i, k] * f[k, j]
            tmp[i, j] = s
    new_cov = noise.copy()
    for a in range(r):
        for b in range(a, r):
            s = new_cov[a, b]
            for i in range(r):
                s += f[i, a] * tmp[i, b]
                if mu[i] != 0.0:
                    s += mu[i] * v[i, a, b]
            new_cov[a, b] = s
    for a in range(r):
        for b in range(a + 1, r):
            new_cov[b, a] = new_cov[a, b]
    return new_mu, new_cov


@numba.njit(cache=True)
def _repair_psd(cov):
    # cheap path: a jittered Cholesky succeeds when eigenvalues >= -jitter
    n = cov.shape[0]
    scale = 1.0
    for i in range(n):
        if abs(cov[i, i]) > scale:
            scale = abs(cov[i, i])
    jit = cov.copy()
    for i in range(n):
        jit[i, i] += 1e-8 * scale
    work = np.zeros((n, n))
    if chol_kernel(jit, work) == 0:
        return cov
    w, q = np.linalg.eigh(cov)
    for i in range(n):
        if w[i] < 0.0:
            w[i] = 0.0
    out = (q * w) @ q.T
    _symmetrize(out)
    return out


@numba.njit(cache=True)
def _update_k(mu, cov, y, h, rmat, joseph):
    """Return ``(mu', cov', loglik, status)``; status 0 ok, >0 S not PD."""
    r = mu.shape[0]
    d = y.shape[0]
    # ph = Sigma H^T, s = H Sigma H^T + R
    ph = np.zeros((r, d))
    for i in range(r):
        for c in range(d):
            acc = 0.0
            for k in range(r):
                acc += cov[i, k] * h[c, k]
            ph[i, c] = acc
    s = rmat.copy()
    for a in range(d):
        for c in range(d):
            acc = s[a, c]
            for k in range(r):
                acc += h[a, k] * ph[k, c]
            s[a, c] = acc
    lo = np.zeros((d, d))
    info = chol_kernel(s, lo)
    if info != 0:
        return mu, cov, -np.inf, info
    innov = y.copy()
    for a in range(d):
        for k in range(r):
            innov[a] -= h[a, k] * mu[k]
    # kgain^T = S^{-1} ph^T through forward and back substitution
    kt = np.ascontiguousarray(ph.T)
    w = innov.copy()
    for a in range(d):
        for b in range(a):
            w[a] -= lo[a, b] * w[b]
            for i in range(r):
                kt[a, i] -= lo[a, b] * kt[b, i]
        w[a] /= lo[a, a]
        for i in range(r):
            kt[a, i] /= lo[a, a]
    quad = 0.0
    logdet = 0.0
    for a in range(d):
        quad += w[a] * w[a]
        logdet += 2.0 * np.log(lo[a, a])
    for a in range(d - 1, -1, -1):
        for b in range(a + 1, d):
            for i in range(r):
                kt[a, i] -= lo[b, a] * kt[b, i]
        for i in range(r):
            kt[a, i] /= lo[a, a]
    ll = -0.5 * (d * np.log(2.0 * np.pi) + logdet + quad)
    new_mu = mu.copy()
    for i in range(r):
        for a in range(d):
            new_mu[i] += kt[a, i] * innov[a]
    # I - K H
    ikh = np.eye(r)
    for i in range(r):
        for j in range(r):
            for a in range(d):
                ikh[i, j] -= kt[a, i] * h[a, j]
    new_cov = np.zeros((r, r))
    if joseph:
        tmp = np.zeros((r, r))
        for i in range(r):
            for j in range(r):
                acc = 0.0
                for k in range(r):
                    acc += ikh[i, k] * cov[k, j]
                tmp[i, j] = acc
        kr = np.zeros((r, d))
        for i in range(r):
            for c in range(d):
                acc = 0.0
                for a in range(d):
                    acc += kt[a, i] * rmat[a, c]
                kr[i, c] = acc
        for i in range(r):
            for j in range(i, r):
                acc = 0.0
                for k in range(r):
                    acc += tmp[i, k] * ikh[j, k]
                for c in range(d):
                    acc += kr[i, c] * kt[c, j]
                new_cov[i, j] = acc
                new_cov[j, i] = acc
    else:
        for i in range(r):
            for j in range(i, r):
                acc = 0.0
                for k in range(r):
                    acc += ikh[i, k] * cov[k, j]
                new_cov[i, j] = acc
        for i in range(r):
            for j in range(i + 1, r):
                new_cov[j, i] = new_cov[i, j]
    new_cov = _repair_psd(new_cov)
    return new_mu, new_cov, ll, 0


@numba.njit(cache=True)
def _reset_k(mu, cov, counter_mask):
    r = mu.shape[0]
    for i in range(r):
        if counter_mask[i]:
            mu[i] = 0.0
            for j in range(r):
                cov[i, j] = 0.0
                cov[j, i] = 0.0


@numba.njit(cache=True)
def _gaussian_segment(
    mu0, cov0, t0, f_stack, v_stack, n_stack, widx, counter_mask, h, rmat, joseph, ys,
    threshold, policy_mask, abort_negative, pm, pc, fm, fc, inc,
):
    """Run Gaussian steps from ``t0`` while the switch policy allows.

    Returns ``(next_t, status)`` with status 0 = finished or policy left the
    Gaussian regime, 1 = negative-mean abort, 2 = innovation covariance not
    positive definite. On abort the failing step is recorded.
    """
    T = ys.shape[0]
    mu = mu0.copy()
    cov = cov0.copy()
    _reset_k(mu, cov, counter_mask)
    t = t0
    while t < T:
        w = widx[t]
        mu, cov = _predict_k(mu, cov, f_stack[w], v_stack[w], n_stack[w])
        pm[t] = mu
        pc[t] = cov
        mu, cov, ll, info = _update_k(mu, cov, ys[t], h, rmat, joseph)
        if info != 0:
            inc[t] = -np.inf
            return t + 1, 2
        fm[t] = mu
        fc[t] = cov
        inc[t] = ll
        t += 1
        if abort_negative:
            for i in range(mu.shape[0]):
                if mu[i] < 0.0:
                    inc[t - 1] = -np.inf
                    return t, 1
        lowest = np.inf
        for i in range(mu.shape[0]):
            if policy_mask[i] and mu[i] < lowest:
                lowest = mu[i]
        _reset_k(mu, cov, counter_mask)
        if lowest < threshold:
            return t, 0
    return t, 0


# --------------------------------------------------------------------------
# public API


def _per_step(ops, T):
    if isinstance(ops, (list, tuple)):
        if len(ops) != T:
            raise DimensionError(f"got {len(ops)} operator sets for {T} steps")
        return list(ops)
    return [ops] * T


def stack_operators(ops_seq):
    """Deduplicate a per-step operator list into stacked arrays and an index."""
    unique, index, seen = [], [], {}
    for o in ops_seq:
        key = id(o)
        if key not in seen:
            seen[key] = len(unique)
            unique.append(o)
        index.append(seen[key])
    f = np.ascontiguousarray(np.stack([o.F for o in unique]), dtype=float)
    v = np.ascontiguousarray(np.stack([o.V for o in unique]), dtype=float)
    n = np.ascontiguousarray(np.stack([o.noise_matrix for o in unique]), dtype=float)
    return f, v, n, np.asarray(index, dtype=np.int64)


def _counter_mask(r, counter_types):
    mask = np.zeros(r, dtype=np.bool_)
    mask[list(counter_types)] = True
    return mask


def _as_series(ys, d):
    ys = np.asarray(ys, dtype=float)
    if ys.ndim == 1:
        ys = ys.reshape(-1, 1) if d == 1 else ys.reshape(1, -1)
    if ys.ndim != 2 or ys.shape[1] != d:
        raise DimensionError(f"observations must have {d} columns, got shape {ys.shape}")
    if np.isnan(ys).any():
        raise InvalidInputError("observation series contains NaN")
    return np.ascontiguousarray(ys)


def predict(belief, ops):
    """Propagate a belief through one step of the moment operators."""
    if belief.r != ops.r:
        raise DimensionError(f"belief has {belief.r} types, operators have {ops.r}")
    mu, cov = _predict_k(
        np.ascontiguousarray(belief.mean),
        np.ascontiguousarray(belief.cov),
        np.ascontiguousarray(ops.F, dtype=float),
        np.ascontiguousarray(ops.V, dtype=float),
        np.ascontiguousarray(ops.noise_matrix, dtype=float),
    )
    return GaussianBelief(mu, cov)


def update(belief, y, obs):
    """Kalman update; returns ``(posterior belief, log-likelihood increment)``."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if np.isnan(y).any():
        raise InvalidInputError("observation contains NaN")
    if y.shape != (obs.d,):
        raise DimensionError(f"observation has shape {y.shape}, expected ({obs.d},)")
    if obs.H.shape[1] != belief.r:
        raise DimensionError("H does not match the state dimension")
    mu, cov, ll, info = _update_k(
        np.ascontiguousarray(belief.mean),
        np.ascontiguousarray(belief.cov),
        y,
        np.ascontiguousarray(obs.H),
        np.ascontiguousarray(obs.R),
        obs.joseph,
    )
    if info != 0:
        raise NumericalError(f"innovation covariance is not positive definite (minor {info})", minor=int(info))
    return GaussianBelief(mu, cov), float(ll)


def reset_counters(belief, counter_types):
    """Zero the mean and covariance row/column of every counter coordinate."""
    mu = belief.mean.copy()
    cov = belief.cov.copy()
    _reset_k(mu, cov, _counter_mask(belief.r, counter_types))
    return GaussianBelief(mu, cov)


def run_gaussian_filter(ops, obs, initial, ys, abort_negative=True):
    """Filter a whole series with the Gaussian approximation.

    Parameters
    ----------
    ops : MomentOperators or sequence of MomentOperators
        One set for all steps, or one per step.
    obs : ObservationModel
    initial : GaussianBelief
        Belief about the state at time 0.
    ys : array_like, shape (T, d)
    abort_negative : bool
        Stop with ``-inf`` log-likelihood when a filtered mean goes negative.

    Returns
    -------
    FilterTrace
    """
    ys = _as_series(ys, obs.d)
    T = ys.shape[0]
    if T < 1:
        raise InvalidInputError("need at least one observation")
    seq = _per_step(ops, T)
    r = initial.r
    if seq[0].r != r or obs.H.shape[1] != r:
        raise DimensionError("initial belief, operators and H disagree on the number of types")
    trace = _empty_trace(T, r)
    f, v, n, widx = stack_operators(seq)
    mask = _counter_mask(r, seq[0].counter_types)
    t, status = _gaussian_segment(
        initial.mean, np.ascontiguousarray(initial.cov), 0, f, v, n, widx, mask,
        np.ascontiguousarray(obs.H), np.ascontiguousarray(obs.R), obs.joseph, ys,
        -np.inf, np.ones(r, dtype=np.bool_), abort_negative,
        trace.predicted_means, trace.predicted_covs, trace.filtered_means, trace.filtered_covs, trace.increments,
    )
    trace.engines = ["gaussian"] * t
    if status == 2:
        raise NumericalError(f"innovation covariance not positive definite at step {t}")
    if status == 1:
        trace.status = ABORTED
    return trace


def gaussian_loglik_fast(f, v, n, widx, counter_mask, h, rmat, joseph, mu0, cov0, ys, work):
    """Total log-likelihood only, reusing preallocated work arrays.

    ``work`` is the tuple ``(pm, pc, fm, fc, inc)`` sized for ``ys``. Used by
    MCMC loops where trace construction would dominate the cost.
    """
    pm, pc, fm, fc, inc = work
    r = mu0.shape[0]
    t, status = _gaussian_segment(
        mu0, cov0, 0, f, v, n, widx, counter_mask, h, rmat, joseph, ys,
        -np.inf, np.ones(r, dtype=np.bool_), True, pm, pc, fm, fc, inc,
    )
    if status != 0:
        return -np.inf
    return float(inc.sum())


def rts_smooth(trace, ops):
    """Fixed-interval smoother over a Gaussian-only trace.

    Returns a list of smoothed :class:`GaussianBelief` for ``t = 1..T``.
    """
    if any(e != "gaussian" for e in trace.engines):
        raise UnsupportedOperationError("smoothing through particle-filter steps is not supported")
    if trace.status != OK:
        raise UnsupportedOperationError("cannot smooth an aborted trace")
    T = trace.steps
    seq = _per_step(ops, T)
    r = trace.filtered_means.shape[1]
    keep = ~_counter_mask(r, seq[0].counter_types)
    sm_mean = trace.filtered_means[T - 1].copy()
    sm_cov = trace.filtered_covs[T - 1].copy()
    out = [GaussianBelief(sm_mean, sm_cov)]
    for t in range(T - 2, -1, -1):
        mean_t = trace.filtered_means[t]
        cov_t = trace.filtered_covs[t]
        pred_mean = trace.predicted_means[t + 1]
        pred_cov = trace.predicted_covs[t + 1]
        f = seq[t + 1].F
        # counters are zeroed before the next step, so only the other
        # coordinates drive z_{t+1}
        cross = cov_t[:, keep] @ f[keep, :]
        gain = np.linalg.lstsq(pred_cov.T, cross.T, rcond=None)[0].T
        sm_mean = mean_t + gain @ (sm_mean - pred_mean)
        sm_cov = cov_t + gain @ (sm_cov - pred_cov) @ gain.T
        sm_cov = 0.5 * (sm_cov + sm_cov.T)
        out.append(GaussianBelief(sm_mean, sm_cov))
    out.reverse()
    return out
