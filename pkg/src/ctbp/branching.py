"""Continuous-time multitype branching processes.

A process has ``r`` agent types. A type-``i`` agent lives for an
exponential time with rate ``omega[i]`` and on death is replaced by an
offspring vector drawn from a finite progeny list. Types may also receive
Poisson immigration at constant rate ``alpha[i]``. Counter types have zero
lifetime rate and are reset to zero at every observation boundary so that
they record incidence over one step.

One-step mean and variance are linear in the state::

    E[z_{t+s} | z_t]   = z_t F,                 F = expm(Omega s)
    Var(z_{t+s} | z_t) = sum_i z_{t,i} V_i

where the ``V_i`` come from the upper-right block of the exponential of
``[[Omega^T (+) Omega^T, C], [0, Omega^T]] s``.
"""

from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import DimensionError, InvalidInputError, NumericalError
from .linalg import expm_kernel, kron_sum_kernel

__all__ = [
    "BranchingModel",
    "MomentOperators",
    "build_omega",
    "augment_immigration",
    "build_variance_source",
    "compute_moment_operators",
    "conditional_mean",
    "conditional_var",
    "simulate",
    "simulate_events",
    "CtbpTransition",
]


@dataclass(frozen=True, eq=False)
class BranchingModel:
    """Full specification of a CTBP.

    Parameters
    ----------
    omega : array_like, shape (r,)
        Lifetime rates.
    progeny : sequence of sequences of (offspring, probability)
        ``progeny[i]`` lists the possible offspring vectors of a dying
        type-``i`` agent with their probabilities. Ignored when
        ``omega[i] == 0``.
    alpha : array_like, shape (r,), optional
        Immigration rates, zero by default.
    counter_types : iterable of int, optional
        Zero-based indices of counter types.
    """

    omega: np.ndarray
    progeny: tuple
    alpha: np.ndarray = None
    counter_types: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float).ravel()
        r = omega.size
        if r == 0:
            raise DimensionError("a branching model needs at least one type")
        if not np.all(np.isfinite(omega)) or np.any(omega < 0):
            raise InvalidInputError("lifetime rates must be finite and non-negative")
        alpha = np.zeros(r) if self.alpha is None else np.asarray(self.alpha, dtype=float).ravel()
        if alpha.size != r:
            raise DimensionError(f"alpha has {alpha.size} entries, expected {r}")
        if not np.all(np.isfinite(alpha)) or np.any(alpha < 0):
            raise InvalidInputError("immigration rates must be finite and non-negative")
        if len(self.progeny) != r:
            raise DimensionError(f"progeny has {len(self.progeny)} entries, expected {r}")

        offspring, probs = [], []
        for i, outcomes in enumerate(self.progeny):
            js = np.array([np.asarray(j, dtype=np.int64) for j, _ in outcomes], dtype=np.int64).reshape(-1, r)
            ps = np.array([p for _, p in outcomes], dtype=float)
            if np.any(js < 0):
                raise InvalidInputError(f"type {i} has a negative offspring count")
            if omega[i] > 0:
                if ps.size == 0:
                    raise InvalidInputError(f"type {i} has positive lifetime rate but no progeny outcomes")
                if np.any(ps < 0) or np.any(ps > 1):
                    raise InvalidInputError(f"type {i} has probabilities outside [0, 1]")
                if abs(ps.sum() - 1.0) > 1e-12:
                    raise InvalidInputError(f"type {i} progeny probabilities sum to {ps.sum()!r}")
            offspring.append(js)
            probs.append(ps)

        counters = frozenset(int(k) for k in self.counter_types)
        for k in counters:
            if not 0 <= k < r:
                raise InvalidInputError(f"counter type {k} out of range for r={r}")
            if omega[k] != 0:
                raise InvalidInputError(f"counter type {k} must have zero lifetime rate")

        omega.setflags(write=False)
        alpha.setflags(write=False)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "counter_types", counters)
        object.__setattr__(self, "_offspring", tuple(offspring))
        object.__setattr__(self, "_probs", tuple(probs))

    @property
    def r(self):
        return self.omega.size

    @property
    def offspring(self):
        """Per-type integer arrays of offspring vectors, shape (m_i, r)."""
        return self._offspring

    @property
    def probabilities(self):
        return self._probs

    @property
    def counter_mask(self):
        mask = np.zeros(self.r, dtype=np.bool_)
        mask[list(self.counter_types)] = True
        return mask

    def mean_offspring(self):
        """Matrix ``f`` with ``f[i, k]`` the expected type-k progeny of a type-i death."""
        f = np.zeros((self.r, self.r))
        for i in range(self.r):
            if self._probs[i].size:
                f[i] = self._probs[i] @ self._offspring[i]
        return f

    def _flat_tables(self):
        # offsets into a flat outcome table used by the simulation kernels
        sizes = [p.size if self.omega[i] > 0 else 0 for i, p in enumerate(self._probs)]
        offsets = np.zeros(self.r + 1, dtype=np.int64)
        offsets[1:] = np.cumsum(sizes)
        total = int(offsets[-1])
        table = np.zeros((max(total, 1), self.r), dtype=np.int64)
        cum = np.ones(max(total, 1))
        for i in range(self.r):
            if sizes[i]:
                lo, hi = offsets[i], offsets[i + 1]
                table[lo:hi] = self._offspring[i]
                c = np.cumsum(self._probs[i])
                c[-1] = 1.0
                cum[lo:hi] = c
        alpha_total = float(self.alpha.sum())
        alpha_cum = np.cumsum(self.alpha) / alpha_total if alpha_total > 0 else np.ones(self.r)
        return offsets, table, cum, alpha_cum


@dataclass(frozen=True, eq=False)
class MomentOperators:
    """One-step mean and variance operators.

    Attributes
    ----------
    F : ndarray, shape (r, r)
        Mean operator, ``E[z_{t+step} | z_t] = z_t F``.
    V : ndarray, shape (r, r, r)
        ``V[i]`` is the variance after ``step`` from one type-i agent.
    step : float
    counter_types : tuple of int
        Coordinates reset to zero at the start of each step.
    noise : ndarray or None
        Optional additive state-independent covariance. CTBP operators never
        set it; it lets the filters run plain linear-Gaussian models.
    """

    F: np.ndarray
    V: np.ndarray
    step: float = 1.0
    counter_types: tuple = ()
    noise: np.ndarray = None

    @property
    def r(self):
        return self.F.shape[0]

    @property
    def noise_matrix(self):
        return np.zeros((self.r, self.r)) if self.noise is None else self.noise


def build_omega(model):
    """Characteristic matrix ``Omega = diag(omega) (f - I)``."""
    f = model.mean_offspring()
    return model.omega[:, None] * (f - np.eye(model.r))


def augment_immigration(model):
    """Replace constant immigration by an extra always-present type.

    The new last type has lifetime rate ``sum(alpha)`` and on death replaces
    itself and adds one type-i agent with probability ``alpha_i / sum(alpha)``.
    Its initial count must be pinned to 1 by the caller.
    """
    total = float(model.alpha.sum())
    if total == 0.0:
        return model
    r = model.r
    progeny = []
    for i in range(r):
        outcomes = [(tuple(j) + (0,), p) for j, p in zip(model.offspring[i], model.probabilities[i])]
        progeny.append(outcomes)
    imm = []
    for i in range(r):
        if model.alpha[i] > 0:
            j = [0] * (r + 1)
            j[i] = 1
            j[r] = 1
            imm.append((tuple(j), model.alpha[i] / total))
    progeny.append(imm)
    return BranchingModel(
        omega=np.append(model.omega, total),
        progeny=tuple(progeny),
        alpha=np.zeros(r + 1),
        counter_types=model.counter_types,
    )


def build_variance_source(model):
    """The ``r^2 x r`` matrix whose column ``i`` is ``vec(C_i)``.

    ``C_i = omega_i * sum_j (j - u_i)^T (j - u_i) p_{i,j}``.
    """
    r = model.r
    c = np.zeros((r * r, r))
    for i in range(r):
        if model.omega[i] == 0 or model.probabilities[i].size == 0:
            continue
        d = model.offspring[i].astype(float)
        d[:, i] -= 1.0
        ci = model.omega[i] * (d.T * model.probabilities[i]) @ d
        c[:, i] = ci.reshape(-1, order="F")
    return c


@numba.njit(cache=True)
def moment_kernel(omega_mat, source, step):
    """Return ``(F, V, lower_right)`` for one characteristic matrix."""
    r = omega_mat.shape[0]
    rr = r * r
    ot = np.ascontiguousarray(omega_mat.T)
    block = np.zeros((rr + r, rr + r))
    block[:rr, :rr] = kron_sum_kernel(ot, ot) * step
    block[:rr, rr:] = source * step
    block[rr:, rr:] = ot * step
    big = expm_kernel(block)
    f = expm_kernel(np.ascontiguousarray(omega_mat * step))
    v = np.empty((r, r, r))
    for i in range(r):
        for col in range(r):
            for row in range(r):
                v[i, row, col] = big[col * r + row, rr + i]
        # symmetrize
        for a in range(r):
            for b in range(a + 1, r):
                m = 0.5 * (v[i, a, b] + v[i, b, a])
                v[i, a, b] = m
                v[i, b, a] = m
    lower = np.ascontiguousarray(big[rr:, rr:])
    return f, v, lower


def compute_moment_operators(model, step=1.0, check_tol=1e-8):
    """One-step operators ``F`` and ``V_1..V_r`` for ``model``.

    The model must already be immigration-augmented if it has immigration.
    """
    if not step > 0:
        raise InvalidInputError(f"step must be positive, got {step}")
    if model.alpha.sum() > 0:
        raise InvalidInputError("augment_immigration must be applied before computing moment operators")
    omega_mat = np.ascontiguousarray(build_omega(model))
    source = np.ascontiguousarray(build_variance_source(model))
    f, v, lower = moment_kernel(omega_mat, source, float(step))
    if not np.all(np.isfinite(f)) or not np.all(np.isfinite(v)):
        raise NumericalError("matrix exponential produced non-finite entries")
    scale = max(1.0, float(np.abs(f).max()))
    if np.abs(lower - f.T).max() > check_tol * scale:
        raise NumericalError("block exponential disagrees with the mean operator")
    return MomentOperators(F=f, V=v, step=float(step), counter_types=tuple(sorted(model.counter_types)))


def conditional_mean(z, ops):
    """``E[z_{t+1} | z_t = z] = z F``."""
    z = np.asarray(z, dtype=float)
    if z.shape != (ops.r,):
        raise DimensionError(f"state has shape {z.shape}, expected ({ops.r},)")
    return z @ ops.F


def conditional_var(z, ops):
    """``Var(z_{t+1} | z_t = z) = sum_i z_i V_i``."""
    z = np.asarray(z, dtype=float)
    if z.shape != (ops.r,):
        raise DimensionError(f"state has shape {z.shape}, expected ({ops.r},)")
    out = np.tensordot(z, ops.V, axes=1) + ops.noise_matrix
    return 0.5 * (out + out.T)


@numba.njit(cache=True)
def _advance(z, t0, t1, omega, alpha, alpha_total, alpha_cum, offsets, table, cum, deaths, rng):
    # Gillespie direct method on [t0, t1); mutates z and deaths in place.
    r = z.shape[0]
    t = t0
    while True:
        total = alpha_total
        for i in range(r):
            total += omega[i] * z[i]
        if total <= 0.0:
            return
        t += rng.standard_exponential() / total
        if t >= t1:
            return
        u = rng.random() * total
        if u < alpha_total:
            v = u / alpha_total
            k = 0
            while k < r - 1 and alpha_cum[k] <= v:
                k += 1
            z[k] += 1
            continue
        u -= alpha_total
        i = 0
        acc = omega[0] * z[0]
        while acc <= u and i < r - 1:
            i += 1
            acc += omega[i] * z[i]
        # guard against rounding landing on an empty type
        while z[i] == 0 or omega[i] == 0.0:
            i -= 1
        deaths[i] += 1
        w = rng.random()
        k = offsets[i]
        while k < offsets[i + 1] - 1 and cum[k] <= w:
            k += 1
        z[i] -= 1
        for m in range(r):
            z[m] += table[k, m]


@numba.njit(cache=True)
def _simulate_grid(z0, grid, counter_mask, omega, alpha, alpha_total, alpha_cum, offsets, table, cum, rng):
    r = z0.shape[0]
    out = np.empty((grid.shape[0], r), dtype=np.int64)
    deaths = np.zeros((grid.shape[0], r), dtype=np.int64)
    z = z0.copy()
    t = 0.0
    for g in range(grid.shape[0]):
        _advance(z, t, grid[g], omega, alpha, alpha_total, alpha_cum, offsets, table, cum, deaths[g], rng)
        t = grid[g]
        out[g] = z
        for m in range(r):
            if counter_mask[m]:
                z[m] = 0
    return out, deaths


@numba.njit(cache=True)
def propagate_kernel(particles, step, counter_mask, omega, alpha, alpha_total, alpha_cum, offsets, table, cum, rng):
    """Advance every row of ``particles`` by ``step`` after zeroing counters."""
    n, r = particles.shape
    out = particles.copy()
    deaths = np.zeros(r, dtype=np.int64)
    for p in range(n):
        for m in range(r):
            if counter_mask[m]:
                out[p, m] = 0
        _advance(out[p], 0.0, step, omega, alpha, alpha_total, alpha_cum, offsets, table, cum, deaths, rng)
    return out


@numba.njit(cache=True)
def _event_log(z0, horizon, omega, alpha, alpha_total, alpha_cum, offsets, table, cum, max_events, rng):
    r = z0.shape[0]
    times = np.empty(max_events)
    types = np.empty(max_events, dtype=np.int64)
    z = z0.copy()
    deaths = np.zeros(r, dtype=np.int64)
    before = np.zeros(r, dtype=np.int64)
    t = 0.0
    count = 0
    while count < max_events:
        total = alpha_total
        for i in range(r):
            total += omega[i] * z[i]
        if total <= 0.0:
            break
        dt = rng.standard_exponential() / total
        if t + dt >= horizon:
            break
        t += dt
        u = rng.random() * total
        if u < alpha_total:
            v = u / alpha_total
            k = 0
            while k < r - 1 and alpha_cum[k] <= v:
                k += 1
            z[k] += 1
            times[count] = t
            types[count] = -1 - k
            count += 1
            continue
        u -= alpha_total
        i = 0
        acc = omega[0] * z[0]
        while acc <= u and i < r - 1:
            i += 1
            acc += omega[i] * z[i]
        while z[i] == 0 or omega[i] == 0.0:
            i -= 1
        w = rng.random()
        k = offsets[i]
        while k < offsets[i + 1] - 1 and cum[k] <= w:
            k += 1
        z[i] -= 1
        for m in range(r):
            z[m] += table[k, m]
        times[count] = t
        types[count] = i
        count += 1
    return times[:count], types[:count], z


def _kernel_args(model):
    offsets, table, cum, alpha_cum = model._flat_tables()
    return (
        np.ascontiguousarray(model.omega),
        np.ascontiguousarray(model.alpha),
        float(model.alpha.sum()),
        alpha_cum,
        offsets,
        table,
        cum,
    )


def _as_state(z0, r):
    z = np.asarray(z0)
    if z.shape != (r,):
        raise DimensionError(f"initial state has shape {z.shape}, expected ({r},)")
    if np.any(z < 0) or np.any(np.asarray(z0, dtype=float) != np.round(np.asarray(z0, dtype=float))):
        raise InvalidInputError("initial state must be non-negative integers")
    return z.astype(np.int64)


def simulate(model, z0, grid, rng, horizon=None, return_deaths=False):
    """Exact event-level simulation sampled on an observation grid.

    Parameters
    ----------
    model : BranchingModel
    z0 : array_like of int, shape (r,)
    grid : array_like
        Sorted observation times in ``[0, horizon]``.
    rng : numpy.random.Generator
    horizon : float, optional
        Defaults to ``grid[-1]``.
    return_deaths : bool
        Also return per-interval death counts of each type.

    Returns
    -------
    states : ndarray of int, shape (len(grid), r)
        State at each grid time, recorded before counters are reset.
    deaths : ndarray of int, shape (len(grid), r)
        Only when ``return_deaths``; row ``g`` counts deaths in
        ``(grid[g-1], grid[g]]``.
    """
    z = _as_state(z0, model.r)
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size and (np.any(np.diff(grid) < 0) or grid[0] < 0):
        raise InvalidInputError("grid must be sorted and non-negative")
    if horizon is not None and grid.size and grid[-1] > horizon:
        raise InvalidInputError("grid extends past the horizon")
    states, deaths = _simulate_grid(z, grid, model.counter_mask, *_kernel_args(model), rng)
    if return_deaths:
        return states, deaths
    return states


def simulate_events(model, z0, horizon, rng, max_events=1_000_000):
    """Event log of one realization on ``[0, horizon)``.

    Returns ``(times, types, final_state)``. ``types[k] = i`` for a type-i
    death, ``-1 - i`` for an immigration of type ``i``.
    """
    z = _as_state(z0, model.r)
    return _event_log(z, float(horizon), *_kernel_args(model), int(max_events), rng)


class CtbpTransition:
    """Particle propagator advancing states by exact simulation.

    Counter coordinates are zeroed before every step.
    """

    def __init__(self, model, step=1.0):
        self.model = model
        self.step = float(step)
        self._args = _kernel_args(model)
        self._mask = model.counter_mask

    @property
    def r(self):
        return self.model.r

    @property
    def counter_types(self):
        return tuple(sorted(self.model.counter_types))

    def propagate(self, particles, rng):
        particles = np.ascontiguousarray(particles, dtype=np.int64)
        return propagate_kernel(particles, self.step, self._mask, *self._args, rng)
