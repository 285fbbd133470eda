"""Epidemic models expressed as branching processes.

Each SEIR-type model carries a counter type that records newly observed
infections (exposed agents becoming infectious, each seen with
probability ``p``); the observation is the counter plus Gaussian noise.
"""

from dataclasses import dataclass

import numba
import numpy as np

from .branching import BranchingModel, MomentOperators, compute_moment_operators, moment_kernel
from .errors import ConfigError, InvalidInputError
from .gaussian import ObservationModel, _gaussian_segment

__all__ = [
    "SeirParams",
    "StagedSeirParams",
    "Window",
    "PiecewiseParams",
    "OperatorCache",
    "build_seir",
    "build_staged_seir",
    "build_piecewise",
    "weekly_windows",
    "seir_operator_stack",
    "PiecewiseSeirLikelihood",
]


@dataclass(frozen=True)
class SeirParams:
    """Rates of the SEIR branching model.

    Parameters
    ----------
    beta : float
        Infection rate of one infectious agent.
    delta : float
        Rate of leaving the exposed state.
    lam : float
        Recovery rate.
    p : float
        Probability that a new infectious case is observed.
    """

    beta: float
    delta: float
    lam: float
    p: float = 0.75

    def __post_init__(self):
        for name in ("beta", "delta", "lam"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise InvalidInputError(f"{name} must be a positive finite rate, got {value}")
        if not 0.0 <= self.p <= 1.0:
            raise InvalidInputError(f"p must lie in [0, 1], got {self.p}")

    @property
    def r0(self):
        return self.beta / self.lam


@dataclass(frozen=True)
class StagedSeirParams:
    """SEIR with Erlang-distributed exposed and infectious periods.

    ``delta`` and ``lam`` are the rates of the whole period; each of the
    ``k_e`` (``k_i``) stages progresses at ``k_e * delta`` (``k_i * lam``).
    """

    beta: float
    delta: float
    lam: float
    p: float = 0.75
    k_e: int = 8
    k_i: int = 8

    def __post_init__(self):
        SeirParams(self.beta, self.delta, self.lam, self.p)
        for name in ("k_e", "k_i"):
            k = getattr(self, name)
            if int(k) != k or k < 1:
                raise InvalidInputError(f"{name} must be a positive integer, got {k}")

    @property
    def stage_delta(self):
        return self.k_e * self.delta

    @property
    def stage_lam(self):
        return self.k_i * self.lam

    @property
    def r0(self):
        return self.beta / self.lam


def _observation(r, counter, obs_var):
    h = np.zeros((1, r))
    h[0, counter] = 1.0
    return ObservationModel(h, np.array([[float(obs_var)]]))


def build_seir(params, obs_var=1.0):
    """Three-type SEIR model (exposed, infectious, observed-case counter).

    Returns
    -------
    model : BranchingModel
    obs : ObservationModel
        ``y_t = counter_t + N(0, obs_var)``.
    """
    b, d, lam, p = params.beta, params.delta, params.lam, params.p
    progeny = (
        (((0, 1, 0), 1.0 - p), ((0, 1, 1), p)),
        (((1, 1, 0), b / (b + lam)), ((0, 0, 0), lam / (b + lam))),
        (),
    )
    model = BranchingModel(omega=(d, b + lam, 0.0), progeny=progeny, counter_types=frozenset({2}))
    return model, _observation(3, 2, obs_var)


def build_staged_seir(params, obs_var=1.0):
    """SEIR with ``k_e`` exposed and ``k_i`` infectious stages plus a counter.

    Types are ordered ``E_1..E_ke, I_1..I_ki, counter``. An infectious agent
    of any stage dies at rate ``beta + k_i * lam``; with probability
    ``beta / (beta + k_i * lam)`` it is replaced by itself and a new ``E_1``,
    otherwise it moves to the next stage (or is removed from the last one).
    """
    ke, ki = int(params.k_e), int(params.k_i)
    r = ke + ki + 1
    counter = r - 1
    b, ds, ls, p = params.beta, params.stage_delta, params.stage_lam, params.p

    def unit(*idx):
        v = [0] * r
        for k in idx:
            v[k] += 1
        return tuple(v)

    progeny = []
    omega = []
    for s in range(ke):
        omega.append(ds)
        if s < ke - 1:
            progeny.append(((unit(s + 1), 1.0),))
        else:
            progeny.append(((unit(ke), 1.0 - p), (unit(ke, counter), p)))
    for s in range(ki):
        i = ke + s
        omega.append(b + ls)
        advance = unit(i + 1) if s < ki - 1 else unit()
        progeny.append(((unit(i, 0), b / (b + ls)), (advance, ls / (b + ls))))
    omega.append(0.0)
    progeny.append(())
    model = BranchingModel(omega=omega, progeny=tuple(progeny), counter_types=frozenset({counter}))
    return model, _observation(r, counter, obs_var)


@dataclass(frozen=True)
class Window:
    """Half-open interval ``[start, end)`` of days with constant rates."""

    start: int
    end: int
    params: SeirParams


@dataclass(frozen=True)
class PiecewiseParams:
    """Windows partitioning ``[0, T)`` into constant-parameter stretches."""

    windows: tuple

    def __post_init__(self):
        ws = tuple(self.windows)
        if not ws:
            raise ConfigError("at least one window is required")
        if ws[0].start != 0:
            raise ConfigError(f"windows must start at day 0, first starts at {ws[0].start}")
        for a, b in zip(ws, ws[1:]):
            if b.start != a.end:
                kind = "gap" if b.start > a.end else "overlap"
                raise ConfigError(f"window {kind} between day {a.end} and day {b.start}")
        for w in ws:
            if w.end <= w.start:
                raise ConfigError(f"empty window [{w.start}, {w.end})")
        object.__setattr__(self, "windows", ws)

    @property
    def T(self):
        return self.windows[-1].end

    def window_index(self):
        """Window number for each unit step ``t = 1..T`` (covering ``(t-1, t]``)."""
        idx = np.empty(self.T, dtype=np.int64)
        for k, w in enumerate(self.windows):
            idx[w.start : w.end] = k
        return idx


def weekly_windows(r_values, delta, lam, p, length=7):
    """Windows of ``length`` days with ``beta_n = lam * R_n``."""
    return PiecewiseParams(
        tuple(
            Window(k * length, (k + 1) * length, SeirParams(lam * float(rn), delta, lam, p))
            for k, rn in enumerate(r_values)
        )
    )


class OperatorCache:
    """Memo of moment operators keyed by SEIR parameters."""

    def __init__(self):
        self._store = {}
        self.computations = 0

    def get(self, params):
        key = (params.beta, params.delta, params.lam, params.p)
        ops = self._store.get(key)
        if ops is None:
            model, _ = build_seir(params)
            ops = compute_moment_operators(model)
            self._store[key] = ops
            self.computations += 1
        return ops


def build_piecewise(params, cache=None):
    """One unit-step operator set per window.

    Returns a list of ``(window, MomentOperators)``. Windows with identical
    parameters share one computation through ``cache`` (a fresh cache is used
    when none is given).
    """
    cache = OperatorCache() if cache is None else cache
    return [(w, cache.get(w.params)) for w in params.windows]


# --------------------------------------------------------------------------
# fast path for MCMC over the per-window reproduction numbers


@numba.njit(cache=True)
def _seir_tables(beta, delta, lam, p):
    omega = np.zeros((3, 3))
    omega[0, 0] = -delta
    omega[0, 1] = delta
    omega[0, 2] = delta * p
    omega[1, 0] = beta
    omega[1, 1] = -lam
    # columns are vec(C_i), C_E from offspring steps (-1,1,0)/(-1,1,1),
    # C_I = diag(beta, lam, 0)
    source = np.zeros((9, 3))
    ce = np.zeros((3, 3))
    ce[0, 0] = 1.0
    ce[0, 1] = -1.0
    ce[1, 0] = -1.0
    ce[1, 1] = 1.0
    ce[0, 2] = -p
    ce[2, 0] = -p
    ce[1, 2] = p
    ce[2, 1] = p
    ce[2, 2] = p
    for col in range(3):
        for row in range(3):
            source[col * 3 + row, 0] = delta * ce[row, col]
    source[0, 1] = beta
    source[4, 1] = lam
    return omega, source


@numba.njit(cache=True)
def seir_operator_stack(betas, delta, lam, p, step):
    """``F`` and ``V`` for each entry of ``betas`` (shapes (m,3,3), (m,3,3,3))."""
    m = betas.shape[0]
    f_stack = np.empty((m, 3, 3))
    v_stack = np.empty((m, 3, 3, 3))
    for k in range(m):
        omega, source = _seir_tables(betas[k], delta, lam, p)
        f, v, _ = moment_kernel(omega, source, step)
        f_stack[k] = f
        v_stack[k] = v
    return f_stack, v_stack


class PiecewiseSeirLikelihood:
    """Gaussian-filter log-likelihood of SEIR data with per-window ``R_n``.

    Parameters
    ----------
    ys : array_like, shape (T,)
        Observed new cases per day.
    window_index : array_like of int, shape (T,)
        Window of each step.
    delta, lam, p : float
        Fixed rates and observation probability.
    obs_var : float
        Observation noise variance.
    """

    def __init__(self, ys, window_index, delta, lam, p, obs_var):
        self.ys = np.ascontiguousarray(np.asarray(ys, dtype=float).reshape(-1, 1))
        self.widx = np.ascontiguousarray(window_index, dtype=np.int64)
        if self.widx.shape[0] != self.ys.shape[0]:
            raise InvalidInputError("one window index per observation is required")
        self.n_windows = int(self.widx.max()) + 1
        self.delta, self.lam, self.p = float(delta), float(lam), float(p)
        self.obs = _observation(3, 2, obs_var)
        self.h = np.ascontiguousarray(self.obs.H)
        self.rmat = np.ascontiguousarray(self.obs.R)
        self.joseph = self.obs.joseph
        self.cmask = np.array([False, False, True])
        self.pmask = np.ones(3, dtype=np.bool_)
        self.noise = np.zeros((self.n_windows, 3, 3))
        T = self.ys.shape[0]
        self._work = (np.empty((T, 3)), np.empty((T, 3, 3)), np.empty((T, 3)), np.empty((T, 3, 3)), np.empty(T))
        self.operator_computations = 0

    def operators(self, r_values):
        betas = self.lam * np.asarray(r_values, dtype=float)
        if betas.shape != (self.n_windows,):
            raise InvalidInputError(f"expected {self.n_windows} reproduction numbers")
        self.operator_computations += self.n_windows
        return seir_operator_stack(betas, self.delta, self.lam, self.p, 1.0)

    def step_operators(self, r_values):
        """Per-step :class:`MomentOperators` list (for the general filters)."""
        f, v = self.operators(r_values)
        per_window = [MomentOperators(f[k], v[k], 1.0, (2,)) for k in range(self.n_windows)]
        return [per_window[k] for k in self.widx]

    def __call__(self, r_values, mean0, cov0=None):
        if np.any(np.asarray(r_values) <= 0):
            return -np.inf
        f, v = self.operators(r_values)
        mu0 = np.ascontiguousarray(mean0, dtype=float)
        c0 = np.zeros((3, 3)) if cov0 is None else np.ascontiguousarray(cov0, dtype=float)
        pm, pc, fm, fc, inc = self._work
        _, status = _gaussian_segment(
            mu0, c0, 0, f, v, self.noise, self.widx, self.cmask, self.h, self.rmat, self.joseph, self.ys,
            -np.inf, self.pmask, True, pm, pc, fm, fc, inc,
        )
        if status != 0:
            return -np.inf
        return float(inc.sum())
