"""Independent reference computations shared by several test modules."""

import numpy as np
import scipy.linalg
from scipy.special import logsumexp
from scipy.stats import norm


def pure_death_exact_loglik(rate, z0, ys, obs_sd):
    """Forward algorithm on the finite chain ``{0..z0}`` of a pure-death process.

    The unit-step transition matrix is the exponential of the birth-death
    generator with death rate ``rate * k`` in state ``k``.
    """
    n = z0 + 1
    q = np.zeros((n, n))
    for k in range(1, n):
        q[k, k - 1] = rate * k
        q[k, k] = -rate * k
    p = scipy.linalg.expm(q)
    logp = np.log(np.clip(p, 1e-300, None))
    alpha = np.full(n, -np.inf)
    alpha[z0] = 0.0
    states = np.arange(n)
    total = 0.0
    for y in np.ravel(ys):
        alpha = logsumexp(alpha[:, None] + logp, axis=0)
        alpha = alpha + norm.logpdf(y, states, obs_sd)
        c = logsumexp(alpha)
        total += c
        alpha -= c
    return total
