"""Brute-force continuous-time Markov chain oracle for small Markovian queues.

Independent of the event engine: builds the generator matrix of an
M/M/c queue with K waiting places and solves pi Q = 0 directly.
"""

import numpy as np


def mmck_steady_state(lam: float, mu: float, c: int, K: int) -> tuple[float, float]:
    """Steady state of M/M/c with K waiting places (c + K system places).

    Returns (blocking probability, mean number in system).  By PASTA the
    blocking probability equals the long-run fraction of lost arrivals.
    """
    n_states = c + K + 1
    Q = np.zeros((n_states, n_states))
    for n in range(n_states):
        if n < n_states - 1:
            Q[n, n + 1] = lam
        if n > 0:
            Q[n, n - 1] = min(n, c) * mu
        Q[n, n] = -Q[n].sum()
    A = np.vstack([Q.T, np.ones(n_states)])
    b = np.zeros(n_states + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    pi = np.maximum(pi, 0.0)
    pi /= pi.sum()
    mean_n = float((np.arange(n_states) * pi).sum())
    return float(pi[-1]), mean_n
