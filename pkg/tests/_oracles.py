"""Independent brute-force references used by the correlation tests.

Deliberately exhaustive O(N^2) scans, kept separate from the library's
binary-search implementation so they share no code path with it.
"""

import numba
import numpy as np

ABSENT = np.iinfo(np.int64).min


@numba.njit(cache=True)
def brute_nearest(t_el, t_ph, max_delay):
    n = len(t_el)
    tau = np.full(n, ABSENT, dtype=np.int64)
    idx = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        best_abs = np.int64(2**62)
        best_j = -1
        best_tau = ABSENT
        for j in range(len(t_ph)):
            d = t_ph[j] - t_el[i]
            a = -d if d < 0 else d
            # strictly better, or equal distance with an earlier photon time
            if a < best_abs or (a == best_abs and best_j >= 0 and t_ph[j] < t_ph[best_j]):
                best_abs = a
                best_j = j
                best_tau = d
        if best_j >= 0 and best_abs <= max_delay:
            tau[i] = best_tau
            idx[i] = best_j
        else:
            tau[i] = ABSENT
            idx[i] = -1
    return tau, idx


@numba.njit(cache=True)
def brute_true_flags(tau, idx, n_photons):
    """Per photon, flag the claiming electron with minimal |tau|
    (earlier electron, i.e. lower record index, wins ties)."""
    n = len(tau)
    flags = np.zeros(n, dtype=numba.boolean)
    for p in range(n_photons):
        best_abs = np.int64(2**62)
        best_i = -1
        for i in range(n):
            if idx[i] != p:
                continue
            a = -tau[i] if tau[i] < 0 else tau[i]
            if a < best_abs:
                best_abs = a
                best_i = i
        if best_i >= 0:
            flags[best_i] = True
    return flags
