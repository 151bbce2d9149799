"""Classical user-association solvers under fixed beamformers.

All solvers return a valid UAMatrix: one BS per CU, no idle BS. The
objective is the bandwidth-split sum rate evaluated on a fixed SINR
table.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .metrics import UAMatrix, sum_rate

BRUTE_FORCE_GUARD = 10_000_000  # refuse K**N enumerations beyond this


@dataclass(frozen=True)
class RateTable:
    """K x N SINR values computed under some fixed beamformers."""

    gamma: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=float)
        if g.ndim != 2:
            raise ValueError("SINR table must be 2-D")
        if not np.isfinite(g).all() or (g < 0).any():
            raise ValueError("SINR values must be finite and nonnegative")
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)

    @property
    def K(self):
        return self.gamma.shape[0]

    @property
    def N(self):
        return self.gamma.shape[1]


def ua_objective(U: UAMatrix, t: RateTable, B=1.0):
    """Sum-rate value of an association on a fixed table."""
    return sum_rate(U, t.gamma, B)


def _assignment_value(bs_of_cu, log_table, B):
    # log_table[k, i] = log2(1 + gamma[k, i]); bandwidth splits per BS load.
    counts = np.bincount(bs_of_cu, minlength=log_table.shape[0])
    return B * float((log_table[bs_of_cu, np.arange(len(bs_of_cu))]
                      / counts[bs_of_cu]).sum())


def brute_force_ua(t: RateTable, B=1.0):
    """Globally optimal association by exhaustive enumeration.

    Enumerates every per-CU BS choice, keeps those where no BS is idle,
    and breaks ties toward the lexicographically smallest assignment.
    """
    K, N = t.K, t.N
    if N < K:
        raise ValueError("infeasible: fewer CUs than BSs")
    if K ** N > BRUTE_FORCE_GUARD:
        raise ValueError(f"search space K^N = {K}**{N} exceeds the enumeration guard")
    log_table = np.log2(1.0 + t.gamma)
    best_val = -math.inf
    best = None
    for combo in itertools.product(range(K), repeat=N):
        a = np.asarray(combo)
        if len(np.unique(a)) < K:
            continue
        val = _assignment_value(a, log_table, B)
        if val > best_val:
            best_val = val
            best = a
    return UAMatrix.from_assignment(best, K), best_val


def gale_shapley_ua(t: RateTable) -> UAMatrix:
    """Deferred-acceptance matching with per-BS quota ceil(N/K).

    CUs propose in descending SINR order; a full BS keeps its
    highest-SINR proposers. A repair pass then guarantees no BS is left
    idle by moving the least-lossy CU off the most-loaded BS.
    """
    K, N = t.K, t.N
    if N < K:
        raise ValueError("infeasible: fewer CUs than BSs")
    gamma = t.gamma
    quota = math.ceil(N / K)

    # Preference lists; ties broken by lower index for determinism.
    prefs = [list(np.lexsort((np.arange(K), -gamma[:, i]))) for i in range(N)]
    next_choice = [0] * N
    assigned = [set() for _ in range(K)]
    free = list(range(N))
    while free:
        i = free.pop(0)
        k = prefs[i][next_choice[i]]
        next_choice[i] += 1
        assigned[k].add(i)
        if len(assigned[k]) > quota:
            worst = min(assigned[k], key=lambda j: (gamma[k, j], -j))
            assigned[k].remove(worst)
            free.append(worst)

    bs_of_cu = np.empty(N, dtype=np.int64)
    for k, members in enumerate(assigned):
        for i in members:
            bs_of_cu[i] = k

    # Repair: every BS must serve someone.
    log_table = np.log2(1.0 + gamma)
    counts = np.bincount(bs_of_cu, minlength=K)
    for empty in np.flatnonzero(counts == 0):
        donor = int(np.argmax(counts))
        members = np.flatnonzero(bs_of_cu == donor)
        best_i, best_val = None, -math.inf
        for i in members:
            cand = bs_of_cu.copy()
            cand[i] = empty
            val = _assignment_value(cand, log_table, 1.0)
            if val > best_val:
                best_val, best_i = val, i
        bs_of_cu[best_i] = empty
        counts = np.bincount(bs_of_cu, minlength=K)

    return UAMatrix.from_assignment(bs_of_cu, K)


def best_transfer(bs_of_cu, log_table, B):
    """Best strictly improving single-CU move, or None.

    Only moves that keep the donor BS non-idle are considered; ties break
    toward the smallest (CU, destination) pair.
    """
    K = log_table.shape[0]
    base = _assignment_value(bs_of_cu, log_table, B)
    counts = np.bincount(bs_of_cu, minlength=K)
    best = None
    best_val = base
    for i in range(len(bs_of_cu)):
        src = bs_of_cu[i]
        if counts[src] < 2:
            continue
        for dst in range(K):
            if dst == src:
                continue
            cand = bs_of_cu.copy()
            cand[i] = dst
            val = _assignment_value(cand, log_table, B)
            if val > best_val + 1e-12:
                best_val = val
                best = (i, dst)
    return best


def coalition_refine(U0: UAMatrix, t: RateTable, B=1.0) -> UAMatrix:
    """Utilitarian transfer game: apply the best improving single-CU move
    until none exists. The objective strictly increases at every step, so
    the loop terminates."""
    bs_of_cu = U0.assignment().copy()
    log_table = np.log2(1.0 + t.gamma)
    while True:
        move = best_transfer(bs_of_cu, log_table, B)
        if move is None:
            return UAMatrix.from_assignment(bs_of_cu, t.K)
        i, dst = move
        bs_of_cu[i] = dst
