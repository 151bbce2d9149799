"""Independent reference implementations used only by the tests.

These deliberately avoid the code paths they check: dense explicit
matrices, exhaustive/dense grids, eigendecomposition-based bisection.
"""

import numpy as np


def explicit_F(b, h, n_cols):
    """The stacked rate-term matrix, materialized row-block by row-block."""
    blocks = [np.kron(np.eye(n_cols), np.conj(b[i]) * h[i].conj()[None, :])
              for i in range(len(b))]
    return np.concatenate(blocks, axis=0)


def ball_ls_oracle(Q, c, pt):
    """argmin w^H Q w - Re(c^H w) over ||w||^2 <= pt by eigendecomposition
    and bisection on the ball multiplier."""
    vals, vecs = np.linalg.eigh(Q)
    ct = vecs.conj().T @ c

    def w_of(lam):
        return vecs @ (ct / (2.0 * (vals + lam)))

    if vals.min() > 1e-12:
        w0 = w_of(0.0)
        if np.linalg.norm(w0) ** 2 <= pt:
            return w0
    lo, hi = 0.0, 1.0
    while np.linalg.norm(w_of(hi)) ** 2 > pt:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.linalg.norm(w_of(mid)) ** 2 > pt:
            lo = mid
        else:
            hi = mid
    return w_of(hi)


def grid_cq_oracle(targets, epsilon, pts=1501, refine=2):
    """Dense grid projection onto the feasible auxiliary set.

    The optimal q2 is a nonnegative multiple of t2 (the objective depends
    on q2 through |q2 - t2| and the constraint through |q2| only), and for
    fixed (|q2|, q3) the optimal q1 is max(t1, c_min + |q2|^2/q3); the
    remaining 2-D grid over (|q2|, q3) is searched densely and refined.
    """
    c_min = 1.0 / epsilon
    t1, t2, t3 = float(np.real(targets[0])), complex(targets[1]), float(np.real(targets[2]))
    span = max(1.0, abs(t1), abs(t2), abs(t3), c_min)
    u = t2 / abs(t2) if abs(t2) > 0 else 1.0
    r_lo, r_hi = 0.0, abs(t2) + span
    p_lo, p_hi = 0.0, max(t3, 0.0) + span
    best, bestobj = None, np.inf
    for _ in range(refine + 1):
        r = np.linspace(r_lo, r_hi, pts)
        p = np.linspace(p_lo, p_hi, pts)
        R, P = np.meshgrid(r, p, indexing="ij")
        with np.errstate(divide="ignore", invalid="ignore"):
            need = np.where(P > 0, c_min + R * R / P,
                            np.where(R == 0, c_min, np.inf))
        Q1 = np.maximum(t1, need)
        obj = (Q1 - t1) ** 2 + (R - abs(t2)) ** 2 + (P - t3) ** 2
        idx = np.unravel_index(np.argmin(obj), obj.shape)
        if obj[idx] < bestobj:
            bestobj = float(obj[idx])
            best = (float(Q1[idx]), float(R[idx]) * u, float(P[idx]))
        cr = (r_hi - r_lo) / (pts - 1)
        cp = (p_hi - p_lo) / (pts - 1)
        r_lo, r_hi = max(0.0, abs(best[1]) - 2 * cr), abs(best[1]) + 2 * cr
        p_lo, p_hi = max(0.0, best[2] - 2 * cp), best[2] + 2 * cp
    return best, bestobj


def matching_is_stable(bs_of_cu, gamma, quota):
    """No CU-BS pair strictly prefers each other over their current match.

    A pair (i, k) blocks when CU i strictly prefers BS k to its own BS and
    BS k either has spare quota or strictly prefers i to its weakest
    accepted CU.
    """
    K, N = gamma.shape
    members = [np.flatnonzero(bs_of_cu == k) for k in range(K)]
    for i in range(N):
        cur = bs_of_cu[i]
        for k in range(K):
            if k == cur or gamma[k, i] <= gamma[cur, i]:
                continue
            if len(members[k]) < quota:
                return False
            weakest = min(gamma[k, j] for j in members[k])
            if gamma[k, i] > weakest:
                return False
    return True


def enumerate_ua(gamma, B=1.0):
    """All valid associations with their objective values."""
    import itertools

    K, N = gamma.shape
    log_t = np.log2(1.0 + gamma)
    out = []
    for combo in itertools.product(range(K), repeat=N):
        a = np.asarray(combo)
        if len(np.unique(a)) < K:
            continue
        counts = np.bincount(a, minlength=K)
        val = B * float((log_t[a, np.arange(N)] / counts[a]).sum())
        out.append((tuple(combo), val))
    return out
