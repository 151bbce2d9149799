"""Performance metrics: SINR and rates, radar SNR, detection probability,
Fisher information and the DoA CRB.

Conventions used throughout:
- W is the M x (N+M) transmit matrix of one BS; columns 0..N-1 carry the
  per-CU streams, columns N..N+M-1 the radar waveforms.
- Sensing channels g carry their large-scale factor exactly once; the
  radar SNR is sigma2_t * ||g^H W||^2 / sigma2_r with no extra prefactor.
- The large-sample identity (1/L) sum_l s[l] s[l]^H = I is adopted, which
  makes the Fisher information deterministic in W.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


# ---------------------------------------------------------------------------
# User association matrix

@dataclass(frozen=True)
class UAMatrix:
    """Binary K x N association: u[k, i] = 1 iff CU i is served by BS k.

    Valid iff every column sums to exactly 1 (one BS per CU), every row
    sums to >= 1 (no idle BS) and entries are 0/1.
    """

    u: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u)
        if u.ndim != 2:
            raise ValueError("UA matrix must be 2-D")
        if not np.isin(u, (0, 1)).all():
            raise ValueError("UA entries must be binary")
        u = u.astype(np.int64)
        if not (u.sum(axis=0) == 1).all():
            raise ValueError("every CU must be served by exactly one BS")
        if not (u.sum(axis=1) >= 1).all():
            raise ValueError("every BS must serve at least one CU")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)

    @property
    def K(self):
        return self.u.shape[0]

    @property
    def N(self):
        return self.u.shape[1]

    @classmethod
    def from_assignment(cls, bs_of_cu, k):
        """Build from a length-N sequence of 0-based serving-BS indices."""
        bs_of_cu = np.asarray(bs_of_cu, dtype=np.int64)
        if bs_of_cu.ndim != 1:
            raise ValueError("assignment must be 1-D")
        if np.any(bs_of_cu < 0) or np.any(bs_of_cu >= k):
            raise ValueError("assignment indices out of range")
        u = np.zeros((k, len(bs_of_cu)), dtype=np.int64)
        u[bs_of_cu, np.arange(len(bs_of_cu))] = 1
        return cls(u)

    def assignment(self):
        """0-based serving-BS index per CU."""
        return self.u.argmax(axis=0)

    def to_bs_list(self):
        """Serialized form: 1-based serving-BS index per CU."""
        return (self.assignment() + 1).tolist()

    def served_counts(self):
        """CUs served per BS (all >= 1 for a valid matrix)."""
        return self.u.sum(axis=1)


# ---------------------------------------------------------------------------
# Beamformer container

def vec_columns(W):
    """Stack the columns of W into one vector (column-major order)."""
    return np.asarray(W).reshape(-1, order="F")


def unvec_columns(w, m):
    """Inverse of vec_columns for an M-row matrix."""
    return np.asarray(w).reshape(m, -1, order="F")


@dataclass(frozen=True)
class BeamformingSolution:
    """Per-BS transmit matrix plus its stacked-vector view."""

    W: np.ndarray           # (M, N+M) complex
    power_budget: float     # accepted solutions satisfy ||W||_F^2 <= budget + tol
    tol: float = 1e-8

    def __post_init__(self):
        W = np.asarray(self.W, dtype=complex)
        p = float(np.linalg.norm(W) ** 2)
        if p > self.power_budget * (1.0 + self.tol):
            raise ValueError(f"power {p:.6g} exceeds budget {self.power_budget:.6g}")
        W.setflags(write=False)
        object.__setattr__(self, "W", W)

    @property
    def w_stacked(self):
        return vec_columns(self.W)

    @property
    def power(self):
        return float(np.linalg.norm(self.W) ** 2)


# ---------------------------------------------------------------------------
# Communication metrics

def sinr(h, W, i, sigma2):
    """SINR of the CU on column i (0-based) of W under channel h.

    Interference sums every other column, radar columns included.
    """
    if sigma2 <= 0:
        raise ValueError("noise power must be positive")
    W = np.asarray(W)
    if not 0 <= i < W.shape[1]:
        raise ValueError("column index out of range")
    p = np.abs(np.conj(h) @ W) ** 2
    return float(p[i] / (p.sum() - p[i] + sigma2))


def sinr_table(ch, W_list, sigma2):
    """(K, N) table of per-link SINRs under fixed beamformers."""
    K, N = ch.K, ch.N
    out = np.zeros((K, N))
    for k in range(K):
        p = np.abs(ch.h[k].conj() @ W_list[k]) ** 2     # (N, N+M)
        sig = p[np.arange(N), np.arange(N)]
        out[k] = sig / (p.sum(axis=1) - sig + sigma2)
    return out


def sum_rate(U: UAMatrix, sinr_values, B=1.0):
    """Total rate with equal bandwidth split inside each BS.

    Each served CU i on BS k contributes (B / n_k) log2(1 + sinr[k, i]),
    n_k the number of CUs on BS k.
    """
    gamma = np.asarray(sinr_values, dtype=float)
    if gamma.shape != U.u.shape:
        raise ValueError("SINR table shape must match the UA matrix")
    counts = U.served_counts().astype(float)
    per_link = U.u * np.log2(1.0 + gamma) / counts[:, None]
    return float(B * per_link.sum())


def cu_rates(U: UAMatrix, sinr_values, B=1.0):
    """(N,) per-CU rates under the same bandwidth-split model."""
    gamma = np.asarray(sinr_values, dtype=float)
    counts = U.served_counts().astype(float)
    per_link = U.u * np.log2(1.0 + gamma) / counts[:, None]
    return B * per_link.sum(axis=0)


# ---------------------------------------------------------------------------
# Sensing metrics

def radar_snr(g, W, sigma2_t, sigma2_r):
    """Echo SNR sigma2_t * ||g^H W||^2 / sigma2_r (g carries its large-scale factor)."""
    gw = np.conj(g) @ np.asarray(W)
    return float(sigma2_t * np.real(np.vdot(gw, gw)) / sigma2_r)


def detection_probability(p_fa, snr_ratio):
    """Detection probability of the energy detector at false-alarm rate p_fa.

    The test statistic is exponential under both hypotheses (chi-squared
    with two degrees of freedom up to scale), so with variance ratio
    mu1/mu0 = snr_ratio the closed form is P_D = p_fa ** (mu0/mu1).
    """
    if not 0.0 < p_fa < 1.0:
        raise ValueError("p_fa must lie in (0, 1)")
    if snr_ratio < 1.0:
        raise ValueError("variance ratio must be >= 1")
    return float(p_fa ** (1.0 / snr_ratio))


def theta_matrices(g, g_dot, alpha_t, L, sigma2_r):
    """The three M x M kernels whose quadratic forms in W give the FIM.

    With G = g g^H and Gdot = g_dot g^H + g g_dot^H:
      Theta1 = (2 L |alpha|^2 / sigma2_r) Gdot^H Gdot
      Theta2 = (2 L conj(alpha) / sigma2_r) Gdot^H G
      Theta3 = (2 L / sigma2_r) G^H G
    Theta1 and Theta3 are Hermitian PSD; Theta2 generally is not.
    """
    g = np.asarray(g, dtype=complex)
    g_dot = np.asarray(g_dot, dtype=complex)
    G = np.outer(g, g.conj())
    Gdot = np.outer(g_dot, g.conj()) + np.outer(g, g_dot.conj())
    scale = 2.0 * L / sigma2_r
    theta1 = (scale * abs(alpha_t) ** 2) * (Gdot.conj().T @ Gdot)
    theta2 = (scale * np.conj(alpha_t)) * (Gdot.conj().T @ G)
    theta3 = scale * (G.conj().T @ G)
    return theta1, theta2, theta3


def q_functionals(thetas, W):
    """q_j = Tr{Theta_j W W^H} for the three kernels; (q1, q2, q3)."""
    W = np.asarray(W)
    cov = W @ W.conj().T
    q1, q2, q3 = (complex((theta * cov.T).sum()) for theta in thetas)
    return q1.real, q2, q3.real


@dataclass(frozen=True)
class FimComponents:
    """Fisher information over (phi, Re alpha, Im alpha), block form."""

    J_pp: float             # scalar phi-phi block
    J_pa: np.ndarray        # (2,) phi-alpha row
    J_aa: np.ndarray        # (2, 2) alpha-alpha block
    q: tuple                # (q1 real, q2 complex, q3 real)
    Theta1: np.ndarray = field(repr=False, default=None)
    Theta2: np.ndarray = field(repr=False, default=None)
    Theta3: np.ndarray = field(repr=False, default=None)

    def full_matrix(self):
        """Assembled 3 x 3 real FIM."""
        J = np.zeros((3, 3))
        J[0, 0] = self.J_pp
        J[0, 1:] = self.J_pa
        J[1:, 0] = self.J_pa
        J[1:, 1:] = self.J_aa
        return J


def fim(W, thetas) -> FimComponents:
    """Assemble the FIM from the quadratic forms of the Theta kernels."""
    q1, q2, q3 = q_functionals(thetas, W)
    j_pa = np.array([q2.real, -q2.imag])
    return FimComponents(J_pp=q1, J_pa=j_pa, J_aa=q3 * np.eye(2), q=(q1, q2, q3),
                         Theta1=thetas[0], Theta2=thetas[1], Theta3=thetas[2])


def crb_from_q(q1, q2, q3):
    """DoA CRB as the Schur-complement inverse 1 / (q1 - |q2|^2 / q3)."""
    if q3 <= 0:
        raise ValueError("FIM not identifiable: q3 must be positive")
    schur = q1 - abs(q2) ** 2 / q3
    if schur <= 0:
        raise ValueError("FIM not identifiable: non-positive Schur complement")
    return 1.0 / schur


def crb(f: FimComponents):
    q1, q2, q3 = f.q
    return crb_from_q(q1, q2, q3)
