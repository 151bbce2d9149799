"""Array responses, path loss, and channel draws.

Communication links are Rician: a deterministic LoS steering component
plus a CSCG scatter component, both scaled by the large-scale factor.
Sensing links are pure LoS.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .scene import Scenario, SystemConfig


def steering_vector(theta, m, d_over_lambda=0.5):
    """ULA phase response toward angle theta.

    Element i carries phase exp(j*2*pi*d_over_lambda*i*cos(theta)).
    theta may be a scalar or an array; the antenna axis is appended last.
    """
    theta = np.asarray(theta, dtype=float)
    step = np.asarray(2.0 * np.pi * d_over_lambda * np.cos(theta))
    return np.exp(1j * step[..., None] * np.arange(m))


def steering_derivative(theta, m, d_over_lambda=0.5):
    """Elementwise derivative of steering_vector with respect to theta."""
    theta = np.asarray(theta, dtype=float)
    a = steering_vector(theta, m, d_over_lambda)
    factor = np.asarray(-1j * 2.0 * np.pi * d_over_lambda * np.sin(theta))
    return factor[..., None] * np.arange(m) * a


def path_loss(d, varsigma, beta0_db):
    """Linear large-scale factor beta0 * d^(-varsigma), reference at 1 m."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distances must be positive")
    return 10.0 ** (beta0_db / 10.0) * d ** (-varsigma)


def rician_channel(beta, kappa, theta, m, d_over_lambda, rng):
    """One Rician fading vector: beta * (sqrt(k/(k+1)) a/sqrt(M) + sqrt(1/(k+1)) c).

    c has unit-variance CSCG entries, drawn as two real normals per entry
    scaled by 1/sqrt(2).
    """
    los = np.sqrt(kappa / (kappa + 1.0)) * steering_vector(theta, m, d_over_lambda) / np.sqrt(m)
    scatter = (rng.standard_normal(m) + 1j * rng.standard_normal(m)) / np.sqrt(2.0)
    nlos = np.sqrt(1.0 / (kappa + 1.0)) * scatter
    return beta * (los + nlos)


@dataclass(frozen=True)
class ChannelSet:
    """Channels for one scenario.

    h[k, i]    : (M,) communication channel BS k -> CU i
    g[k, q]    : (M,) LoS sensing channel BS k -> target q, large-scale
                 factor included
    beta[k, i] : large-scale factor of h[k, i]
    beta_t[k, q]: large-scale factor of g[k, q]
    """

    h: np.ndarray       # (K, N, M) complex
    g: np.ndarray       # (K, Q, M) complex
    beta: np.ndarray    # (K, N)
    beta_t: np.ndarray  # (K, Q)

    def __post_init__(self):
        K, N, M = self.h.shape
        if self.g.shape[0] != K or self.g.shape[2] != M:
            raise ValueError("inconsistent channel dimensions")
        if self.beta.shape != (K, N) or self.beta_t.shape != self.g.shape[:2]:
            raise ValueError("inconsistent large-scale factor dimensions")

    @property
    def K(self):
        return self.h.shape[0]

    @property
    def N(self):
        return self.h.shape[1]

    @property
    def M(self):
        return self.h.shape[2]


def draw_channels(scn: Scenario, cfg: SystemConfig, rng_stream) -> ChannelSet:
    """Draw all channels for a scenario.

    rng_stream is an int or a numpy SeedSequence; it is split into one
    child stream per (k, i) communication link, so the draw for a link
    does not depend on evaluation order. Sensing channels are
    deterministic given the scenario.
    """
    if isinstance(rng_stream, (int, np.integer)):
        root = np.random.SeedSequence(int(rng_stream))
    elif isinstance(rng_stream, np.random.SeedSequence):
        root = rng_stream
    else:
        raise TypeError("rng_stream must be an int or numpy SeedSequence")

    K, N, M = cfg.K, cfg.N, cfg.M
    kappa = cfg.kappa
    d_cu = scn.bs_cu_distances()
    d_tg = scn.bs_target_distances()

    beta = path_loss(d_cu, cfg.varsigma_c, cfg.beta0_db)
    beta_t = path_loss(d_tg, cfg.varsigma_t, cfg.beta0_db)

    children = root.spawn(K * N)
    h = np.zeros((K, N, M), dtype=complex)
    for k in range(K):
        for i in range(N):
            rng = np.random.default_rng(children[k * N + i])
            h[k, i] = rician_channel(beta[k, i], kappa, scn.theta[k, i],
                                     M, cfg.d_over_lambda, rng)

    a_tg = steering_vector(scn.phi, M, cfg.d_over_lambda)      # (K, Q, M)
    g = beta_t[..., None] * a_tg / np.sqrt(M)

    return ChannelSet(h=h, g=g, beta=beta, beta_t=beta_t)


def sensing_channel_derivative(scn, cfg, ch, k, q):
    """d/dphi of the sensing channel g[k, q], for Fisher-information use."""
    da = steering_derivative(scn.phi[k, q], cfg.M, cfg.d_over_lambda)
    return ch.beta_t[k, q] * da / np.sqrt(cfg.M)


def channels_to_csv(ch: ChannelSet, path):
    """Dump every link as one CSV row for cross-implementation comparison.

    Columns: kind (h/g), k, i, then re_0, im_0, ..., re_{M-1}, im_{M-1}.
    """
    M = ch.M
    header = ["kind", "k", "i"]
    for m in range(M):
        header += [f"re_{m}", f"im_{m}"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for kind, arr in (("h", ch.h), ("g", ch.g)):
            for k in range(arr.shape[0]):
                for i in range(arr.shape[1]):
                    row = [kind, k, i]
                    for m in range(M):
                        row += [repr(float(arr[k, i, m].real)),
                                repr(float(arr[k, i, m].imag))]
                    writer.writerow(row)
