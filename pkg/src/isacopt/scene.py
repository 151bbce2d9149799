"""System configuration and randomized scenario geometry.

Everything lives on a 2-D plane. Bearings from a BS to a node are folded
into [0, pi]; a ULA response depends only on cos(angle), so the fold is
lossless for the array model.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np

# Total rejection-sampling attempts before BS placement is declared infeasible.
PLACEMENT_ATTEMPT_CAP = 100_000


class GeometryError(RuntimeError):
    """Placement bands cannot be satisfied by rejection sampling."""


def dbm_to_watt(x_dbm):
    """Convert a power level in dBm to watts."""
    return 10.0 ** ((float(x_dbm) - 30.0) / 10.0)


def db_to_linear(x_db):
    """Convert a dB ratio to linear scale."""
    return 10.0 ** (float(x_db) / 10.0)


@dataclass(frozen=True)
class SystemConfig:
    """All scalar knobs of the simulator, solver tolerances included.

    Power-like quantities are stored in dB/dBm and converted on access.
    Geometry bands are in metres.
    """

    K: int = 3                    # number of BSs
    N: int = 10                   # number of CUs
    M: int = 24                   # antennas per BS
    B: float = 1.0                # bandwidth (normalized; rates in bps/Hz)
    beta0_db: float = -30.0       # path loss at the 1 m reference distance
    varsigma_c: float = 2.4       # path loss exponent, communication links
    varsigma_t: float = 3.5       # path loss exponent, sensing links
    kappa_db: float = 3.0         # Rician factor
    sigma2_c_dbm: float = -90.0   # CU receiver noise power
    sigma2_r_dbm: float = -90.0   # radar receiver noise power
    sigma2_t: float = 1.0         # RCS variance (linear, unitless)
    pt_dbm: float = 32.0          # per-BS transmit power budget
    gamma_t_db: float = 7.0       # detection SNR threshold
    epsilon_crb: float = 0.01     # DoA-estimation CRB threshold (rad^2)
    L: int = 1024                 # sensing sample count
    n_iter_max: int = 100         # iteration cap (inner and outer loops)
    tol_outer: float = 1e-3       # AO loop convergence threshold
    tol_inner: float = 1e-4       # per-BS beamforming convergence threshold
    d_over_lambda: float = 0.5    # ULA element spacing in wavelengths
    seed: int = 0                 # scenario RNG seed

    # Geometry bands (metres).
    area_size: float = 200.0      # square deployment area side length
    bs_spacing_min: float = 80.0  # min distance between any two BSs
    bs_spacing_max: float = 160.0 # max distance between any two BSs
    target_dist_min: float = 100.0  # min BS-to-own-target distance
    target_dist_max: float = 160.0  # max BS-to-own-target distance
    cu_dist_min: float = 1.0      # keep CUs off the 1 m reference sphere

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.N < self.K:
            raise ValueError("N must be >= K, otherwise every-BS-serves-one is infeasible")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.epsilon_crb <= 0:
            raise ValueError("epsilon_crb must be positive")
        if self.B <= 0 or self.sigma2_t <= 0 or self.d_over_lambda <= 0:
            raise ValueError("B, sigma2_t and d_over_lambda must be positive")
        if self.area_size <= 0:
            raise ValueError("area_size must be positive")
        if not (0 < self.bs_spacing_min <= self.bs_spacing_max):
            raise ValueError("BS spacing band must satisfy 0 < min <= max")
        if not (0 < self.target_dist_min <= self.target_dist_max):
            raise ValueError("target distance band must satisfy 0 < min <= max")
        if self.cu_dist_min <= 0:
            raise ValueError("cu_dist_min must be positive")

    # Linear-domain views -------------------------------------------------

    @property
    def sigma2_c(self) -> float:
        """CU noise power in watts."""
        return dbm_to_watt(self.sigma2_c_dbm)

    @property
    def sigma2_r(self) -> float:
        """Radar noise power in watts."""
        return dbm_to_watt(self.sigma2_r_dbm)

    @property
    def pt(self) -> float:
        """Per-BS power budget in watts."""
        return dbm_to_watt(self.pt_dbm)

    @property
    def gamma_t(self) -> float:
        """Detection SNR threshold, linear."""
        return db_to_linear(self.gamma_t_db)

    @property
    def kappa(self) -> float:
        """Rician factor, linear."""
        return db_to_linear(self.kappa_db)

    @property
    def beta0(self) -> float:
        """Reference path loss factor, linear."""
        return db_to_linear(self.beta0_db)

    @property
    def n_targets(self) -> int:
        """Total target count: one detection + one estimation target per BS."""
        return 2 * self.K

    # Construction helpers -------------------------------------------------

    def replace(self, **changes) -> "SystemConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict) -> "SystemConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path, **overrides) -> "SystemConfig":
        """Load a JSON key/value config file mirroring the field names."""
        with open(path) as fh:
            data = json.load(fh)
        data.update(overrides)
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Scenario:
    """One geometry realization: node positions, angles and RCS draws.

    Targets are indexed 0..2K-1; target 2k is BS k's detection target and
    target 2k+1 its estimation target.
    """

    bs_positions: np.ndarray        # (K, 2) metres
    cu_positions: np.ndarray        # (N, 2)
    target_positions: np.ndarray    # (2K, 2)
    detect_target_of_bs: np.ndarray   # (K,) target indices
    estimate_target_of_bs: np.ndarray # (K,)
    theta: np.ndarray               # (K, N) BS-to-CU bearings in [0, pi]
    phi: np.ndarray                 # (K, 2K) BS-to-target bearings in [0, pi]
    alpha_t: np.ndarray             # (2K,) complex RCS draws
    seed: int

    def __post_init__(self):
        K = self.bs_positions.shape[0]
        own = np.concatenate([self.detect_target_of_bs, self.estimate_target_of_bs])
        if len(set(own.tolist())) != 2 * K:
            raise ValueError("each BS needs two distinct dedicated targets")
        for name in ("bs_positions", "cu_positions", "target_positions",
                     "detect_target_of_bs", "estimate_target_of_bs",
                     "theta", "phi", "alpha_t"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def K(self) -> int:
        return self.bs_positions.shape[0]

    @property
    def N(self) -> int:
        return self.cu_positions.shape[0]

    def bs_cu_distances(self):
        """(K, N) distance matrix."""
        diff = self.cu_positions[None, :, :] - self.bs_positions[:, None, :]
        return np.linalg.norm(diff, axis=-1)

    def bs_target_distances(self):
        """(K, 2K) distance matrix."""
        diff = self.target_positions[None, :, :] - self.bs_positions[:, None, :]
        return np.linalg.norm(diff, axis=-1)


def bearing(origin, point):
    """Planar bearing from origin to point, folded into [0, pi]."""
    d = np.asarray(point, float) - np.asarray(origin, float)
    return abs(math.atan2(d[1], d[0]))


def _place_bs(rng, cfg):
    """Sequential rejection sampling of BS positions inside the area.

    All pairwise distances must fall inside the spacing band. Placement is
    restarted from scratch when a partial layout dead-ends; the global
    attempt cap makes infeasible bands raise instead of spinning.
    """
    attempts = 0
    lo, hi = cfg.bs_spacing_min, cfg.bs_spacing_max
    while attempts < PLACEMENT_ATTEMPT_CAP:
        placed = []
        stuck = False
        for _ in range(cfg.K):
            for _ in range(500):
                attempts += 1
                if attempts >= PLACEMENT_ATTEMPT_CAP:
                    raise GeometryError(
                        f"BS placement failed after {attempts} attempts: "
                        f"spacing band [{lo}, {hi}] m in a {cfg.area_size} m area")
                cand = rng.uniform(0.0, cfg.area_size, size=2)
                if all(lo <= np.linalg.norm(cand - p) <= hi for p in placed):
                    placed.append(cand)
                    break
            else:
                stuck = True
                break
        if not stuck:
            return np.array(placed)
    raise GeometryError(
        f"BS placement failed after {attempts} attempts: "
        f"spacing band [{lo}, {hi}] m in a {cfg.area_size} m area")


def _place_cus(rng, cfg, bs_pos):
    """CUs uniform over the area, kept at least cu_dist_min from every BS."""
    out = []
    attempts = 0
    while len(out) < cfg.N:
        attempts += 1
        if attempts >= PLACEMENT_ATTEMPT_CAP:
            raise GeometryError("CU placement failed: cu_dist_min too large for the area")
        cand = rng.uniform(0.0, cfg.area_size, size=2)
        if np.min(np.linalg.norm(bs_pos - cand, axis=1)) >= cfg.cu_dist_min:
            out.append(cand)
    return np.array(out)


def _place_targets(rng, cfg, bs_pos):
    """Two targets per BS at a uniform distance in the configured band.

    Targets sit on a uniform bearing around their BS and may leave the
    deployment square; only the distance band is constrained.
    """
    pos = np.zeros((2 * cfg.K, 2))
    for k in range(cfg.K):
        for j in range(2):
            r = rng.uniform(cfg.target_dist_min, cfg.target_dist_max)
            ang = rng.uniform(0.0, 2.0 * np.pi)
            pos[2 * k + j] = bs_pos[k] + r * np.array([np.cos(ang), np.sin(ang)])
    detect = np.arange(0, 2 * cfg.K, 2)
    estimate = np.arange(1, 2 * cfg.K, 2)
    return pos, detect, estimate


def generate_scenario(cfg: SystemConfig) -> Scenario:
    """Draw one scenario. Identical seed gives an identical scenario.

    Draw order is fixed: BS positions, CU positions, target placements,
    then RCS values, all from a single PCG64 stream seeded with cfg.seed.
    """
    rng = np.random.default_rng(cfg.seed)
    bs_pos = _place_bs(rng, cfg)
    cu_pos = _place_cus(rng, cfg, bs_pos)
    tgt_pos, detect, estimate = _place_targets(rng, cfg, bs_pos)

    theta = np.array([[bearing(bs_pos[k], cu_pos[i]) for i in range(cfg.N)]
                      for k in range(cfg.K)])
    phi = np.array([[bearing(bs_pos[k], tgt_pos[q]) for q in range(2 * cfg.K)]
                    for k in range(cfg.K)])

    alpha = math.sqrt(cfg.sigma2_t / 2.0) * (
        rng.standard_normal(2 * cfg.K) + 1j * rng.standard_normal(2 * cfg.K))

    return Scenario(
        bs_positions=bs_pos,
        cu_positions=cu_pos,
        target_positions=tgt_pos,
        detect_target_of_bs=detect,
        estimate_target_of_bs=estimate,
        theta=theta,
        phi=phi,
        alpha_t=alpha,
        seed=cfg.seed,
    )
