"""Alternating optimization over association and per-BS beamforming, plus
the experiment harness: sweeps, beampatterns, audits and CSV/JSONL output.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import beamform, llm, metrics, ua
from .channel import draw_channels, steering_vector, sensing_channel_derivative
from .scene import SystemConfig, generate_scenario

UA_SOLVERS = ("brute", "gs", "coalition", "llm", "stub", "bf-only")
SWEEPABLE = ("N", "M", "pt_dbm", "epsilon_crb")


@dataclass
class AoResult:
    U_final: metrics.UAMatrix
    W_final: list                    # per-BS (M, N+M) arrays
    objective_trace: list            # sum rate after each full outer iteration
    ua_method: str
    timings: dict                    # per-phase seconds
    constraint_report: list          # one dict per BS
    transcripts: list = field(default_factory=list)  # per outer iteration (llm/stub)

    @property
    def objective(self):
        return self.objective_trace[-1]

    def audits_pass(self):
        return all(r["ok"] for r in self.constraint_report)


def constraint_audit(W, scn, ch, cfg, k):
    """Recompute one BS's constraint margins from scratch with the metrics
    module, independent of any solver bookkeeping."""
    report = {"bs": k}
    power = float(np.linalg.norm(W) ** 2)
    report["power"] = power
    report["power_ok"] = power <= cfg.pt * (1.0 + 1e-8)

    if cfg.gamma_t > 0:
        g = ch.g[k, scn.detect_target_of_bs[k]]
        snr = metrics.radar_snr(g, W, cfg.sigma2_t, cfg.sigma2_r)
        report["snr"] = snr
        report["snr_ok"] = snr >= cfg.gamma_t * (1.0 - 1e-9)
    else:
        report["snr"] = math.nan
        report["snr_ok"] = True

    if math.isfinite(cfg.epsilon_crb):
        q_est = scn.estimate_target_of_bs[k]
        g = ch.g[k, q_est]
        g_dot = sensing_channel_derivative(scn, cfg, ch, k, q_est)
        thetas = metrics.theta_matrices(g, g_dot, scn.alpha_t[q_est], cfg.L, cfg.sigma2_r)
        try:
            crb_val = metrics.crb(metrics.fim(W, thetas))
        except ValueError:
            crb_val = math.inf
        report["crb"] = crb_val
        report["crb_ok"] = crb_val <= 1.05 * cfg.epsilon_crb
    else:
        report["crb"] = math.nan
        report["crb_ok"] = True

    report["ok"] = report["power_ok"] and report["snr_ok"] and report["crb_ok"]
    return report


def _ua_candidate(method, table, B, llm_backend):
    if method == "brute":
        return ua.brute_force_ua(table, B)[0], None
    if method in ("gs", "bf-only"):
        return ua.gale_shapley_ua(table), None
    if method == "coalition":
        return ua.coalition_refine(ua.gale_shapley_ua(table), table, B), None
    if method in ("llm", "stub"):
        backend = llm.StubBackend() if method == "stub" else llm_backend
        if backend is None:
            raise ValueError("ua_solver 'llm' needs an llm_backend")
        u, _, transcript = llm.llm_optimize_ua(table, B, backend)
        return u, transcript
    raise ValueError(f"unknown UA solver {method!r}; choose from {UA_SOLVERS}")


def ao_solve(scn, ch, cfg: SystemConfig, ua_solver="brute", llm_backend=None,
             admm_history=False) -> AoResult:
    """Alternate association and per-BS beamforming until the sum rate
    stops improving.

    Association starts from the deferred-acceptance matching, and each UA
    phase only accepts a candidate that does not decrease the objective
    under the current beamformers, so the objective trace is
    non-decreasing even with heuristic solvers. Beamforming warm-starts
    from the previous outer iteration's matrices for the same reason.
    "bf-only" freezes the association after the first outer iteration.
    """
    if ua_solver not in UA_SOLVERS:
        raise ValueError(f"unknown UA solver {ua_solver!r}; choose from {UA_SOLVERS}")
    timings = {"ua": 0.0, "beamform": 0.0, "audit": 0.0}
    transcripts = []

    W_list = [beamform.init_beamformer(scn, ch, cfg, k) for k in range(cfg.K)]
    table = ua.RateTable(metrics.sinr_table(ch, W_list, cfg.sigma2_c))
    U = ua.gale_shapley_ua(table)

    trace = []
    histories = [None] * cfg.K
    obj_prev = metrics.sum_rate(U, table.gamma, cfg.B)
    for outer in range(cfg.n_iter_max):
        # Association phase under the current beamformers.
        t0 = time.perf_counter()
        if not (ua_solver == "bf-only" and outer > 0):
            table = ua.RateTable(metrics.sinr_table(ch, W_list, cfg.sigma2_c))
            cand, transcript = _ua_candidate(ua_solver, table, cfg.B, llm_backend)
            if transcript is not None:
                transcripts.append(transcript)
            if ua.ua_objective(cand, table, cfg.B) >= ua.ua_objective(U, table, cfg.B):
                U = cand
        timings["ua"] += time.perf_counter() - t0

        # Per-BS beamforming under the accepted association.
        t0 = time.perf_counter()
        for k in range(cfg.K):
            W_list[k], hist = beamform.admm_solve(U, ch, scn, cfg, k, W0=W_list[k])
            if admm_history:
                histories[k] = hist
        timings["beamform"] += time.perf_counter() - t0

        obj = metrics.sum_rate(U, metrics.sinr_table(ch, W_list, cfg.sigma2_c), cfg.B)
        trace.append(obj)
        if outer >= 1 and obj - obj_prev < cfg.tol_outer:
            break
        obj_prev = obj

    t0 = time.perf_counter()
    report = [constraint_audit(W_list[k], scn, ch, cfg, k) for k in range(cfg.K)]
    timings["audit"] += time.perf_counter() - t0

    result = AoResult(U_final=U, W_final=W_list, objective_trace=trace,
                      ua_method=ua_solver, timings=timings,
                      constraint_report=report, transcripts=transcripts)
    if admm_history:
        result.admm_histories = histories
    return result


# ---------------------------------------------------------------------------
# Beampattern

def beampattern(W, m, d_over_lambda, grid):
    """Transmit gain ||a(theta)^H W||^2 on an angle grid."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("angle grid must be non-empty")
    A = steering_vector(grid, m, d_over_lambda)        # (G, M)
    return (np.abs(A.conj() @ W) ** 2).sum(axis=1)


def default_angle_grid(n_points=721):
    return np.linspace(0.0, np.pi, n_points)


# ---------------------------------------------------------------------------
# Sweeps

def _run_cell(args):
    cfg, param, value, seed, solver = args
    cfg_v = cfg.replace(**{param: value}) if param is not None else cfg
    cfg_v = cfg_v.replace(seed=seed)
    scn = generate_scenario(cfg_v)
    ch = draw_channels(scn, cfg_v, seed)
    t0 = time.perf_counter()
    res = ao_solve(scn, ch, cfg_v, ua_solver=solver)
    runtime = time.perf_counter() - t0
    worst = _worst_margins(res.constraint_report, cfg_v)
    return {
        "param": param if param is not None else "",
        "value": value if value is not None else "",
        "seed": seed,
        "solver": solver,
        "sum_rate": res.objective,
        "per_cu_rate": res.objective / cfg_v.N,
        "runtime": runtime,
        "audit_ok": res.audits_pass(),
        **worst,
    }


def _worst_margins(report, cfg):
    """Smallest slack across BSs for each constraint family (>= 1 is ok)."""
    power = min(cfg.pt / max(r["power"], 1e-300) for r in report)
    snrs = [r["snr"] / cfg.gamma_t for r in report if not math.isnan(r["snr"])]
    crbs = [cfg.epsilon_crb / r["crb"] for r in report
            if not math.isnan(r["crb"]) and r["crb"] > 0]
    return {
        "power_margin": power,
        "snr_margin": min(snrs) if snrs else math.nan,
        "crb_margin": min(crbs) if crbs else math.nan,
    }


def sweep(cfg_base: SystemConfig, vary, values, n_seeds=20, ua_solvers=("brute",),
          seed0=0, workers=1):
    """Run ao_solve over a parameter grid x seeds x solvers.

    Returns (rows, means): rows is one tidy dict per run, means maps
    (value, solver) -> mean sum rate. Cells run independently, so workers
    > 1 distributes them over processes without changing any result.
    """
    if vary not in SWEEPABLE:
        raise ValueError(f"can only sweep {SWEEPABLE}, not {vary!r}")
    cells = [(cfg_base, vary, value, seed0 + s, solver)
             for value in values for s in range(n_seeds) for solver in ua_solvers]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = [_run_cell(c) for c in cells]

    means = {}
    for value in values:
        for solver in ua_solvers:
            vals = [r["sum_rate"] for r in rows
                    if r["value"] == value and r["solver"] == solver]
            means[(value, solver)] = float(np.mean(vals))
    return rows, means


# ---------------------------------------------------------------------------
# Persistence

RESULT_FIELDS = ["param", "value", "seed", "solver", "sum_rate", "per_cu_rate",
                 "runtime", "audit_ok", "power_margin", "snr_margin", "crb_margin"]


def write_results_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "objective"])
        for i, obj in enumerate(trace):
            writer.writerow([i + 1, repr(float(obj))])


def write_beampattern_csv(path, grid, gains_per_bs):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["theta_rad"] + [f"gain_bs{k + 1}" for k in range(len(gains_per_bs))])
        for row in zip(grid, *gains_per_bs):
            writer.writerow([repr(float(v)) for v in row])
