"""Command line front-end.

Subcommands:
  run          solve one scenario and write results/trace/beampattern files
  sweep        parameter sweep over seeds and UA solvers
  beampattern  solve one scenario and export per-BS beampatterns
  ua-bench     compare UA solvers on random SINR tables

Exit status is nonzero when any constraint audit fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import beamform, driver, llm, metrics, ua
from .channel import draw_channels
from .scene import SystemConfig, generate_scenario


def _parse_set(pairs):
    """KEY=VALUE overrides typed against the SystemConfig fields."""
    types = {f.name: f.type for f in dataclasses.fields(SystemConfig)}
    out = {}
    for pair in pairs or []:
        key, _, raw = pair.partition("=")
        if key not in types:
            raise SystemExit(f"unknown config field {key!r}")
        kind = types[key]
        out[key] = int(raw) if kind in ("int", int) else float(raw)
    return out


def _load_config(args):
    overrides = _parse_set(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if args.config:
        return SystemConfig.from_file(args.config, **overrides)
    return SystemConfig(**overrides)


def _llm_backend_from_env():
    url = os.environ.get("ISACOPT_LLM_URL")
    model = os.environ.get("ISACOPT_LLM_MODEL")
    if not url or not model:
        raise SystemExit("ua solver 'llm' needs ISACOPT_LLM_URL and "
                         "ISACOPT_LLM_MODEL in the environment")
    cfg = llm.LlmBackendConfig(
        endpoint_url=url,
        model_name=model,
        api_key_env=os.environ.get("ISACOPT_LLM_KEY_ENV", "OPENAI_API_KEY"),
        temperature=float(os.environ.get("ISACOPT_LLM_TEMPERATURE", "0.0")),
        timeout=float(os.environ.get("ISACOPT_LLM_TIMEOUT", "60")),
        max_retries=int(os.environ.get("ISACOPT_LLM_RETRIES", "2")),
    )
    return llm.HttpChatBackend(cfg)


def _solve_one(args):
    cfg = _load_config(args)
    scn = generate_scenario(cfg)
    ch = draw_channels(scn, cfg, cfg.seed)
    backend = _llm_backend_from_env() if args.ua == "llm" else None
    res = driver.ao_solve(scn, ch, cfg, ua_solver=args.ua, llm_backend=backend,
                          admm_history=True)
    return cfg, scn, ch, res


def cmd_run(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg, scn, ch, res = _solve_one(args)

    row = {"param": "", "value": "", "seed": cfg.seed, "solver": args.ua,
           "sum_rate": res.objective, "per_cu_rate": res.objective / cfg.N,
           "runtime": sum(res.timings.values()), "audit_ok": res.audits_pass(),
           **driver._worst_margins(res.constraint_report, cfg)}
    driver.write_results_csv(out / "results.csv", [row])
    driver.write_trace_csv(out / "trace.csv", res.objective_trace)

    grid = driver.default_angle_grid(args.angles)
    gains = [driver.beampattern(W, cfg.M, cfg.d_over_lambda, grid)
             for W in res.W_final]
    driver.write_beampattern_csv(out / "beampattern.csv", grid, gains)

    for k, hist in enumerate(getattr(res, "admm_histories", []) or []):
        if hist is not None:
            beamform.history_to_csv(hist, out / f"admm_bs{k + 1}.csv")

    if res.transcripts:
        merged = [e for t in res.transcripts for e in t]
        llm.write_transcript(out / "transcript.jsonl", merged)

    assoc = res.U_final.to_bs_list()
    print(f"sum rate: {res.objective:.6g} bps/Hz  association: {assoc}")
    for rep in res.constraint_report:
        print(f"BS {rep['bs'] + 1}: power={rep['power']:.4g} "
              f"snr={rep['snr']:.4g} crb={rep['crb']:.4g} ok={rep['ok']}")
    return 0 if res.audits_pass() else 1


def cmd_sweep(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _load_config(args)
    values = [int(v) if args.vary in ("N", "M") else float(v)
              for v in args.values.split(",")]
    solvers = args.ua_list.split(",")
    rows, means = driver.sweep(cfg, args.vary, values, n_seeds=args.seeds,
                               ua_solvers=solvers, seed0=cfg.seed,
                               workers=args.workers)
    driver.write_results_csv(out / "results.csv", rows)
    for (value, solver), mean in sorted(means.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
        print(f"{args.vary}={value} solver={solver}: mean sum rate {mean:.6g}")
    return 0 if all(r["audit_ok"] for r in rows) else 1


def cmd_beampattern(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg, scn, ch, res = _solve_one(args)
    grid = driver.default_angle_grid(args.angles)
    gains = [driver.beampattern(W, cfg.M, cfg.d_over_lambda, grid)
             for W in res.W_final]
    driver.write_beampattern_csv(out / "beampattern.csv", grid, gains)
    print(f"wrote {out / 'beampattern.csv'} ({args.angles} angles, {cfg.K} BSs)")
    return 0 if res.audits_pass() else 1


def cmd_ua_bench(args):
    rng = np.random.default_rng(args.seed)
    solvers = args.solvers.split(",")
    rows = []
    for t in range(args.tables):
        gamma = rng.uniform(0.5, 30.0, size=(args.k, args.n))
        table = ua.RateTable(gamma)
        for solver in solvers:
            if solver == "brute":
                u, val = ua.brute_force_ua(table)
            elif solver == "gs":
                u = ua.gale_shapley_ua(table)
                val = ua.ua_objective(u, table)
            elif solver == "coalition":
                u = ua.coalition_refine(ua.gale_shapley_ua(table), table)
                val = ua.ua_objective(u, table)
            elif solver == "stub":
                u, val, _ = llm.llm_optimize_ua(table, 1.0, llm.StubBackend())
            else:
                raise SystemExit(f"unknown UA solver {solver!r}")
            rows.append({"table": t, "solver": solver, "objective": val,
                         "assignment": " ".join(map(str, u.to_bs_list()))})
    if args.out:
        import csv

        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["table", "solver", "objective",
                                                    "assignment"])
            writer.writeheader()
            writer.writerows(rows)
    for solver in solvers:
        vals = [r["objective"] for r in rows if r["solver"] == solver]
        print(f"{solver}: mean objective {np.mean(vals):.6g} over {args.tables} tables")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="isacopt",
                                     description="ISAC network UA + beamforming optimizer")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file mirroring SystemConfig fields")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config field (repeatable)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--ua", choices=driver.UA_SOLVERS, default="brute")
        p.add_argument("--out", default="out")
        p.add_argument("--angles", type=int, default=721,
                       help="beampattern grid points over [0, pi]")

    p_run = sub.add_parser("run", help="solve one scenario")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="parameter sweep")
    common(p_sweep)
    p_sweep.add_argument("--vary", choices=driver.SWEEPABLE, required=True)
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--seeds", type=int, default=20)
    p_sweep.add_argument("--ua-list", default="brute")
    p_sweep.add_argument("--workers", type=int, default=1)
    p_sweep.set_defaults(func=cmd_sweep)

    p_bp = sub.add_parser("beampattern", help="solve and export beampatterns")
    common(p_bp)
    p_bp.set_defaults(func=cmd_beampattern)

    p_bench = sub.add_parser("ua-bench", help="UA solvers on random SINR tables")
    p_bench.add_argument("--tables", type=int, default=50)
    p_bench.add_argument("--k", type=int, default=3)
    p_bench.add_argument("--n", type=int, default=8)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--solvers", default="brute,gs,coalition,stub")
    p_bench.add_argument("--out", default=None)
    p_bench.set_defaults(func=cmd_ua_bench)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
