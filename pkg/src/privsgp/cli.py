"""Command-line entry point: ``privsgp {run,sweep,plan-k,calibrate,topology-check}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import config as cfgmod
from .config import ConfigError
from .privacy import (
    AccountantError,
    PrivacyError,
    accountant_epsilon,
    calibrate_sigma_accountant,
    calibrate_sigma_closed_form,
    default_sensitivity,
    optimal_iterations,
    precondition_holds,
    utility_bound,
)
from .privacy.planner import optimal_iterations_exact
from .recipes import ExperimentRecipe, budget_list, require_constants, run_recipe
from .topology import (
    GraphSchedule,
    TopologyError,
    consensus_constants,
    load_edge_file,
    verify_b_strong_connectivity,
)

log = logging.getLogger("privsgp")


def _load(args) -> dict:
    cfg = cfgmod.parse_config(args.config) if args.config else {}
    if args.seed is not None:
        cfg["run.seed"] = args.seed
    if args.metrics_stride is not None:
        if args.metrics_stride < 1:
            raise ConfigError(["--metrics-stride must be >= 1"])
        cfg["run.metrics_stride"] = args.metrics_stride
    return cfgmod.resolved(cfg)


def _json_line(obj) -> None:
    print(json.dumps(obj, separators=(",", ":")))


def _samples_per_node(cfg: dict) -> int:
    J = cfg["problem.samples"] // cfg["run.n"]
    if J < 1:
        raise ConfigError(["problem.samples must be at least run.n"])
    return J


def _accountant_check(cfg: dict, sigma: float, K: int, J: int, delta: float, G: float) -> float | None:
    sens = cfg["privacy.sensitivity"] or default_sensitivity(G)
    try:
        return accountant_epsilon(sigma / sens, 1.0 / J, K, delta, cfg["privacy.lambda_max"])
    except (AccountantError, OverflowError) as exc:
        log.warning("accountant check unavailable: %s", exc)
        return None


def cmd_plan_k(cfg: dict, args) -> int:
    const = require_constants(cfg)
    n = cfg["run.n"]
    J = _samples_per_node(cfg)
    budgets = budget_list(cfg, n)
    k_star = optimal_iterations(const, budgets, n, J)
    sigmas = [calibrate_sigma_closed_form(k_star, J, b, const.G, c2=const.c2, c1=const.c1, node=i,
                                          warn=False).sigma
              for i, b in enumerate(budgets)]
    checks = [_accountant_check(cfg, s, k_star, J, b.delta, const.G) for s, b in zip(sigmas, budgets)]
    _json_line({
        "K_star": k_star,
        "K_star_exact": optimal_iterations_exact(const, budgets, n, J),
        "sigma": max(sigmas),
        "sigma_per_node": sigmas,
        "predicted_bound": utility_bound(const, budgets, n, J),
        "epsilon_check": checks,
        "precondition_ok": [precondition_holds(k_star, J, b, const.c1) for b in budgets],
    })
    return 0


def cmd_calibrate(cfg: dict, args) -> int:
    n, K = cfg["run.n"], cfg["run.K"]
    J = _samples_per_node(cfg)
    G = cfg["privacy.clip"]
    if not math.isfinite(G):
        G = cfg["constants.G"]
    if G is None or not math.isfinite(G):
        raise ConfigError(["calibrate needs a finite privacy.clip or constants.G"])
    budgets = budget_list(cfg, n)
    accountant = cfg["privacy.mode"] == "budget-accountant"
    sigmas = []
    for i, b in enumerate(budgets):
        if accountant:
            s = calibrate_sigma_accountant(K, J, b, G, cfg["privacy.sensitivity"], cfg["privacy.lambda_max"], node=i)
        else:
            s = calibrate_sigma_closed_form(K, J, b, G, c2=cfg["privacy.c2"], c1=cfg["privacy.c1"],
                                            node=i, warn=False)
        sigmas.append(s.sigma)
    checks = [_accountant_check(cfg, s, K, J, b.delta, G) for s, b in zip(sigmas, budgets)]
    _json_line({
        "K": K,
        "method": "accountant" if accountant else "closed-form",
        "sigma": max(sigmas),
        "sigma_per_node": sigmas,
        "epsilon_check": checks,
        "precondition_ok": [precondition_holds(K, J, b, cfg["privacy.c1"]) for b in budgets],
    })
    return 0


def cmd_topology_check(cfg: dict, args) -> int:
    n = cfg["run.n"]
    kind = cfg["topology.schedule"]
    try:
        if kind == "static-custom":
            if not cfg["topology.edges_file"]:
                raise ConfigError(["static-custom needs topology.edges_file"])
            schedule = load_edge_file(cfg["topology.edges_file"], n)
        else:
            schedule = GraphSchedule(kind=kind, n=n)
    except (TopologyError, OSError) as exc:
        raise ConfigError([f"topology: {exc}"]) from exc
    B = cfg["topology.B"] or schedule.default_window()
    ok, diameter = verify_b_strong_connectivity(schedule, B)
    out = {"schedule": kind, "n": n, "period": schedule.period, "B": B,
           "strongly_connected": ok, "diameter": diameter}
    if ok:
        cc = consensus_constants(schedule, B, cfg["problem.dim"])
        out.update(lam=cc.lam, q=cc.q, C=None if math.isinf(cc.C) else cc.C)
    _json_line(out)
    return 0 if ok else 1


def _run_recipe(cfg: dict, args, kind: str | None) -> int:
    if kind is not None:
        cfg = dict(cfg, **{"sweep.recipe": kind})
    recipe = ExperimentRecipe.from_config(cfg, out_dir=Path(args.out), parallel=args.parallel)
    summary = run_recipe(recipe)
    brief = {"recipe": summary["recipe"], "out": str(args.out), "points": len(summary["points"]),
             "final_loss": [p["final_loss"] for p in summary["points"]]}
    _json_line(brief)
    return 0


def cmd_run(cfg: dict, args) -> int:
    return _run_recipe(cfg, args, "single-run")


def cmd_sweep(cfg: dict, args) -> int:
    if cfg["sweep.recipe"] == "single-run":
        raise ConfigError(["sweep needs sweep.recipe set to a sweep kind"])
    return _run_recipe(cfg, args, None)


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "plan-k": cmd_plan_k,
    "calibrate": cmd_calibrate,
    "topology-check": cmd_topology_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="privsgp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, help="flat key = value config file")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out", type=str, default="privsgp-out", help="output directory")
        p.add_argument("--parallel", type=int, default=1, help="sweep points to run concurrently")
        p.add_argument("--metrics-stride", type=int, dest="metrics_stride", help="override run.metrics_stride")
    sub.add_parser("schema", help="print every config key with its default")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.captureWarnings(True)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "schema":
        print(cfgmod.describe_schema())
        return 0
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError(["--seed must be non-negative"])
        if args.parallel < 1:
            raise ConfigError(["--parallel must be >= 1"])
        cfg = _load(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    except (PrivacyError, TopologyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
