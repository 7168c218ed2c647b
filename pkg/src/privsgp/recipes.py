"""Experiment recipes: single runs and the sweeps behind the evaluation protocols.

Every recipe takes a resolved config dict (see :mod:`privsgp.config`) and
returns a JSON-ready summary. When ``out_dir`` is given, each sweep point
writes its metrics CSV there and the summary goes to ``summary.json``.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .config import RECIPES, ConfigError
from .engine import RunConfig, RunResult, run
from .io import dump_state, write_metrics_csv
from .privacy import PrivacyBudget, ProblemConstants, optimal_iterations
from .problems import Problem, build_problem, estimate_constants

log = logging.getLogger(__name__)

CONSTANT_KEYS = ("L", "b2", "F0", "x0_sq", "G", "d")


def thread_cap(requested: int) -> int:
    """``requested`` capped by the ``PRIVSGP_THREADS`` environment variable."""
    env = os.environ.get("PRIVSGP_THREADS")
    if env:
        try:
            cap = int(env)
        except ValueError as exc:
            raise ConfigError([f"PRIVSGP_THREADS must be an integer, got {env!r}"]) from exc
        if cap < 1:
            raise ConfigError(["PRIVSGP_THREADS must be >= 1"])
        return max(1, min(requested, cap))
    return max(1, requested)


def make_problem(cfg: dict, n: int | None = None, seed: int | None = None) -> Problem:
    n = cfg["run.n"] if n is None else n
    seed = cfg["run.seed"] if seed is None else seed
    try:
        return build_problem(
            cfg["problem.kind"], n, samples=cfg["problem.samples"], dim=cfg["problem.dim"], seed=seed,
            skew=cfg["problem.skew"], l2=cfg["problem.l2"], hidden=cfg["problem.hidden"],
            classes=cfg["problem.classes"], test_samples=cfg["problem.test_samples"],
            signal=cfg["problem.signal"], feature_scale=cfg["problem.feature_scale"],
            spectrum_decay=cfg["problem.spectrum_decay"], init_radius=cfg["problem.init_radius"],
            csv_path=cfg["problem.csv_path"], skip_header=cfg["problem.skip_header"])
    except ValueError as exc:
        raise ConfigError([f"problem: {exc}"]) from exc


def make_run_config(cfg: dict, **overrides) -> RunConfig:
    def tup(v):
        return tuple(v) if isinstance(v, (list, tuple)) else v

    fields = dict(
        algorithm=cfg["run.algorithm"], n=cfg["run.n"], K=cfg["run.K"], gamma=cfg["run.gamma"],
        schedule=cfg["topology.schedule"], edges_file=cfg["topology.edges_file"], B=cfg["topology.B"],
        privacy_mode=cfg["privacy.mode"], sigma=tup(cfg["privacy.sigma"]),
        epsilon=tup(cfg["privacy.epsilon"]), delta=tup(cfg["privacy.delta"]),
        clip=cfg["privacy.clip"], c1=cfg["privacy.c1"], c2=cfg["privacy.c2"],
        lambda_max=cfg["privacy.lambda_max"], sensitivity=cfg["privacy.sensitivity"],
        seed=cfg["run.seed"], metrics_stride=cfg["run.metrics_stride"],
        record_anchors=cfg["run.record_anchors"], grad_norm_metric=cfg["run.grad_norm_metric"],
        threads=thread_cap(cfg["run.threads"]), smoothness=cfg["constants.L"],
    )
    fields.update(overrides)
    try:
        return RunConfig(**fields)
    except ValueError as exc:
        raise ConfigError([f"run: {exc}"]) from exc


def given_constants(cfg: dict) -> dict:
    return {k: cfg[f"constants.{k}"] for k in CONSTANT_KEYS if cfg[f"constants.{k}"] is not None}


def require_constants(cfg: dict) -> ProblemConstants:
    """Constants taken verbatim from the config; every one must be present."""
    have = given_constants(cfg)
    missing = [f"constants.{k}" for k in CONSTANT_KEYS if k not in have]
    if missing:
        raise ConfigError([f"missing constant {m}" for m in missing])
    try:
        return ProblemConstants(c1=cfg["privacy.c1"], c2=cfg["privacy.c2"], **have)
    except ValueError as exc:
        raise ConfigError([f"constants: {exc}"]) from exc


def resolve_constants(cfg: dict, problem: Problem, seed: int) -> ProblemConstants:
    """Config constants where given, probe estimates for the rest."""
    have = given_constants(cfg)
    if len(have) < len(CONSTANT_KEYS):
        est = estimate_constants(problem, probes=cfg["constants.probes"], seed=seed,
                                 descent_steps=cfg["constants.descent_steps"]).as_dict()
        for k in CONSTANT_KEYS:
            have.setdefault(k, est[k])
    return ProblemConstants(c1=cfg["privacy.c1"], c2=cfg["privacy.c2"], **have)


def budget_list(cfg: dict, n: int, epsilon=None) -> list[PrivacyBudget]:
    eps = cfg["privacy.epsilon"] if epsilon is None else epsilon
    delta = cfg["privacy.delta"]
    if eps is None or delta is None:
        raise ConfigError(["privacy.epsilon and privacy.delta are required"])

    def expand(v, name):
        if isinstance(v, (list, tuple)):
            if len(v) != n:
                raise ConfigError([f"privacy.{name} has {len(v)} entries for {n} nodes"])
            return list(v)
        return [v] * n

    try:
        return [PrivacyBudget(float(e), float(d)) for e, d in zip(expand(eps, "epsilon"), expand(delta, "delta"))]
    except ValueError as exc:
        raise ConfigError([f"privacy: {exc}"]) from exc


@dataclass
class ExperimentRecipe:
    kind: str
    cfg: dict
    values: tuple = ()
    seeds: tuple = ()
    out_dir: Path | None = None
    parallel: int = 1

    def __post_init__(self):
        if self.kind not in RECIPES:
            raise ConfigError([f"unknown recipe {self.kind!r}"])
        if self.kind != "single-run":
            if not self.values:
                raise ConfigError([f"sweep.values is empty for recipe {self.kind}"])
            if any(not math.isfinite(v) or v <= 0 for v in self.values):
                raise ConfigError(["sweep values must be positive and finite"])
            self.values = tuple(sorted(set(self.values)))
        if not self.seeds:
            self.seeds = (self.cfg["run.seed"],)
        if self.out_dir is not None:
            self.out_dir = Path(self.out_dir)

    @classmethod
    def from_config(cls, cfg: dict, out_dir=None, parallel: int = 1) -> "ExperimentRecipe":
        return cls(kind=cfg["sweep.recipe"], cfg=cfg, values=tuple(cfg["sweep.values"]),
                   seeds=tuple(cfg["sweep.seeds"]), out_dir=out_dir, parallel=parallel)


def _run_point(cfg: dict, rc: RunConfig, problem: Problem, label: str, out_dir: Path | None) -> dict:
    result = run(rc, problem)
    if out_dir is not None:
        write_metrics_csv(out_dir / f"{label}.csv", result.metrics)
        if cfg["run.dump_state"]:
            dump_state(out_dir / f"{label}.state.bin", result.Z)
    return point_summary(result, label)


def point_summary(result: RunResult, label: str) -> dict:
    c = result.config
    return {
        "label": label,
        "algorithm": c.algorithm,
        "n": c.n,
        "K": c.K,
        "seed": c.seed,
        "gamma": c.step_size,
        "sigma": [float(s) for s in result.sigmas],
        "final_loss": result.final_loss,
        "test_loss": result.test_loss,
        "accuracy": result.accuracy,
        "final_consensus_error": result.metrics[-1].m_k,
        "eps_spent": None if math.isnan(result.metrics[-1].eps_spent) else result.metrics[-1].eps_spent,
        "losses": [m.loss for m in result.metrics],
        "iterations": [m.k for m in result.metrics],
    }


def _map(fn: Callable, jobs: list, parallel: int) -> list:
    if parallel <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ThreadPoolExecutor(min(parallel, len(jobs))) as pool:
        return list(pool.map(lambda j: fn(*j), jobs))


def _budget_mode(cfg: dict) -> str:
    mode = cfg["privacy.mode"]
    return mode if mode.startswith("budget") else "budget-closed-form"


def _clip_for(cfg: dict, const: ProblemConstants) -> float:
    return cfg["privacy.clip"] if math.isfinite(cfg["privacy.clip"]) else const.G


def run_recipe(recipe: ExperimentRecipe) -> dict[str, Any]:
    if recipe.out_dir is not None:
        recipe.out_dir.mkdir(parents=True, exist_ok=True)
    handler = {
        "single-run": _single_run,
        "k-sweep": _k_sweep,
        "eps-sweep": _eps_sweep,
        "n-sweep": _n_sweep,
        "vr-ablation": _vr_ablation,
    }[recipe.kind]
    summary = {"recipe": recipe.kind, "values": list(recipe.values), "seeds": list(recipe.seeds)}
    summary.update(handler(recipe))
    if recipe.out_dir is not None:
        with open(recipe.out_dir / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, allow_nan=True)
    return summary


def _single_run(r: ExperimentRecipe) -> dict:
    cfg = r.cfg
    jobs = []
    for seed in r.seeds:
        problem = make_problem(cfg, seed=seed)
        jobs.append((cfg, make_run_config(cfg, seed=seed), problem, f"run_seed{seed}", r.out_dir))
    return {"points": _map(_run_point, jobs, r.parallel)}


def _k_sweep(r: ExperimentRecipe) -> dict:
    cfg = r.cfg
    jobs, planned = [], {}
    for seed in r.seeds:
        problem = make_problem(cfg, seed=seed)
        const = resolve_constants(cfg, problem, seed)
        budgets = budget_list(cfg, cfg["run.n"])
        k_star = optimal_iterations(const, budgets, cfg["run.n"], problem.J)
        planned[seed] = {"K_star": k_star, "constants": const.as_dict()}
        for m in r.values:
            K = max(1, int(round(k_star * m)))
            rc = make_run_config(cfg, seed=seed, K=K, privacy_mode=_budget_mode(cfg),
                                 clip=_clip_for(cfg, const))
            jobs.append((cfg, rc, problem, f"k-sweep_m{m:g}_seed{seed}", r.out_dir))
    points = _map(_run_point, jobs, r.parallel)
    per_seed = []
    for i, seed in enumerate(r.seeds):
        block = points[i * len(r.values):(i + 1) * len(r.values)]
        losses = [p["final_loss"] for p in block]
        best = int(np.argmin(losses))
        for p, m in zip(block, r.values):
            p["multiplier"] = m
        per_seed.append({"seed": seed, **planned[seed], "final_losses": losses,
                         "argmin_multiplier": r.values[best],
                         "argmin_K": block[best]["K"],
                         "argmin_at_K_star": r.values[best] == 1.0})
    return {"points": points, "per_seed": per_seed}


def _eps_sweep(r: ExperimentRecipe) -> dict:
    cfg = r.cfg
    jobs, planned = [], []
    for seed in r.seeds:
        problem = make_problem(cfg, seed=seed)
        const = resolve_constants(cfg, problem, seed)
        for eps in r.values:
            budgets = budget_list(cfg, cfg["run.n"], epsilon=eps)
            K = optimal_iterations(const, budgets, cfg["run.n"], problem.J)
            planned.append({"seed": seed, "epsilon": eps, "K_star": K})
            rc = make_run_config(cfg, seed=seed, K=K, privacy_mode=_budget_mode(cfg), epsilon=eps,
                                 clip=_clip_for(cfg, const))
            jobs.append((cfg, rc, problem, f"eps-sweep_eps{eps:g}_seed{seed}", r.out_dir))
    points = _map(_run_point, jobs, r.parallel)
    for p, plan in zip(points, planned):
        p["epsilon"] = plan["epsilon"]
    mean = [float(np.mean([p["final_loss"] for p in points if p["epsilon"] == e])) for e in r.values]
    return {"points": points, "planned": planned, "mean_final_loss": mean}


def iterations_to_threshold(result_losses: list[float], iterations: list[int], threshold: float) -> int | None:
    for k, loss in zip(iterations, result_losses):
        if loss <= threshold:
            return k
    return None


def _n_sweep(r: ExperimentRecipe) -> dict:
    cfg = r.cfg
    ns = [int(v) for v in r.values]
    if any(n != v for n, v in zip(ns, r.values)):
        raise ConfigError(["n-sweep values must be integers"])
    if cfg["sweep.sigma_sq"] is None:
        raise ConfigError(["n-sweep needs sweep.sigma_sq"])
    base = cfg["sweep.base_iterations"] or cfg["run.K"]
    sigma = math.sqrt(cfg["sweep.sigma_sq"])
    jobs, thresholds = [], {}
    for seed in r.seeds:
        threshold = cfg["sweep.threshold"]
        for n in ns:
            problem = make_problem(cfg, n=n, seed=seed)
            if threshold is None:
                # the global loss does not depend on how samples are sharded
                const = estimate_constants(problem, probes=cfg["constants.probes"], seed=seed,
                                           descent_steps=cfg["constants.descent_steps"])
                x0 = problem.initial_point(seed)
                threshold = problem.loss(x0) - (1.0 - cfg["sweep.threshold_frac"]) * const.F0
            K = max(1, int(round(base * ns[0] / n)))
            rc = make_run_config(cfg, seed=seed, n=n, K=K, privacy_mode="fixed-sigma", sigma=sigma)
            jobs.append((cfg, rc, problem, f"n-sweep_n{n}_seed{seed}", r.out_dir))
        thresholds[seed] = threshold
    points = _map(_run_point, jobs, r.parallel)
    per_seed, ratios = [], []
    for i, seed in enumerate(r.seeds):
        block = points[i * len(ns):(i + 1) * len(ns)]
        its = [iterations_to_threshold(p["losses"], p["iterations"], thresholds[seed]) for p in block]
        for p, it in zip(block, its):
            p["iterations_to_threshold"] = it
        rat = [None if a is None or b is None or b == 0 else a / b for a, b in zip(its, its[1:])]
        per_seed.append({"seed": seed, "threshold": thresholds[seed], "iterations_to_threshold": its,
                         "ratios": rat})
        ratios.append(rat)
    mean = []
    for j in range(len(ns) - 1):
        col = [rat[j] for rat in ratios]
        mean.append(None if any(c is None for c in col) else float(np.mean(col)))
    return {"points": points, "per_seed": per_seed, "mean_ratios": mean}


def _vr_ablation(r: ExperimentRecipe) -> dict:
    cfg = r.cfg
    jobs = []
    for seed in r.seeds:
        problem = make_problem(cfg, seed=seed)
        for sigma in r.values:
            for alg in ("privsgp-vr", "privsgp"):
                rc = make_run_config(cfg, seed=seed, algorithm=alg, privacy_mode="fixed-sigma", sigma=sigma)
                jobs.append((cfg, rc, problem, f"vr-ablation_{alg}_sigma{sigma:g}_seed{seed}", r.out_dir))
    points = _map(_run_point, jobs, r.parallel)
    comparison = []
    for sigma in r.values:
        means = {}
        for alg in ("privsgp-vr", "privsgp"):
            means[alg] = float(np.mean([p["final_loss"] for p in points
                                        if p["algorithm"] == alg and p["sigma"][0] == sigma]))
        comparison.append({"sigma": sigma, "mean_final_loss": means,
                           "vr_better": means["privsgp-vr"] < means["privsgp"]})
    return {"points": points, "comparison": comparison}
