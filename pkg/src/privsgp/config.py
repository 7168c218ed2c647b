"""Flat ``section.key = value`` configuration files.

One assignment per line, ``#`` starts a comment. Lists are comma separated.
Every key is declared in :data:`SCHEMA`; anything else is rejected with its
line number. ``parse_config(serialize_config(cfg)) == cfg`` for every parsed
config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` holds one message per problem."""

    def __init__(self, errors: list[str]):
        super().__init__("\n".join(errors))
        self.errors = errors


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _float(s: str) -> float:
    v = float(s)
    if math.isnan(v):
        raise ValueError("nan is not allowed")
    return v


def _list(item: Callable[[str], Any]) -> Callable[[str], tuple]:
    def parse(s: str) -> tuple:
        parts = [p.strip() for p in s.split(",")]
        if parts == [""]:
            return ()
        return tuple(item(p) for p in parts)
    return parse


def _number_or_list(s: str):
    vals = _list(_float)(s)
    return vals[0] if len(vals) == 1 else vals


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    doc: str
    choices: tuple | None = None


RECIPES = ("single-run", "n-sweep", "k-sweep", "eps-sweep", "vr-ablation")

SCHEMA: dict[str, Key] = {
    "run.algorithm": Key(str, "privsgp-vr", "privsgp-vr or privsgp", ("privsgp-vr", "privsgp")),
    "run.n": Key(int, 16, "number of nodes"),
    "run.K": Key(int, 1000, "iterations"),
    "run.gamma": Key(_float, None, "step size; default sqrt(n/K)"),
    "run.seed": Key(int, 0, "master seed for data, sampling and noise streams"),
    "run.metrics_stride": Key(int, 10, "record metrics every this many iterations"),
    "run.threads": Key(int, 1, "worker threads for the per-node phase"),
    "run.grad_norm_metric": Key(_bool, False, "record the mean squared gradient norm at z_i"),
    "run.record_anchors": Key(_bool, False, "track SAGA anchor points for the table-drift metric"),
    "run.dump_state": Key(_bool, False, "write the final de-biased states as state.bin"),
    "topology.schedule": Key(str, "exponential", "graph schedule",
                             ("exponential", "ring", "complete", "static-custom")),
    "topology.edges_file": Key(str, None, "edge-list file for static-custom"),
    "topology.B": Key(int, None, "connectivity window; default the schedule period"),
    "problem.kind": Key(str, "logistic", "task", ("logistic", "quadratic", "mlp")),
    "problem.samples": Key(int, 1600, "synthetic training samples (split evenly over nodes)"),
    "problem.test_samples": Key(int, 0, "synthetic held-out samples"),
    "problem.dim": Key(int, 20, "feature dimension"),
    "problem.skew": Key(_float, 0.0, "fraction of samples dealt out sorted by label"),
    "problem.l2": Key(_float, 1e-3, "L2 penalty"),
    "problem.signal": Key(_float, 3.0, "norm scale of the true logistic weights"),
    "problem.feature_scale": Key(_float, 1.0, "feature standard deviation times sqrt(dim)"),
    "problem.spectrum_decay": Key(_float, 1.0, "scale of the last feature relative to the first"),
    "problem.init_radius": Key(_float, 0.0, "norm of the initial point (logistic, quadratic)"),
    "problem.hidden": Key(int, 16, "hidden units (mlp)"),
    "problem.classes": Key(int, 3, "classes (mlp)"),
    "problem.csv_path": Key(str, None, "CSV data file; last column is the label"),
    "problem.skip_header": Key(_bool, False, "skip the first CSV line"),
    "privacy.mode": Key(str, "off", "noise mode",
                        ("off", "fixed-sigma", "budget-closed-form", "budget-accountant")),
    "privacy.sigma": Key(_number_or_list, 0.0, "noise std, scalar or one per node"),
    "privacy.epsilon": Key(_number_or_list, None, "epsilon, scalar or one per node"),
    "privacy.delta": Key(_number_or_list, None, "delta, scalar or one per node"),
    "privacy.clip": Key(_float, math.inf, "per-sample clipping bound G; inf disables"),
    "privacy.c1": Key(_float, 1.0, "accountant constant c1"),
    "privacy.c2": Key(_float, 1.0, "accountant constant c2"),
    "privacy.lambda_max": Key(int, 32, "highest moment order"),
    "privacy.sensitivity": Key(_float, None, "accountant sensitivity; default 6G"),
    "constants.L": Key(_float, None, "smoothness"),
    "constants.b2": Key(_float, None, "heterogeneity bound"),
    "constants.F0": Key(_float, None, "initial suboptimality"),
    "constants.x0_sq": Key(_float, None, "squared norm of the initial point"),
    "constants.G": Key(_float, None, "gradient bound"),
    "constants.d": Key(int, None, "model dimension"),
    "constants.probes": Key(int, 20, "probes for estimating missing constants"),
    "constants.descent_steps": Key(int, 2000, "gradient steps behind the F0 estimate"),
    "sweep.recipe": Key(str, "single-run", "experiment recipe", RECIPES),
    "sweep.values": Key(_list(_float), (), "sweep points (n, K multipliers of K*, or epsilon)"),
    "sweep.seeds": Key(_list(int), (), "seeds to repeat every point with; default run.seed"),
    "sweep.sigma_sq": Key(_float, None, "fixed noise variance for n-sweep"),
    "sweep.base_iterations": Key(int, None, "n-sweep: iterations at the smallest n"),
    "sweep.threshold": Key(_float, None, "n-sweep: loss threshold; default from threshold_frac"),
    "sweep.threshold_frac": Key(_float, 0.1, "n-sweep: reach f(x0) - (1 - frac) * F0"),
}


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse config text into a dict holding only the keys that were set."""
    out: dict[str, Any] = {}
    errors: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"{source}:{lineno}: expected 'key = value'")
            continue
        key, value = (p.strip() for p in line.split("=", 1))
        spec = SCHEMA.get(key)
        if spec is None:
            errors.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        if key in out:
            errors.append(f"{source}:{lineno}: duplicate key {key!r}")
            continue
        try:
            v = spec.parse(value)
        except ValueError as exc:
            errors.append(f"{source}:{lineno}: bad value for {key}: {exc}")
            continue
        if spec.choices and v not in spec.choices:
            errors.append(f"{source}:{lineno}: {key} must be one of {', '.join(spec.choices)}")
            continue
        out[key] = v
    if errors:
        raise ConfigError(errors)
    return out


def parse_config(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror}"]) from exc
    return parse_text(text, str(path))


def serialize_config(cfg: dict[str, Any]) -> str:
    """Canonical text for ``cfg``; keys in schema order, unset keys omitted."""
    lines = []
    for key in SCHEMA:
        if key in cfg and cfg[key] is not None:
            lines.append(f"{key} = {_format(cfg[key])}")
    return "\n".join(lines) + "\n"


def resolved(cfg: dict[str, Any]) -> dict[str, Any]:
    """``cfg`` with schema defaults filled in."""
    return {k: cfg.get(k, spec.default) for k, spec in SCHEMA.items()}


def describe_schema() -> str:
    rows = []
    for key, spec in SCHEMA.items():
        default = "unset" if spec.default is None else _format(spec.default)
        extra = f" [{' | '.join(spec.choices)}]" if spec.choices else ""
        rows.append(f"{key} (default {default}){extra}: {spec.doc}")
    return "\n".join(rows)
