"""Lockstep simulation of PrivSGP-VR and PrivSGP.

All node quantities are stacked row-wise: ``X``, ``Z`` have shape ``(n, d)``
and ``w`` has shape ``(n,)``. One iteration is a fork-join: the per-node
phase (sample, gradient, table, noise, local step) runs over disjoint row
blocks, then the mix and de-bias phases run as a barrier over all rows.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import pushsum
from .privacy import (
    PrivacyBudget,
    calibrate_sigma_accountant,
    calibrate_sigma_closed_form,
    clip_rows,
    default_sensitivity,
    precondition_holds,
)
from .privacy.accountant import LAMBDA_MAX, epsilon_from_moments, log_moments
from .rng import IndexSampler, NoiseSource
from .topology import (
    GraphSchedule,
    TopologyError,
    consensus_constants,
    load_edge_file,
    min_iterations,
    mixing_matrix,
    verify_b_strong_connectivity,
)
from .varred import TableStack

log = logging.getLogger(__name__)

ALGORITHMS = ("privsgp-vr", "privsgp")
PRIVACY_MODES = ("off", "fixed-sigma", "budget-closed-form", "budget-accountant")


class DivergenceError(RuntimeError):
    def __init__(self, k: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at iteration {k}")
        self.k = k


@dataclass
class RunConfig:
    algorithm: str = "privsgp-vr"
    n: int = 16
    K: int = 1000
    gamma: float | None = None
    schedule: str = "exponential"
    edges_file: str | None = None
    B: int | None = None
    privacy_mode: str = "off"
    # scalars apply to every node; sequences give one value per node
    sigma: float | tuple = 0.0
    epsilon: float | tuple | None = None
    delta: float | tuple | None = None
    clip: float = math.inf
    c1: float = 1.0
    c2: float = 1.0
    lambda_max: int = LAMBDA_MAX
    sensitivity: float | None = None
    seed: int = 0
    metrics_stride: int = 10
    record_anchors: bool = False
    grad_norm_metric: bool = False
    threads: int = 1
    smoothness: float | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.privacy_mode not in PRIVACY_MODES:
            raise ValueError(f"privacy mode must be one of {PRIVACY_MODES}")
        if self.K < 1 or self.n < 1:
            raise ValueError("K and n must be >= 1")
        if self.gamma is not None and self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.metrics_stride < 1:
            raise ValueError("metrics_stride must be >= 1")
        if self.privacy_mode.startswith("budget"):
            if self.epsilon is None or self.delta is None:
                raise ValueError("budget modes need epsilon and delta for every node")
            self.budgets()

    @property
    def step_size(self) -> float:
        return math.sqrt(self.n / self.K) if self.gamma is None else self.gamma

    def per_node(self, value) -> list:
        if isinstance(value, (list, tuple)):
            if len(value) != self.n:
                raise ValueError(f"expected {self.n} per-node values, got {len(value)}")
            return list(value)
        return [value] * self.n

    def budgets(self) -> list[PrivacyBudget]:
        return [PrivacyBudget(float(e), float(d))
                for e, d in zip(self.per_node(self.epsilon), self.per_node(self.delta))]

    def graph(self) -> GraphSchedule:
        if self.schedule == "static-custom":
            if not self.edges_file:
                raise ValueError("static-custom schedule needs an edges file")
            return load_edge_file(self.edges_file, self.n)
        return GraphSchedule(kind=self.schedule, n=self.n)


@dataclass
class MetricsRecord:
    k: int
    loss: float
    grad_sq: float
    m_k: float
    t_k: float
    eps_spent: float
    wall_ms: float

    FIELDS = ("k", "loss", "grad_sq", "m_k", "t_k", "eps_spent", "wall_ms")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class RunResult:
    config: RunConfig
    metrics: list[MetricsRecord]
    X: np.ndarray
    w: np.ndarray
    Z: np.ndarray
    sigmas: np.ndarray
    test_loss: float | None = None
    accuracy: float | None = None

    @property
    def final_loss(self) -> float:
        return self.metrics[-1].loss

    @property
    def mean_x(self) -> np.ndarray:
        return self.X.mean(axis=0)


def consensus_error(Z: np.ndarray, xbar: np.ndarray | None = None) -> float:
    """``(1/n) sum_i |z_i - xbar|^2`` with ``xbar`` defaulting to the row mean."""
    xbar = Z.mean(axis=0) if xbar is None else xbar
    return float(np.mean(np.sum((Z - xbar) ** 2, axis=1)))


def table_drift(anchors: np.ndarray, xbar: np.ndarray) -> float:
    """``(1/n) sum_i (1/J) sum_j |xbar - phi_ij|^2`` over anchors of shape ``(n, J, d)``."""
    return float(np.mean(np.sum((anchors - xbar) ** 2, axis=2)))


def compute_metrics(k: int, X: np.ndarray, Z: np.ndarray, problem, anchors: np.ndarray | None = None,
                    grad_norm: bool = True, eps_spent: float = math.nan, wall_ms: float = 0.0) -> MetricsRecord:
    xbar = X.mean(axis=0)
    grad_sq = math.nan
    if grad_norm:
        grad_sq = float(np.mean([np.sum(problem.grad(z) ** 2) for z in Z]))
    return MetricsRecord(
        k=k,
        loss=problem.loss(xbar),
        grad_sq=grad_sq,
        m_k=consensus_error(Z, xbar),
        t_k=math.nan if anchors is None else table_drift(anchors, xbar),
        eps_spent=eps_spent,
        wall_ms=wall_ms,
    )


def resolve_sigmas(config: RunConfig, J: int) -> np.ndarray:
    """Per-node Gaussian noise standard deviations for the configured privacy mode."""
    mode = config.privacy_mode
    if mode == "off":
        return np.zeros(config.n)
    if mode == "fixed-sigma":
        s = np.array([float(v) for v in config.per_node(config.sigma)])
        if np.any(s < 0):
            raise ValueError("sigma must be >= 0")
        return s
    budgets = config.budgets()
    if mode == "budget-closed-form":
        bad = [i for i, b in enumerate(budgets) if not precondition_holds(config.K, J, b, config.c1)]
        if bad:
            log.warning("%d of %d nodes have epsilon >= c1*K/J^2 = %.3g; the closed-form noise "
                        "level is used outside its guaranteed range", len(bad), config.n,
                        config.c1 * config.K / J**2)
        return np.array([calibrate_sigma_closed_form(config.K, J, b, config.clip, c2=config.c2,
                                                     c1=config.c1, node=i, warn=False).sigma
                         for i, b in enumerate(budgets)])
    cache: dict = {}
    out = []
    for i, b in enumerate(budgets):
        if b not in cache:
            cache[b] = calibrate_sigma_accountant(config.K, J, b, config.clip, config.sensitivity,
                                                  config.lambda_max, node=i).sigma
        out.append(cache[b])
    return np.array(out)


class Simulation:
    """Stepwise driver; :meth:`run` executes all ``K`` iterations."""

    def __init__(self, config: RunConfig, problem, schedule: GraphSchedule | None = None,
                 x0: np.ndarray | None = None, X0: np.ndarray | None = None):
        if problem.n != config.n:
            raise ValueError(f"problem has {problem.n} shards but config.n={config.n}")
        self.config = config
        self.problem = problem
        self.schedule = schedule if schedule is not None else config.graph()
        if self.schedule.n != config.n:
            raise ValueError("schedule size does not match config.n")
        B = config.B if config.B is not None else self.schedule.default_window()
        ok, _ = verify_b_strong_connectivity(self.schedule, B)
        if not ok:
            raise TopologyError(f"{self.schedule.kind} schedule on {config.n} nodes is not {B}-strongly connected")
        self._matrices = [mixing_matrix(self.schedule, k) for k in range(self.schedule.period)]

        n, d = config.n, problem.dim
        if X0 is None:
            x0 = problem.initial_point(config.seed) if x0 is None else np.asarray(x0, float)
            X0 = np.tile(x0, (n, 1))
        self.X = np.array(X0, dtype=float)
        self.w = np.ones(n)
        self.Z = self.X.copy()
        self.k = 0
        self.gamma = config.step_size
        self.sigmas = resolve_sigmas(config, problem.J)
        self.vr = config.algorithm == "privsgp-vr"
        self.table = TableStack.from_problem(problem, self.Z, config.record_anchors) if self.vr else None
        if not self.vr and config.record_anchors:
            log.info("anchor recording ignored for %s", config.algorithm)
        self.samplers = [IndexSampler(config.seed, i, problem.J) for i in range(n)]
        self.noise = [NoiseSource(config.seed, i, d) for i in range(n)]
        self._noisy = bool(np.any(self.sigmas > 0))
        self._blocks = np.array_split(np.arange(n), max(1, min(config.threads, n)))
        self._pool = ThreadPoolExecutor(len(self._blocks)) if len(self._blocks) > 1 else None
        self._X_half = np.empty_like(self.X)
        self._dirs = np.empty_like(self.X)
        self._acct = self._accountant_moments()
        self._check_min_iterations()

    def _accountant_moments(self):
        c = self.config
        if c.privacy_mode != "budget-accountant":
            return None
        sens = default_sensitivity(c.clip) if c.sensitivity is None else c.sensitivity
        deltas = [b.delta for b in c.budgets()]
        moments = [np.array(log_moments(float(s / sens), 1.0 / self.problem.J, c.lambda_max))
                   for s in self.sigmas]
        return moments, deltas

    def _check_min_iterations(self) -> None:
        c = self.config
        if c.smoothness is None:
            return
        try:
            cc = consensus_constants(self.schedule, c.B, self.problem.dim)
        except TopologyError as exc:
            log.warning("consensus constants unavailable: %s", exc)
            return
        khat = min_iterations(cc.C, cc.q, c.n, self.problem.J, c.smoothness)
        if c.K < khat:
            log.warning("K=%d is below the convergence threshold K_hat=%.3g; running anyway", c.K, khat)

    def eps_spent(self, k: int) -> float:
        if self._acct is None:
            return math.nan
        if k == 0:
            return 0.0
        moments, deltas = self._acct
        return max(epsilon_from_moments(k * m, dl) for m, dl in zip(moments, deltas))

    def _node_phase(self, nodes: np.ndarray) -> None:
        idx = np.array([self.samplers[i].next() for i in nodes])
        Zb = self.Z[nodes]
        fresh = clip_rows(self.problem.grad_batch(Zb, nodes, idx), self.config.clip)
        if self.vr:
            g = self.table.corrected(fresh, idx, nodes)
            self.table.update(fresh, idx, nodes, Zb)
        else:
            g = fresh
        if self._noisy:
            noise = np.stack([self.noise[i].next() for i in nodes])
            g = g + self.sigmas[nodes, None] * noise
        self._dirs[nodes] = g
        self._X_half[nodes] = pushsum.local_step(self.X[nodes], g, self.gamma)

    def step(self) -> np.ndarray:
        """Advance one iteration; returns the per-node directions (noisy corrected gradients)."""
        if self._pool is None:
            self._node_phase(self._blocks[0])
        else:
            list(self._pool.map(self._node_phase, self._blocks))
        P = self._matrices[self.k % len(self._matrices)]
        self.X, self.w = pushsum.mix(self._X_half, self.w, P, check=False)
        self.Z = pushsum.debias(self.X, self.w)
        self.k += 1
        return self._dirs.copy()

    def record(self, t0: float) -> MetricsRecord:
        rec = compute_metrics(self.k, self.X, self.Z, self.problem,
                              None if self.table is None else self.table.anchors,
                              self.config.grad_norm_metric, self.eps_spent(self.k),
                              (time.perf_counter() - t0) * 1e3)
        if not math.isfinite(rec.loss):
            raise DivergenceError(self.k)
        return rec

    def run(self, on_record=None) -> RunResult:
        t0 = time.perf_counter()
        stride = self.config.metrics_stride
        metrics = [self.record(t0)]
        if on_record:
            on_record(metrics[-1])
        try:
            while self.k < self.config.K:
                self.step()
                if self.k % stride == 0 or self.k == self.config.K:
                    metrics.append(self.record(t0))
                    if on_record:
                        on_record(metrics[-1])
        finally:
            if self._pool is not None:
                self._pool.shutdown()
        xbar = self.X.mean(axis=0)
        return RunResult(config=self.config, metrics=metrics, X=self.X, w=self.w, Z=self.Z,
                         sigmas=self.sigmas, test_loss=self.problem.test_loss(xbar),
                         accuracy=self.problem.accuracy(xbar))


def run(config: RunConfig, problem, **kwargs) -> RunResult:
    return Simulation(config, problem, **kwargs).run()


def run_privsgp_vr(config: RunConfig, problem, **kwargs) -> RunResult:
    return run(replace(config, algorithm="privsgp-vr"), problem, **kwargs)


def run_privsgp(config: RunConfig, problem, **kwargs) -> RunResult:
    return run(replace(config, algorithm="privsgp"), problem, **kwargs)
