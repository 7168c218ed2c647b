"""Time-varying directed communication graphs and column-stochastic mixing.

A schedule maps an iteration index ``k`` to a set of directed edges
``(src, dst)``. Self-loops are always present and are not listed. Mixing
weights split each sender's mass uniformly over its out-neighbours,
itself included, which makes every mixing matrix column-stochastic.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("exponential", "ring", "complete", "static-custom")

Edge = tuple[int, int]


class TopologyError(ValueError):
    pass


def num_offsets(n: int) -> int:
    """Number of distinct hop offsets of the exponential graph on ``n`` nodes."""
    if n < 1:
        raise TopologyError("n must be >= 1")
    if n == 1:
        return 0
    return int(math.floor(math.log2(n - 1))) + 1


def exponential_schedule(n: int, k: int) -> list[Edge]:
    """Edges ``src -> dst`` at iteration ``k``; self-loops excluded.

    Node ``i`` sends to ``(i + 2**(k mod m)) mod n``.
    """
    m = num_offsets(n)
    if m == 0:
        return []
    hop = 2 ** (k % m)
    return [(i, (i + hop) % n) for i in range(n)]


@dataclass(frozen=True)
class GraphSchedule:
    kind: str
    n: int
    # one edge list per iteration for static-custom, cycled with period len()
    custom_edges: tuple[tuple[Edge, ...], ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise TopologyError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        if self.n < 1:
            raise TopologyError("n must be >= 1")
        if self.kind == "static-custom":
            if not self.custom_edges:
                raise TopologyError("static-custom schedule needs at least one edge list")
            for step in self.custom_edges:
                for s, t in step:
                    if not (0 <= s < self.n and 0 <= t < self.n):
                        raise TopologyError(f"edge {s}>{t} out of range for n={self.n}")

    @property
    def period(self) -> int:
        if self.kind == "exponential":
            return max(1, num_offsets(self.n))
        if self.kind == "static-custom":
            return len(self.custom_edges)
        return 1

    def edges(self, k: int) -> list[Edge]:
        """Directed non-self edges active at iteration ``k``."""
        n = self.n
        if self.kind == "exponential":
            return exponential_schedule(n, k)
        if self.kind == "ring":
            return [(i, (i + 1) % n) for i in range(n)] if n > 1 else []
        if self.kind == "complete":
            return [(i, j) for i in range(n) for j in range(n) if i != j]
        step = self.custom_edges[k % len(self.custom_edges)]
        return sorted({(s, t) for s, t in step if s != t})

    def default_window(self) -> int:
        return self.period


@dataclass(frozen=True)
class MixingMatrix:
    P: np.ndarray
    k: int
    # nonzero coordinates ordered by column then row, for ordered summation
    rows: np.ndarray = field(repr=False)
    cols: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.P.shape[0]

    def column_sums(self) -> np.ndarray:
        return self.P.sum(axis=0)


def _from_dense(P: np.ndarray, k: int) -> MixingMatrix:
    cols, rows = np.nonzero(P.T)
    return MixingMatrix(P=P, k=k, rows=rows, cols=cols)


def matrix_from_dense(P, k: int = 0) -> MixingMatrix:
    """Wrap an explicit weight matrix (used for hand-built test matrices)."""
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise TopologyError("mixing matrix must be square")
    if np.any(P < 0):
        raise TopologyError("mixing matrix must be non-negative")
    return _from_dense(P, k)


def mixing_matrix(schedule: GraphSchedule, k: int) -> MixingMatrix:
    """Column-stochastic weights: column ``j`` splits uniformly over j's out-neighbours and j."""
    n = schedule.n
    out: list[set[int]] = [{j} for j in range(n)]
    for s, t in schedule.edges(k):
        out[s].add(t)
    P = np.zeros((n, n))
    for j in range(n):
        w = 1.0 / len(out[j])
        for i in out[j]:
            P[i, j] = w
    if schedule.kind == "static-custom":
        custom_matrix_check(P)
    return _from_dense(P, k)


def load_edge_file(path: str | Path, n: int) -> GraphSchedule:
    """Read a custom schedule: one line per iteration of ``src>dst`` pairs separated by ``;``.

    Blank lines denote an iteration with self-loops only; ``#`` starts a
    comment and lines holding only a comment are skipped.
    """
    steps: list[tuple[Edge, ...]] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        if raw.lstrip().startswith("#"):
            continue
        line = raw.split("#", 1)[0].strip()
        edges = []
        for tok in filter(None, (t.strip() for t in line.split(";"))):
            try:
                s, t = tok.split(">")
                edges.append((int(s), int(t)))
            except ValueError:
                raise TopologyError(f"{path}:{lineno}: bad edge token {tok!r}") from None
        steps.append(tuple(edges))
    return GraphSchedule(kind="static-custom", n=n, custom_edges=tuple(steps))


def custom_matrix_check(P: np.ndarray) -> None:
    """Reject user-supplied weights lacking self-loops or column-stochasticity."""
    if np.any(np.diag(P) <= 0):
        bad = np.flatnonzero(np.diag(P) <= 0).tolist()
        raise TopologyError(f"nodes without self-loop: {bad}")
    sums = P.sum(axis=0)
    if np.max(np.abs(sums - 1.0)) > 1e-12:
        raise TopologyError(f"columns not stochastic, max deviation {np.max(np.abs(sums - 1.0)):.3e}")


def _diameter(n: int, adj: list[set[int]]) -> int | None:
    """Directed diameter by BFS from every node; ``None`` if not strongly connected."""
    diam = 0
    for src in range(n):
        dist = [-1] * n
        dist[src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        if min(dist) < 0:
            return None
        diam = max(diam, max(dist))
    return diam


def verify_b_strong_connectivity(schedule: GraphSchedule, B: int) -> tuple[bool, int | None]:
    """Check every window ``[lB, (l+1)B - 1]`` over one full period of window alignments.

    Returns ``(ok, max_diameter)``; the diameter is ``None`` when ``ok`` is false.
    """
    if B < 1:
        raise TopologyError("B must be >= 1")
    n = schedule.n
    p = schedule.period
    n_windows = math.lcm(p, B) // B
    worst = 0
    for l in range(n_windows):
        adj: list[set[int]] = [set() for _ in range(n)]
        for k in range(l * B, (l + 1) * B):
            for s, t in schedule.edges(k):
                adj[s].add(t)
        d = _diameter(n, adj)
        if d is None:
            return False, None
        worst = max(worst, d)
    return True, worst


@dataclass(frozen=True)
class ConsensusConstants:
    eps_min: float
    B: int
    Delta: int
    lam: float
    q: float
    C: float


def consensus_constants(schedule: GraphSchedule, B: int | None = None, d: int = 1) -> ConsensusConstants:
    """Geometric consensus rate ``q`` and prefactor bound ``C`` for a schedule.

    ``lam = 1 - n * eps_min**(Delta*B)``, ``q = lam**(1/(Delta*B + 1))`` and
    ``C = 2 sqrt(d) eps_min**(-Delta*B) / lam**((Delta*B + 2)/(Delta*B + 1))``.
    """
    B = schedule.default_window() if B is None else B
    ok, delta = verify_b_strong_connectivity(schedule, B)
    if not ok:
        raise TopologyError(f"schedule is not {B}-strongly connected")
    n = schedule.n
    if n == 1:
        return ConsensusConstants(eps_min=1.0, B=B, Delta=0, lam=0.0, q=0.0, C=0.0)
    eps_min = math.inf
    for k in range(math.lcm(schedule.period, B)):
        P = mixing_matrix(schedule, k).P
        eps_min = min(eps_min, float(P[P > 0].min()))
    db = delta * B
    mass = n * eps_min**db
    lam = 1.0 - mass
    if lam >= 1.0 or lam < 0.0:
        raise TopologyError(f"lambda={lam} outside [0, 1): n*eps_min^(Delta*B)={mass}")
    q = lam ** (1.0 / (db + 1))
    C = math.inf if lam == 0.0 else 2.0 * math.sqrt(d) * eps_min ** (-db) / lam ** ((db + 2) / (db + 1))
    return ConsensusConstants(eps_min=eps_min, B=B, Delta=delta, lam=lam, q=q, C=C)


def min_iterations(C: float, q: float, n: int, J: int, L: float) -> float:
    """Smallest ``K`` for which the step ``sqrt(n/K)`` meets every convergence step-size condition."""
    if q >= 1.0:
        return math.inf
    a = 1.0 - q
    terms = [
        4 * n * L**2 * (J**2 * (1 + J) / n + 12 * (1 + J) * C**2 / a**2),
        144 * n**3 * L**2 * C**4 / a**4,
        16 * (4 * J + 5) ** 2 * L**2 / n,
        4 * L**2 * C**2 * (48 * J + 66) * n / a**2,
        64 * J**4 * (1 + J) ** 2 * L**2 * n / 9,
    ]
    return max(terms)
