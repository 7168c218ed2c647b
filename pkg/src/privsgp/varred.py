"""SAGA gradient tables.

Each node keeps the last gradient it computed for every local sample and the
running mean of those gradients. The corrected gradient

    g = fresh - stored[xi] + mean(stored)

is an unbiased estimate of the node's full local gradient whenever ``fresh``
is the exact per-sample gradient at the current point.
"""

from __future__ import annotations

import numpy as np

# re-derive the running mean from scratch this often to cap drift
RESYNC_EVERY = 100_000


class GradientTable:
    """Per-node table of ``J`` stored gradients with an O(d) running mean."""

    def __init__(self, stored: np.ndarray, anchors: np.ndarray | None = None):
        stored = np.array(stored, dtype=float)
        if stored.ndim != 2 or stored.shape[0] < 1:
            raise ValueError("gradient table needs a (J, d) array with J >= 1")
        self.stored = stored
        self.running_avg = stored.mean(axis=0)
        # anchor points are only kept when drift metrics are requested
        self.anchors = None if anchors is None else np.array(anchors, dtype=float)
        self._updates = 0

    @property
    def J(self) -> int:
        return self.stored.shape[0]

    def _check(self, xi: int) -> None:
        if not 0 <= xi < self.J:
            raise IndexError(f"sample index {xi} out of range for J={self.J}")

    def corrected_gradient(self, fresh: np.ndarray, xi: int) -> np.ndarray:
        self._check(xi)
        return fresh - self.stored[xi] + self.running_avg

    def update(self, xi: int, fresh: np.ndarray, point: np.ndarray | None = None) -> None:
        self._check(xi)
        old = self.stored[xi]
        self.running_avg += (fresh - old) / self.J
        self.stored[xi] = fresh
        if self.anchors is not None and point is not None:
            self.anchors[xi] = point
        self._updates += 1
        if self._updates % RESYNC_EVERY == 0:
            self.resync()

    def resync(self) -> None:
        self.running_avg = self.stored.mean(axis=0)

    def drift(self) -> float:
        """Max deviation of the running mean from a full recomputation."""
        return float(np.max(np.abs(self.running_avg - self.stored.mean(axis=0))))


def init_table(problem, node: int, z0: np.ndarray, record_anchors: bool = False) -> GradientTable:
    """Fill every slot with the per-sample gradient at ``z0``."""
    if problem.J < 1:
        raise ValueError(f"node {node} has an empty shard")
    stored = problem.sample_grads_all(node, z0)
    anchors = np.tile(np.asarray(z0, dtype=float), (problem.J, 1)) if record_anchors else None
    return GradientTable(stored, anchors)


def corrected_gradient(table: GradientTable, fresh: np.ndarray, xi: int) -> np.ndarray:
    return table.corrected_gradient(fresh, xi)


def update_table(table: GradientTable, xi: int, fresh: np.ndarray, point: np.ndarray | None = None) -> None:
    table.update(xi, fresh, point)


class TableStack:
    """The gradient tables of all nodes, stacked for vectorised updates.

    ``stored`` has shape ``(n, J, d)``; every operation takes one sample
    index per node. Arithmetic per node is identical to :class:`GradientTable`.
    """

    def __init__(self, stored: np.ndarray, anchors: np.ndarray | None = None):
        self.stored = np.array(stored, dtype=float)
        self.running_avg = np.stack([s.mean(axis=0) for s in self.stored])
        self.anchors = anchors
        self._updates = 0

    @classmethod
    def from_problem(cls, problem, Z0: np.ndarray, record_anchors: bool = False) -> "TableStack":
        stored = np.stack([problem.sample_grads_all(i, Z0[i]) for i in range(problem.n)])
        anchors = None
        if record_anchors:
            anchors = np.repeat(np.asarray(Z0, dtype=float)[:, None, :], problem.J, axis=1)
        return cls(stored, anchors)

    @property
    def J(self) -> int:
        return self.stored.shape[1]

    def corrected(self, fresh: np.ndarray, idx: np.ndarray, nodes: np.ndarray) -> np.ndarray:
        return fresh - self.stored[nodes, idx] + self.running_avg[nodes]

    def update(self, fresh: np.ndarray, idx: np.ndarray, nodes: np.ndarray,
               points: np.ndarray | None = None) -> None:
        old = self.stored[nodes, idx]
        self.running_avg[nodes] += (fresh - old) / self.J
        self.stored[nodes, idx] = fresh
        if self.anchors is not None and points is not None:
            self.anchors[nodes, idx] = points

    def resync(self) -> None:
        self.running_avg = np.stack([s.mean(axis=0) for s in self.stored])

    def drift(self) -> float:
        return float(max(np.max(np.abs(a - s.mean(axis=0))) for a, s in zip(self.running_avg, self.stored)))
