"""Push-sum state and the local-step / mix / de-bias updates.

The single-node :class:`NodeState` mirrors the protocol description; the
engine keeps the same quantities stacked across nodes (``X`` of shape
``(n, d)``, ``w`` of shape ``(n,)``) and calls the same functions on them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .topology import MixingMatrix

W_FLOOR = 1e-300
STOCHASTIC_TOL = 1e-12


class NumericalFailure(RuntimeError):
    pass


@dataclass
class NodeState:
    node_id: int
    x: np.ndarray
    w: float = 1.0
    z: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.array(self.x, dtype=float)
        if self.z is None:
            self.z = self.x.copy()
        if not self.w > 0:
            raise ValueError("push-sum weight must be positive")

    @classmethod
    def initial(cls, node_id: int, x0) -> "NodeState":
        return cls(node_id=node_id, x=np.array(x0, dtype=float), w=1.0)


def local_step(x: np.ndarray, direction: np.ndarray, gamma: float) -> np.ndarray:
    """Intermediate parameter ``x - gamma * direction``; inputs are not modified."""
    direction = np.asarray(direction, dtype=float)
    if direction.shape != np.shape(x):
        raise ValueError(f"direction shape {direction.shape} != state shape {np.shape(x)}")
    return x - gamma * direction


def mix(intermediates: np.ndarray, weights: np.ndarray, P: MixingMatrix,
        check: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Apply one round of push-sum averaging.

    ``x_i <- sum_j P[i, j] x_j`` and ``w_i <- sum_j P[i, j] w_j``, summed in
    ascending ``j`` for every row so results do not depend on threading.
    """
    X = np.asarray(intermediates, dtype=float)
    w = np.asarray(weights, dtype=float)
    if X.shape[0] != P.n or w.shape != (P.n,):
        raise ValueError("intermediates/weights do not match mixing matrix size")
    if check:
        dev = np.max(np.abs(P.column_sums() - 1.0))
        if dev > STOCHASTIC_TOL:
            raise ValueError(f"mixing matrix is not column-stochastic (max deviation {dev:.3e})")
    vals = P.P[P.rows, P.cols]
    X_new = np.zeros_like(X)
    w_new = np.zeros_like(w)
    # np.add.at is unbuffered and applies updates in input order (ascending j)
    np.add.at(X_new, P.rows, vals.reshape((-1,) + (1,) * (X.ndim - 1)) * X[P.cols])
    np.add.at(w_new, P.rows, vals * w[P.cols])
    return X_new, w_new


def debias(x: np.ndarray, w) -> np.ndarray:
    """``z = x / w``; ``w`` may be a scalar or one weight per row of ``x``."""
    w_arr = np.asarray(w, dtype=float)
    if np.any(w_arr <= W_FLOOR):
        raise NumericalFailure(f"push-sum weight collapsed to {w_arr.min():.3e}")
    if w_arr.ndim == 0:
        return x / w_arr
    return x / w_arr.reshape((-1,) + (1,) * (np.ndim(x) - 1))


def mix_states(states: list[NodeState], intermediates: list[np.ndarray], P: MixingMatrix) -> None:
    """Mix a list of node states in place and refresh their de-biased parameters."""
    X_new, w_new = mix(np.stack(intermediates), np.array([s.w for s in states]), P)
    for i, s in enumerate(states):
        s.x = X_new[i]
        s.w = float(w_new[i])
        s.z = debias(s.x, s.w)
