"""Finite-sum losses with exact per-sample gradients, data sharding and constant estimation.

Every problem holds ``n`` shards of exactly ``J`` samples. The node loss is
``f_i(x) = (1/J) sum_j f_i(x; j)`` and the global loss is the mean of the node
losses. Gradients are hand-derived; the tests check each against central
finite differences.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    features: np.ndarray  # (N, p)
    labels: np.ndarray  # (N,)

    def __len__(self) -> int:
        return self.features.shape[0]


def partition(dataset: Dataset, n: int, seed: int, skew: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle by ``seed`` and cut into ``n`` contiguous equal shards.

    Returns ``(features, labels)`` with shapes ``(n, J, p)`` and ``(n, J)``.
    A leftover of ``N mod n`` samples is dropped. With ``skew > 0`` that
    fraction of the shuffled samples is sorted by label before cutting, which
    concentrates classes on particular nodes.
    """
    N = len(dataset)
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > N:
        raise ValueError(f"cannot split {N} samples over {n} nodes")
    if not 0.0 <= skew <= 1.0:
        raise ValueError("skew must lie in [0, 1]")
    order = stream(seed, 0, "data").permutation(N)
    J = N // n
    used = n * J
    if used < N:
        log.warning("dropping %d of %d samples so %d nodes get J=%d each", N - used, N, n, J)
    order = order[:used]
    m = int(round(skew * used))
    if m > 1:
        head = order[:m]
        order = np.concatenate([head[np.argsort(dataset.labels[head], kind="stable")], order[m:]])
    feats = dataset.features[order].reshape(n, J, -1)
    labels = dataset.labels[order].reshape(n, J)
    return feats, labels


def load_csv(path: str | Path, skip_header: bool = False) -> Dataset:
    """Numeric CSV, last column is the label."""
    data = np.loadtxt(path, delimiter=",", skiprows=1 if skip_header else 0, ndmin=2)
    if data.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature column and a label column")
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: non-finite entries")
    return Dataset(features=data[:, :-1], labels=data[:, -1])


def make_logistic_data(samples: int, dim: int, seed: int, signal: float = 3.0,
                       feature_scale: float = 1.0, spectrum_decay: float = 1.0) -> Dataset:
    """Gaussian features with labels in {-1, +1} drawn from a logistic model.

    ``spectrum_decay < 1`` shrinks feature ``c`` by ``spectrum_decay ** (c / (dim - 1))``,
    giving an ill-conditioned Hessian whose small directions converge slowly.
    """
    if not 0 < spectrum_decay <= 1:
        raise ValueError("spectrum_decay must lie in (0, 1]")
    rng = stream(seed, 0, "data")
    w_true = rng.standard_normal(dim) * signal / math.sqrt(dim)
    A = rng.standard_normal((samples, dim)) * feature_scale / math.sqrt(dim)
    if spectrum_decay < 1 and dim > 1:
        A *= spectrum_decay ** (np.arange(dim) / (dim - 1))
    p = 1.0 / (1.0 + np.exp(-A @ w_true))
    y = np.where(rng.random(samples) < p, 1.0, -1.0)
    return Dataset(features=A, labels=y)


def make_classification_data(samples: int, dim: int, classes: int, seed: int,
                             spread: float = 1.0) -> Dataset:
    """Gaussian class clusters for the two-layer perceptron."""
    rng = stream(seed, 0, "data")
    centers = rng.standard_normal((classes, dim)) * 2.0 / math.sqrt(dim)
    y = rng.integers(0, classes, size=samples)
    A = centers[y] + rng.standard_normal((samples, dim)) * spread / math.sqrt(dim)
    return Dataset(features=A, labels=y.astype(float))


class Problem:
    """Common surface. Subclasses provide the per-sample math."""

    kind = "abstract"

    def __init__(self, features: np.ndarray, labels: np.ndarray,
                 test: Dataset | None = None):
        features = np.asarray(features, dtype=float)
        labels = np.asarray(labels, dtype=float)
        if features.ndim != 3 or labels.shape != features.shape[:2]:
            raise ValueError("features must be (n, J, p) and labels (n, J)")
        if not (np.all(np.isfinite(features)) and np.all(np.isfinite(labels))):
            raise ValueError("non-finite sample data")
        if features.shape[1] < 1:
            raise ValueError("empty shards")
        self.features = features
        self.labels = labels
        self.test = test
        self.init_radius = 0.0

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def J(self) -> int:
        return self.features.shape[1]

    dim: int

    def _check(self, node: int, j: int | None = None) -> None:
        if not 0 <= node < self.n:
            raise IndexError(f"node {node} out of range")
        if j is not None and not 0 <= j < self.J:
            raise IndexError(f"sample {j} out of range for J={self.J}")

    # batched primitives (rows of ``F``/``y`` paired with rows of ``X``)
    def _grads(self, X: np.ndarray, F: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _losses(self, x: np.ndarray, F: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # public per-sample surface
    def grad_sample(self, node: int, x: np.ndarray, j: int) -> np.ndarray:
        self._check(node, j)
        return self._grads(np.asarray(x, float)[None], self.features[node, j][None],
                           self.labels[node, j][None])[0]

    def grad_batch(self, X: np.ndarray, nodes: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """One gradient per row: sample ``idx[r]`` of node ``nodes[r]`` at ``X[r]``."""
        return self._grads(X, self.features[nodes, idx], self.labels[nodes, idx])

    def sample_grads_all(self, node: int, x: np.ndarray) -> np.ndarray:
        self._check(node)
        X = np.broadcast_to(np.asarray(x, float), (self.J, self.dim))
        return self._grads(X, self.features[node], self.labels[node])

    def full_grad(self, node: int, x: np.ndarray) -> np.ndarray:
        return self.sample_grads_all(node, x).mean(axis=0)

    def node_loss(self, node: int, x: np.ndarray) -> float:
        self._check(node)
        return float(self._losses(np.asarray(x, float), self.features[node], self.labels[node]).mean())

    def loss(self, x: np.ndarray) -> float:
        F = self.features.reshape(-1, self.features.shape[2])
        return float(self._losses(np.asarray(x, float), F, self.labels.ravel()).mean())

    def grad(self, x: np.ndarray) -> np.ndarray:
        F = self.features.reshape(-1, self.features.shape[2])
        X = np.broadcast_to(np.asarray(x, float), (F.shape[0], self.dim))
        return self._grads(X, F, self.labels.ravel()).mean(axis=0)

    def test_loss(self, x: np.ndarray) -> float | None:
        if self.test is None:
            return None
        return float(self._losses(np.asarray(x, float), self.test.features, self.test.labels).mean())

    def accuracy(self, x: np.ndarray, data: Dataset | None = None) -> float | None:
        return None

    def initial_point(self, seed: int = 0) -> np.ndarray:
        """``init_radius * (1, ..., 1) / sqrt(dim)``; the origin by default."""
        return np.full(self.dim, self.init_radius / math.sqrt(self.dim))

    def sample_smoothness(self) -> float | None:
        """Exact ``max_j`` Lipschitz constant of per-sample gradients, when known in closed form."""
        return None

    def hvp_sample(self, node: int, x: np.ndarray, j: int, v: np.ndarray) -> np.ndarray | None:
        """Per-sample Hessian-vector product, or ``None`` when not available analytically."""
        return None


class QuadraticProblem(Problem):
    """``f(x; j) = 1/2 sum_c h[j, c] (x_c - a[j, c])**2`` with ``h`` defaulting to 1."""

    kind = "quadratic"

    def __init__(self, centers, curvature=None, test: Dataset | None = None):
        centers = np.asarray(centers, dtype=float)
        if centers.ndim == 2:
            centers = centers[:, :, None]
        n, J, d = centers.shape
        super().__init__(centers, np.zeros((n, J)), test)
        self.dim = d
        if curvature is None:
            curvature = np.ones_like(centers)
        curvature = np.broadcast_to(np.asarray(curvature, dtype=float), centers.shape).copy()
        if np.any(curvature < 0):
            raise ValueError("curvatures must be non-negative")
        self.curvature = curvature
        self._h_flat = curvature.reshape(-1, d)

    def _grads(self, X, F, y):
        raise AssertionError("quadratic gradients need curvature rows; use the overrides")

    def grad_sample(self, node, x, j):
        self._check(node, j)
        return self.curvature[node, j] * (np.asarray(x, float) - self.features[node, j])

    def grad_batch(self, X, nodes, idx):
        return self.curvature[nodes, idx] * (X - self.features[nodes, idx])

    def sample_grads_all(self, node, x):
        self._check(node)
        return self.curvature[node] * (np.asarray(x, float) - self.features[node])

    def node_loss(self, node, x):
        self._check(node)
        r = np.asarray(x, float) - self.features[node]
        return float((0.5 * (self.curvature[node] * r * r).sum(axis=1)).mean())

    def loss(self, x):
        r = np.asarray(x, float) - self.features.reshape(-1, self.dim)
        return float((0.5 * (self._h_flat * r * r).sum(axis=1)).mean())

    def grad(self, x):
        r = np.asarray(x, float) - self.features.reshape(-1, self.dim)
        return (self._h_flat * r).mean(axis=0)

    def test_loss(self, x):
        return None

    def hvp_sample(self, node, x, j, v):
        return self.curvature[node, j] * np.asarray(v, float)

    @property
    def smoothness(self) -> float:
        return float(self.curvature.max())

    def sample_smoothness(self):
        return self.smoothness


def _log1pexp(t: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, t)


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class LogisticProblem(Problem):
    """Binary logistic regression with labels in {-1, +1} and an L2 penalty."""

    kind = "logistic"

    def __init__(self, features, labels, l2: float = 1e-3, test: Dataset | None = None):
        super().__init__(features, labels, test)
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ValueError("logistic labels must be -1 or +1")
        self.l2 = float(l2)
        self.dim = self.features.shape[2]

    def _grads(self, X, F, y):
        margin = y * (F * X).sum(axis=1)
        coef = -y * _sigmoid(-margin)
        return coef[:, None] * F + self.l2 * X

    def _losses(self, x, F, y):
        margin = y * (F @ x)
        return _log1pexp(-margin) + 0.5 * self.l2 * float(x @ x)

    def hvp_sample(self, node, x, j, v):
        a = self.features[node, j]
        s = _sigmoid(np.array([a @ x]))[0]
        return s * (1 - s) * (a @ v) * a + self.l2 * np.asarray(v, float)

    def sample_smoothness(self):
        # sigmoid' <= 1/4, so each Hessian is bounded by |a|^2 / 4 + l2
        return float(np.max(np.sum(self.features**2, axis=2))) / 4.0 + self.l2

    def accuracy(self, x, data=None):
        data = data if data is not None else self.test
        if data is None:
            return None
        return float(np.mean(np.sign(data.features @ x) == data.labels))


class MLPProblem(Problem):
    """Two-layer perceptron: tanh hidden layer, softmax output, cross-entropy loss.

    Parameters are packed as ``[W1 (h, p), b1 (h), W2 (c, h), b2 (c)]``.
    """

    kind = "mlp"

    def __init__(self, features, labels, hidden: int = 16, classes: int | None = None,
                 l2: float = 0.0, test: Dataset | None = None):
        super().__init__(features, labels, test)
        self.p = self.features.shape[2]
        self.h = int(hidden)
        self.c = int(classes if classes is not None else int(self.labels.max()) + 1)
        if self.labels.min() < 0 or self.labels.max() >= self.c:
            raise ValueError("class labels must lie in [0, classes)")
        self.l2 = float(l2)
        self.dim = self.h * self.p + self.h + self.c * self.h + self.c

    def unpack(self, X: np.ndarray):
        """Split a ``(b, dim)`` batch of parameter vectors into layer arrays."""
        b = X.shape[0]
        h, p, c = self.h, self.p, self.c
        o = 0
        W1 = X[:, o:o + h * p].reshape(b, h, p); o += h * p
        b1 = X[:, o:o + h]; o += h
        W2 = X[:, o:o + c * h].reshape(b, c, h); o += c * h
        b2 = X[:, o:o + c]
        return W1, b1, W2, b2

    def _forward(self, X, F):
        W1, b1, W2, b2 = self.unpack(X)
        H = np.tanh(np.einsum("bhp,bp->bh", W1, F) + b1)
        logits = np.einsum("bch,bh->bc", W2, H) + b2
        logits = logits - logits.max(axis=1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        return H, logp

    def _grads(self, X, F, y):
        X = np.ascontiguousarray(X)
        W1, b1, W2, b2 = self.unpack(X)
        H, logp = self._forward(X, F)
        delta2 = np.exp(logp)
        delta2[np.arange(len(y)), y.astype(int)] -= 1.0
        gW2 = delta2[:, :, None] * H[:, None, :]
        delta1 = np.einsum("bch,bc->bh", W2, delta2) * (1.0 - H * H)
        gW1 = delta1[:, :, None] * F[:, None, :]
        g = np.concatenate([gW1.reshape(len(y), -1), delta1, gW2.reshape(len(y), -1), delta2], axis=1)
        return g + self.l2 * X

    def _losses(self, x, F, y):
        X = np.broadcast_to(np.asarray(x, float), (F.shape[0], self.dim))
        _, logp = self._forward(np.ascontiguousarray(X), F)
        return -logp[np.arange(len(y)), y.astype(int)] + 0.5 * self.l2 * float(x @ x)

    def initial_point(self, seed=0):
        rng = stream(seed, 0, "init")
        x = np.zeros(self.dim)
        W1, _, W2, _ = self.unpack(x[None])
        W1[:] = rng.standard_normal(W1.shape) / math.sqrt(self.p)
        W2[:] = rng.standard_normal(W2.shape) / math.sqrt(self.h)
        return x

    def accuracy(self, x, data=None):
        data = data if data is not None else self.test
        if data is None:
            return None
        X = np.broadcast_to(np.asarray(x, float), (len(data), self.dim))
        _, logp = self._forward(np.ascontiguousarray(X), data.features)
        return float(np.mean(logp.argmax(axis=1) == data.labels.astype(int)))


def build_problem(kind: str, n: int, *, samples: int = 0, dim: int = 10, seed: int = 0,
                  skew: float = 0.0, l2: float = 1e-3, hidden: int = 16, classes: int = 3,
                  test_samples: int = 0, signal: float = 3.0, feature_scale: float = 1.0,
                  spectrum_decay: float = 1.0, init_radius: float = 0.0,
                  csv_path: str | None = None,
                  skip_header: bool = False) -> Problem:
    """Construct a sharded problem from synthetic parameters or a CSV file."""
    if csv_path is not None:
        data = load_csv(csv_path, skip_header)
        test = None
    elif kind == "mlp":
        full = make_classification_data(samples + test_samples, dim, classes, seed)
        data, test = _split(full, samples)
    elif kind in ("logistic", "quadratic"):
        full = make_logistic_data(samples + test_samples, dim, seed, signal=signal,
                                  feature_scale=feature_scale, spectrum_decay=spectrum_decay)
        data, test = _split(full, samples)
    else:
        raise ValueError(f"unknown problem kind {kind!r}")
    feats, labels = partition(data, n, seed, skew)
    if kind == "logistic":
        if csv_path is not None:
            labels = np.where(labels > 0, 1.0, -1.0)
        problem = LogisticProblem(feats, labels, l2=l2, test=test)
    elif kind == "mlp":
        problem = MLPProblem(feats, labels, hidden=hidden, classes=None if csv_path else classes,
                             l2=l2, test=test)
    else:
        problem = QuadraticProblem(feats)
    problem.init_radius = float(init_radius)
    return problem


def _split(full: Dataset, n_train: int) -> tuple[Dataset, Dataset | None]:
    train = Dataset(full.features[:n_train], full.labels[:n_train])
    if len(full) == n_train:
        return train, None
    return train, Dataset(full.features[n_train:], full.labels[n_train:])


def estimate_constants(problem: Problem, probes: int = 20, seed: int = 0, x0: np.ndarray | None = None,
                       radius: float = 1.0, descent_steps: int = 500, power_iters: int = 30):
    """Probe-based estimates of the planner's problem constants.

    ``b2`` and ``G`` are maxima over random probes and therefore lower bounds on
    the true suprema. ``L`` is the closed-form per-sample bound when the problem
    provides one, otherwise a probe maximum as well. ``F0`` uses the best value reached by a short
    full-gradient descent from ``x0`` as the stand-in for ``f*``.
    """
    from .privacy.planner import ProblemConstants

    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = stream(seed, 0, "probe")
    x0 = problem.initial_point(seed) if x0 is None else np.asarray(x0, float)
    d = problem.dim
    L = 0.0
    b2 = 0.0
    G = 0.0
    for _ in range(probes):
        x = x0 + radius * rng.standard_normal(d)
        y = x + radius * rng.standard_normal(d)
        node = int(rng.integers(problem.n))
        j = int(rng.integers(problem.J))
        gx = problem.grad_sample(node, x, j)
        gy = problem.grad_sample(node, y, j)
        L = max(L, float(np.linalg.norm(gx - gy) / np.linalg.norm(x - y)))
        v = rng.standard_normal(d)
        if problem.hvp_sample(node, x, j, v) is not None:
            for _ in range(power_iters):
                v = v / np.linalg.norm(v)
                v = problem.hvp_sample(node, x, j, v)
            L = max(L, float(np.linalg.norm(v)))
        gfull = problem.grad(x)
        for i in range(problem.n):
            grads = problem.sample_grads_all(i, x)
            G = max(G, float(np.linalg.norm(grads, axis=1).max()))
            b2 = max(b2, float(np.sum((grads.mean(axis=0) - gfull) ** 2)))
    exact = problem.sample_smoothness()
    if exact is not None:
        L = exact
    # F0 from deterministic gradient descent with step 1/L
    x = x0.copy()
    best = f0 = problem.loss(x0)
    step = 1.0 / max(L, 1e-12)
    for _ in range(descent_steps):
        x = x - step * problem.grad(x)
        best = min(best, problem.loss(x))
    return ProblemConstants(L=L, b2=b2, F0=f0 - best, x0_sq=float(x0 @ x0), G=G, d=d)
