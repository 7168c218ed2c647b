"""Gaussian mechanism pieces: clipping, noise draws and closed-form noise calibration."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np


class PrivacyError(ValueError):
    pass


class PreconditionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise PrivacyError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise PrivacyError(f"delta must lie in (0, 1), got {self.delta}")

    @property
    def log_inv_delta(self) -> float:
        return math.log(1.0 / self.delta)


@dataclass(frozen=True)
class NoiseScale:
    sigma: float
    node: int = 0

    def __post_init__(self):
        if not self.sigma >= 0 or not math.isfinite(self.sigma):
            raise PrivacyError(f"sigma must be finite and >= 0, got {self.sigma}")


def clip(g: np.ndarray, G: float) -> np.ndarray:
    """Scale ``g`` down to norm ``G`` when it is longer; ``G = inf`` disables clipping."""
    g = np.asarray(g, dtype=float)
    if math.isinf(G):
        return g
    if not G > 0:
        raise PrivacyError("clip bound must be positive")
    norm = float(np.linalg.norm(g))
    if norm <= G:
        return g
    return g * (G / norm)


def clip_rows(Gm: np.ndarray, G: float) -> np.ndarray:
    """Row-wise :func:`clip` for a stack of gradients."""
    if math.isinf(G):
        return Gm
    norms = np.sqrt((Gm * Gm).sum(axis=1))
    scale = np.where(norms > G, G / np.where(norms > 0, norms, 1.0), 1.0)
    return Gm * scale[:, None]


def sample_noise(sigma: NoiseScale | float, d: int, rng: np.random.Generator) -> np.ndarray:
    """``d`` independent N(0, sigma^2) draws; exactly zero when sigma is 0."""
    s = sigma.sigma if isinstance(sigma, NoiseScale) else float(sigma)
    if s < 0:
        raise PrivacyError("sigma must be >= 0")
    if s == 0.0:
        return np.zeros(d)
    return s * rng.standard_normal(d)


def precondition_holds(K: int, J: int, budget: PrivacyBudget, c1: float = 1.0) -> bool:
    """``epsilon < c1 K / J**2``, the range where the closed-form level is a guarantee."""
    return budget.epsilon < c1 * K / J**2


def calibrate_sigma_closed_form(K: int, J: int, budget: PrivacyBudget, G: float, c2: float = 1.0,
                                c1: float = 1.0, node: int = 0, strict: bool = False,
                                warn: bool = True) -> NoiseScale:
    """Noise level ``3 c2 G sqrt(K ln(1/delta)) / (J epsilon)``.

    The guarantee behind it requires ``epsilon < c1 K / J**2``. A violation is
    raised when ``strict``, otherwise reported as a :class:`PreconditionWarning`
    unless ``warn`` is false.
    """
    if K < 1 or J < 1:
        raise PrivacyError("K and J must be >= 1")
    if not G > 0 or math.isinf(G):
        raise PrivacyError("closed-form calibration needs a finite gradient bound G > 0")
    if not precondition_holds(K, J, budget, c1) and (strict or warn):
        limit = c1 * K / J**2
        msg = (f"node {node}: epsilon={budget.epsilon} is not below c1*K/J^2 = "
               f"{c1}*{K}/{J}^2 = {limit:.6g}")
        if strict:
            raise PrivacyError(msg)
        warnings.warn(msg, PreconditionWarning, stacklevel=2)
    sigma = 3.0 * c2 * G * math.sqrt(K * budget.log_inv_delta) / (J * budget.epsilon)
    return NoiseScale(sigma=sigma, node=node)
