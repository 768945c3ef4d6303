"""Differentiable token selection.

The retained count ``k = r * N_v`` is relaxed into a threshold ``tau`` by
Gaussian-weighted interpolation over the descending-sorted scores. Tokens are
then masked against ``tau`` three ways: a hard indicator, a temperature
sigmoid, and the straight-through combination whose forward value is the hard
mask and whose backward derivative is the sigmoid's.

Token positions are 1-based: the Gaussian for ``r = 1`` is centred on the last
token and for ``r -> 0`` below the first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit


@dataclass(frozen=True)
class RelaxationConfig:
    kernel_width: float = 10.0
    temperature: float = 0.1

    def __post_init__(self):
        if not (self.kernel_width > 0 and np.isfinite(self.kernel_width)):
            raise ValueError(f"kernel_width (sigma) must be positive, got {self.kernel_width}")
        if not (self.temperature > 0 and np.isfinite(self.temperature)):
            raise ValueError(f"temperature must be positive, got {self.temperature}")


class TokenScores:
    """Importance scores of one layer, held in descending order."""

    __slots__ = ("scores", "order", "layer")

    def __init__(self, scores, layer: int = 1):
        raw = np.asarray(scores, dtype=float)
        if raw.ndim != 1 or raw.size == 0:
            raise ValueError("scores must be a non-empty vector")
        # stable descending sort: equal scores keep their original relative order
        order = np.argsort(-raw, kind="stable")
        self.scores = raw[order]
        self.scores.flags.writeable = False
        self.order = order
        self.layer = layer

    def __len__(self):
        return self.scores.size

    def __repr__(self):
        return f"TokenScores(layer={self.layer}, n={self.scores.size})"


@dataclass(frozen=True)
class MaskTriple:
    hard: np.ndarray
    soft: np.ndarray
    # forward value of the straight-through mask; its backward uses ``soft``
    ste: np.ndarray


def _as_scores(scores) -> TokenScores:
    return scores if isinstance(scores, TokenScores) else TokenScores(scores)


def gaussian_weights(n: int, target_count: float, sigma: float) -> np.ndarray:
    j = np.arange(1, n + 1, dtype=float)
    logw = -((j - target_count) ** 2) / (2.0 * sigma * sigma)
    # shift before exponentiating; the normalized ratios are unchanged
    return np.exp(logw - logw.max())


def soft_threshold(scores, target_count: float, config: RelaxationConfig) -> float:
    """Gaussian-interpolated threshold ``tau`` for a fractional retained count."""
    s = _as_scores(scores).scores
    w = gaussian_weights(s.size, target_count, config.kernel_width)
    tau = float(np.dot(w, s) / w.sum())
    # convex combination; guard against last-ulp drift
    return min(max(tau, float(s[-1])), float(s[0]))


def soft_threshold_grad(
    scores, target_count: float, config: RelaxationConfig, n_visual: int
) -> float:
    """``d tau / d r`` where ``target_count = r * n_visual``."""
    s = _as_scores(scores).scores
    sigma = config.kernel_width
    w = gaussian_weights(s.size, target_count, sigma)
    total = w.sum()
    tau = min(max(np.dot(w, s) / total, s[-1]), s[0])
    j = np.arange(1, s.size + 1, dtype=float)
    return float(n_visual * np.sum(w * (j - target_count) / (sigma**2 * total) * (s - tau)))


def build_masks(scores, threshold: float, config: RelaxationConfig) -> MaskTriple:
    s = _as_scores(scores).scores
    hard = (s >= threshold).astype(float)
    soft = expit((s - threshold) / config.temperature)
    # soft + (hard - soft) can differ from hard by an ulp, so take hard directly
    return MaskTriple(hard=hard, soft=soft, ste=hard.copy())


def ste_backward(upstream, masks: MaskTriple, config: RelaxationConfig) -> float:
    """``dL/dtau`` from the upstream mask gradient, through the sigmoid surrogate."""
    g = np.asarray(upstream, dtype=float)
    if g.shape != masks.soft.shape:
        raise ValueError(f"upstream shape {g.shape} does not match masks {masks.soft.shape}")
    m = masks.soft
    return float(-np.sum(g * m * (1.0 - m)) / config.temperature)


def hard_pick(scores, target_count: float) -> float:
    """Score at the 1-based index nearest ``target_count`` (clamped to the valid range)."""
    s = _as_scores(scores).scores
    idx = int(np.clip(np.floor(target_count + 0.5), 1, s.size))
    return float(s[idx - 1])
