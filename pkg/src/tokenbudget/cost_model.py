"""Forward-pass FLOPs of a decoder stack whose visual tokens are pruned per layer.

Per layer with sequence length ``N`` (text tokens plus retained visual tokens)::

    QKV projections   6 N D^2
    scores QK^T       2 N^2 D
    weighting AV      2 N^2 D
    output proj       2 N D^2
    FFN               4 N D_ffn D

LayerNorm, softmax and residual adds are ignored. FLOPs are real valued because
the retained visual count ``r * N_v`` is fractional during optimization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class CostModelParams:
    n_text: int
    n_visual: int
    hidden_dim: int
    num_layers: int
    ffn_dim: Optional[int] = None

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden_dim)
        for name in ("n_text", "n_visual", "hidden_dim", "num_layers", "ffn_dim"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise TypeError(f"{name} must be an integer, got {value!r}")
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")
        for name in ("hidden_dim", "num_layers", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class Budget:
    """A FLOPs budget, either absolute or as a fraction of the unpruned cost."""

    absolute_flops: Optional[float] = None
    fraction: Optional[float] = None

    def __post_init__(self):
        if (self.absolute_flops is None) == (self.fraction is None):
            raise ValueError("give exactly one of absolute_flops or fraction")
        if self.fraction is not None and not (0.0 < self.fraction <= 1.0):
            raise ValueError(f"budget fraction must lie in (0, 1], got {self.fraction}")
        if self.absolute_flops is not None and not self.absolute_flops > 0:
            raise ValueError(f"absolute budget must be positive, got {self.absolute_flops}")


def _check_ratio(r_i):
    if not (0.0 <= r_i <= 1.0):
        raise ValueError(f"retention ratio must lie in [0, 1], got {r_i}")


def flops_layer(params: CostModelParams, r_i: float) -> float:
    """FLOPs of one layer that keeps a fraction ``r_i`` of the visual tokens."""
    _check_ratio(r_i)
    n = params.n_text + r_i * params.n_visual
    d = params.hidden_dim
    return 8.0 * n * d * d + 4.0 * n * n * d + 4.0 * n * params.ffn_dim * d


def as_profile(params: CostModelParams, profile: Sequence[float]) -> np.ndarray:
    r = np.asarray(profile, dtype=float)
    if r.ndim != 1 or r.shape[0] != params.num_layers:
        raise ValueError(
            f"profile has shape {r.shape}, expected ({params.num_layers},)"
        )
    if np.any(r < 0.0) or np.any(r > 1.0) or not np.all(np.isfinite(r)):
        raise ValueError("retention ratios must lie in [0, 1]")
    return r


def flops_total(params: CostModelParams, profile: Sequence[float]) -> float:
    """Total FLOPs over all layers for a retention profile of length ``num_layers``."""
    r = as_profile(params, profile)
    return float(sum(flops_layer(params, float(x)) for x in r))


def layer_costs(params: CostModelParams, r: np.ndarray) -> np.ndarray:
    """Vectorized per-layer cost without range checks (finite-difference probes may leave [0, 1])."""
    n = params.n_text + np.asarray(r, dtype=float) * params.n_visual
    d = params.hidden_dim
    return 8.0 * n * d * d + 4.0 * n * n * d + 4.0 * n * params.ffn_dim * d


def flops_per_layer(params: CostModelParams, profile: Sequence[float]) -> np.ndarray:
    return layer_costs(params, as_profile(params, profile))


def flops_grad(params: CostModelParams, profile: Sequence[float]) -> np.ndarray:
    """Partial derivatives dF/dr_i.

    With ``N = N_t + r_i N_v`` each layer cost is a quadratic in ``N``, so
    ``dF/dr_i = N_v (8 D^2 + 8 N D + 4 D_ffn D)``.
    """
    return layer_cost_slopes(params, as_profile(params, profile))


def layer_cost_slopes(params: CostModelParams, r: np.ndarray) -> np.ndarray:
    n = params.n_text + np.asarray(r, dtype=float) * params.n_visual
    d = params.hidden_dim
    return params.n_visual * (8.0 * d * d + 8.0 * n * d + 4.0 * params.ffn_dim * d)


def full_flops(params: CostModelParams) -> float:
    return flops_total(params, np.ones(params.num_layers))


def resolve_budget(params: CostModelParams, budget: Budget) -> float:
    if budget.fraction is not None:
        return budget.fraction * full_flops(params)
    return float(budget.absolute_flops)
