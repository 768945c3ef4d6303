"""Parametric layer-wise retention kernels.

Each kernel maps a 1-based layer index ``i`` to a retention ratio, and is
clipped into ``[0, 1]``. Gradients are taken with respect to the parameter
vector ``(position, ratio, sharpness)``; entries a variant does not use are
zero. Inside the clipped region the gradient is zero.

=============  ===============================================
variant        formula
=============  ===============================================
single         1 + (r - 1) * sigm(gamma * (i - k))
exp            r * exp(-k * i)
linear         -k * i + r
multistep      1 - sum_j (1 - r) / M * sigm(k * (i - c_j)),
               c_j = (2j - 1) L / (2M), j = 1..M
free           r_i directly (identity parameterization)
=============  ===============================================
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

PARAM_NAMES = ("position", "ratio", "sharpness")


class Variant(str, enum.Enum):
    SINGLE = "single"
    EXP = "exp"
    LINEAR = "linear"
    MULTISTEP = "multistep"
    FREE = "free"


@dataclass(frozen=True)
class KernelSpec:
    variant: Variant
    num_layers: int
    position: float = 0.0
    ratio: float = 1.0
    sharpness: float = 1.0
    steps: int = 1

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.variant is Variant.FREE:
            raise ValueError("the free mode has no kernel spec; optimize ratios directly")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if not (0.0 < self.ratio <= 1.0):
            raise ValueError(f"ratio must lie in (0, 1], got {self.ratio}")
        if not self.sharpness > 0.0:
            raise ValueError(f"sharpness must be positive, got {self.sharpness}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    @property
    def params(self) -> np.ndarray:
        return np.array([self.position, self.ratio, self.sharpness], dtype=float)

    def with_params(self, theta) -> "KernelSpec":
        position, ratio, sharpness = (float(x) for x in theta)
        return replace(self, position=position, ratio=ratio, sharpness=sharpness)

    def step_centers(self) -> np.ndarray:
        j = np.arange(1, self.steps + 1)
        return (2 * j - 1) * self.num_layers / (2.0 * self.steps)


def _layers(spec: KernelSpec, layer) -> np.ndarray:
    i = np.asarray(layer, dtype=float)
    if np.any(i < 1) or np.any(i > spec.num_layers):
        raise IndexError(f"layer index out of range 1..{spec.num_layers}: {layer}")
    return i


def _raw(spec: KernelSpec, i: np.ndarray) -> np.ndarray:
    k, r = spec.position, spec.ratio
    if spec.variant is Variant.SINGLE:
        return 1.0 + (r - 1.0) * expit(spec.sharpness * (i - k))
    if spec.variant is Variant.EXP:
        # a negative rate can overflow; the result clips to 1 anyway
        with np.errstate(over="ignore"):
            return r * np.exp(-k * i)
    if spec.variant is Variant.LINEAR:
        return -k * i + r
    # multistep
    s = expit(k * (i[..., None] - spec.step_centers()))
    return 1.0 - (1.0 - r) / spec.steps * s.sum(axis=-1)


def _raw_grad(spec: KernelSpec, i: np.ndarray) -> np.ndarray:
    """Unclipped partials, shape ``i.shape + (3,)``."""
    k, r, g = spec.position, spec.ratio, spec.sharpness
    out = np.zeros(i.shape + (3,))
    if spec.variant is Variant.SINGLE:
        s = expit(g * (i - k))
        ds = s * (1.0 - s)
        out[..., 0] = -(r - 1.0) * ds * g
        out[..., 1] = s
        out[..., 2] = (r - 1.0) * ds * (i - k)
    elif spec.variant is Variant.EXP:
        with np.errstate(over="ignore"):
            e = np.exp(-k * i)
        out[..., 0] = -i * r * e
        out[..., 1] = e
    elif spec.variant is Variant.LINEAR:
        out[..., 0] = -i
        out[..., 1] = 1.0
    else:
        offset = i[..., None] - spec.step_centers()
        s = expit(k * offset)
        out[..., 0] = -(1.0 - r) / spec.steps * (s * (1.0 - s) * offset).sum(axis=-1)
        out[..., 1] = s.sum(axis=-1) / spec.steps
    return out


def kernel_eval(spec: KernelSpec, layer):
    """Retention ratio at 1-based ``layer`` (scalar or array), clipped to [0, 1]."""
    i = _layers(spec, layer)
    value = np.clip(_raw(spec, i), 0.0, 1.0)
    return float(value) if value.ndim == 0 else value


def kernel_grad(spec: KernelSpec, layer) -> np.ndarray:
    """Gradient of the retention ratio w.r.t. ``(position, ratio, sharpness)``.

    Returns zeros where the unclipped value falls outside ``(0, 1)``.
    """
    i = _layers(spec, layer)
    raw = _raw(spec, i)
    grad = _raw_grad(spec, i)
    inside = (raw > 0.0) & (raw < 1.0)
    return np.where(inside[..., None], grad, 0.0)


def profile_from_kernel(spec: KernelSpec) -> np.ndarray:
    return kernel_eval(spec, np.arange(1, spec.num_layers + 1))


def profile_jacobian(spec: KernelSpec) -> np.ndarray:
    """``(num_layers, 3)`` Jacobian of the profile w.r.t. the kernel parameters."""
    return kernel_grad(spec, np.arange(1, spec.num_layers + 1))
