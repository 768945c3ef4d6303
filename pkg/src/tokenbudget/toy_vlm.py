"""A small, fully differentiable stand-in for a pruned vision-language model.

Each layer holds ``N_v`` visual tokens with a scalar importance score and a
value vector over ``C`` classes. The reference logits aggregate every token,
weighted by a softmax over the layer's scores::

    l = scale * sum_i sum_j a_ij v_ij,     a_i = softmax(sharpness * s_i)

The pruned logits apply the same sum with each term multiplied by a token mask
derived from the soft threshold of the layer's retention ratio. The loss is
``KL(softmax(l_pruned) || softmax(l))``.

Random draws come from a counter-based hash of ``(seed, layer, token, slot)``
so an instance depends only on its spec, not on generator state or platform.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import log_softmax, softmax

from .relaxation import (
    RelaxationConfig,
    build_masks,
    soft_threshold,
    soft_threshold_grad,
    ste_backward,
)

MODES = ("ste", "soft")

_MASK64 = (1 << 64) - 1
# stream tags for the independent draws
_SCORE, _VALUE, _GAIN, _DIRECTION = 1, 2, 3, 4


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(_MASK64)
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(_MASK64)
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(_MASK64)
    return x ^ (x >> np.uint64(31))


def counter_uniform(seed: int, stream: int, layer, token, slot=0) -> np.ndarray:
    """Uniform draws in the open interval (0, 1), keyed on the given counters.

    The key is folded through splitmix64 one counter at a time, so every
    ``(seed, stream, layer, token, slot)`` tuple maps to an independent draw.
    """
    shape = np.broadcast_shapes(np.shape(layer), np.shape(token), np.shape(slot))
    with np.errstate(over="ignore"):
        h = _splitmix64(np.full(shape, seed & _MASK64, dtype=np.uint64))
        for counter in (stream, layer, token, slot):
            c = np.broadcast_to(np.asarray(counter, dtype=np.uint64), shape)
            h = _splitmix64(h ^ c)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) / float(1 << 53)


@dataclass(frozen=True)
class ToyModelSpec:
    seed: int = 1
    num_layers: int = 8
    n_visual: int = 64
    num_classes: int = 4
    score_spread: float = 3.0
    attention_sharpness: float = 2.0
    logit_scale: float = 8.0
    value_coherence: float = 0.8

    def __post_init__(self):
        if self.num_layers < 1 or self.n_visual < 1:
            raise ValueError("num_layers and n_visual must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.score_spread < 0:
            raise ValueError("score_spread must be non-negative")
        if not 0.0 <= self.value_coherence <= 1.0:
            raise ValueError("value_coherence must lie in [0, 1]")


@dataclass(frozen=True)
class ToyInstance:
    spec: ToyModelSpec
    scores: np.ndarray  # (L, N_v), each row descending
    values: np.ndarray  # (L, N_v, C), entries in [-1, 1]
    attention: np.ndarray = field(init=False, repr=False)  # (L, N_v)

    def __post_init__(self):
        att = softmax(self.spec.attention_sharpness * self.scores, axis=1)
        object.__setattr__(self, "attention", att)
        for arr in (self.scores, self.values, self.attention):
            arr.flags.writeable = False

    # fixture serialization -------------------------------------------------
    def to_json(self) -> str:
        payload = {
            "spec": asdict(self.spec),
            "scores": self.scores.tolist(),
            "values": self.values.tolist(),
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ToyInstance":
        payload = json.loads(text)
        return cls(
            spec=ToyModelSpec(**payload["spec"]),
            scores=np.array(payload["scores"], dtype=float),
            values=np.array(payload["values"], dtype=float),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "ToyInstance":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class LogitPair:
    reference: np.ndarray
    pruned: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.reference)) and np.all(np.isfinite(self.pruned))):
            raise ValueError("logits must be finite")


def generate_instance(spec: ToyModelSpec) -> ToyInstance:
    L, N, C = spec.num_layers, spec.n_visual, spec.num_classes
    layer = np.arange(L)[:, None]
    token = np.arange(N)[None, :]
    u = counter_uniform(spec.seed, _SCORE, layer, token)
    scores = 1.0 / (1.0 + np.exp(-spec.score_spread * (2.0 * u - 1.0)))
    scores = -np.sort(-scores, axis=1)

    gain = 0.25 + 0.75 * counter_uniform(spec.seed, _GAIN, np.arange(L), 0)
    uv = counter_uniform(
        spec.seed, _VALUE, layer[:, :, None], token[:, :, None], np.arange(C)[None, None, :]
    )
    # shared per-layer direction plus per-token noise; convex mix stays in [-1, 1]
    direction = 2.0 * counter_uniform(spec.seed, _DIRECTION, np.arange(L)[:, None], 0, np.arange(C)[None, :]) - 1.0
    rho = spec.value_coherence
    values = gain[:, None, None] * (rho * direction[:, None, :] + (1.0 - rho) * (2.0 * uv - 1.0))
    return ToyInstance(spec=spec, scores=scores, values=values)


def _check_profile(instance: ToyInstance, profile) -> np.ndarray:
    r = np.asarray(profile, dtype=float)
    if r.shape != (instance.spec.num_layers,):
        raise ValueError(
            f"profile has shape {r.shape}, expected ({instance.spec.num_layers},)"
        )
    return r


def reference_logits(instance: ToyInstance) -> np.ndarray:
    weighted = instance.attention[:, :, None] * instance.values
    return instance.spec.logit_scale * weighted.sum(axis=(0, 1))


def masked_logits(instance: ToyInstance, masks: np.ndarray) -> np.ndarray:
    """Logits with token ``(i, j)`` weighted by ``masks[i, j]``."""
    weighted = (instance.attention * masks)[:, :, None] * instance.values
    return instance.spec.logit_scale * weighted.sum(axis=(0, 1))


def layer_masks(instance: ToyInstance, profile, config: RelaxationConfig):
    """Per-layer thresholds and mask triples for a retention profile."""
    r = _check_profile(instance, profile)
    n_v = instance.spec.n_visual
    taus = np.empty(r.size)
    triples = []
    for i, ratio in enumerate(r):
        taus[i] = soft_threshold(instance.scores[i], ratio * n_v, config)
        triples.append(build_masks(instance.scores[i], taus[i], config))
    return taus, triples


def _forward_masks(triples, mode: str) -> np.ndarray:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return np.stack([t.ste if mode == "ste" else t.soft for t in triples])


def forward(instance: ToyInstance, profile, config: RelaxationConfig, mode: str = "ste") -> LogitPair:
    _, triples = layer_masks(instance, profile, config)
    return LogitPair(
        reference=reference_logits(instance),
        pruned=masked_logits(instance, _forward_masks(triples, mode)),
    )


def distill_loss(pair: LogitPair) -> float:
    """``KL(softmax(pruned) || softmax(reference))``."""
    log_q = log_softmax(pair.pruned)
    log_p = log_softmax(pair.reference)
    return float(max(np.sum(np.exp(log_q) * (log_q - log_p)), 0.0))


def loss_grad_logits(pair: LogitPair) -> np.ndarray:
    """Derivative of the KL loss w.r.t. the pruned logits: ``q * (log q - log p - KL)``."""
    log_q = log_softmax(pair.pruned)
    log_p = log_softmax(pair.reference)
    q = np.exp(log_q)
    diff = log_q - log_p
    return q * (diff - np.dot(q, diff))


def mask_upstream(instance: ToyInstance, dlogits: np.ndarray) -> np.ndarray:
    """``dL/dm_ij`` for the linear aggregation, shape ``(L, N_v)``."""
    proj = instance.values @ dlogits
    return instance.spec.logit_scale * instance.attention * proj


def loss_and_grad(instance: ToyInstance, profile, config: RelaxationConfig, mode: str = "ste"):
    """Distillation loss and its gradient w.r.t. each layer's retention ratio.

    The mask gradient is pushed through the sigmoid surrogate to the
    threshold, then through the Gaussian interpolation to the ratio. In
    ``"ste"`` mode the forward pass uses hard masks, so the gradient is the
    straight-through estimate; in ``"soft"`` mode it is exact.
    """
    r = _check_profile(instance, profile)
    taus, triples = layer_masks(instance, r, config)
    pair = LogitPair(
        reference=reference_logits(instance),
        pruned=masked_logits(instance, _forward_masks(triples, mode)),
    )
    upstream = mask_upstream(instance, loss_grad_logits(pair))
    n_v = instance.spec.n_visual
    grad = np.empty(r.size)
    for i, ratio in enumerate(r):
        dtau = ste_backward(upstream[i], triples[i], config)
        grad[i] = dtau * soft_threshold_grad(instance.scores[i], ratio * n_v, config, n_v)
    return distill_loss(pair), grad


def loss_grad_wrt_profile(instance: ToyInstance, profile, config: RelaxationConfig, mode: str = "ste") -> np.ndarray:
    return loss_and_grad(instance, profile, config, mode)[1]


def discrete_masks(instance: ToyInstance, counts) -> np.ndarray:
    """Keep exactly the top ``counts[i]`` tokens in layer ``i``."""
    counts = np.asarray(counts)
    j = np.arange(instance.spec.n_visual)
    return (j[None, :] < counts[:, None]).astype(float)


def retained_counts(instance: ToyInstance, profile) -> np.ndarray:
    r = _check_profile(instance, profile)
    # floor of r * N_v, not rounding
    return np.floor(r * instance.spec.n_visual).astype(int)


def discrete_loss(instance: ToyInstance, profile) -> float:
    masks = discrete_masks(instance, retained_counts(instance, profile))
    pair = LogitPair(reference_logits(instance), masked_logits(instance, masks))
    return distill_loss(pair)


class ToyEvaluator:
    """Binds an instance to a relaxation and counts model evaluations.

    Each call of :meth:`loss_and_grad` or :meth:`loss` costs one evaluation;
    the counter is what the search is charged against the grid baseline.
    """

    def __init__(self, instance: ToyInstance, config: Optional[RelaxationConfig] = None, mode: str = "ste"):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.instance = instance
        self.config = config or RelaxationConfig()
        self.mode = mode
        self.evaluations = 0

    @property
    def num_layers(self) -> int:
        return self.instance.spec.num_layers

    def loss(self, profile) -> float:
        self.evaluations += 1
        return distill_loss(forward(self.instance, profile, self.config, self.mode))

    def loss_and_grad(self, profile):
        self.evaluations += 1
        return loss_and_grad(self.instance, profile, self.config, self.mode)
