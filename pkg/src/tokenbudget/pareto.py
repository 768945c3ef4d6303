"""Grid sampling of discrete configurations and Pareto frontier extraction.

A configuration is scored by running it through the discrete pipeline (exact
top-``floor(r N_v)`` selection per layer), mapping the distillation loss to
``p = 1 / (1 + loss)``. Frontier points maximize ``p`` and minimize FLOPs.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Iterable, List, Sequence

import numpy as np

from .cost_model import CostModelParams, flops_total
from .toy_vlm import ToyInstance, discrete_loss, retained_counts

# 0.01, 0.06, ..., 0.96 in steps of 0.05, then 0.99
GRID_VALUES = tuple(round(0.01 + 0.05 * j, 2) for j in range(20)) + (0.99,)
DEFAULT_GRID_COUNT = 700


@dataclass(frozen=True)
class EvalPoint:
    config_id: str
    performance: float
    flops: float
    profile: tuple

    def __post_init__(self):
        if not 0.0 <= self.performance <= 1.0:
            raise ValueError(f"performance must lie in [0, 1], got {self.performance}")
        if not self.flops > 0:
            raise ValueError(f"flops must be positive, got {self.flops}")
        object.__setattr__(self, "profile", tuple(float(x) for x in self.profile))


@dataclass(frozen=True)
class ParetoFrontier:
    points: tuple

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)


def sample_grid(layers: int, count: int = DEFAULT_GRID_COUNT, seed: int = 0) -> List[np.ndarray]:
    """``count`` profiles with every layer ratio drawn uniformly from :data:`GRID_VALUES`."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    values = np.array(GRID_VALUES)
    idx = rng.integers(0, len(values), size=(count, layers))
    return [values[row] for row in idx]


def performance_from_loss(loss: float) -> float:
    return 1.0 / (1.0 + loss)


def evaluate_discrete(instance: ToyInstance, profile, params: CostModelParams, config_id: str = "") -> EvalPoint:
    """Score a profile with hard top-k selection and integer token counts."""
    r = np.asarray(profile, dtype=float)
    counts = retained_counts(instance, r)
    loss = discrete_loss(instance, r)
    flops = flops_total(params, counts / instance.spec.n_visual)
    return EvalPoint(
        config_id=config_id,
        performance=performance_from_loss(loss),
        flops=flops,
        profile=tuple(r),
    )


def dominates(a: EvalPoint, b: EvalPoint) -> bool:
    """True when ``a`` is at least as good in both objectives and strictly better in one."""
    return (
        a.performance >= b.performance
        and a.flops <= b.flops
        and (a.performance > b.performance or a.flops < b.flops)
    )


def _dedupe(points: Iterable[EvalPoint]) -> List[EvalPoint]:
    # one representative per config_id, then per (flops, performance) pair
    seen_ids, seen_xy, out = set(), set(), []
    for p in points:
        xy = (p.flops, p.performance)
        if p.config_id in seen_ids or xy in seen_xy:
            continue
        seen_ids.add(p.config_id)
        seen_xy.add(xy)
        out.append(p)
    return out


def extract_frontier(points: Sequence[EvalPoint]) -> ParetoFrontier:
    """Non-dominated subset, sorted by FLOPs ascending.

    Sort by FLOPs (ties: higher performance first) and keep each point whose
    performance beats everything cheaper.
    """
    points = _dedupe(points)
    if not points:
        raise ValueError("cannot extract a frontier from an empty point set")
    ordered = sorted(points, key=lambda p: (p.flops, -p.performance))
    frontier = []
    best = -np.inf
    for p in ordered:
        if p.performance > best:
            frontier.append(p)
            best = p.performance
    return ParetoFrontier(points=tuple(frontier))


def brute_force_frontier(points: Sequence[EvalPoint]) -> List[EvalPoint]:
    """All-pairs non-dominated filter; the reference for :func:`extract_frontier`."""
    points = _dedupe(points)
    return [p for p in points if not any(dominates(q, p) for q in points if q is not p)]


def best_at_or_below(points: Sequence[EvalPoint], flops: float):
    """Highest-performance point whose FLOPs do not exceed ``flops``, or None."""
    eligible = [p for p in points if p.flops <= flops]
    if not eligible:
        return None
    return max(eligible, key=lambda p: (p.performance, -p.flops))


# --------------------------------------------------------------------------
# serialization

CSV_PREFIX = ("config_id", "flops", "performance")


def _fmt(x: float) -> str:
    # repr round-trips every double exactly
    return repr(float(x))


def points_to_csv(points: Sequence[EvalPoint]) -> str:
    if not points:
        return ",".join(CSV_PREFIX) + "\n"
    n = len(points[0].profile)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(CSV_PREFIX) + [f"r_{i}" for i in range(1, n + 1)])
    for p in points:
        writer.writerow([p.config_id, _fmt(p.flops), _fmt(p.performance)] + [_fmt(x) for x in p.profile])
    return buf.getvalue()


def points_from_csv(text: str) -> List[EvalPoint]:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    if tuple(header[:3]) != CSV_PREFIX:
        raise ValueError(f"unexpected CSV header {header}")
    return [
        EvalPoint(
            config_id=row[0],
            flops=float(row[1]),
            performance=float(row[2]),
            profile=tuple(float(x) for x in row[3:]),
        )
        for row in body
    ]


def points_to_json(points: Sequence[EvalPoint]) -> str:
    payload = [
        {
            "config_id": p.config_id,
            "flops": p.flops,
            "performance": p.performance,
            "profile": list(p.profile),
        }
        for p in points
    ]
    return json.dumps(payload, indent=1)


def points_from_json(text: str) -> List[EvalPoint]:
    return [
        EvalPoint(
            config_id=d["config_id"],
            flops=d["flops"],
            performance=d["performance"],
            profile=tuple(d["profile"]),
        )
        for d in json.loads(text)
    ]
