"""Budget-constrained profile search with a slack-eliminated augmented Lagrangian.

The problem ``min loss(r) s.t. F(r) <= B`` is written with a squared slack
``B - F(r) - y^2 = 0``; minimizing the augmented Lagrangian over ``y`` in
closed form leaves::

    phi(r, w, lam) = loss(r) + (z^2 - w^2) / (2 lam),
    z = max(0, w - lam * (B - F(r)))

FLOPs are divided by the unpruned cost before entering ``phi`` so that ``lam``,
``w`` and the tolerance are scale free. The outer loop alternates an inner
gradient descent on ``phi`` with penalty growth and the multiplier update
``w <- w - lam * (B - F)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import cost_model
from .cost_model import Budget, CostModelParams
from .kernels import KernelSpec, Variant, profile_from_kernel, profile_jacobian

logger = logging.getLogger(__name__)

PENALTY_CAP = 1e8
STALL_LIMIT = 3
MAX_HALVINGS = 40


class NumericalFailure(RuntimeError):
    pass


class InfeasibleBudget(ValueError):
    pass


@dataclass(frozen=True)
class AlmConfig:
    penalty_init: float = 100.0
    penalty_growth: float = 5.0
    violation_decrease: float = 0.5
    tolerance: float = 0.005
    max_outer: int = 20
    inner_steps: int = 50
    inner_step_size: float = 1e-4
    inner_tol: float = 1e-6
    multiplier_init: float = 0.0

    def __post_init__(self):
        if not self.penalty_init > 0:
            raise ValueError("penalty_init must be positive")
        if not self.penalty_growth > 1:
            raise ValueError("penalty_growth (alpha) must exceed 1")
        if not 0 < self.violation_decrease < 1:
            raise ValueError("violation_decrease (beta) must lie in (0, 1)")
        if not self.tolerance > 0:
            raise ValueError("tolerance (epsilon) must be positive")
        if self.max_outer < 1 or self.inner_steps < 0:
            raise ValueError("max_outer must be >= 1 and inner_steps >= 0")
        if not self.inner_step_size > 0:
            raise ValueError("inner_step_size must be positive")


@dataclass
class AlmState:
    multiplier: float
    penalty: float
    iteration: int = 0
    violation_history: List[float] = field(default_factory=list)


@dataclass
class SearchResult:
    profile: np.ndarray
    multiplier: float
    penalty: float
    loss: float
    flops: float
    budget: float
    converged: bool
    outer_iterations: int
    evaluations: int
    params: np.ndarray
    status: str
    trace: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "profile": [float(x) for x in self.profile],
            "params": [float(x) for x in self.params],
            "multiplier": float(self.multiplier),
            "penalty": float(self.penalty),
            "loss": float(self.loss),
            "flops": float(self.flops),
            "budget": float(self.budget),
            "converged": bool(self.converged),
            "outer_iterations": int(self.outer_iterations),
            "evaluations": int(self.evaluations),
            "status": self.status,
        }


# --------------------------------------------------------------------------
# cost functions


class TransformerCost:
    """FLOPs of :mod:`cost_model` behind the cost interface used here."""

    def __init__(self, params: CostModelParams):
        self.params = params

    def flops(self, r) -> float:
        return float(cost_model.layer_costs(self.params, r).sum())

    def grad(self, r) -> np.ndarray:
        return cost_model.layer_cost_slopes(self.params, r)

    def resolve(self, budget) -> float:
        if isinstance(budget, Budget):
            return cost_model.resolve_budget(self.params, budget)
        return float(budget)


class LinearCost:
    """``F(r) = c . r``; used by the analytic test problems."""

    def __init__(self, weights):
        self.weights = np.asarray(weights, dtype=float)

    def flops(self, r) -> float:
        return float(np.dot(self.weights, r))

    def grad(self, r) -> np.ndarray:
        return self.weights.copy()

    def resolve(self, budget) -> float:
        if isinstance(budget, Budget):
            if budget.fraction is not None:
                return budget.fraction * self.flops(np.ones_like(self.weights))
            return float(budget.absolute_flops)
        return float(budget)


class QuadraticLoss:
    """``loss(r) = 0.5 (r - a)^T Q (r - a)`` with an evaluation counter."""

    def __init__(self, hessian, center):
        self.hessian = np.asarray(hessian, dtype=float)
        self.center = np.asarray(center, dtype=float)
        self.evaluations = 0

    @property
    def num_layers(self) -> int:
        return self.center.size

    def loss(self, r) -> float:
        self.evaluations += 1
        d = np.asarray(r, dtype=float) - self.center
        return float(0.5 * d @ self.hessian @ d)

    def loss_and_grad(self, r):
        self.evaluations += 1
        d = np.asarray(r, dtype=float) - self.center
        g = self.hessian @ d
        return float(0.5 * d @ g), g


# --------------------------------------------------------------------------
# parameterizations


class FreeProfile:
    """Per-layer ratios optimized directly, projected onto [0, 1] after each step."""

    variant = Variant.FREE

    def __init__(self, num_layers: int):
        self.num_layers = num_layers

    def initial(self) -> np.ndarray:
        return np.ones(self.num_layers)

    def profile(self, theta) -> np.ndarray:
        return np.clip(np.asarray(theta, dtype=float), 0.0, 1.0)

    def pullback(self, theta, grad_r) -> np.ndarray:
        return np.asarray(grad_r, dtype=float)

    def project(self, theta) -> np.ndarray:
        return np.clip(theta, 0.0, 1.0)

    def describe(self, theta) -> dict:
        return {"variant": "free"}


class KernelProfile:
    """Profiles generated by a kernel; ``trainable`` picks the parameters that move."""

    MIN_RATIO = 1e-6
    MIN_SHARPNESS = 1e-3

    def __init__(self, spec: KernelSpec, trainable: Sequence[str] = ("position", "ratio")):
        self.spec = spec
        self.num_layers = spec.num_layers
        names = ("position", "ratio", "sharpness")
        unknown = set(trainable) - set(names)
        if unknown:
            raise ValueError(f"unknown kernel parameters {sorted(unknown)}")
        self.mask = np.array([n in trainable for n in names], dtype=float)

    def initial(self) -> np.ndarray:
        return self.spec.params

    def profile(self, theta) -> np.ndarray:
        return profile_from_kernel(self.spec.with_params(theta))

    def pullback(self, theta, grad_r) -> np.ndarray:
        jac = profile_jacobian(self.spec.with_params(theta))
        return (jac.T @ grad_r) * self.mask

    def project(self, theta) -> np.ndarray:
        theta = np.array(theta, dtype=float)
        theta[1] = min(max(theta[1], self.MIN_RATIO), 1.0)
        theta[2] = max(theta[2], self.MIN_SHARPNESS)
        return theta

    def describe(self, theta) -> dict:
        position, ratio, sharpness = (float(x) for x in theta)
        return {
            "variant": self.spec.variant.value,
            "position": position,
            "ratio": ratio,
            "sharpness": sharpness,
            "steps": self.spec.steps,
        }


# --------------------------------------------------------------------------
# objective pieces


def _z(flops: float, budget: float, multiplier: float, penalty: float) -> float:
    return max(0.0, multiplier - penalty * (budget - flops))


def phi_eval(loss: float, flops: float, budget: float, state: AlmState) -> float:
    """Slack-eliminated augmented Lagrangian value."""
    if not state.penalty > 0:
        raise ValueError("penalty must be positive")
    z = _z(flops, budget, state.multiplier, state.penalty)
    return loss + (z * z - state.multiplier**2) / (2.0 * state.penalty)


def phi_grad(loss_grad, flops_grad, flops: float, budget: float, state: AlmState) -> np.ndarray:
    """Gradient of :func:`phi_eval` w.r.t. the profile: ``dL/dr + z dF/dr``."""
    gl = np.asarray(loss_grad, dtype=float)
    gf = np.asarray(flops_grad, dtype=float)
    if gl.shape != gf.shape:
        raise ValueError(f"gradient shapes differ: {gl.shape} vs {gf.shape}")
    z = _z(flops, budget, state.multiplier, state.penalty)
    return gl + z * gf if z > 0 else gl.copy()


def optimal_slack_sq(gap: float, multiplier: float, penalty: float) -> float:
    """Minimizing ``y^2`` of the slack augmented Lagrangian for a given constraint gap ``B - F``."""
    return max(0.0, gap - multiplier / penalty)


def multiplier_update(multiplier: float, penalty: float, gap: float) -> float:
    """``w - lam * h`` with ``h = B - F - y*^2`` the residual of the slack equality.

    While the slack is zero (``lam * gap <= w``) this is ``w - lam * (B - F)``;
    otherwise the residual is ``w / lam`` and the multiplier drops to zero.
    """
    h = gap - optimal_slack_sq(gap, multiplier, penalty)
    return multiplier - penalty * h


def slack_lagrangian(loss: float, flops: float, budget: float, slack: float, multiplier: float, penalty: float) -> float:
    """The augmented Lagrangian before eliminating the slack ``y``."""
    h = budget - flops - slack * slack
    return loss - multiplier * h + 0.5 * penalty * h * h


class SearchProblem:
    """Loss model, cost model and parameterization, on the normalized FLOPs scale."""

    def __init__(self, model, cost, parameterization=None):
        self.model = model
        self.cost = cost
        self.param = parameterization or FreeProfile(model.num_layers)
        self.scale = cost.flops(np.ones(model.num_layers))
        if not self.scale > 0:
            raise ValueError("the unpruned cost must be positive")
        self.floor = cost.flops(np.zeros(model.num_layers)) / self.scale
        self._seen = {}

    def loss_at(self, r) -> float:
        """Loss at ``r``, reusing a recent evaluation from :meth:`phi` when possible."""
        key = np.asarray(r, dtype=float).tobytes()
        if key in self._seen:
            return self._seen[key]
        return self.model.loss(r)

    @property
    def evaluations(self) -> int:
        return self.model.evaluations

    def normalized_flops(self, r) -> float:
        return self.cost.flops(r) / self.scale

    def phi(self, theta, budget_n: float, state: AlmState):
        """``phi`` and its gradient w.r.t. ``theta``; one model evaluation."""
        r = self.param.profile(theta)
        loss, gl = self.model.loss_and_grad(r)
        self._seen[r.tobytes()] = loss
        if len(self._seen) > 8:
            self._seen.pop(next(iter(self._seen)))
        flops = self.normalized_flops(r)
        value = phi_eval(loss, flops, budget_n, state)
        if not math.isfinite(value):
            raise NumericalFailure(f"non-finite objective {value} at profile {r}")
        grad_r = phi_grad(gl, self.cost.grad(r) / self.scale, flops, budget_n, state)
        return value, self.param.pullback(theta, grad_r)


# --------------------------------------------------------------------------
# inner and outer loops


@dataclass
class InnerInfo:
    steps: int
    accepted: int
    evaluations: int
    step_size: float
    value: float
    # projected gradient at or below inner_tol on exit
    stationary: bool
    # stopped because step halving found no decrease
    stalled: bool


def inner_solve(objective: Callable, theta0, config: AlmConfig, project: Callable = None, step_size: Optional[float] = None):
    """Gradient descent with an adaptive step, warm-started at ``theta0``.

    A step is accepted only if it lowers the objective; after an accepted step
    the step size doubles, after a rejection it halves. The loop stops after
    ``config.inner_steps`` iterations, when the projected gradient falls below
    ``config.inner_tol``, or when halving no longer finds a decrease.

    Returns ``(theta, InnerInfo)``.
    """
    project = project or (lambda t: t)
    step = config.inner_step_size if step_size is None else step_size
    theta = project(np.array(theta0, dtype=float))
    value, grad = objective(theta)
    evals = 1
    accepted = 0
    stationary = stalled = False
    steps = 0
    while steps < config.inner_steps:
        # zero in directions blocked by the bounds
        pg = theta - project(theta - grad)
        if np.linalg.norm(pg) <= config.inner_tol:
            stationary = True
            break
        steps += 1
        improved = False
        for _ in range(MAX_HALVINGS):
            cand = project(theta - step * grad)
            if np.array_equal(cand, theta):
                break
            cand_value, cand_grad = objective(cand)
            evals += 1
            if cand_value < value:
                improved = True
                break
            step *= 0.5
        if not improved:
            stalled = True
            step = max(step, config.inner_step_size)
            break
        theta, value, grad = cand, cand_value, cand_grad
        accepted += 1
        step *= 2.0
    return theta, InnerInfo(
        steps=steps,
        accepted=accepted,
        evaluations=evals,
        step_size=step,
        value=value,
        stationary=stationary,
        stalled=stalled,
    )


def outer_loop(problem: SearchProblem, budget, alm: AlmConfig = AlmConfig(), theta0=None, inner: Callable = None) -> SearchResult:
    """Run the augmented Lagrangian outer iteration for one budget.

    ``budget`` is a :class:`Budget` or an absolute FLOPs value. ``inner`` may
    replace :func:`inner_solve` (same signature and return shape); tests use
    this to script iterates.
    """
    budget_abs = problem.cost.resolve(budget)
    if not budget_abs > 0:
        raise InfeasibleBudget(f"budget must be positive, got {budget_abs}")
    budget_n = budget_abs / problem.scale
    if budget_n < problem.floor:
        raise InfeasibleBudget(
            f"budget {budget_abs:.6g} is below the all-zeros cost {problem.floor * problem.scale:.6g}"
        )
    inner = inner or inner_solve
    state = AlmState(multiplier=alm.multiplier_init, penalty=alm.penalty_init)
    theta = problem.param.project(
        problem.param.initial() if theta0 is None else np.array(theta0, dtype=float)
    )
    start_evals = problem.evaluations
    gap_prev = budget_n - problem.normalized_flops(problem.param.profile(theta))
    step = alm.inner_step_size
    stalls = 0
    converged = False
    status = "max_outer reached"
    trace = []

    def objective(t):
        return problem.phi(t, budget_n, state)

    for k in range(1, alm.max_outer + 1):
        state.iteration = k
        theta, info = inner(objective, theta, alm, problem.param.project, step)
        step = info.step_size
        r = problem.param.profile(theta)
        loss = problem.loss_at(r)
        if not math.isfinite(loss):
            raise NumericalFailure(f"non-finite loss at outer iteration {k}")
        flops_n = problem.normalized_flops(r)
        gap = budget_n - flops_n
        violation = abs(gap) / (1.0 + budget_n)
        state.violation_history.append(violation)
        trace.append(
            {
                "k": k,
                "lambda": state.penalty,
                "w": state.multiplier,
                "loss": loss,
                "flops": flops_n * problem.scale,
                "violation": violation,
            }
        )
        if violation < alm.tolerance:
            converged, status = True, "budget met"
            break
        if gap > 0 and state.multiplier <= 0.0 and (info.stationary or info.stalled):
            # feasible local minimum of the loss alone; w would stay at zero
            converged, status = True, "constraint inactive"
            break
        stalls = stalls + 1 if info.accepted == 0 else 0
        if stalls >= STALL_LIMIT:
            status = "inner loop stalled"
            break
        if gap_prev == 0 or abs(gap) / abs(gap_prev) >= alm.violation_decrease:
            if state.penalty * alm.penalty_growth > PENALTY_CAP:
                logger.warning("penalty capped at %g", PENALTY_CAP)
                state.penalty = PENALTY_CAP
            else:
                state.penalty *= alm.penalty_growth
        state.multiplier = multiplier_update(state.multiplier, state.penalty, gap)
        gap_prev = gap

    r = problem.param.profile(theta)
    return SearchResult(
        profile=r,
        multiplier=state.multiplier,
        penalty=state.penalty,
        loss=trace[-1]["loss"],
        flops=problem.normalized_flops(r) * problem.scale,
        budget=budget_abs,
        converged=converged,
        outer_iterations=state.iteration,
        evaluations=problem.evaluations - start_evals,
        params=np.asarray(theta, dtype=float),
        status=status,
        trace=trace,
    )


def write_trace(result: SearchResult, path) -> None:
    with open(path, "w") as fh:
        for rec in result.trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# optimality diagnostics


@dataclass
class KKTReport:
    stationarity: float
    violation: float
    complementarity: float
    hessian_min_eig: float
    effective_multiplier: float


def fd_hessian(func: Callable, x, h: float = 1e-4) -> np.ndarray:
    """Symmetric central-difference Hessian of a scalar function."""
    x = np.asarray(x, dtype=float)
    n = x.size
    hess = np.empty((n, n))
    eye = np.eye(n) * h
    f0 = func(x)
    for i in range(n):
        for j in range(i, n):
            if i == j:
                val = (func(x + eye[i]) - 2.0 * f0 + func(x - eye[i])) / (h * h)
            else:
                val = (
                    func(x + eye[i] + eye[j])
                    - func(x + eye[i] - eye[j])
                    - func(x - eye[i] + eye[j])
                    + func(x - eye[i] - eye[j])
                ) / (4.0 * h * h)
            hess[i, j] = hess[j, i] = val
    return hess


def kkt_check(result: SearchResult, problem: SearchProblem, penalty: Optional[float] = None, h: float = 1e-4) -> KKTReport:
    """First- and second-order optimality diagnostics at a search result.

    Everything is on the normalized FLOPs scale. The Hessian is of
    ``phi(., w_bar, penalty)`` in profile space; ``penalty`` defaults to the
    result's final penalty.
    """
    r = np.asarray(result.profile, dtype=float)
    budget_n = result.budget / problem.scale
    lam = result.penalty if penalty is None else penalty
    flops_n = problem.normalized_flops(r)
    gap = budget_n - flops_n
    z = _z(flops_n, budget_n, result.multiplier, lam)
    _, gl = problem.model.loss_and_grad(r)
    grad = gl + z * problem.cost.grad(r) / problem.scale
    # drop components pushing against an active box bound
    free = ~(((r <= 0.0) & (grad > 0)) | ((r >= 1.0) & (grad < 0)))
    stationarity = float(np.max(np.abs(grad[free]))) if free.any() else 0.0
    state = AlmState(multiplier=result.multiplier, penalty=lam)

    def phi_r(x):
        loss = problem.model.loss(x)
        return phi_eval(loss, problem.normalized_flops(x), budget_n, state)

    hess = fd_hessian(phi_r, r, h)
    return KKTReport(
        stationarity=stationarity,
        violation=abs(min(0.0, gap)),
        complementarity=abs(result.multiplier * gap),
        hessian_min_eig=float(np.linalg.eigvalsh(hess).min()),
        effective_multiplier=z,
    )
