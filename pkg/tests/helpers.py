"""Independent reference implementations and analytic problems shared by the tests."""

import math

import numpy as np

from tokenbudget.alm import AlmConfig, LinearCost, QuadraticLoss, SearchProblem

STANDARD_FIXTURE = dict(seed=1, num_layers=8, n_visual=64, num_classes=4)
STANDARD_COST = dict(n_text=4, n_visual=64, hidden_dim=64, num_layers=8)


def layer_flops_oracle(n_text, n_visual, d, d_ffn, r):
    """Term-by-term per-layer count, written out one matmul at a time."""
    n = n_text + r * n_visual
    qkv = 3 * (2 * n * d * d)
    scores = 2 * n * n * d
    weighting = 2 * n * n * d
    out_proj = 2 * n * d * d
    ffn = 2 * n * d * d_ffn + 2 * n * d_ffn * d
    return qkv + scores + weighting + out_proj + ffn


def soft_threshold_oracle(scores, k, sigma):
    num = den = 0.0
    for j, s in enumerate(scores, start=1):
        w = math.exp(-((j - k) ** 2) / (2 * sigma**2))
        num += w * s
        den += w
    return num / den


def soft_threshold_grad_oracle(scores, k, sigma, n_visual):
    tau = soft_threshold_oracle(scores, k, sigma)
    ws = [math.exp(-((j - k) ** 2) / (2 * sigma**2)) for j in range(1, len(scores) + 1)]
    total = sum(ws)
    acc = 0.0
    for j, (w, s) in enumerate(zip(ws, scores), start=1):
        acc += w * (j - k) / (sigma**2 * total) * (s - tau)
    return n_visual * acc


def kl_oracle(pruned, reference):
    q = np.exp(pruned - np.max(pruned))
    q /= q.sum()
    p = np.exp(reference - np.max(reference))
    p /= p.sum()
    return float(sum(qi * (math.log(qi) - math.log(pi)) for qi, pi in zip(q, p)))


def discrete_logits_oracle(instance, profile):
    """Straight-line re-implementation of the discrete forward pass."""
    spec = instance.spec
    logits = np.zeros(spec.num_classes)
    for i in range(spec.num_layers):
        s = instance.scores[i]
        a = np.exp(spec.attention_sharpness * s)
        a /= a.sum()
        keep = int(math.floor(profile[i] * spec.n_visual))
        for j in range(keep):
            logits += spec.logit_scale * a[j] * instance.values[i, j]
    return logits


def y_grid_minimum(loss, flops, budget, w, lam):
    """Minimize ``L - w h + lam/2 h^2`` with ``h = B - F - y^2`` by a coarse-then-fine scan over y."""

    def lagrangian(y):
        h = budget - flops - y * y
        return loss - w * h + 0.5 * lam * h * h

    top = np.sqrt(max(budget - flops, 0.0)) + 1.0
    ys = np.linspace(0.0, top, 20001)
    best = int(np.argmin(lagrangian(ys)))
    fine = np.linspace(ys[max(best - 1, 0)], ys[min(best + 1, ys.size - 1)], 20001)
    return float(np.min(lagrangian(fine)))


# --------------------------------------------------------------------------
# analytic problems for the solver

KKT_WEIGHTS = np.array([1.0, 2.0, 3.0, 4.0])


def kkt_problem():
    """``sum (r_i - 1)^2`` under a linear cost with weights 1..4."""
    loss = QuadraticLoss(2.0 * np.eye(4), np.ones(4))
    return SearchProblem(loss, LinearCost(KKT_WEIGHTS))


def kkt_solution(c, budget):
    """Closed form ``r* = 1 - (w/2) c`` with ``c . r* = budget``."""
    w = 2.0 * (c.sum() - budget) / (c @ c)
    return 1.0 - 0.5 * w * c, w


def indefinite_problem():
    """Quadratic loss with one negative curvature direction along the cost gradient.

    The saddle of the loss lies outside the box, so the constrained minimizer
    is unique at ``r = 0.5`` and needs a penalty above
    ``0.5 * (sum c)^2 / |c|^2`` (normalized scale) to be a strict minimum of phi.
    """
    c = KKT_WEIGHTS
    chat = c / np.linalg.norm(c)
    hessian = np.eye(4) - 1.5 * np.outer(chat, chat)
    center = 0.5 - 1.2 * chat
    problem = SearchProblem(QuadraticLoss(hessian, center), LinearCost(c))
    budget = float(c @ np.full(4, 0.5))
    threshold = 0.5 * c.sum() ** 2 / (c @ c)
    return problem, budget, threshold


INDEFINITE_ALM = AlmConfig(penalty_init=1e-3, tolerance=1e-5, inner_steps=200, max_outer=30)
