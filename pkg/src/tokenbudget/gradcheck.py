"""Central finite-difference checks of every analytic gradient in the package.

Each suite draws random instances away from clipping and tie degeneracies,
compares the analytic gradient with a central difference and reports the
worst relative error ``|g - g_fd|_inf / max(|g_fd|_inf, floor)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import alm, kernels, relaxation, toy_vlm
from .cost_model import CostModelParams, flops_grad, flops_total

DEFAULT_TOL = 1e-4


@dataclass
class SuiteResult:
    name: str
    cases: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.cases > 0 and self.max_rel_error <= self.tolerance


def central_difference(func: Callable, x, h: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape)
    for idx in np.ndindex(x.shape):
        step = np.zeros_like(x)
        step[idx] = h
        out[idx] = (func(x + step) - func(x - step)) / (2.0 * h)
    return out


def rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    a = np.atleast_1d(np.asarray(analytic, dtype=float))
    n = np.atleast_1d(np.asarray(numeric, dtype=float))
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), floor))


def _sorted_scores(rng, n, min_gap=1e-6):
    while True:
        s = np.sort(rng.uniform(0.0, 1.0, n))[::-1]
        if n < 2 or np.min(-np.diff(s)) > min_gap:
            return s


def check_kernels(rng, cases: int = 100, corrupt: float = 0.0) -> SuiteResult:
    worst, done = 0.0, 0
    variants = [kernels.Variant.SINGLE, kernels.Variant.EXP, kernels.Variant.LINEAR, kernels.Variant.MULTISTEP]
    h = 1e-5
    while done < cases:
        variant = variants[done % len(variants)]
        L = int(rng.integers(4, 33))
        if variant is kernels.Variant.SINGLE:
            theta = [rng.uniform(1, L), rng.uniform(0.05, 0.95), rng.uniform(0.2, 3.0)]
        elif variant is kernels.Variant.EXP:
            theta = [rng.uniform(0.0, 1.0 / L), rng.uniform(0.3, 0.95), 1.0]
        elif variant is kernels.Variant.LINEAR:
            theta = [rng.uniform(0.0, 0.5 / L), rng.uniform(0.5, 0.95), 1.0]
        else:
            theta = [rng.uniform(0.2, 3.0), rng.uniform(0.05, 0.95), 1.0]
        spec = kernels.KernelSpec(variant, L, *theta, steps=int(rng.integers(1, 5)))
        layer = int(rng.integers(1, L + 1))
        value = kernels.kernel_eval(spec, layer)
        if not 0.01 < value < 0.99:
            continue
        analytic = kernels.kernel_grad(spec, layer) * (1.0 + corrupt)
        numeric = central_difference(lambda t: kernels.kernel_eval(spec.with_params(t), layer), spec.params, h)
        worst = max(worst, rel_error(analytic, numeric))
        done += 1
    return SuiteResult("kernels", done, worst, DEFAULT_TOL)


def check_soft_threshold(rng, cases: int = 100, corrupt: float = 0.0) -> SuiteResult:
    worst = 0.0
    h = 1e-6
    for _ in range(cases):
        n = int(rng.integers(4, 129))
        s = _sorted_scores(rng, n)
        cfg = relaxation.RelaxationConfig(kernel_width=rng.uniform(0.5, 12.0))
        r = rng.uniform(0.05, 0.95)
        analytic = relaxation.soft_threshold_grad(s, r * n, cfg, n) * (1.0 + corrupt)
        numeric = central_difference(lambda x: relaxation.soft_threshold(s, x[0] * n, cfg), [r], h)
        worst = max(worst, rel_error(analytic, numeric))
    return SuiteResult("soft_threshold", cases, worst, DEFAULT_TOL)


def check_ste(rng, cases: int = 100, corrupt: float = 0.0) -> SuiteResult:
    worst = 0.0
    h = 1e-6
    for _ in range(cases):
        n = int(rng.integers(2, 65))
        s = _sorted_scores(rng, n)
        cfg = relaxation.RelaxationConfig(temperature=rng.uniform(0.05, 0.5))
        tau = rng.uniform(s[-1], s[0])
        upstream = rng.normal(size=n)
        masks = relaxation.build_masks(s, tau, cfg)
        analytic = relaxation.ste_backward(upstream, masks, cfg) * (1.0 + corrupt)

        def surrogate(x):
            return float(np.dot(upstream, relaxation.build_masks(s, x[0], cfg).soft))

        worst = max(worst, rel_error(analytic, central_difference(surrogate, [tau], h)))
    return SuiteResult("ste_backward", cases, worst, DEFAULT_TOL)


def check_toy_chain(rng, cases: int = 100, corrupt: float = 0.0) -> SuiteResult:
    worst = 0.0
    h = 1e-5
    for case in range(cases):
        spec = toy_vlm.ToyModelSpec(
            seed=int(rng.integers(0, 2**31)),
            num_layers=int(rng.integers(1, 5)),
            n_visual=int(rng.integers(4, 33)),
            num_classes=int(rng.integers(2, 6)),
        )
        inst = toy_vlm.generate_instance(spec)
        cfg = relaxation.RelaxationConfig(kernel_width=rng.uniform(1.0, 10.0), temperature=0.1)
        r = rng.uniform(0.1, 0.9, spec.num_layers)
        _, analytic = toy_vlm.loss_and_grad(inst, r, cfg, mode="soft")
        analytic = analytic * (1.0 + corrupt)

        def loss(x):
            return toy_vlm.distill_loss(toy_vlm.forward(inst, x, cfg, mode="soft"))

        worst = max(worst, rel_error(analytic, central_difference(loss, r, h)))
    return SuiteResult("toy_chain", cases, worst, DEFAULT_TOL)


def check_phi(rng, cases: int = 100, corrupt: float = 0.0) -> SuiteResult:
    """phi gradient on a smooth test loss, skipping points near the ``z = 0`` kink."""
    worst, done = 0.0, 0
    h = 1e-6
    while done < cases:
        n = int(rng.integers(1, 6))
        A = rng.normal(size=(n, n))
        center = rng.uniform(0, 1, n)
        c = rng.uniform(0.5, 2.0, n)
        model = alm.QuadraticLoss(A @ A.T + np.eye(n), center)
        budget = rng.uniform(0.2, 0.8) * c.sum()
        state = alm.AlmState(multiplier=rng.uniform(0, 2), penalty=rng.uniform(0.5, 50))
        r = rng.uniform(0, 1, n)
        gap = budget - c @ r
        if abs(state.multiplier - state.penalty * gap) < 1e-3:
            continue
        loss, gl = model.loss_and_grad(r)
        analytic = alm.phi_grad(gl, c, c @ r, budget, state) * (1.0 + corrupt)

        def phi(x):
            return alm.phi_eval(model.loss(x), c @ x, budget, state)

        worst = max(worst, rel_error(analytic, central_difference(phi, r, h)))
        done += 1
    return SuiteResult("phi_grad", done, worst, DEFAULT_TOL)


def check_flops(rng, cases: int = 100, corrupt: float = 0.0) -> SuiteResult:
    worst = 0.0
    for _ in range(cases):
        params = CostModelParams(
            n_text=int(rng.integers(0, 64)),
            n_visual=int(rng.integers(1, 512)),
            hidden_dim=int(rng.integers(8, 256)),
            num_layers=int(rng.integers(1, 6)),
        )
        r = rng.uniform(0.05, 0.95, params.num_layers)
        analytic = flops_grad(params, r) * (1.0 + corrupt)
        # polynomial in r: a relative step keeps the difference well above round-off
        numeric = central_difference(lambda x: flops_total(params, x), r, 1e-4)
        worst = max(worst, rel_error(analytic, numeric))
    return SuiteResult("flops_grad", cases, worst, DEFAULT_TOL)


SUITES: Dict[str, Callable] = {
    "kernels": check_kernels,
    "soft_threshold": check_soft_threshold,
    "ste_backward": check_ste,
    "toy_chain": check_toy_chain,
    "phi_grad": check_phi,
    "flops_grad": check_flops,
}


def run_all(seed: int = 0, cases: int = 100, corrupt: Optional[Dict[str, float]] = None) -> List[SuiteResult]:
    """Run every suite; ``corrupt`` maps suite names to a relative error injected into the analytic side."""
    corrupt = corrupt or {}
    rng = np.random.default_rng(seed)
    return [fn(rng, cases, corrupt.get(name, 0.0)) for name, fn in SUITES.items()]
