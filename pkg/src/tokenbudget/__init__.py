"""Budget-constrained search over per-layer visual-token retention ratios."""

from .alm import AlmConfig, FreeProfile, KernelProfile, SearchProblem, SearchResult, TransformerCost, outer_loop
from .cost_model import Budget, CostModelParams, flops_grad, flops_layer, flops_total, full_flops, resolve_budget
from .kernels import KernelSpec, Variant, kernel_eval, kernel_grad, profile_from_kernel
from .pareto import EvalPoint, ParetoFrontier, dominates, evaluate_discrete, extract_frontier, sample_grid
from .relaxation import RelaxationConfig, build_masks, soft_threshold, soft_threshold_grad, ste_backward
from .toy_vlm import ToyEvaluator, ToyModelSpec, generate_instance

__all__ = [
    "AlmConfig", "Budget", "CostModelParams", "EvalPoint", "FreeProfile", "KernelProfile", "KernelSpec",
    "ParetoFrontier", "RelaxationConfig", "SearchProblem", "SearchResult", "ToyEvaluator", "ToyModelSpec",
    "TransformerCost", "Variant", "build_masks", "dominates", "evaluate_discrete", "extract_frontier",
    "flops_grad", "flops_layer", "flops_total", "full_flops", "generate_instance", "kernel_eval", "kernel_grad",
    "outer_loop", "profile_from_kernel", "resolve_budget", "sample_grid", "soft_threshold",
    "soft_threshold_grad", "ste_backward",
]
