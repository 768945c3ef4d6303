"""Command-line driver: ALM search per budget, grid baseline, frontier and comparison reports.

Settings are resolved in increasing precedence: built-in defaults, a manifest
file (JSON or ``key = value`` lines), ``TOKENBUDGET_<KEY>`` environment
variables, then command-line flags. Every output is written with sorted keys
and ``repr`` floats, so identical manifests give byte-identical files.

Exit codes: 0 success, 1 usage error, 2 numerical failure (including failed
gradient checks), 3 infeasible budget(s).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import gradcheck
from .alm import (
    AlmConfig,
    FreeProfile,
    InfeasibleBudget,
    KernelProfile,
    NumericalFailure,
    SearchProblem,
    TransformerCost,
    outer_loop,
)
from .cost_model import Budget, CostModelParams
from .kernels import KernelSpec, Variant
from .pareto import (
    EvalPoint,
    best_at_or_below,
    brute_force_frontier,
    evaluate_discrete,
    extract_frontier,
    points_from_csv,
    points_to_csv,
    points_to_json,
    sample_grid,
)
from .relaxation import RelaxationConfig
from .toy_vlm import ToyEvaluator, ToyModelSpec, generate_instance

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_INFEASIBLE = 0, 1, 2, 3
ENV_PREFIX = "TOKENBUDGET_"
COMMANDS = ("search", "grid", "frontier", "compare", "compare-kernels", "check-grads")
KERNEL_CHOICES = tuple(v.value for v in Variant)


class UsageError(ValueError):
    pass


@dataclass
class RunManifest:
    command: str = "search"
    budgets: List[float] = field(default_factory=lambda: [0.9, 0.7, 0.5, 0.3, 0.1])
    kernel: str = "free"
    steps: int = 2
    # toy model and cost model
    seed: int = 1
    layers: int = 8
    nvisual: int = 64
    classes: int = 4
    ntext: int = 4
    hidden: int = 64
    # relaxation
    sigma: float = 10.0
    temperature: float = 0.1
    mode: str = "ste"
    # ALM
    penalty: float = 100.0
    alpha: float = 5.0
    beta: float = 0.5
    eps: float = 0.005
    max_outer: int = 20
    inner_steps: int = 50
    # grid
    grid_count: int = 700
    grid_seed: int = 0
    # gradient checks
    grad_cases: int = 100
    workers: int = 1
    out: str = "runs"

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        if self.kernel not in KERNEL_CHOICES:
            raise UsageError(f"kernel must be one of {KERNEL_CHOICES}, got {self.kernel!r}")
        if self.workers < 1:
            raise UsageError("workers must be >= 1")
        for b in self.budgets:
            if not 0.0 < b <= 1.0:
                raise UsageError(f"budget fractions must lie in (0, 1], got {b}")
        try:
            self.relaxation()
            self.alm()
            self.toy_spec()
            self.cost_params()
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from exc

    # module configs ----------------------------------------------------------
    def toy_spec(self) -> ToyModelSpec:
        return ToyModelSpec(
            seed=self.seed, num_layers=self.layers, n_visual=self.nvisual, num_classes=self.classes
        )

    def cost_params(self) -> CostModelParams:
        return CostModelParams(
            n_text=self.ntext, n_visual=self.nvisual, hidden_dim=self.hidden, num_layers=self.layers
        )

    def relaxation(self) -> RelaxationConfig:
        return RelaxationConfig(kernel_width=self.sigma, temperature=self.temperature)

    def alm(self) -> AlmConfig:
        return AlmConfig(
            penalty_init=self.penalty,
            penalty_growth=self.alpha,
            violation_decrease=self.beta,
            tolerance=self.eps,
            max_outer=self.max_outer,
            inner_steps=self.inner_steps,
        )

    def instance_key(self) -> dict:
        """Settings that must agree between a search and the grid it is compared with."""
        return {
            "seed": self.seed,
            "layers": self.layers,
            "nvisual": self.nvisual,
            "classes": self.classes,
            "ntext": self.ntext,
            "hidden": self.hidden,
        }

    def to_dict(self) -> dict:
        return asdict(self)


_FIELD_TYPES = {f.name: f.type for f in fields(RunManifest)}


def _coerce(key: str, value):
    if key not in _FIELD_TYPES:
        raise UsageError(f"unknown manifest key {key!r}")
    kind = _FIELD_TYPES[key]
    try:
        if key == "budgets":
            if isinstance(value, str):
                return [float(x) for x in value.replace(",", " ").split()]
            return [float(x) for x in value]
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value for {key}: {value!r}") from exc


def read_manifest_file(path) -> dict:
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        raw = json.loads(text)
    else:
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            raw[key.replace("-", "_")] = value
    return {k: _coerce(k, v) for k, v in raw.items()}


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key in _FIELD_TYPES and key != "command":
                out[key] = _coerce(key, value)
    return out


def build_manifest(command: str, manifest_file=None, flags: Optional[dict] = None, environ=None) -> RunManifest:
    settings = {}
    if manifest_file:
        settings.update(read_manifest_file(manifest_file))
    settings.update(env_overrides(environ))
    settings.update({k: v for k, v in (flags or {}).items() if v is not None})
    settings["command"] = command
    return RunManifest(**settings)


# --------------------------------------------------------------------------
# serialization helpers


def dump_json(payload, path) -> None:
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def budget_tag(fraction: float) -> str:
    return f"{fraction:g}"


def default_kernel_spec(variant: Variant, num_layers: int, steps: int) -> KernelSpec:
    """Starting parameters that sit inside the unclipped region of each kernel."""
    if variant is Variant.SINGLE:
        return KernelSpec(variant, num_layers, position=num_layers / 2.0, ratio=0.5, sharpness=1.0)
    if variant is Variant.EXP:
        return KernelSpec(variant, num_layers, position=0.05, ratio=0.95)
    if variant is Variant.LINEAR:
        return KernelSpec(variant, num_layers, position=0.02, ratio=0.95)
    return KernelSpec(variant, num_layers, position=1.0, ratio=0.5, steps=steps)


def make_problem(manifest: RunManifest, kernel: Optional[str] = None) -> SearchProblem:
    instance = generate_instance(manifest.toy_spec())
    evaluator = ToyEvaluator(instance, manifest.relaxation(), mode=manifest.mode)
    variant = Variant(kernel or manifest.kernel)
    if variant is Variant.FREE:
        param = FreeProfile(manifest.layers)
    else:
        param = KernelProfile(default_kernel_spec(variant, manifest.layers, manifest.steps))
    return SearchProblem(evaluator, TransformerCost(manifest.cost_params()), param)


# --------------------------------------------------------------------------
# search


def search_one(manifest: RunManifest, fraction: float, kernel: Optional[str] = None) -> dict:
    """Search a single budget; infeasible budgets come back as a record, not an exception."""
    problem = make_problem(manifest, kernel)
    record = {"budget_fraction": fraction, "kernel": kernel or manifest.kernel, "instance": manifest.instance_key()}
    try:
        result = outer_loop(problem, Budget(fraction=fraction), manifest.alm())
    except InfeasibleBudget as exc:
        record.update(status="infeasible", error=str(exc))
        return record
    point = evaluate_discrete(problem.model.instance, result.profile, manifest.cost_params(), config_id=f"search-{budget_tag(fraction)}")
    record.update(
        result.to_dict(),
        parameterization=problem.param.describe(result.params),
        discrete={"performance": point.performance, "flops": point.flops},
        trace=result.trace,
    )
    return record


def _map(fn, args: Sequence[tuple], workers: int) -> list:
    if workers <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *a) for a in args]
        return [f.result() for f in futures]


def run_search(manifest: RunManifest) -> List[dict]:
    """Search every budget in the manifest and write one JSON result and one JSONL trace per budget."""
    if not manifest.budgets:
        logger.warning("empty budget list; nothing to search")
        return []
    out = Path(manifest.out) / "search"
    out.mkdir(parents=True, exist_ok=True)
    records = _map(search_one, [(manifest, b) for b in manifest.budgets], manifest.workers)
    for rec in records:
        tag = budget_tag(rec["budget_fraction"])
        trace = rec.pop("trace", [])
        with open(out / f"budget_{tag}.trace.jsonl", "w") as fh:
            for row in trace:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        dump_json(rec, out / f"budget_{tag}.json")
        logger.info("budget %s: %s", tag, rec["status"])
    dump_json({"manifest": manifest.to_dict(), "results": records}, out / "search.json")
    return records


# --------------------------------------------------------------------------
# grid


def _evaluate_chunk(manifest: RunManifest, start: int, profiles: list) -> List[EvalPoint]:
    instance = generate_instance(manifest.toy_spec())
    params = manifest.cost_params()
    return [
        evaluate_discrete(instance, r, params, config_id=f"grid-{start + i:05d}")
        for i, r in enumerate(profiles)
    ]


def write_frontier(points: Sequence[EvalPoint], out: Path) -> dict:
    frontier = extract_frontier(points)
    oracle = brute_force_frontier(points)
    oracle_ok = {p.config_id for p in frontier} == {p.config_id for p in oracle}
    (out / "frontier.csv").write_text(points_to_csv(frontier.points))
    (out / "frontier.json").write_text(points_to_json(frontier.points) + "\n")
    return {"frontier_size": len(frontier), "oracle_match": oracle_ok}


def run_grid(manifest: RunManifest) -> List[EvalPoint]:
    """Sample, evaluate and write the grid table plus its frontier."""
    out = Path(manifest.out) / "grid"
    out.mkdir(parents=True, exist_ok=True)
    profiles = sample_grid(manifest.layers, manifest.grid_count, manifest.grid_seed)
    n_chunks = max(1, min(manifest.workers, len(profiles)))
    bounds = np.linspace(0, len(profiles), n_chunks + 1).astype(int)
    chunks = [(manifest, int(a), profiles[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    points = [p for chunk in _map(_evaluate_chunk, chunks, manifest.workers) for p in chunk]
    (out / "grid.csv").write_text(points_to_csv(points))
    (out / "grid.json").write_text(points_to_json(points) + "\n")
    summary = write_frontier(points, out)
    summary.update(instance=manifest.instance_key(), grid_count=len(points), grid_seed=manifest.grid_seed)
    dump_json(summary, out / "grid_meta.json")
    return points


def run_frontier(manifest: RunManifest) -> dict:
    """Re-extract the frontier from an existing grid table and re-check it against the brute-force filter."""
    out = Path(manifest.out) / "grid"
    table = out / "grid.csv"
    if not table.exists():
        raise UsageError(f"no grid table at {table}; run the grid command first")
    summary = write_frontier(points_from_csv(table.read_text()), out)
    if not summary["oracle_match"]:
        raise NumericalFailure("frontier disagrees with the brute-force filter")
    return summary


# --------------------------------------------------------------------------
# comparison


def run_compare(manifest: RunManifest) -> dict:
    """Per-budget performance gap to the best grid point at equal or lower FLOPs."""
    root = Path(manifest.out)
    search_file, meta_file = root / "search" / "search.json", root / "grid" / "grid_meta.json"
    for f in (search_file, meta_file):
        if not f.exists():
            raise UsageError(f"missing {f}; run search and grid first")
    search = json.loads(search_file.read_text())
    meta = json.loads(meta_file.read_text())
    if search["results"] and search["results"][0]["instance"] != meta["instance"]:
        raise UsageError("search and grid were run on different instances or cost parameters")
    grid = points_from_csv((root / "grid" / "grid.csv").read_text())
    rows, total_evals = [], 0
    for rec in search["results"]:
        row = {"budget_fraction": rec["budget_fraction"], "status": rec["status"]}
        if rec["status"] != "infeasible":
            total_evals += rec["evaluations"]
            p, f = rec["discrete"]["performance"], rec["discrete"]["flops"]
            best = best_at_or_below(grid, f)
            row.update(
                performance=p,
                flops=f,
                evaluations=rec["evaluations"],
                grid_best_performance=None if best is None else best.performance,
                grid_best_config=None if best is None else best.config_id,
                delta_p=None if best is None else p - best.performance,
            )
        rows.append(row)
    report = {
        "rows": rows,
        "search_evaluations": total_evals,
        "grid_evaluations": meta["grid_count"],
        "evaluation_ratio": total_evals / meta["grid_count"],
    }
    dump_json(report, root / "compare.json")
    return report


def run_compare_kernels(manifest: RunManifest, kernels: Sequence[str] = ("multistep", "single")) -> dict:
    """Converged loss of each kernel at every budget, flagging budgets where the first kernel loses."""
    if not manifest.budgets:
        logger.warning("empty budget list; nothing to compare")
        return {"rows": []}
    rows = []
    for fraction in manifest.budgets:
        recs = _map(search_one, [(manifest, fraction, k) for k in kernels], manifest.workers)
        losses = {k: r.get("loss") for k, r in zip(kernels, recs)}
        first, second = losses[kernels[0]], losses[kernels[1]]
        ordered = first is not None and second is not None and first <= second + 1e-6
        rows.append(
            {
                "budget_fraction": fraction,
                "losses": losses,
                "status": {k: r["status"] for k, r in zip(kernels, recs)},
                # a kernel family may be unable to reach the budget at all; show how far off it ended
                "flops_over_budget": {
                    k: (r["flops"] / r["budget"] if "flops" in r else None) for k, r in zip(kernels, recs)
                },
                "ordering_holds": ordered,
                "reversal": not ordered,
            }
        )
    report = {"kernels": list(kernels), "rows": rows}
    root = Path(manifest.out)
    root.mkdir(parents=True, exist_ok=True)
    dump_json(report, root / "kernel_ordering.json")
    return report


def run_check_grads(manifest: RunManifest, corrupt: Optional[Dict[str, float]] = None) -> List[gradcheck.SuiteResult]:
    return gradcheck.run_all(seed=manifest.seed, cases=manifest.grad_cases, corrupt=corrupt)


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    add = common.add_argument
    add("--manifest", metavar="FILE", help="JSON or key=value settings file")
    add("--budgets", help="comma-separated FLOPs fractions, e.g. 0.9,0.5,0.1")
    add("--kernel", choices=KERNEL_CHOICES)
    add("--steps", type=int, help="number of steps for the multistep kernel")
    add("--layers", type=int)
    add("--nvisual", type=int)
    add("--classes", type=int)
    add("--ntext", type=int)
    add("--hidden", type=int)
    add("--seed", type=int)
    add("--lambda", dest="penalty", type=float, help="initial penalty")
    add("--alpha", type=float, help="penalty growth factor")
    add("--beta", type=float, help="required violation decrease ratio")
    add("--eps", type=float, help="constraint tolerance")
    add("--max-outer", dest="max_outer", type=int)
    add("--inner-steps", dest="inner_steps", type=int)
    add("--sigma", type=float)
    add("--temperature", type=float)
    add("--mode", choices=("ste", "soft"))
    add("--grid-count", dest="grid_count", type=int)
    add("--grid-seed", dest="grid_seed", type=int)
    add("--grad-cases", dest="grad_cases", type=int)
    add("--workers", type=int)
    add("--out", metavar="DIR")
    add("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tokenbudget", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("search", parents=[common], help="ALM search for each budget")
    sub.add_parser("grid", parents=[common], help="grid-sample discrete configurations")
    sub.add_parser("frontier", parents=[common], help="re-extract and re-check the grid frontier")
    sub.add_parser("compare", parents=[common], help="compare search results with the grid")
    sub.add_parser("compare-kernels", parents=[common], help="multistep vs single-step kernel losses")
    sub.add_parser("check-grads", parents=[common], help="finite-difference gradient suites")
    return parser


_NON_MANIFEST = {"command", "manifest", "verbose"}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in _NON_MANIFEST}
    try:
        if flags.get("budgets") is not None:
            flags["budgets"] = _coerce("budgets", flags["budgets"])
        manifest = build_manifest(args.command, args.manifest, flags)
        return _dispatch(manifest)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def _dispatch(manifest: RunManifest) -> int:
    cmd = manifest.command
    if cmd == "search":
        records = run_search(manifest)
        for rec in records:
            print(f"budget {budget_tag(rec['budget_fraction'])}: {rec['status']}")
        return EXIT_INFEASIBLE if any(r["status"] == "infeasible" for r in records) else EXIT_OK
    if cmd == "grid":
        points = run_grid(manifest)
        print(f"evaluated {len(points)} configurations")
        return EXIT_OK
    if cmd == "frontier":
        summary = run_frontier(manifest)
        print(f"frontier: {summary['frontier_size']} points, oracle match: {summary['oracle_match']}")
        return EXIT_OK
    if cmd == "compare":
        report = run_compare(manifest)
        for row in report["rows"]:
            dp = row.get("delta_p")
            print(f"budget {budget_tag(row['budget_fraction'])}: delta_p={'n/a' if dp is None else f'{dp:+.4f}'}")
        print(f"evaluations: search {report['search_evaluations']} / grid {report['grid_evaluations']}")
        return EXIT_OK
    if cmd == "compare-kernels":
        report = run_compare_kernels(manifest)
        for row in report["rows"]:
            flag = "holds" if row["ordering_holds"] else "REVERSED"
            print(
                f"budget {budget_tag(row['budget_fraction'])}: losses {row['losses']} "
                f"flops/budget {row['flops_over_budget']} ordering {flag}"
            )
        return EXIT_OK
    results = run_check_grads(manifest)
    failures = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.cases} cases, max rel error {r.max_rel_error:.3e}")
    root = Path(manifest.out)
    root.mkdir(parents=True, exist_ok=True)
    dump_json([asdict(r) | {"passed": r.passed} for r in results], root / "check_grads.json")
    if failures:
        print(f"{len(failures)} gradient suite(s) failed", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
