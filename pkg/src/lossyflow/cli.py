"""Command-line front end.

Networks are read in extended DIMACS (see :mod:`lossyflow.dimacs`),
M-matrix factors in Matrix Market. Results go to stdout as JSON or as
plain ``key: value`` lines. Exit status is 0 on success, 1 on usage or
parse errors and 2 when a solver fails.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .dimacs import read_network
from .exactflow import (
    InfeasibleFlowError,
    exact_max_flow_value,
    exact_min_cost_flow,
)
from .genflow import GenFlowConfig, max_flow, min_cost_flow, report
from .ipm import TraceWriter
from .linalg import gram, m_norm, read_factor, solve_direct
from .mmatrix import MMatrixConfig, MMatrixSolver

__all__ = ["RunSpec", "build_parser", "run", "main"]

PROBLEMS = ("max-flow", "min-cost-flow", "exact-min-cost", "exact-max-flow",
            "solve-mmatrix", "verify")

# Solver failures map to exit 2. Bad input is a ValueError and maps to 1,
# except for these ValueError subclasses which mean the solve itself failed.
_SOLVER_VALUE_ERRORS = (InfeasibleFlowError,)


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class RunSpec:
    """One CLI invocation after argument parsing."""

    command: str
    input: str
    epsilon: float = 1e-2
    seed: int = 0
    mode: str = "practical"
    backend: str = "structured"
    inner: str = "direct"
    format: str = "json"
    trace: bool = False
    retries: int = 20
    value: int | None = None
    rhs: str | None = None
    flow: str | None = None
    tol: float = 1e-9
    timing: bool = False


def _default_seed():
    env = os.environ.get("LOSSYFLOW_SEED")
    if env is None or env.strip() == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"LOSSYFLOW_SEED must be an integer, got {env!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lossyflow",
                                description="Lossy generalized flow solvers.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, eps_default=1e-2):
        sp.add_argument("input", help="input file, '-' for stdin")
        sp.add_argument("--epsilon", type=float, default=eps_default)
        sp.add_argument("--seed", type=int, default=None,
                        help="RNG seed (default: $LOSSYFLOW_SEED, then 0)")
        sp.add_argument("--format", choices=("json", "plain"), default="json")
        sp.add_argument("--timing", action="store_true",
                        help="add wall_ms to the result (breaks byte-identical output)")

    def solver(sp):
        sp.add_argument("--mode", choices=("practical", "paper_exact"), default="practical")
        sp.add_argument("--backend", choices=("structured", "dense", "iterative"),
                        default="structured")
        sp.add_argument("--inner", choices=("direct", "mmatrix"), default="direct")
        sp.add_argument("--trace", action="store_true",
                        help="write interior-point trace lines to stderr")

    for name, helptext in (("max-flow", "approximate generalized maximum flow"),
                           ("min-cost-flow", "approximate generalized min-cost flow")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        solver(sp)
    sp = sub.add_parser("exact-max-flow", help="integral max-flow value (gamma = 1)")
    common(sp, eps_default=0.5)
    solver(sp)
    sp = sub.add_parser("exact-min-cost", help="integral min-cost flow (gamma = 1)")
    common(sp)
    solver(sp)
    sp.add_argument("--value", type=int, default=None,
                    help="flow value F (default: the maximum flow value)")
    sp.add_argument("--retries", type=int, default=20)
    sp = sub.add_parser("solve-mmatrix",
                        help="solve (A A^T) x = b for a Matrix Market factor A")
    common(sp, eps_default=1e-6)
    sp.add_argument("--rhs", required=True, help="whitespace-separated right-hand side")
    sp.add_argument("--mode", choices=("practical", "paper_exact"), default="practical")
    sp = sub.add_parser("verify", help="recompute value and violations of a flow")
    sp.add_argument("input", help="network file")
    sp.add_argument("--flow", required=True,
                    help="JSON result document or whitespace-separated amounts")
    sp.add_argument("--tol", type=float, default=1e-9,
                    help="largest violation still reported as feasible")
    sp.add_argument("--format", choices=("json", "plain"), default="json")
    return p


def _spec_from_args(ns) -> RunSpec:
    seed = ns.seed if getattr(ns, "seed", None) is not None else _default_seed()
    kw = {k: getattr(ns, k) for k in RunSpec.__dataclass_fields__
          if k not in ("command", "seed") and hasattr(ns, k)}
    spec = RunSpec(command=ns.command, seed=seed, **kw)
    if not spec.epsilon > 0:
        raise UsageError("--epsilon must be > 0")
    if spec.retries < 0:
        raise UsageError("--retries must be >= 0")
    for path in (spec.input, spec.rhs, spec.flow):
        if path not in (None, "-") and not Path(path).is_file():
            raise UsageError(f"no such file: {path}")
    return spec


def _floats(arr):
    return [float(v) for v in np.asarray(arr, dtype=float)]


def _flow_doc(spec, net, flow, iterations, value=None, integral=False):
    rep = report(net, flow)
    doc = {
        "problem": spec.command,
        "n": net.n,
        "m": net.m,
        "epsilon": spec.epsilon,
        "seed": spec.seed,
        "value": rep.value if value is None else value,
    }
    if net.cost is not None:
        doc["cost"] = rep.cost if not integral else int(round(rep.cost))
    doc["violations"] = {"capacity": rep.capacity_violation,
                         "conservation": rep.conservation_violation}
    doc["iterations"] = dict(iterations)
    doc["flow"] = ([int(v) for v in flow] if integral else _floats(flow))
    return doc


def _load_flow(path, m):
    text = sys.stdin.read() if path == "-" else Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: bad JSON: {exc}") from None
        if "flow" not in doc or doc["flow"] is None:
            raise UsageError(f"{path}: result document has no flow")
        vals = doc["flow"]
    else:
        try:
            vals = [float(tok) for tok in text.split()]
        except ValueError as exc:
            raise UsageError(f"{path}: {exc}") from None
    flow = np.asarray(vals, dtype=float)
    if flow.shape != (m,):
        raise UsageError(f"{path}: flow has {flow.size} entries, network has {m} edges")
    if not np.all(np.isfinite(flow)):
        raise UsageError(f"{path}: flow entries must be finite")
    return flow


def _execute(spec: RunSpec, stderr) -> dict:
    observer = TraceWriter(stderr) if spec.trace else None
    if spec.command == "solve-mmatrix":
        if spec.input == "-":
            raise UsageError("solve-mmatrix needs a factor file, not stdin")
        F = read_factor(spec.input)
        b = np.loadtxt(spec.rhs, dtype=float, ndmin=1)
        if b.shape != (F.n,):
            raise UsageError(f"rhs has {b.size} entries, factor has {F.n} rows")
        if not 0 < spec.epsilon < 1:
            raise UsageError("--epsilon must lie in (0, 1) for solve-mmatrix")
        cfg = MMatrixConfig.for_factor(F, mode=spec.mode)
        solver = MMatrixSolver(F, cfg, np.random.default_rng(spec.seed))
        x = solver.solve(b, spec.epsilon)
        M = gram(F)
        ref = solve_direct(M, b)
        denom = m_norm(M, ref)
        rel = float(m_norm(M, x - ref) / denom) if denom > 0 else 0.0
        iters = solver.scaling.iterations if F.n > 1 and np.any(b) else 0
        return {"problem": spec.command, "n": F.n, "m": F.m, "epsilon": spec.epsilon,
                "seed": spec.seed, "relative_error": rel,
                "iterations": {"scaling": int(iters)}, "x": _floats(x)}

    net = read_network(spec.input)
    if spec.command == "verify":
        flow = _load_flow(spec.flow, net.m)
        rep = report(net, flow)
        ok = rep.capacity_violation <= spec.tol and rep.conservation_violation <= spec.tol
        doc = {"problem": "verify", "n": net.n, "m": net.m, "value": rep.value}
        if net.cost is not None:
            doc["cost"] = rep.cost
        doc["violations"] = {"capacity": rep.capacity_violation,
                             "conservation": rep.conservation_violation}
        doc["feasible"] = bool(ok)
        return doc

    cfg = GenFlowConfig(epsilon=spec.epsilon, mode=spec.mode, seed=spec.seed,
                        backend=spec.backend, inner=spec.inner, observer=observer)
    if spec.command == "max-flow":
        res = max_flow(net, cfg)
        return _flow_doc(spec, net, res.flow, res.iterations)
    if spec.command == "min-cost-flow":
        res = min_cost_flow(net, cfg)
        return _flow_doc(spec, net, res.flow, res.iterations)
    if spec.command == "exact-max-flow":
        value = exact_max_flow_value(net, cfg)
        return {"problem": spec.command, "n": net.n, "m": net.m,
                "epsilon": spec.epsilon, "seed": spec.seed, "value": value}
    if spec.command == "exact-min-cost":
        F = spec.value
        if F is None:
            F = exact_max_flow_value(net, GenFlowConfig(epsilon=0.5, seed=spec.seed))
        res = exact_min_cost_flow(net, F, np.random.default_rng(spec.seed),
                                  retries=spec.retries, mode=spec.mode,
                                  observer=observer)
        doc = _flow_doc(spec, net, res.flow, res.iterations, value=res.value,
                        integral=True)
        doc["retries"] = res.retries
        return doc
    raise UsageError(f"unknown command {spec.command!r}")


def _emit(doc, fmt, out):
    if fmt == "json":
        out.write(json.dumps(doc, allow_nan=False) + "\n")
        return
    for key, val in doc.items():
        if isinstance(val, dict):
            for k2, v2 in val.items():
                out.write(f"{key}.{k2}: {v2}\n")
        elif isinstance(val, list):
            out.write(f"{key}: {' '.join(repr(v) for v in val)}\n")
        else:
            out.write(f"{key}: {val}\n")


def run(spec: RunSpec, stdout=None, stderr=None) -> int:
    """Execute ``spec`` and write the result document; returns the exit code."""
    stdout = sys.stdout if stdout is None else stdout
    stderr = sys.stderr if stderr is None else stderr
    start = time.perf_counter()
    try:
        doc = _execute(spec, stderr)
    except _SOLVER_VALUE_ERRORS as exc:
        code, doc = 2, exc
    except (ValueError, OSError) as exc:
        stderr.write(f"lossyflow: error: {exc}\n")
        return 1
    except (RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        code, doc = 2, exc
    else:
        code = 0
    if code:
        doc = {"problem": spec.command, "error": type(doc).__name__, "message": str(doc),
               "epsilon": spec.epsilon, "seed": spec.seed}
        stderr.write(f"lossyflow: solver failure: {doc['message']}\n")
    if spec.timing:
        doc["wall_ms"] = round(1e3 * (time.perf_counter() - start), 3)
    fmt = spec.format
    if code == 0 and spec.command == "verify" and not doc["feasible"]:
        code = 2
    _emit(doc, fmt, stdout)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 1
    try:
        spec = _spec_from_args(ns)
    except UsageError as exc:
        sys.stderr.write(f"lossyflow: error: {exc}\n")
        return 1
    return run(spec)


if __name__ == "__main__":
    sys.exit(main())
