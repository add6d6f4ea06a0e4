"""Command-line front end: ``oldf pf|train|eval|topo|hosting``.

Exit codes: 0 success, 1 numerical failure (or an invariant failure under
``--strict``), 2 bad input.  Set ``OLDF_LOG`` (e.g. ``DEBUG``) for verbosity.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .caseio import (
    CaseError,
    FingerprintError,
    ParamFile,
    fingerprint,
    load_case,
    read_params,
    read_scenarios_csv,
    write_params,
    write_scenarios_csv,
)
from .distflow import solution_csv, solve_distflow3_batch, solve_distflow_batch
from .evaluation import compare_models, comparison_csv, topology_sweep
from .hosting import hosting_training_scenarios, parse_hosting_json, solve_hosting, validate_with_distflow
from .network import NetworkError, ThreePhaseNetwork, TopologyConfig, enumerate_topologies
from .training import (
    ScenarioSet,
    TrainOptions,
    base_scenario,
    parameter_dump,
    sample_highload_scenarios,
    sample_training_scenarios,
    sample_uniform_scenarios,
    train,
)

log = logging.getLogger("oldf")

DEFAULT_SEED = 0
EXIT_OK, EXIT_NUMERIC, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


class NumericError(Exception):
    pass


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Collects outputs and writes the manifest for one subcommand."""

    def __init__(self, args, inputs: list[Path]):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.args = args
        self.inputs = inputs
        self.outputs: list[str] = []
        self.extra: dict = {}

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        self.outputs.append(name)
        return path

    def manifest(self, status: str):
        args = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(self.args).items() if k != "func"}
        doc = {
            "command": self.args.command,
            "arguments": args,
            "seed": getattr(self.args, "seed", None),
            "inputs": {str(p): _sha(p) for p in self.inputs},
            "outputs": self.outputs,
            "status": status,
            "versions": {
                "oldf": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            **self.extra,
        }
        (self.out / "manifest.json").write_text(json.dumps(doc, indent=1, default=str))


def _load(path) -> tuple:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    try:
        return load_case(path), path
    except (CaseError, NetworkError, json.JSONDecodeError) as e:
        raise InputError(f"{path}: {e}") from None


def _load_params(path, network):
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    try:
        return read_params(path.read_text(), network).params
    except (FingerprintError, CaseError, KeyError, ValueError) as e:
        raise InputError(f"{path}: {e}") from None


def _scenarios(args, case) -> ScenarioSet:
    fam = args.family
    if fam == "base":
        return base_scenario(case.p, case.q)
    if fam == "high":
        return sample_highload_scenarios(case.p, case.q)
    if fam == "random":
        return sample_uniform_scenarios(case.p, case.q, args.count, args.lo, args.hi, args.seed)
    if fam == "normal":
        return sample_training_scenarios(case.p, case.q, args.count, args.seed, args.std)
    if fam == "file":
        if not args.scenario:
            raise InputError("--family file needs --scenario")
        p, q = _read_csv(args.scenario, len(case.p))
        return ScenarioSet(p, q, "file")
    raise InputError(f"unknown family {fam}")


def _read_csv(path, n):
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    try:
        return read_scenarios_csv(path.read_text(), n)
    except (CaseError, ValueError) as e:
        raise InputError(f"{path}: {e}") from None


# -- subcommands -----------------------------------------------------------------


def cmd_pf(args) -> int:
    case, path = _load(args.case)
    inputs = [path]
    net = case.network
    if args.scenario:
        p, q = _read_csv(args.scenario, len(case.p))
        inputs.append(Path(args.scenario))
    else:
        p, q = case.p[None], case.q[None]
    run = Run(args, inputs)
    three = isinstance(net, ThreePhaseNetwork)
    sol = solve_distflow3_batch(net, p, q) if three else solve_distflow_batch(net, p, q)
    for k in range(len(p)):
        name = "solution.csv" if len(p) == 1 else f"solution_{k + 1:04d}.csv"
        if three:
            lines = ["bus,phase,vm,va_deg,vsq"]
            for (bus, ph), V, v in zip(net.bus_pairs, sol.V[k], sol.vsq[k]):
                lines.append(f"{case.bus_labels[bus]},{ph},{float(abs(V))!r},{float(np.degrees(np.angle(V)))!r},{float(v)!r}")
            run.write(name, "\n".join(lines) + "\n")
        else:
            run.write(name, solution_csv(sol[k], net, case.bus_labels))
    vsq = sol.vsq if three else sol.v
    vm = np.sqrt(np.where(vsq > 0, vsq, np.nan))
    bad = int((~sol.converged).sum())
    print(f"solved {len(p)} scenario(s); not converged: {bad}")
    print(f"max residual {np.max(sol.residual):.3e}  min |V| {np.nanmin(vm):.5f}  max |V| {np.nanmax(vm):.5f}")
    run.manifest("ok" if bad == 0 else "not converged")
    return EXIT_OK if bad == 0 else EXIT_NUMERIC


def _train_set(args, case) -> tuple[ScenarioSet, list[Path]]:
    if args.scenario:
        p, q = _read_csv(args.scenario, len(case.p))
        return ScenarioSet(p, q, "file"), [Path(args.scenario)]
    if args.hosting:
        hpath = Path(args.hosting)
        if not hpath.exists():
            raise InputError(f"{hpath}: no such file")
        prob, tr = parse_hosting_json(hpath.read_text(), case)
        return hosting_training_scenarios(prob, tr.get("scenarios", args.scenarios), args.seed, tr.get("std", args.std)), [hpath]
    return sample_training_scenarios(case.p, case.q, args.scenarios, args.seed, args.std), []


def cmd_train(args) -> int:
    case, path = _load(args.case)
    sc, extra = _train_set(args, case)
    run = Run(args, [path] + extra)
    net = case.network
    opts = TrainOptions(tol=args.tol, max_iter=args.max_iter)
    try:
        params, rep = train(net, sc, opts)
    except RuntimeError as e:
        run.manifest("failed")
        raise NumericError(str(e)) from None
    meta = {"scenarios": len(sc), "seed": sc.seed, "provenance": sc.provenance, "final_loss": rep.final_loss}
    run.write("params.json", write_params(ParamFile(fingerprint(net), params, meta)))
    run.write("report.json", json.dumps(rep.to_dict(), indent=1))
    run.write("scenarios.csv", write_scenarios_csv(sc.p, sc.q))
    if not isinstance(net, ThreePhaseNetwork):
        run.write("parameters.csv", parameter_dump(net, params))
    print(f"loss {rep.initial_loss:.4e} -> {rep.final_loss:.4e} in {rep.iterations} iterations ({rep.exit_reason}), {rep.wall_time:.2f} s")
    run.manifest("ok")
    return EXIT_OK


def cmd_eval(args) -> int:
    case, path = _load(args.case)
    net = case.network
    params = _load_params(args.params, net)
    inputs = [path, Path(args.params)] + ([Path(args.scenario)] if args.scenario else [])
    sc = _scenarios(args, case)
    run = Run(args, inputs)
    table = compare_models(net, params, sc)
    run.write("comparison.csv", comparison_csv(table, case.name or Path(args.case).stem))
    for name, rep in table.items():
        print(f"{name:5s} eps_avg {rep.eps_avg:.5f}  eps_max {rep.eps_max:.5f}  scenarios {rep.n_used} (dropped {rep.n_dropped})")
    run.manifest("ok")
    return EXIT_OK


def _switch_configs(path: Path, net):
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: {e}") from None
    if doc.get("format") != "oldf-switches":
        raise InputError(f"{path}: not an oldf-switches file")
    sw = frozenset(doc.get("switchable", []))
    unknown = sw - {b.id for b in net.all_branches}
    if unknown:
        raise InputError(f"{path}: unknown branch ids {sorted(unknown)}")
    base = replace(net, switchable_ids=sw)
    try:
        if "configs" in doc:
            return base, [TopologyConfig(c.get("open", []), c.get("close", [])) for c in doc["configs"]]
        return base, enumerate_topologies(base, doc.get("n_open"))
    except NetworkError as e:
        raise InputError(f"{path}: {e}") from None


def cmd_topo(args) -> int:
    case, path = _load(args.case)
    spath = Path(args.switches)
    if not spath.exists():
        raise InputError(f"{spath}: no such file")
    base, configs = _switch_configs(spath, case.network)
    run = Run(args, [path, spath])
    train_set = sample_training_scenarios(case.p, case.q, args.scenarios, args.seed, args.std)
    test_set = sample_uniform_scenarios(case.p, case.q, args.count, args.lo, args.hi, args.seed + 1)
    res = topology_sweep(base, configs, train_set, test_set, TrainOptions(args.tol, args.max_iter), args.jobs)
    run.write("topologies.csv", "index,label\n" + "".join(f'{i + 1},"{c.label()}"\n' for i, c in enumerate(configs)))
    run.write("eps_matrix.csv", res.matrix_csv("eps"))
    run.write("dominance.csv", res.matrix_csv("dominance"))
    run.write("eps_long.csv", res.long_csv())
    ok = res.diagonal_ok()
    run.extra = {"topologies": len(configs), "failed": res.failed, "diagonal_dominance": ok}
    print(f"{len(configs)} topologies; failed trainings: {len(res.failed)}; diagonal beats LDF: {ok}")
    run.manifest("ok" if ok else "invariant failed")
    if args.strict and (not ok or res.failed):
        return EXIT_NUMERIC
    return EXIT_OK


def _relabel(name: str, labels) -> str:
    """Swap internal bus indices in a constraint name for case labels."""
    return re.sub(r"@bus(\d+)", lambda m: f"@bus{labels[int(m.group(1))]}", name or "")


def cmd_hosting(args) -> int:
    case, path = _load(args.case)
    net = case.network
    hpath = Path(args.problem)
    if not hpath.exists():
        raise InputError(f"{hpath}: no such file")
    try:
        prob, tr = parse_hosting_json(hpath.read_text(), case)
    except (ValueError, KeyError) as e:
        raise InputError(f"{hpath}: {e}") from None
    inputs = [path, hpath]
    params = None
    if args.model == "oldf":
        if args.params:
            params = _load_params(args.params, net)
            inputs.append(Path(args.params))
        else:
            sc = hosting_training_scenarios(prob, tr.get("scenarios", 20), tr.get("seed", args.seed), tr.get("std", 0.35))
            params, rep = train(net, sc)
            log.info("trained hosting OLDF parameters: loss %.3e", rep.final_loss)
    run = Run(args, inputs)
    prob = prob.with_model(args.model, params, args.polygon_facets)
    sol = solve_hosting(net, prob)
    rep = validate_with_distflow(net, prob, sol) if np.all(np.isfinite(sol.pg)) else None
    run.write("solution.json", json.dumps(sol.to_dict(), indent=1))
    lines = ["bus,pg_mw,qg_mvar"] + [
        f"{case.bus_labels[b]},{float(pg * case.base_mva)!r},{float(qg * case.base_mva)!r}" for b, pg, qg in zip(prob.gen_buses, sol.pg, sol.qg)
    ]
    run.write("setpoints.csv", "\n".join(lines) + "\n")
    if rep is not None and rep.converged:
        vl = ["bus,vm,low_margin,high_margin"] + [
            f"{case.bus_labels[k + 1]},{float(vm)!r},{float(lo)!r},{float(hi)!r}" for k, (vm, lo, hi) in enumerate(zip(rep.vm, rep.v_low_margin, rep.v_high_margin))
        ]
        run.write("validation.csv", "\n".join(vl) + "\n")
    print(f"model {args.model}: status {sol.status}, objective {sol.objective:.6g}")
    if sol.status != "optimal":
        print(f"most violated constraint: {_relabel(sol.worst_constraint, case.bus_labels)}")
        run.manifest(sol.status)
        return EXIT_NUMERIC
    viol = [] if rep is None else rep.voltage_violations(args.slack)
    if rep is not None:
        where = f" at {_relabel(rep.worst_location, case.bus_labels)}" if rep.worst_location else ""
        print(f"DistFlow check: worst violation {rep.worst_violation:.3e}{where}; voltage violations at buses {[case.bus_labels[b] for b in viol]}")
    run.extra = {"voltage_violations": [case.bus_labels[b] for b in viol]}
    run.manifest("ok")
    if args.strict and viol:
        return EXIT_NUMERIC
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonneg_int(s):
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oldf", description="Train and apply optimized LinDistFlow approximations.")
    ap.add_argument("--version", action="version", version=f"oldf {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--out", default="out", help="output directory (default: ./out)")
        if seed:
            p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"random seed (default {DEFAULT_SEED})")
        p.add_argument("--jobs", type=_positive_int, default=os.cpu_count() or 1, help="worker processes")
        p.add_argument("--strict", action="store_true", help="exit 1 when an invariant check fails")

    p = sub.add_parser("pf", help="solve DistFlow for the base load or a scenario file")
    p.add_argument("case")
    p.add_argument("--scenario", help="scenario CSV (p_1..p_n,q_1..q_n in p.u.)")
    common(p, seed=False)
    p.set_defaults(func=cmd_pf)

    p = sub.add_parser("train", help="fit OLDF parameters")
    p.add_argument("case")
    p.add_argument("--scenarios", type=_positive_int, default=20, help="number of training scenarios")
    p.add_argument("--std", type=float, default=0.35, help="std of the Normal(1, std) load multipliers")
    p.add_argument("--scenario", help="train on a scenario CSV instead of sampling")
    p.add_argument("--hosting", help="sample hosting-style scenarios from this hosting problem file")
    p.add_argument("--tol", type=float, default=1e-6, help="gradient infinity-norm tolerance")
    p.add_argument("--max-iter", type=_nonneg_int, default=100)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compare LDF and OLDF against DistFlow")
    p.add_argument("case")
    p.add_argument("--params", required=True)
    p.add_argument("--family", choices=["base", "high", "random", "normal", "file"], default="base")
    p.add_argument("--count", type=_positive_int, default=10000)
    p.add_argument("--lo", type=float, default=0.0)
    p.add_argument("--hi", type=float, default=1.5)
    p.add_argument("--std", type=float, default=0.35)
    p.add_argument("--scenario")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("topo", help="train and cross-evaluate every switch configuration")
    p.add_argument("case")
    p.add_argument("--switches", required=True)
    p.add_argument("--scenarios", type=_positive_int, default=20)
    p.add_argument("--std", type=float, default=0.35)
    p.add_argument("--count", type=_positive_int, default=10000, help="test scenarios")
    p.add_argument("--lo", type=float, default=0.0)
    p.add_argument("--hi", type=float, default=1.5)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=_nonneg_int, default=100)
    common(p)
    p.set_defaults(func=cmd_topo)

    p = sub.add_parser("hosting", help="solve the hosting-capacity problem and check it with DistFlow")
    p.add_argument("case")
    p.add_argument("problem")
    p.add_argument("--model", choices=["ldf", "oldf"], default="oldf")
    p.add_argument("--params", help="OLDF parameter file; trained from the problem's training block if omitted")
    p.add_argument("--polygon-facets", type=int, default=None, help="facets of the polygonal cone approximation")
    p.add_argument("--slack", type=float, default=1e-4, help="voltage violation tolerance in p.u.")
    common(p)
    p.set_defaults(func=cmd_hosting)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("OLDF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    ap = build_parser()
    args = ap.parse_args(argv)
    if getattr(args, "polygon_facets", None) is not None and args.polygon_facets < 3:
        ap.error("--polygon-facets must be at least 3")
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
