"""Command-line interface.

Subcommands write CSV with header ``t,node,S,E_1..E_Nu,I,R`` (one row per
sample time and node, floats with 17 significant digits).  ``gillespie`` adds
``S_se,...,R_se`` standard-error columns.

Exit codes: 0 success, 2 invalid input, 3 state space too large,
4 bound check failed, 1 numerical invariant breach.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import net as netmod
from .errors import InvariantViolation, SizeGuardError, ValidationError
from .integrate import DEFAULT_DT, DEFAULT_SAMPLE_DT, integrate, sample_grid
from .net import (
    GeneratorSpec,
    InitialCondition,
    SeirNodeRates,
    SirNodeRates,
    canonical_dumps,
    detect_rooted_tree,
    generate_network,
    load_initial,
    load_network,
    save_initial,
    save_network,
)
from .oracle import solve_master
from .seir import SeirRootedExact, SeirRta
from .sir import NodeProbabilityState, SirRootedExact, SirRta, closed_form_chain
from .stochastic import ensemble_estimate, label_names, wilson_interval

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_INVALID = 2
EXIT_SIZE = 3
EXIT_BOUND = 4

KIND_ALIASES = {
    "chain": "chain",
    "prufer": "prufer_tree",
    "er": "erdos_renyi",
    "tree-plus-edges": "tree_plus_edges",
}


def _g(x) -> str:
    return format(float(x), ".17g")


def write_state_csv(path, times, probs, names, stderr=None) -> None:
    """``probs[t, node, label]`` to CSV; optional matching ``stderr`` array."""
    header = ["t", "node"] + list(names)
    if stderr is not None:
        header += [f"{c}_se" for c in names]
    lines = [",".join(header)]
    T, n, _ = probs.shape
    for m in range(T):
        for k in range(n):
            row = [_g(times[m]), str(k)] + [_g(v) for v in probs[m, k]]
            if stderr is not None:
                row += [_g(v) for v in stderr[m, k]]
            lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_state_csv(path) -> dict:
    """Map ``(t, node) -> {column: value}``."""
    out = {}
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "t" not in reader.fieldnames or "node" not in reader.fieldnames:
                raise ValidationError(f"{path}: missing t/node columns")
            for row in reader:
                key = (round(float(row["t"]), 9), int(row["node"]))
                out[key] = {c: float(v) for c, v in row.items() if c not in ("t", "node")}
    except (OSError, ValueError) as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    return out


def _floats(text):
    if text is None or text == "":
        return []
    return [float(v) for v in text.split(",")]


def _node_rates(args):
    if not args.seir:
        return SirNodeRates(gamma=args.gamma)
    phi, mu, nu = _floats(args.phi), _floats(args.mu), _floats(args.nu)
    nclass = len(phi)
    a = json.loads(args.a) if args.a else [[0.0] * nclass for _ in range(nclass)]
    return SeirNodeRates(gamma=args.gamma, phi=phi, mu=mu, nu=nu, a=a)


def cmd_generate(args) -> int:
    rates = _node_rates(args)
    spec = GeneratorSpec(
        kind=KIND_ALIASES[args.kind],
        n=args.n,
        lam=args.lam,
        rates=rates,
        p=args.p,
        extra_edges=args.extra,
    )
    net = generate_network(spec, args.seed)
    save_network(net, args.output)
    if args.init_out:
        exposed = _floats(args.source_exposed) or None
        init = InitialCondition.single_source(
            net.n_nodes, args.source, net.n_exposed_classes, exposed=exposed
        )
        save_initial(init, args.init_out)
    return EXIT_OK


def _trajectory_probs(traj):
    return np.concatenate(
        [traj.S[:, :, None], traj.E, traj.I[:, :, None], traj.R[:, :, None]], axis=2
    )


def cmd_solve(args) -> int:
    net = load_network(args.net)
    init = load_initial(args.init, net)
    y0 = NodeProbabilityState.from_initial(init)
    if args.system == "exact-rooted":
        tree = detect_rooted_tree(net, init)
        if tree is None:
            raise ValidationError("network and initial condition do not form a rooted tree")
        rhs = SirRootedExact(net, tree) if net.model == netmod.SIR else SeirRootedExact(net, tree, y0)
    else:
        rhs = SirRta(net, y0) if net.model == netmod.SIR else SeirRta(net, y0)
    traj = integrate(rhs, y0, args.t_end, dt=args.dt, sample_dt=args.sample_dt)
    write_state_csv(args.output, traj.sample_times, _trajectory_probs(traj), label_names(net.n_exposed_classes))
    return EXIT_OK


def cmd_closed_form(args) -> int:
    times = sample_grid(args.t_end, args.sample_dt)
    probs = np.empty((times.size, args.k + 1, 3))
    for m, t in enumerate(times):
        for k in range(args.k + 1):
            probs[m, k] = closed_form_chain(k, float(t), args.lam, args.gamma)
    write_state_csv(args.output, times, probs, label_names(0))
    return EXIT_OK


def cmd_gillespie(args) -> int:
    net = load_network(args.net)
    init = load_initial(args.init, net)
    times = sample_grid(args.t_end, args.sample_dt)
    est = ensemble_estimate(net, init, args.runs, times, args.seed, workers=args.workers)
    write_state_csv(args.output, times, est.probs, label_names(net.n_exposed_classes), est.stderr)
    return EXIT_OK


def cmd_oracle(args) -> int:
    net = load_network(args.net)
    init = load_initial(args.init, net)
    times = sample_grid(args.t_end, args.sample_dt)
    sol = solve_master(net, init, times, dt=args.dt)
    write_state_csv(args.output, times, sol.marginals, label_names(net.n_exposed_classes))
    return EXIT_OK


def compare_tables(
    candidate: dict, reference: dict, bound_check=False, stderr=None, sigmas=3.0, tol=1e-9, n_runs=None
):
    """Comparison report over the (time, node) keys present in both tables.

    With ``bound_check`` the reference S may exceed the candidate S by at most
    ``sigmas`` standard errors (from ``stderr``) or by ``tol`` without one.
    Given ``n_runs``, the reference is instead an ensemble estimate and the
    candidate must not fall below the lower Wilson score limit at ``sigmas``.
    """
    keys = sorted(set(candidate) & set(reference))
    times = sorted({t for t, _ in keys})
    if len(times) < 2:
        raise ValidationError("sample grids share fewer than 2 time points")
    labels = [c for c in next(iter(candidate.values())) if not c.endswith("_se")]
    labels = [c for c in labels if c in next(iter(reference.values()))]

    per_node = {}
    label_max = {c: 0.0 for c in labels}
    violations = []
    for t, k in keys:
        cand, ref = candidate[(t, k)], reference[(t, k)]
        node = per_node.setdefault(k, {"max_abs_dS": 0.0, "bound_violations": 0})
        if "S" in cand and "S" in ref:
            node["max_abs_dS"] = max(node["max_abs_dS"], abs(cand["S"] - ref["S"]))
        for c in labels:
            label_max[c] = max(label_max[c], abs(cand[c] - ref[c]))
        if bound_check and n_runs is not None:
            lower = float(wilson_interval(ref["S"], n_runs, sigmas)[0])
            if cand["S"] < lower:
                node["bound_violations"] += 1
                violations.append(
                    {"t": t, "node": k, "excess": ref["S"] - cand["S"], "margin": ref["S"] - lower}
                )
        elif bound_check:
            margin = tol
            if stderr is not None:
                se_row = stderr.get((t, k))
                if se_row is None or "S_se" not in se_row:
                    raise ValidationError(f"no S_se entry for t={t}, node={k}")
                margin = sigmas * se_row["S_se"]
            excess = ref["S"] - cand["S"]
            if excess > margin:
                node["bound_violations"] += 1
                violations.append({"t": t, "node": k, "excess": excess, "margin": margin})
    return {
        "n_times": len(times),
        "n_nodes": len(per_node),
        "nodes": {str(k): v for k, v in sorted(per_node.items())},
        "max_abs_error": label_max,
        "max_abs_dS": max(v["max_abs_dS"] for v in per_node.values()),
        "bound_check": bool(bound_check),
        "bound_violations": violations,
    }


def cmd_compare(args) -> int:
    cand = read_state_csv(args.candidate)
    ref = read_state_csv(args.reference)
    se = read_state_csv(args.mc_stderr_file) if args.mc_stderr_file else None
    report = compare_tables(
        cand, ref, bound_check=args.bound_check, stderr=se, sigmas=args.sigmas, tol=args.tol, n_runs=args.runs
    )
    Path(args.output).write_text(canonical_dumps(report))
    if report["bound_violations"]:
        print(f"bound check failed at {len(report['bound_violations'])} (node, time) points:", file=sys.stderr)
        for v in report["bound_violations"][:50]:
            print(f"  node {v['node']} t={v['t']:g} excess={v['excess']:.3e}", file=sys.stderr)
        return EXIT_BOUND
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rtapprox", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a network file")
    g.add_argument("--kind", choices=sorted(KIND_ALIASES), required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--p", type=float, default=0.0)
    g.add_argument("--extra", type=int, default=0)
    g.add_argument("--lambda", dest="lam", type=float, required=True)
    g.add_argument("--gamma", type=float, required=True)
    g.add_argument("--seir", action="store_true")
    g.add_argument("--phi", help="comma-separated, one per exposed class")
    g.add_argument("--mu", help="comma-separated")
    g.add_argument("--nu", help="comma-separated")
    g.add_argument("--a", help="JSON matrix, a[v][u] = rate E(u)->E(v)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--init-out", help="also write a single-source initial condition")
    g.add_argument("--source", type=int, default=0)
    g.add_argument("--source-exposed", help="comma-separated initial exposed probabilities of the source")
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="integrate a deterministic system")
    s.add_argument("--system", choices=["exact-rooted", "rta"], required=True)
    s.add_argument("--net", required=True)
    s.add_argument("--init", required=True)
    s.add_argument("--t-end", type=float, required=True)
    s.add_argument("--dt", type=float, default=DEFAULT_DT)
    s.add_argument("--sample-dt", type=float, default=DEFAULT_SAMPLE_DT)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_solve)

    c = sub.add_parser("closed-form", help="closed-form SIR chain solution for depths 0..K")
    c.add_argument("--k", type=int, required=True)
    c.add_argument("--lambda", dest="lam", type=float, required=True)
    c.add_argument("--gamma", type=float, required=True)
    c.add_argument("--t-end", type=float, required=True)
    c.add_argument("--sample-dt", type=float, default=DEFAULT_SAMPLE_DT)
    c.add_argument("-o", "--output", required=True)
    c.set_defaults(func=cmd_closed_form)

    m = sub.add_parser("gillespie", help="Monte-Carlo node-state probabilities")
    m.add_argument("--net", required=True)
    m.add_argument("--init", required=True)
    m.add_argument("--runs", type=int, required=True)
    m.add_argument("--seed", type=int, required=True)
    m.add_argument("--t-end", type=float, required=True)
    m.add_argument("--sample-dt", type=float, default=DEFAULT_SAMPLE_DT)
    m.add_argument("--workers", type=int, default=None)
    m.add_argument("-o", "--output", required=True)
    m.set_defaults(func=cmd_gillespie)

    o = sub.add_parser("oracle", help="exact master-equation marginals")
    o.add_argument("--net", required=True)
    o.add_argument("--init", required=True)
    o.add_argument("--t-end", type=float, required=True)
    o.add_argument("--sample-dt", type=float, default=DEFAULT_SAMPLE_DT)
    o.add_argument("--dt", type=float, default=DEFAULT_DT)
    o.add_argument("-o", "--output", required=True)
    o.set_defaults(func=cmd_oracle)

    r = sub.add_parser("compare", help="compare two state CSV files")
    r.add_argument("--candidate", required=True)
    r.add_argument("--reference", required=True)
    r.add_argument("--bound-check", action="store_true", help="flag reference S above candidate S")
    r.add_argument("--mc-stderr-file", help="CSV with S_se columns (gillespie output)")
    r.add_argument("--sigmas", type=float, default=3.0)
    r.add_argument("--tol", type=float, default=1e-9, help="bound margin without a stderr file")
    r.add_argument(
        "--runs",
        type=int,
        help="ensemble size of the reference; bound check then uses Wilson score limits",
    )
    r.add_argument("-o", "--output", required=True)
    r.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SizeGuardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIZE
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except InvariantViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


def run_cli(argv) -> int:
    """Like :func:`main` but returns the usage-error exit code instead of raising."""
    try:
        return main(argv)
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
