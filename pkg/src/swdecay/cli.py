"""Command-line interface.

Subcommands::

    swdecay design power|samplesize|de|sensitivity|compare ...
    swdecay simulate --scenario FILE ...
    swdecay analyze --data FILE ...

Reports are JSON on stdout (and optionally ``--output``) with keys sorted
and floats rounded to 10 significant digits.  Exit codes: 0 success,
2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .correlation import CorrelationParams, require_valid
from .data import read_dataset_csv
from .design import (
    BlockExchangeableParams,
    DesignLayout,
    PowerQuery,
    attrition_inflate,
    clusters_from_design_effect,
    de_maximizer,
    design_effect,
    equal_variance_line,
    general_layout,
    power,
    relative_variance,
    required_clusters,
    resolve_dof,
    required_cohort_size,
    sensitivity_grid,
    standard_layout,
    variance_block_exchangeable,
    variance_delta,
    variance_exponential_decay,
    variance_limit,
    write_grid_csv,
)
from .estimation import FLAVORS, fit, wald_test
from .exceptions import InsufficientClustersError, NumericalError, SingularMatrixError, ValidationError
from .simulation import (
    AnalysisOptions,
    load_scenario,
    round_floats,
    run_scenario,
    write_summary_csv,
    write_summary_json,
)

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


class Unattainable(Exception):
    """Target power cannot be reached; the report is still emitted."""

    def __init__(self, report):
        super().__init__("target power is unattainable")
        self.report = report


def _emit(report: dict, output: str | None) -> None:
    text = json.dumps(round_floats(report), indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    if output:
        Path(output).write_text(text)


def _grid(spec: str) -> np.ndarray:
    """``start:stop:num`` (inclusive, evenly spaced) or a comma-separated list."""
    try:
        if ":" in spec:
            start, stop, num = spec.split(":")
            return np.linspace(float(start), float(stop), int(num))
        return np.array([float(v) for v in spec.split(",")])
    except ValueError:
        raise ValidationError(f"cannot parse grid {spec!r}; use start:stop:num or v1,v2,...") from None


def _layout(args) -> DesignLayout:
    if getattr(args, "layout", None):
        rows = [line.replace(",", " ").split() for line in Path(args.layout).read_text().splitlines() if line.strip()]
        try:
            return DesignLayout(np.array([[int(v) for v in r] for r in rows]))
        except ValueError:
            raise ValidationError(f"{args.layout}: layout rows must be 0/1 entries of equal length") from None
    if getattr(args, "clusters_per_step", None):
        try:
            m = [int(v) for v in args.clusters_per_step.split(",")]
        except ValueError:
            raise ValidationError(f"cannot parse --clusters-per-step {args.clusters_per_step!r}") from None
        return general_layout(m, b=args.baseline, c=1)
    if args.clusters is None or args.periods is None:
        raise ValidationError("give --clusters and --periods (standard design), --clusters-per-step or --layout FILE")
    return standard_layout(args.clusters, args.periods)


def _query(args) -> PowerQuery:
    dof = args.dof
    if dof.lstrip("-").isdigit():
        dof = int(dof)
    return PowerQuery(delta=args.delta, phi=args.phi, alpha=args.alpha, test=args.test, dof_rule=dof, target_power=args.target)


def _params(args) -> CorrelationParams:
    return CorrelationParams(args.tau, args.rho)


def _cohort(args) -> int:
    if args.cohort is None:
        raise ValidationError("--cohort is required for this calculation")
    return args.cohort


def _inputs(args) -> dict:
    skip = {"func", "command", "design_command", "output"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# -- design ---------------------------------------------------------------------


def cmd_design_power(args) -> dict:
    layout, query, params = _layout(args), _query(args), _params(args)
    var = variance_delta(layout, _cohort(args), params, args.phi)
    I, T = layout.n_clusters, layout.n_periods
    report = {"inputs": _inputs(args), "variance": var, "power": power(var, query, I, T),
              "clusters": I, "periods": T}
    if query.test == "t":
        report["dof"] = _dof(query, I, T)
    return report


def _dof(query, I, T):
    return resolve_dof(query.dof_rule, I, T)


def cmd_design_samplesize(args) -> dict:
    query, params = _query(args), _params(args)
    if args.solve_for == "clusters":
        if args.periods is None or args.cohort is None:
            raise ValidationError("--solve-for clusters needs --periods and --cohort")
        res = required_clusters(args.cohort, query, params, args.periods, args.max_clusters)
        report = {"inputs": _inputs(args), "attainable": res.attainable, "clusters": res.n_clusters, "power": res.power}
        if res.attainable:
            total = res.n_clusters * args.cohort
            report["total_individuals"] = total
            report["total_after_attrition"] = attrition_inflate(total, args.gamma)
        else:
            raise Unattainable(report)
        return report
    layout = _layout(args)
    I, T = layout.n_clusters, layout.n_periods
    res = required_cohort_size(layout, query, params, args.max_cohort)
    report = {"inputs": _inputs(args), "attainable": res.attainable, "cohort_size": res.n,
              "power": res.power, "limit_power": res.limit_power, "clusters": I, "periods": T}
    if query.test == "t":
        report["dof"] = _dof(query, I, T)
    if not res.attainable:
        raise Unattainable(report)
    report["variance"] = variance_delta(layout, res.n, params, args.phi)
    report["power_at_n_minus_1"] = (
        power(variance_delta(layout, res.n - 1, params, args.phi), query, I, T) if res.n > 1 else None
    )
    total = I * res.n
    report["total_individuals"] = total
    report["total_after_attrition"] = attrition_inflate(total, args.gamma)
    report["cohort_after_attrition"] = attrition_inflate(res.n, args.gamma)
    return report


def cmd_design_de(args) -> dict:
    params = _params(args)
    require_valid(params, args.cohort, guard=0.0)
    de = design_effect(args.steps, args.per_step, args.cohort, params)
    report = {"inputs": _inputs(args), "design_effect": de, "de_maximizing_rho": de_maximizer(args.steps, args.per_step)}
    if args.n_individual is not None:
        total, clusters = clusters_from_design_effect(args.n_individual, args.cohort, args.steps, args.per_step, params)
        report["total_individuals"] = total
        report["clusters"] = clusters
        report["total_after_attrition"] = attrition_inflate(total, args.gamma)
    return report


def cmd_design_sensitivity(args) -> dict:
    layout, query = _layout(args), _query(args)
    taus = _grid(args.tau_grid)
    rhos = 1.0 - _grid(args.d_grid)
    rows = sensitivity_grid(layout, _cohort(args), query, taus, rhos)
    write_grid_csv(args.grid_out, ("tau", "d", "power"), rows)
    pw = [r[2] for r in rows]
    return {"inputs": _inputs(args), "grid_file": args.grid_out, "points": len(rows),
            "power_min": min(pw), "power_max": max(pw)}


def cmd_design_compare(args) -> dict:
    layout, params = _layout(args), _params(args)
    I, T, N = layout.n_clusters, layout.n_periods, _cohort(args)
    var_pd = variance_delta(layout, N, params, args.phi)
    report = {"inputs": _inputs(args), "variance_proportional_decay": var_pd}
    try:
        var_ed = variance_exponential_decay(layout, N, params, args.phi)
        report["variance_exponential_decay"] = var_ed
        report["ratio_pd_over_ed"] = var_pd / var_ed
    except SingularMatrixError as exc:
        report["variance_exponential_decay"] = None
        report["exponential_decay_error"] = str(exc)
    line = equal_variance_line(T, N, args.tau, args.rho)
    report["equal_variance_h"] = list(line.etas) if line.exists else "none"
    if args.be_grid_out:
        if args.layout or args.clusters_per_step:
            raise ValidationError("the block-exchangeable comparison is defined for standard designs only")
        rows = []
        for a1 in _grid(args.alpha1_grid):
            for a2 in _grid(args.alpha2_grid):
                be = BlockExchangeableParams(args.tau, float(a1), float(a2))
                try:
                    ratio = relative_variance(I, T, N, params, be, args.phi)
                except ValidationError:
                    ratio = float("nan")
                rows.append((float(a1), float(a2), ratio))
        write_grid_csv(args.be_grid_out, ("alpha1_be", "alpha2_be", "ratio"), rows)
        report["be_grid_file"] = args.be_grid_out
    if args.ed_grid_out:
        rows = []
        for tau in _grid(args.tau_grid):
            for d in _grid(args.d_grid):
                p = CorrelationParams(float(tau), 1.0 - float(d))
                try:
                    ratio = variance_delta(layout, N, p, 1.0) / variance_exponential_decay(layout, N, p, 1.0)
                except (ValidationError, NumericalError):
                    ratio = float("nan")
                rows.append((float(tau), float(d), ratio))
        write_grid_csv(args.ed_grid_out, ("tau", "d", "ratio"), rows)
        report["ed_grid_file"] = args.ed_grid_out
    if args.alpha1_be is not None and args.alpha2_be is not None:
        be = BlockExchangeableParams(args.tau, args.alpha1_be, args.alpha2_be)
        report["variance_block_exchangeable"] = variance_block_exchangeable(I, T, N, be, args.phi)
        report["ratio_pd_over_be"] = relative_variance(I, T, N, params, be, args.phi)
    if args.tau > 0:
        report["variance_limit"] = variance_limit(layout, params, args.phi)
    return report


# -- simulate / analyze -----------------------------------------------------------


def cmd_simulate(args) -> dict:
    scenario = load_scenario(args.scenario)
    overrides = {}
    if args.reps is not None:
        overrides["reps"] = args.reps
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    if overrides:
        scenario = replace(scenario, **overrides)
    options = AnalysisOptions(alpha=args.alpha)
    summary = run_scenario(scenario, options)
    prefix = Path(args.out_prefix)
    if prefix.parent and not prefix.parent.exists():
        prefix.parent.mkdir(parents=True)
    csv_path, json_path = f"{prefix}.csv", f"{prefix}.json"
    write_summary_csv(summary, csv_path)
    write_summary_json(summary, json_path)
    report = summary.to_dict()
    report["files"] = {"csv": csv_path, "json": json_path}
    if scenario.reps == 1:
        report["mcse_undefined"] = True
    return report


def _fit_report(dataset, adjustment: str, alpha: float, dof_rules) -> dict:
    res = fit(dataset, adjustment=adjustment)
    out = res.to_dict()
    out["se_delta"] = {f: (None if res.covariances[f] is None else res.se(f)) for f in FLAVORS}
    tests = []
    for flavor in FLAVORS:
        if res.covariances[flavor] is None:
            continue
        families = [("z", "i-2")] + [("t", r) for r in dof_rules]
        for test, rule in families:
            wt = wald_test(res, flavor, test, rule, alpha)
            tests.append({"flavor": flavor, "test": test, "dof_rule": None if test == "z" else rule,
                          "dof": wt.dof, "statistic": wt.statistic, "p_value": wt.p_value, "reject": wt.reject})
    out["tests"] = tests
    return out


def cmd_analyze(args) -> dict:
    dataset = read_dataset_csv(args.data)
    if args.dof == "both":
        rules = ["i-2", "i-(t+1)"]
    else:
        rules = [args.dof]
    # surface an impossible DoF rule before fitting
    for rule in rules:
        try:
            _dof(PowerQuery(delta=1.0, dof_rule=rule), dataset.n_clusters, dataset.n_periods)
        except InsufficientClustersError:
            if args.dof != "both":
                raise
            rules = [r for r in rules if r != rule]
    methods = ["qls", "maqls"] if args.adjustment == "both" else [args.adjustment]
    report = {
        "inputs": _inputs(args),
        "clusters": dataset.n_clusters,
        "periods": dataset.n_periods,
        "cluster_sizes": dataset.cluster_sizes.tolist(),
        "fits": {m: _fit_report(dataset, m, args.alpha, rules) for m in methods},
    }
    return report


# -- parser ---------------------------------------------------------------------------


def _design_common(p, *, need_effect=True, need_cohort=True):
    p.add_argument("--clusters", "-I", type=int, help="number of clusters (standard design)")
    p.add_argument("--periods", "-T", type=int, help="number of periods (standard design)")
    p.add_argument("--layout", help="file with one 0/1 treatment row per cluster (overrides -I/-T)")
    p.add_argument("--clusters-per-step", help="comma-separated clusters crossing at each step, e.g. 4,4,3")
    p.add_argument("--baseline", type=int, default=1, help="baseline periods (with --clusters-per-step)")
    if need_cohort:
        p.add_argument("--cohort", "-N", type=int, help="individuals per cluster")
    p.add_argument("--tau", type=float, required=True, help="within-period correlation")
    p.add_argument("--rho", type=float, required=True, help="within-individual AR(1) correlation")
    p.add_argument("--phi", type=float, default=1.0, help="marginal outcome variance")
    if need_effect:
        p.add_argument("--delta", type=float, required=True, help="intervention effect on the outcome scale")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--test", choices=("z", "t"), default="t")
    p.add_argument("--dof", default="i-2", help="t-test degrees of freedom: i-2, i-(t+1) or an integer")
    p.add_argument("--target", type=float, default=0.8, help="target power")
    p.add_argument("--gamma", type=float, default=0.0, help="anticipated attrition rate")
    p.add_argument("--output", "-o", help="also write the JSON report here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swdecay", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    design = sub.add_parser("design", help="design-stage calculations")
    dsub = design.add_subparsers(dest="design_command", required=True)

    p = dsub.add_parser("power", help="power at a given cohort size")
    _design_common(p)
    p.set_defaults(func=cmd_design_power)

    p = dsub.add_parser("samplesize", help="smallest cohort size (or cluster count) reaching the target power")
    _design_common(p)
    p.add_argument("--solve-for", choices=("cohort", "clusters"), default="cohort")
    p.add_argument("--max-cohort", type=int, default=100_000)
    p.add_argument("--max-clusters", type=int, default=10_000)
    p.set_defaults(func=cmd_design_samplesize)

    p = dsub.add_parser("de", help="design effect relative to individual randomization")
    p.add_argument("--steps", "-S", type=int, required=True)
    p.add_argument("--per-step", "-c", type=int, default=1, help="measurements between consecutive steps")
    p.add_argument("--cohort", "-N", type=int, required=True)
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--n-individual", type=float, help="total individuals needed under individual randomization")
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_design_de)

    p = dsub.add_parser("sensitivity", help="power over a (tau, d = 1 - rho) grid")
    _design_common(p)
    p.add_argument("--tau-grid", default="0:0.2:21")
    p.add_argument("--d-grid", default="0.05:1:20")
    p.add_argument("--grid-out", required=True, help="CSV path for the tau,d,power grid")
    p.set_defaults(func=cmd_design_sensitivity)

    p = dsub.add_parser("compare", help="variance relative to block-exchangeable and exponential decay")
    _design_common(p, need_effect=False)
    p.add_argument("--alpha1-be", type=float, help="block-exchangeable between-period correlation")
    p.add_argument("--alpha2-be", type=float, help="block-exchangeable within-individual correlation")
    p.add_argument("--alpha1-grid", default="0:0.1:11")
    p.add_argument("--alpha2-grid", default="0:0.9:10")
    p.add_argument("--be-grid-out", help="CSV path for the alpha1_be,alpha2_be,ratio grid")
    p.add_argument("--tau-grid", default="0.01:0.2:20")
    p.add_argument("--d-grid", default="0.1:1:10")
    p.add_argument("--ed-grid-out", help="CSV path for the tau,d,ratio grid against exponential decay")
    p.set_defaults(func=cmd_design_compare)

    p = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    p.add_argument("--scenario", required=True, help="scenario JSON file")
    p.add_argument("--out-prefix", required=True, help="writes PREFIX.csv and PREFIX.json")
    p.add_argument("--reps", type=int, help="override the scenario replicate count")
    p.add_argument("--seed", type=int, help="override the scenario base seed")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="fit a long-format trial dataset")
    p.add_argument("--data", required=True, help="CSV with columns cluster,individual,period,treatment,outcome")
    p.add_argument("--adjustment", choices=("maqls", "qls", "both"), default="maqls")
    p.add_argument("--dof", default="both", help="t-test DoF rule: i-2, i-(t+1) or both")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        report = args.func(args)
    except Unattainable as exc:
        _emit(exc.report, getattr(args, "output", None))
        print("error: target power is unattainable", file=sys.stderr)
        return EXIT_INVALID
    except (ValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    _emit(report, getattr(args, "output", None))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
