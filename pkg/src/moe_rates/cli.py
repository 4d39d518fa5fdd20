"""Command-line entry point.

Every subcommand is a thin adapter over the library: it parses flags, calls
one library function, and serializes the result. Structured JSON goes to
stdout (or --out); a short human-readable summary goes to stderr. Exit codes:
0 success, 2 validation error, 3 indeterminate algebraic verdict, 1 internal
error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys

import numpy as np

from . import algebra, divergence, experiments, mle, model, transport
from .errors import IndeterminateError, ValidationError


def _emit(doc, args, summary: str):
    text = json.dumps(doc, indent=2, default=_json_default)
    if getattr(args, "out", None):
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    print(summary, file=sys.stderr)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _parse_kappa(text: str) -> transport.KappaVector:
    try:
        return transport.KappaVector(tuple(int(t) for t in text.split(",")))
    except ValueError as exc:
        raise ValidationError(f"bad kappa vector {text!r}") from exc


def _load_measure(path: str):
    with open(path) as fh:
        doc = json.load(fh)
    if isinstance(doc, dict) and "g_hat" in doc and "family" not in doc:
        # Accept `fit` output documents directly.
        doc = doc["g_hat"]
    return model.measure_from_json(doc)


def _cmd_scenarios(args):
    names = [sc.name for sc in experiments.builtin_scenarios()]
    _emit({"scenarios": names}, args, f"{len(names)} builtin scenarios")
    return 0


def _cmd_sample(args):
    pair, g = _load_measure(args.g)
    prior = _prior_from_args(args, pair)
    data = model.sample(pair, prior, g, args.n, args.seed)
    text = model.dataset_to_csv(data)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print(f"sampled n={args.n} seed={args.seed}", file=sys.stderr)
    return 0


def _prior_from_args(args, pair):
    if getattr(args, "prior", None):
        kind, *params = args.prior.split(",")
        return model.CovariatePrior(kind, tuple(float(p) for p in params))
    return model.uniform_prior(*pair.default_support)


def _cmd_fit(args):
    if args.expert in model.FAMILY_IDS:
        pair = model.expert_pair(args.expert)
    else:
        pair, _ = _load_measure(args.expert)
    with open(args.data) as fh:
        data = model.dataset_from_csv(fh.read(), seed=args.seed)
    config = mle.FitConfig(
        k=args.k,
        weight_floor=args.floor,
        n_starts=args.starts,
        max_iters=args.iters,
        seed=args.seed,
    )
    fit = mle.em_fit(pair, data, config)
    doc = {
        "g_hat": model.measure_to_json(pair, fit.g_hat),
        "loglik": fit.loglik,
        "iters": fit.iters,
        "converged": fit.converged,
        "restarts": fit.restarts,
        "start_index": fit.start_index,
        "loglik_trace": fit.loglik_trace.tolist(),
        "seed": args.seed,
    }
    _emit(doc, args, f"loglik={fit.loglik:.6f} converged={fit.converged}")
    return 0


def _cmd_dist(args):
    _, g = _load_measure(args.g)
    _, g0 = _load_measure(args.g0)
    kap = _parse_kappa(args.kappa)
    value, coupling = transport.wasserstein_kappa(kap, g, g0)
    doc = {"w_kappa": value, "kappa": kap.orders, "coupling": coupling.matrix.tolist()}
    _emit(doc, args, f"w_kappa={value:.10g}")
    return 0


def _cmd_indep(args):
    pair = model.expert_pair(args.family)
    theta1 = [float(t) for t in args.theta1.split(",")]
    theta2 = [float(t) for t in args.theta2.split(",")]
    verdict = algebra.independence_check(pair, theta1, theta2, tol=args.tol)
    doc = {
        "family": args.family,
        "independent": verdict.independent,
        "min_singular_ratio": verdict.min_singular_ratio,
        "labels": [list(l) for l in verdict.labels],
        "witness": None if verdict.witness is None else verdict.witness.tolist(),
        "witness_residual": verdict.witness_residual,
    }
    _emit(doc, args, "independent" if verdict.independent else "dependent")
    return 0


def _cmd_rbar(args):
    res = algebra.rbar(args.s, n_starts=args.starts, seed=args.seed)
    doc = {
        "s": res.s,
        "rbar": res.value,
        "n_starts": res.n_starts,
        "best_residuals": {str(r): v for r, v in res.best_residuals.items()},
        "certificates": {
            str(r): {"a": a.tolist(), "b": b.tolist(), "c": c.tolist()}
            for r, (a, b, c) in res.certificates.items()
        },
        "note": "unsolvability is a numerical verdict (residual floor), not a proof",
    }
    _emit(doc, args, f"rbar({args.s}) = {res.value}")
    return 0


def _cmd_rtilde(args):
    doc = algebra.rtilde_bracket(args.theta, args.s, n_starts=args.starts, seed=args.seed)
    _emit(doc, args, f"rtilde bracket [{doc['lower']}, {doc['upper']}]")
    return 0


def _cmd_witness(args):
    sc = experiments.get_scenario(args.scenario)
    cert = None
    if args.kind == "POLYSOL":
        s = sc.fit_k - sc.g0.k + 1
        rb = algebra.rbar(s, seed=args.seed)
        cert = rb.certificates[rb.value - 1]
    n_grid = tuple(int(t) for t in args.n_grid.split(","))
    doc = {
        "scenario": sc.name,
        "kind": args.kind,
        "measures": [
            model.measure_to_json(sc.pair, experiments.witness_sequence(args.kind, n, sc.g0, cert))
            for n in n_grid
        ],
        "n_grid": n_grid,
    }
    _emit(doc, args, f"{args.kind} witness measures for {sc.name}")
    return 0


def _cmd_ratio(args):
    sc = experiments.get_scenario(args.scenario)
    kap = _parse_kappa(args.kappa_prime)
    cert = None
    if args.kind == "POLYSOL":
        s = sc.fit_k - sc.g0.k + 1
        rb = algebra.rbar(s, seed=args.seed)
        cert = rb.certificates[rb.value - 1]
    n_grid = tuple(int(t) for t in args.n_grid.split(","))
    res = experiments.run_witness_experiment(sc, args.kind, kap, n_grid, cert)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["n", "h", "w_kappa", "ratio"])
    for n, entry in zip(res["n_grid"], res["profile"]):
        writer.writerow([n, entry["h"], entry["w_kappa"], entry["ratio"]])
    text = buf.getvalue()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print(f"flags: {res['flags']}", file=sys.stderr)
    return 0


def _cmd_rates(args):
    sc = experiments.get_scenario(args.scenario)
    if args.seed is not None:
        sc = experiments.replace(sc, seed=args.seed, fit=experiments.replace(sc.fit, seed=args.seed))
    if args.replicates is not None:
        sc = experiments.replace(sc, replicates=args.replicates)
    if args.n_grid is not None:
        sc = experiments.replace(sc, n_grid=tuple(int(t) for t in args.n_grid.split(",")))
    report = experiments.run_rate_experiment(sc, threads=args.threads)
    doc = {
        "scenario": report.scenario,
        "estimator": report.estimator,
        "kappa": list(report.kappa),
        "n_grid": list(report.n_grid),
        "w_median": list(report.w_median),
        "w_q1": list(report.w_q1),
        "w_q3": list(report.w_q3),
        "h_median": list(report.h_median),
        "coord_medians": [list(c) for c in report.coord_medians],
        "slope": report.slope,
        "slope_stderr": report.slope_stderr,
        "h_slope": report.h_slope,
        "coord_slopes": None if report.coord_slopes is None else list(report.coord_slopes),
        "excluded": report.excluded,
        "seed": report.seed,
        "single_n_flag": report.single_n_flag,
        "w_alt_median": None if report.w_alt_median is None else list(report.w_alt_median),
    }
    _emit(doc, args, f"slope={report.slope} h_slope={report.h_slope}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["n", "replicate", "w_kappa", "hellinger"] + [
                f"coord_err_{i}" for i in range(len(report.kappa))
            ]
            writer.writerow(header)
            for row in report.raw_rows:
                writer.writerow(
                    [row["n"], row["replicate"], row["w_kappa"], row["hellinger"]]
                    + list(row["coord_errors"])
                )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moe-rates",
        description="Over-specified Gaussian mixture-of-experts rate harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scenarios", help="list builtin scenario names")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_scenarios)

    p = sub.add_parser("sample", help="draw a dataset CSV from a measure JSON")
    p.add_argument("--g", required=True, help="measure JSON path")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prior", help="e.g. UNIFORM,0,1")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("fit", help="EM fit of a dataset CSV")
    p.add_argument("--data", required=True, help="dataset CSV path")
    p.add_argument(
        "--expert",
        required=True,
        help="expert family name, or a measure JSON whose family to reuse",
    )
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--floor", type=float, default=0.0)
    p.add_argument("--starts", type=int, default=20)
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("dist", help="transportation distance between two measures")
    p.add_argument("--g", required=True)
    p.add_argument("--g0", required=True)
    p.add_argument("--kappa", required=True, help="comma-separated orders, e.g. 2,2,1")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_dist)

    p = sub.add_parser("indep", help="algebraic-independence verdict at a point")
    p.add_argument("--family", required=True)
    p.add_argument("--theta1", required=True, help="comma-separated")
    p.add_argument("--theta2", required=True, help="comma-separated")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_indep)

    p = sub.add_parser("rbar", help="smallest unsolvable system order")
    p.add_argument("--s", type=int, required=True)
    p.add_argument("--starts", type=int, default=150)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_rbar)

    p = sub.add_parser("rtilde", help="bracket for the limit-system order")
    p.add_argument("--theta", type=float, required=True)
    p.add_argument("--s", type=int, required=True)
    p.add_argument("--starts", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_rtilde)

    p = sub.add_parser("witness", help="emit witness-sequence measures")
    p.add_argument("--scenario", required=True)
    p.add_argument("--kind", required=True, choices=experiments.WITNESS_KINDS)
    p.add_argument("--n-grid", default="4,8,16,32,64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_witness)

    p = sub.add_parser("ratio", help="witness ratio profile CSV")
    p.add_argument("--scenario", required=True)
    p.add_argument("--kind", required=True, choices=experiments.WITNESS_KINDS)
    p.add_argument("--kappa-prime", required=True)
    p.add_argument("--n-grid", default="4,8,16,32,64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_ratio)

    p = sub.add_parser("rates", help="run a rate scenario and report slopes")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--n-grid", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out")
    p.add_argument("--csv", help="per-replicate flat table path")
    p.set_defaults(func=_cmd_rates)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except IndeterminateError as exc:
        print(f"indeterminate verdict: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # pragma: no cover - internal errors
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
