"""Command-line interface.

Subcommands ``test``, ``ci``, ``exact``, ``reflect``, ``highdim``,
``simulate`` and ``diagnose`` print a JSON report (``simulate`` can also emit
CSV).  Exit status is 0 on success, 2 on input errors and 3 on numerical
failures; errors are reported as a JSON object on stderr.

Settings can come from an INI file (``--config``) with one section per
subcommand, e.g.::

    [test]
    data = hormone.csv
    primitive = perm
    a = 0,1
    a0 = 0
    draws = 2000

Command-line flags override the file.  ``RESRAND_THREADS`` supplies
``--threads`` when neither is given.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import os
import sys
from typing import Optional

import numpy as np

from . import __version__
from .engine import SIDES, TestConfig, invert_ci, run_test, similarity_diagnostic
from .errors import InputError, MissingColumn, NonNumericCell, NumericalError, RaggedRow, ResRandError
from .exactcons import BalancedDesignSpec, build_balanced_clustering, run_exact_test
from .highdim import PenaltyConfig, default_penalties, family_test, run_highdim_test
from .linmodel import Dataset, LinearHypothesis, normalize_labels
from .primitives import (
    ClusterPerm,
    ClusterSign,
    Clustering,
    Double,
    GlobalPerm,
    GlobalSign,
    TwoWayPerm,
    layout_from_labels,
)
from .reflect import ReflectionConfig, Undecided, run_reflection_test
from .rng import substream
from .simlab import METHODS, SCENARIOS, run_monte_carlo, spec_from_dict

PRIMITIVES = ("perm", "sign", "double", "global_perm", "global_sign", "twoway")
EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


# ---------------------------------------------------------------- CSV ingestion


def _parse_float(text, row, column):
    try:
        value = float(text)
    except ValueError:
        raise NonNumericCell(row, column, text) from None
    if not math.isfinite(value):
        raise NonNumericCell(row, column, text)
    return value


def _parse_int(text, row, column):
    value = _parse_float(text, row, column)
    if value != int(value):
        raise NonNumericCell(row, column, text)
    return int(value)


def ingest_csv(path, intercept: bool = True) -> Dataset:
    """Read a CSV file with a header row into a :class:`Dataset`.

    Column ``y`` is the response and every column whose name starts with
    ``x`` is a covariate, in file order.  Optional columns: ``cluster`` (any
    labels), ``rowc`` and ``colc`` (two-way labels; numbered jointly when the
    two columns share labels, as in dyadic data) and ``time`` (integers,
    strictly increasing).  An intercept column is prepended unless
    ``intercept=False``.  Row numbers in errors are file line numbers.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path} is empty") from None
        rows = []
        for line_no, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != len(header):
                raise RaggedRow(line_no, len(header), len(rec))
            rows.append((line_no, [f.strip() for f in rec]))
    if "y" not in header:
        raise MissingColumn("y")
    if not rows:
        raise InputError(f"{path} has no data rows")
    col = {name: k for k, name in enumerate(header)}
    xcols = [h for h in header if h.startswith("x")]
    if not xcols and not intercept:
        raise MissingColumn("x*")
    y = np.array([_parse_float(r[col["y"]], ln, "y") for ln, r in rows])
    X = [np.array([_parse_float(r[col[c]], ln, c) for ln, r in rows]) for c in xcols]
    names = list(xcols)
    if intercept:
        X.insert(0, np.ones(len(rows)))
        names.insert(0, "intercept")
    kw = {}
    if "cluster" in col:
        kw["cluster"] = normalize_labels([r[col["cluster"]] for _, r in rows])
    if ("rowc" in col) != ("colc" in col):
        raise MissingColumn("colc" if "rowc" in col else "rowc")
    if "rowc" in col:
        rlab = [r[col["rowc"]] for _, r in rows]
        clab = [r[col["colc"]] for _, r in rows]
        if set(rlab) & set(clab):
            nodes = {lab: k for k, lab in enumerate(sorted(set(rlab) | set(clab), key=_label_key))}
            kw["row_cluster"] = np.array([nodes[v] for v in rlab])
            kw["col_cluster"] = np.array([nodes[v] for v in clab])
        else:
            kw["row_cluster"] = normalize_labels(rlab)
            kw["col_cluster"] = normalize_labels(clab)
    if "time" in col:
        kw["time"] = np.array([_parse_int(r[col["time"]], ln, "time") for ln, r in rows])
    return Dataset(y, np.column_stack(X), names=tuple(names), **kw)


def _label_key(label):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def twoway_layout(d: Dataset, dyadic: Optional[bool] = None):
    if d.row_cluster is None or d.col_cluster is None:
        raise MissingColumn("rowc" if d.row_cluster is None else "colc")
    return layout_from_labels(d.row_cluster, d.col_cluster, dyadic=dyadic)


# ---------------------------------------------------------------- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


def _threads_default():
    env = os.environ.get("RESRAND_THREADS")
    if env is None:
        return 1
    try:
        value = int(env)
    except ValueError:
        raise InputError(f"RESRAND_THREADS must be an integer, got {env!r}") from None
    if value < 1:
        raise InputError(f"RESRAND_THREADS must be >= 1, got {value}")
    return value


def _common(p, data=True):
    if data:
        p.add_argument("--data", help="CSV file with columns y, x*, and optional cluster, rowc, colc, time")
        p.add_argument("--no-intercept", action="store_true", help="do not prepend a column of ones")
    p.add_argument("--config", help="INI file with a section for this subcommand")
    p.add_argument("--output", help="write the report here instead of stdout")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: RESRAND_THREADS or 1)")


def _test_opts(p, draws=2000):
    p.add_argument("--draws", type=int, default=draws, help="randomization draws R")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--mode", choices=("auto", "sampled", "enumerated"), default="auto")
    p.add_argument("--cap", type=int, default=100_000, help="largest group to enumerate")
    p.add_argument("--sidedness", choices=SIDES, default="two-sided")


def _hyp_opts(p):
    p.add_argument("--a", help="contrast vector, comma separated (one entry per design column)")
    p.add_argument("--a0", type=float, help="hypothesized value of a'beta")
    p.add_argument("--coef", help="test a single coefficient by column name or index instead of --a")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="resrand", description="Residual randomization tests for linear regression.")
    parser.add_argument("--version", action="version", version=f"resrand {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("test", help="randomization test of a'beta = a0")
    _common(p)
    _test_opts(p)
    _hyp_opts(p)
    p.add_argument("--primitive", action="append", choices=PRIMITIVES, help="repeat to compare several primitives")
    p.add_argument("--dyadic", action="store_true", help="treat rowc/colc as nodes of one dyadic layout")

    p = sub.add_parser("ci", help="confidence interval by test inversion")
    _common(p)
    _test_opts(p)
    p.add_argument("--coef", help="coefficient name or index")
    p.add_argument("--primitive", choices=PRIMITIVES)
    p.add_argument("--lo", type=float)
    p.add_argument("--hi", type=float)
    p.add_argument("--step", type=float, help="grid step (default (hi - lo) / 200)")
    p.add_argument("--dyadic", action="store_true")

    p = sub.add_parser("exact", help="exact cluster sign test")
    _common(p)
    _hyp_opts(p)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--clusters", type=int, help="build this many balanced clusters from a binary covariate")
    p.add_argument("--treatment", help="binary covariate column for --clusters (default: first x column)")
    p.add_argument("--tol", type=float, default=1e-8, help="relative tolerance of the similarity check")

    p = sub.add_parser("reflect", help="reflection test for serially correlated errors")
    _common(p)
    _test_opts(p)
    _hyp_opts(p)
    p.add_argument("--J", type=int, default=6, help="number of blocks")
    p.add_argument("--variant", choices=("conditional", "unconditional"), default="conditional")

    p = sub.add_parser("highdim", help="ridge/lasso randomization tests for p > n")
    _common(p)
    _test_opts(p, draws=10_000)
    _hyp_opts(p)
    p.add_argument("--primitive", choices=("global_sign", "global_perm"), default="global_sign")
    p.add_argument("--lambda-ridge", type=float)
    p.add_argument("--lambda-lasso", type=float)
    p.add_argument("--family-alpha", type=float, help="Bonferroni family level (default --alpha)")

    p = sub.add_parser("simulate", help="Monte Carlo rejection rates")
    _common(p, data=False)
    p.add_argument("--scenario", help=f"registered scenario id: {', '.join(SCENARIOS)}")
    p.add_argument("--spec", help='scenario as JSON, e.g. \'{"kind": "AR1", "rho": 0.5}\'')
    p.add_argument("--methods", help=f"comma separated from {', '.join(METHODS)}")
    p.add_argument("--reps", type=int, help="replications M")
    p.add_argument("--draws", type=int, help="internal randomization draws per test")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--format", choices=("json", "csv"), default="json")

    p = sub.add_parser("diagnose", help="how far X'GX is from a multiple of X'X")
    _common(p)
    p.add_argument("--primitive", choices=PRIMITIVES)
    p.add_argument("--draws", default="100,10000", help="comma separated draw counts")
    p.add_argument("--dyadic", action="store_true")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    cp = configparser.ConfigParser(delimiters=("=",), interpolation=None)
    try:
        with open(args.config, encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise InputError(f"{args.config}: line {lineno}: cannot parse {line.strip()!r}") from None
    except configparser.Error as exc:
        raise InputError(f"{args.config}: {exc}") from None
    except OSError as exc:
        raise InputError(f"cannot read config {args.config}: {exc.strerror}") from None
    if not cp.has_section(args.command):
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    explicit = _explicit_dests(sub, argv[1:] if argv else [])
    for key, raw in cp.items(args.command):
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("help", "config"):
            raise InputError(f"{args.config} [{args.command}]: unknown key {key!r}")
        if dest in explicit:
            continue
        action = actions[dest]
        try:
            if isinstance(action, argparse._StoreTrueAction):
                value = cp.getboolean(args.command, key)
            elif isinstance(action, argparse._AppendAction):
                value = [v.strip() for v in raw.split(",") if v.strip()]
            elif action.type is not None:
                value = action.type(raw)
            else:
                value = raw
        except ValueError:
            raise InputError(f"{args.config} [{args.command}]: bad value {raw!r} for key {key!r}") from None
        values = value if isinstance(value, list) else [value]
        if action.choices is not None and any(v not in action.choices for v in values):
            raise InputError(f"{args.config} [{args.command}]: {key} must be one of {list(action.choices)}")
        setattr(args, dest, value)
    return args


def _explicit_dests(sub, argv) -> set:
    out = set()
    for a in sub._actions:
        for opt in a.option_strings:
            if any(tok == opt or tok.startswith(opt + "=") for tok in argv):
                out.add(a.dest)
    return out


# ---------------------------------------------------------------- helpers


def _need(args, name, flag=None):
    value = getattr(args, name)
    if value is None:
        raise InputError(f"missing required option {flag or '--' + name.replace('_', '-')}")
    return value


def _load(args) -> Dataset:
    path = _need(args, "data")
    try:
        return ingest_csv(path, intercept=not args.no_intercept)
    except OSError as exc:
        raise InputError(f"--data: cannot read {path}: {exc.strerror}") from None


def _coef_index(d: Dataset, coef: str) -> int:
    if coef in d.names:
        return d.names.index(coef)
    try:
        j = int(coef)
    except ValueError:
        raise InputError(f"--coef: no column named {coef!r}; columns are {list(d.names)}") from None
    if not 0 <= j < d.p:
        raise InputError(f"--coef: index {j} out of range for {d.p} columns")
    return j


def _hypothesis(args, d: Dataset) -> LinearHypothesis:
    if args.coef is not None and args.a is not None:
        raise InputError("give either --a or --coef, not both")
    if args.a0 is None:
        raise InputError("missing required option --a0")
    if args.coef is not None:
        return LinearHypothesis.coefficient(d.p, _coef_index(d, args.coef), args.a0)
    if args.a is None:
        raise InputError("missing required option --a (or --coef)")
    try:
        a = np.array([float(v) for v in args.a.split(",")])
    except ValueError:
        raise InputError(f"--a: cannot parse {args.a!r} as comma separated numbers") from None
    if a.size != d.p:
        raise InputError(f"--a has {a.size} entries but the design has {d.p} columns {list(d.names)}")
    return LinearHypothesis(a, args.a0)


def _threads(args) -> int:
    if args.threads is not None:
        if args.threads < 1:
            raise InputError("--threads must be >= 1")
        return args.threads
    return _threads_default()


def _cfg(args) -> TestConfig:
    return TestConfig(
        draws=args.draws,
        alpha=args.alpha,
        mode=args.mode,
        cap=args.cap,
        seed=args.seed,
        sidedness=args.sidedness,
        threads=_threads(args),
    )


def _kind(name: str, d: Dataset, dyadic: bool = False):
    if name == "global_perm":
        return GlobalPerm(d.n)
    if name == "global_sign":
        return GlobalSign(d.n)
    if name == "twoway":
        return TwoWayPerm(twoway_layout(d, True if dyadic else None))
    if d.cluster is None:
        raise MissingColumn("cluster")
    c = Clustering(d.cluster)
    return {"perm": ClusterPerm, "sign": ClusterSign, "double": Double}[name](c)


def _config_echo(args) -> dict:
    skip = {"output", "config"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# ---------------------------------------------------------------- subcommands


def cmd_test(args):
    d = _load(args)
    h = _hypothesis(args, d)
    prims = _need(args, "primitive")
    cfg = _cfg(args)
    reports = []
    for name in prims:
        out = run_test(d, h, _kind(name, d, args.dyadic), cfg)
        reports.append(out.to_dict())
    if len(reports) == 1:
        report = reports[0]
    else:
        report = {"comparison": reports}
    report["config"] = _config_echo(args)
    return report


def cmd_ci(args):
    d = _load(args)
    j = _coef_index(d, _need(args, "coef"))
    kind = _kind(_need(args, "primitive"), d, args.dyadic)
    grid = (_need(args, "lo"), _need(args, "hi"), args.step)
    ci = invert_ci(d, j, kind, _cfg(args), grid)
    report = {
        "coef": d.names[j] if d.names else j,
        "primitive": kind.name,
        "seed": args.seed,
        "R_used": args.draws,
        **ci.to_dict(),
        "config": _config_echo(args),
    }
    if ci.empty:
        report["note"] = "no grid value was accepted"
    elif not ci.contiguous:
        report["note"] = "accepted grid values are not contiguous; interval is their hull"
    return report


def cmd_exact(args):
    d = _load(args)
    h = _hypothesis(args, d)
    if args.clusters is not None:
        tcol = args.treatment or next((nm for nm in d.names if nm.startswith("x")), None)
        if tcol is None or tcol not in d.names:
            raise MissingColumn(tcol or "x*")
        spec = BalancedDesignSpec(d.X[:, d.names.index(tcol)], args.clusters)
        c = build_balanced_clustering(spec, substream(args.seed, 0))
    else:
        if d.cluster is None:
            raise InputError("exact needs a 'cluster' column or --clusters")
        c = Clustering(d.cluster)
    out = run_exact_test(d, h, c, args.alpha, tol=args.tol)
    report = out.to_dict()
    report["clusters"] = c.assignment.tolist()
    report["config"] = _config_echo(args)
    return report


def cmd_reflect(args):
    d = _load(args)
    if d.time is None:
        raise MissingColumn("time")
    h = _hypothesis(args, d)
    out = run_reflection_test(d, h, ReflectionConfig(args.J, args.variant), _cfg(args))
    report = out.to_dict()
    if isinstance(out, Undecided):
        report["seed"] = args.seed
    report["variant"] = args.variant
    report["config"] = _config_echo(args)
    return report


def cmd_highdim(args):
    d = _load(args)
    cfg = _cfg(args)
    kind = GlobalSign(d.n) if args.primitive == "global_sign" else GlobalPerm(d.n)
    pen = default_penalties(d)
    if args.lambda_ridge is not None or args.lambda_lasso is not None:
        pen = PenaltyConfig(
            lambda_ridge=args.lambda_ridge if args.lambda_ridge is not None else pen.lambda_ridge,
            lambda_lasso=args.lambda_lasso if args.lambda_lasso is not None else pen.lambda_lasso,
        )
    base = {"lambda_ridge": pen.lambda_ridge, "lambda_lasso": pen.lambda_lasso, "primitive": kind.name}
    if args.a is None and args.coef is None:
        rep = family_test(d, pen, kind, cfg, args.family_alpha)
        report = {**base, **rep.to_dict(), "seed": args.seed, "R_used": args.draws}
        if d.names:
            report["rejected_names"] = [d.names[j] for j in report["rejected"]]
    else:
        out = run_highdim_test(d, _hypothesis(args, d), pen, kind, cfg)
        report = {**base, **out.to_dict()}
    report["config"] = _config_echo(args)
    return report


def cmd_simulate(args):
    if (args.scenario is None) == (args.spec is None):
        raise InputError("give exactly one of --scenario or --spec")
    if args.scenario is not None:
        if args.scenario not in SCENARIOS:
            raise InputError(f"--scenario: unknown id {args.scenario!r}; choose from {list(SCENARIOS)}")
        reg = SCENARIOS[args.scenario]
        spec, methods, M, full = reg.spec, list(reg.methods), reg.M, reg.full_scale
    else:
        try:
            raw = json.loads(args.spec)
        except json.JSONDecodeError as exc:
            raise InputError(f"--spec: invalid JSON ({exc.msg})") from None
        spec = spec_from_dict(raw)
        methods, M, full = None, None, ""
    if args.methods:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise InputError("missing required option --methods")
    if args.reps is not None:
        M = args.reps
    if M is None:
        raise InputError("missing required option --reps")
    draws = {m: args.draws for m in methods} if args.draws else None
    rep = run_monte_carlo(spec, methods, M, seed=args.seed, draws=draws, alpha=args.alpha, threads=_threads(args), full_scale=full)
    if args.format == "csv":
        return rep.to_csv()
    report = rep.to_dict()
    report["config"] = _config_echo(args)
    return report


def cmd_diagnose(args):
    d = _load(args)
    kind = _kind(_need(args, "primitive"), d, args.dyadic)
    try:
        counts = [int(v) for v in str(args.draws).split(",")]
    except ValueError:
        raise InputError(f"--draws: cannot parse {args.draws!r}") from None
    results = []
    for k, m in enumerate(counts):
        rep = similarity_diagnostic(d, kind, m, substream(args.seed, k))
        results.append({"draws": m, **rep.to_dict()})
    report = {"primitive": kind.name, "seed": args.seed, "results": results}
    if len(results) >= 2 and all(r["mean_deviation"] > 0 for r in results):
        x = np.log([r["draws"] for r in results])
        yv = np.log([r["mean_deviation"] for r in results])
        report["log_log_slope"] = float(np.polyfit(x, yv, 1)[0])
    report["config"] = _config_echo(args)
    return report


COMMANDS = {
    "test": cmd_test,
    "ci": cmd_ci,
    "exact": cmd_exact,
    "reflect": cmd_reflect,
    "highdim": cmd_highdim,
    "simulate": cmd_simulate,
    "diagnose": cmd_diagnose,
}


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(build_parser(), argv)
        args.threads = _threads(args)
        report = COMMANDS[args.command](args)
        text = report if isinstance(report, str) else json.dumps(_jsonable(report), indent=2)
        if getattr(args, "output", None):
            with open(args.output, "w", encoding="utf-8") as fh:
                fh.write(text if text.endswith("\n") else text + "\n")
        else:
            print(text)
        return EXIT_OK
    except (InputError, NumericalError, ResRandError) as exc:
        code = EXIT_NUMERIC if isinstance(exc, NumericalError) else EXIT_INPUT
        err = {"error": {"type": type(exc).__name__, "message": str(exc), "exit_code": code}}
        print(json.dumps(err), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
