"""Command-line interface: ``rdtree {fit,predict,simulate,print-tree}``.

Exit codes are 0 on success, 1 on data or estimation errors and 2 on usage
errors. Failures print one line ``error[<code>]: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import mc
from .data import FUZZY, SHARP, Schema, load_dataset, restrict_bandwidth
from .errors import ArgumentError, DataError, RDTreeError
from .leaf_fit import CLUSTERED, HCE0, HCE1, HOMOSCEDASTIC
from .tree import FitConfig, Tree, fit, predict, select_order

VARIANCE_FLAGS = {"homo": HOMOSCEDASTIC, "hce0": HCE0, "hce1": HCE1, "cluster": CLUSTERED}
GRID_NS = (1000, 5000, 10000)


class UsageError(Exception):
    code = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_fit_options(p):
    p.add_argument("--q", type=int, default=1, help="polynomial order on each side of the cutoff")
    p.add_argument("--q-grid", type=_int_list, default=None,
                   help="comma-separated orders; pick q jointly with the penalty by cross-validation")
    p.add_argument("--min-leaf", type=int, default=50, help="minimum rows per side of the cutoff in every leaf")
    p.add_argument("--min-gain", type=float, default=0.0)
    p.add_argument("--buckets", type=int, default=5, help="treated and untreated rows per split bucket")
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--max-leaves", type=int, default=None)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--one-se", action=argparse.BooleanOptionalAction, default=True,
                   help="use the one-standard-error rule when choosing the penalty")
    p.add_argument("--variance", choices=sorted(VARIANCE_FLAGS), default="homo")
    p.add_argument("--honest-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="worker cap (default: all cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rdtree", description="Regression discontinuity trees.")
    parser.add_argument("--config", help="flat key = value file; command-line flags take precedence")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("fit", help="grow, cross-validate, prune and honestly estimate a tree")
    p.add_argument("--input", required=True, help="CSV with a header row")
    p.add_argument("--schema", action="append", default=[], metavar="KEY=VALUE",
                   help="column mapping: y=, x=, t=, cluster=, features=a,b,c, kinds=a:binary,b:continuous")
    p.add_argument("--cutoff", type=float, required=True)
    p.add_argument("--design", choices=(SHARP, FUZZY), default=SHARP)
    p.add_argument("--cluster-col", default=None)
    p.add_argument("--bandwidth", type=float, default=None, help="keep rows with |x - cutoff| <= bandwidth")
    p.add_argument("--out", default=None, help="tree JSON path; the text rendering goes next to it as .txt")
    _add_fit_options(p)

    p = sub.add_parser("predict", help="effects for feature rows from a fitted tree")
    p.add_argument("--tree", required=True)
    p.add_argument("--input", required=True, help="CSV of feature rows (named like the tree's features, or K columns)")
    p.add_argument("--out", default=None)

    p = sub.add_parser("simulate", help="Monte Carlo study on the built-in designs")
    p.add_argument("--dgp", required=True, help="1..5, f-1..f-5 or all")
    p.add_argument("--n", type=_int_list, default=None, help="sample size(s); default 1000, or 1000,5000,10000 with --dgp all")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--n-eval", type=int, default=mc.EVAL_SIZE)
    p.add_argument("--noise-var", type=float, default=None, help="override the design's outcome noise variance")
    p.add_argument("--out", default=None, help="report JSON path; a CSV with the same stem is written too")
    _add_fit_options(p)
    p.set_defaults(q=None, one_se=False)

    p = sub.add_parser("print-tree", help="render a fitted tree as indented text")
    p.add_argument("--tree", required=True)
    return parser


# --------------------------------------------------------------------- config
def read_config(path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            line = line.replace(":", "=", 1)
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("_", "-").lower()] = value.strip("\"'")
    return out


def _config_argv(parser, command: str, config: dict) -> list:
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    options = {}
    for action in sub._actions:
        for opt in action.option_strings:
            options[opt[2:]] = action
    argv = []
    for key, value in config.items():
        if key in ("help", "config") or key not in options:
            raise UsageError(f"unknown config key {key!r} for {command}")
        action = options[key]
        if isinstance(action, argparse.BooleanOptionalAction):
            flag = value.lower() in ("1", "true", "yes", "on")
            if not flag and value.lower() not in ("0", "false", "no", "off"):
                raise UsageError(f"config key {key!r} expects true/false")
            argv.append(f"--{key}" if flag else f"--no-{key}")
        elif isinstance(action, argparse._AppendAction):
            for item in value.split(";"):
                argv += [f"--{key}", item.strip()]
        else:
            argv += [f"--{key}", value]
    return argv


def _split_config(argv):
    """Pull a top-level ``--config`` out of ``argv`` (it must precede the subcommand)."""
    rest, path = [], None
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok in COMMANDS:
            rest.extend(argv[i:])
            break
        if tok == "--config":
            if i + 1 >= len(argv):
                raise UsageError("--config needs a file path")
            path = argv[i + 1]
            i += 2
            continue
        if tok.startswith("--config="):
            path = tok.split("=", 1)[1]
        else:
            rest.append(tok)
        i += 1
    return path, rest


def parse_args(argv):
    parser = build_parser()
    path, rest = _split_config(list(argv))
    if path is not None:
        command = next((t for t in rest if t in COMMANDS), None)
        if command is None:
            raise UsageError("a subcommand is required")
        pos = rest.index(command)
        rest = rest[:pos + 1] + _config_argv(parser, command, read_config(path)) + rest[pos + 1:]
    return parser.parse_args(rest)


# ------------------------------------------------------------------- commands
def _fit_config(args, design, q=None) -> FitConfig:
    return FitConfig(
        q=args.q if q is None else q,
        min_side_obs=args.min_leaf,
        min_gain=args.min_gain,
        bucket_size=args.buckets,
        max_depth=args.max_depth,
        max_leaves=args.max_leaves,
        cv_folds=args.folds,
        one_se_rule=args.one_se,
        variance=VARIANCE_FLAGS[args.variance],
        honest_fraction=args.honest_fraction,
        seed=args.seed,
        design=design,
    )


def _schema(args) -> Schema:
    mapping = {}
    for item in args.schema:
        for part in [item] if item.startswith("features=") or item.startswith("kinds=") else item.split(";"):
            if "=" not in part:
                raise UsageError(f"--schema expects KEY=VALUE, got {part!r}")
            key, value = (s.strip() for s in part.split("=", 1))
            if key not in ("y", "x", "t", "cluster", "features", "kinds"):
                raise UsageError(f"unknown schema key {key!r}")
            mapping[key] = value
    if "kinds" in mapping:
        kinds = {}
        for pair in mapping["kinds"].split(","):
            name, _, kind = pair.partition(":")
            kinds[name.strip()] = kind.strip()
        mapping["kinds"] = kinds
    if args.cluster_col:
        mapping["cluster"] = args.cluster_col
    return Schema.coerce(mapping)


def _fmt(v) -> str:
    return repr(float(v))


def cmd_fit(args) -> int:
    if args.variance == "cluster" and not args.cluster_col and not any(s.startswith("cluster=") for s in args.schema):
        raise UsageError("--variance cluster requires --cluster-col")
    config = _fit_config(args, args.design)
    data = load_dataset(args.input, _schema(args), design=args.design, cutoff=args.cutoff)
    if args.bandwidth is not None:
        data = restrict_bandwidth(data, args.bandwidth)
    if args.q_grid:
        q, scores = select_order(data, config, args.q_grid)
        config = _fit_config(args, args.design, q)
        print("q selection: " + ", ".join(f"q={k}: {v:.6g}" for k, v in scores.items()) + f" -> q={q}")
    result = fit(data, config)
    tree = result.tree
    doc = tree.to_json()
    text = tree.render()
    if args.out:
        out = Path(args.out)
        out.write_text(doc + "\n")
        out.with_suffix(".txt").write_text(text + "\n")
    else:
        print(doc)
    print(f"gamma*: {result.gamma_star:.6g}")
    print(f"honest in-sample criterion: {result.criterion:.6g}")
    print(f"leaves: {tree.n_leaves}")
    print("leaf\ttau\tse\tci_lo\tci_hi\tn_plus\tn_minus")
    for leaf in tree.leaves():
        e = leaf.estimate
        lo, hi = e.tau - 1.959963984540054 * e.se, e.tau + 1.959963984540054 * e.se
        print(f"{leaf.leaf_id}\t{e.tau:.6g}\t{e.se:.6g}\t{lo:.6g}\t{hi:.6g}\t{e.n_plus}\t{e.n_minus}")
    print(text)
    return 0


def _read_tree(path) -> Tree:
    try:
        return Tree.from_json(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read tree {path}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"malformed tree file {path}: {exc}") from None


def _query_matrix(path, names) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    if not rows:
        raise DataError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    K = len(names)
    if all(n in header for n in names):
        cols = [header.index(n) for n in names]
    elif len(header) == K:
        cols = list(range(K))
    else:
        raise DataError(f"query rows have {len(header)} columns; expected K={K} features ({', '.join(names)})")
    out = np.empty((len(rows) - 1, K))
    for i, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise DataError(f"row {i + 2}: expected {len(header)} fields, got {len(row)}")
        for j, c in enumerate(cols):
            try:
                out[i, j] = float(row[c])
            except ValueError:
                raise DataError(f"row {i + 2}: non-numeric value {row[c]!r}") from None
    return out


def cmd_predict(args) -> int:
    tree = _read_tree(args.tree)
    Z = _query_matrix(args.input, tree.feature_names)
    buf = [["tau", "se", "ci_lo", "ci_hi", "leaf_id"]]
    for z in Z:
        p = predict(tree, z)
        buf.append([_fmt(p.tau), _fmt(p.se), _fmt(p.ci95[0]), _fmt(p.ci95[1]), str(p.leaf_id)])
    text = "\n".join(",".join(r) for r in buf) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_simulate(args) -> int:
    if args.reps < 1:
        raise UsageError("--reps must be at least 1")
    if args.dgp == "all":
        specs = list(mc.DGPS.values())
        ns = args.n or list(GRID_NS)
    else:
        if args.dgp not in mc.DGPS:
            raise UsageError(f"unknown DGP {args.dgp!r}; choose from {', '.join(mc.DGPS)} or all")
        specs = [mc.DGPS[args.dgp]]
        ns = args.n or [1000]
    if any(n < 4 for n in ns):
        raise UsageError("--n must be at least 4")
    threads = args.threads or os.cpu_count() or 1
    reports = []
    for spec in specs:
        if args.noise_var is not None:
            if not args.noise_var > 0:
                raise UsageError("--noise-var must be positive")
            spec = replace(spec, sigma2=args.noise_var)
        q = spec.q if args.q is None else args.q
        config = mc.mc_config(
            spec,
            q=q,
            min_side_obs=max(args.min_leaf, q + 2),
            min_gain=args.min_gain,
            bucket_size=args.buckets,
            max_depth=args.max_depth,
            max_leaves=args.max_leaves,
            cv_folds=args.folds,
            one_se_rule=args.one_se,
            variance=VARIANCE_FLAGS[args.variance],
            honest_fraction=args.honest_fraction,
        )
        for n in ns:
            rep = mc.run_mc(spec, n, args.reps, config, seed=args.seed, threads=threads, n_eval=args.n_eval)
            reports.append(rep)
            found = "-" if rep.dgp_found_pct is None else f"{rep.dgp_found_pct:.1f}%"
            print(f"DGP-{rep.dgp} N={n}: inf MSE {rep.avg_inf_mse:.4f}, leaves {rep.avg_leaves:.2f}, "
                  f"found {found}, {rep.runtime_sec:.1f}s", file=sys.stderr)
    doc = json.dumps([r.to_dict(include_runtime=False) for r in reports], indent=2)
    table = mc.McReport.to_csv(reports)
    if args.out:
        out = Path(args.out)
        out.write_text(doc + "\n")
        out.with_suffix(".csv").write_text(table)
    else:
        sys.stdout.write(doc + "\n")
    return 0


def cmd_print_tree(args) -> int:
    print(_read_tree(args.tree).render())
    return 0


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "simulate": cmd_simulate, "print-tree": cmd_print_tree}


def _fail(code: str, message: str, status: int) -> int:
    message = " ".join(str(message).split())
    print(f"error[{code}]: {message}", file=sys.stderr)
    return status


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except ArgumentError as exc:
        return _fail(exc.code, exc, 2)
    except RDTreeError as exc:
        return _fail(exc.code, exc, 1)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
