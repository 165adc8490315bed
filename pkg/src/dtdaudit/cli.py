"""Command-line front end.

Exit codes: 0 success, 1 a verification failed, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from .engine import relevance_train_free
from .exceptions import DTDError
from .experiment import (
    CHECKS,
    INIT_NOTE,
    ExperimentConfig,
    generate_network,
    run_verification,
    sample_inputs,
)
from .network import fingerprint, forward, gradient, load_network, save_network
from .recursive import relevance_recursive
from .rules import parse_rule

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _float_list(text):
    try:
        return [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _rule(text):
    try:
        return parse_rule(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_config_flags(p):
    p.add_argument("--config", type=Path, help="ExperimentConfig JSON; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--dims", type=_int_list, help="layer widths, e.g. 10,10,10,10")
    p.add_argument("--bias-mode", choices=["nonpositive", "unrestricted", "zero"])
    p.add_argument("--activation", choices=["relu", "softplus", "identity"])
    p.add_argument("--rules", type=lambda s: [str(_rule(r)) for r in s.split(",")])
    p.add_argument("--samples", type=int, dest="n_samples")
    p.add_argument("--min-output", type=float)
    p.add_argument("--tol-grad", type=float, dest="tol_gradient")
    p.add_argument("--tol-out", type=float, dest="tol_output")
    p.add_argument("--fd-step", type=float)
    p.add_argument("--class", type=int, dest="xi")


def _config(args) -> ExperimentConfig:
    data = {}
    if args.config is not None:
        try:
            data = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    for key in ("seed", "dims", "bias_mode", "activation", "rules", "n_samples", "min_output",
                "tol_gradient", "tol_output", "fd_step", "xi"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    try:
        return ExperimentConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _write_text(path, text):
    if path is None:
        sys.stdout.write(text)
        return
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc}") from None


def _load_net(path):
    try:
        return load_network(path)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"cannot load network {path}: {exc}") from None


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


# -- commands -----------------------------------------------------------------

def cmd_table1(args) -> int:
    config = _config(args)
    net = _load_net(args.network) if args.network else generate_network(config)
    xs = sample_inputs(net, config)
    reports = dg.run_table1(net, config.rules, len(xs), config.min_output, config.seed,
                            config.xi, config.tol_gradient, config.tol_output, inputs=xs)
    text = _csv(["rule", "samples", "frac_same_region", "frac_same_output", "seed"],
                [[_fmt(v) for v in r.row()] for r in reports])
    _write_text(args.out, text)
    if args.out is not None:
        meta = {
            "config": config.to_dict(),
            "init": INIT_NOTE if not args.network else f"network loaded from {args.network}",
            "extras": {
                str(r.rule): {
                    "n_roots": r.n_roots,
                    "frac_same_fingerprint": r.frac_same_fingerprint,
                    "frac_samples_all_in_region": r.frac_samples_all_in_region,
                    "frac_negative_roots": r.frac_negative_roots,
                    "nesting_violations": r.nesting_violations,
                }
                for r in reports
            },
        }
        _write_text(f"{args.out}.meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
        print(f"# {INIT_NOTE}; seed {config.seed}; {len(xs)} inputs with f_{config.xi} > {config.min_output}")
        names = [str(r.rule) for r in reports]
        print(f"{'':28s}" + "".join(f"{n:>10s}" for n in names))
        print(f"{'same linear region':28s}" + "".join(f"{r.frac_same_region:10.2%}" for r in reports))
        print(f"{'same output':28s}" + "".join(f"{r.frac_same_output:10.2%}" for r in reports))
    return EXIT_OK


def _explain_input(args, net):
    if args.input is not None:
        return np.asarray(args.input, dtype=np.float64)
    if args.input_file is not None:
        try:
            return np.asarray(json.loads(Path(args.input_file).read_text()), dtype=np.float64)
        except (OSError, json.JSONDecodeError, ValueError) as exc:
            raise UsageError(f"cannot read input {args.input_file}: {exc}") from None
    rng = np.random.default_rng(args.seed)
    return rng.standard_normal(net.input_dim)


def cmd_explain(args) -> int:
    net = _load_net(args.network)
    x = _explain_input(args, net)
    if args.algorithm == "recursive":
        trace = relevance_recursive(net, x, args.xi, args.rule)
    else:
        trace = relevance_train_free(net, x, args.xi, args.rule)
    out = trace.to_dict()
    out["input"] = x.tolist()
    if args.check_roots:
        out["root_checks"] = [
            dg.check_root_region(net, x, root, xi=args.xi).to_dict() for root in trace.roots
        ]
    _write_text(args.out, json.dumps(out, indent=2) + "\n")
    return EXIT_OK


def cmd_region_map(args) -> int:
    net = _load_net(args.network)
    if net.input_dim != 2:
        raise UsageError(f"region-map needs a 2-input network, got input_dim {net.input_dim}")
    lo, hi = args.bounds
    if not hi > lo or args.resolution < 2:
        raise UsageError("bounds must be LO,HI with LO < HI and resolution >= 2")
    grid = np.linspace(lo, hi, args.resolution)
    rows = []
    for yv in grid:
        for xv in grid:
            p = np.array([xv, yv])
            trace = forward(net, p)
            g = gradient(net, p, args.xi).gradient
            rows.append([repr(float(xv)), repr(float(yv)), fingerprint(trace, 1).digest(),
                         repr(float(g[0])), repr(float(g[1]))])
    _write_text(args.out, _csv(["x", "y", "region_id", "grad_x", "grad_y"], rows))
    if args.out is not None:
        print(f"{len({r[2] for r in rows})} regions over {len(rows)} cells")
    return EXIT_OK


def cmd_verify(args) -> int:
    config = _config(args)
    only = [s for s in args.only.split(",") if s] if args.only else None
    try:
        results = run_verification(config, only, args.trials)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    report = {"seed": config.seed, "trials": args.trials, "checks": []}
    for r in results:
        entry = r.to_dict()
        entry.pop("seconds")
        report["checks"].append(entry)
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:22s} {json.dumps(r.measured)}" + (f"  [{r.error}]" if r.error else ""))
    _write_text(args.out, json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_gen_net(args) -> int:
    config = _config(args)
    net = generate_network(config)
    if args.out is None:
        sys.stdout.write(json.dumps(net.to_dict()) + "\n")
    else:
        try:
            save_network(net, args.out)
        except OSError as exc:
            raise UsageError(f"cannot write {args.out}: {exc}") from None
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtdaudit", description="Deep Taylor Decomposition audit tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("table1", help="region / output fractions of train-free roots")
    _add_config_flags(p)
    p.add_argument("--network", type=Path, help="use this network instead of generating one")
    p.add_argument("--out", type=Path, help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_table1)

    p = sub.add_parser("explain", help="relevance trace for one input")
    p.add_argument("--network", type=Path, required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--input", type=_float_list, help="comma-separated input vector")
    src.add_argument("--input-file", type=Path, help="JSON array with the input vector")
    p.add_argument("--seed", type=int, default=0, help="draw a N(0,I) input when none is given")
    p.add_argument("--rule", type=_rule, default=parse_rule("zplus"))
    p.add_argument("--class", type=int, dest="xi", default=0)
    p.add_argument("--algorithm", choices=["train_free", "recursive"], default="train_free")
    p.add_argument("--check-roots", action="store_true")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("region-map", help="rasterize activation regions of a 2-input network")
    p.add_argument("--network", type=Path, required=True)
    p.add_argument("--bounds", type=_float_list, default=[-3.0, 3.0], help="LO,HI")
    p.add_argument("--resolution", type=int, default=101)
    p.add_argument("--class", type=int, dest="xi", default=0)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_region_map)

    p = sub.add_parser("verify", help="run the numerical verification suite")
    _add_config_flags(p)
    p.add_argument("--only", help="comma-separated subset of: " + ",".join(CHECKS))
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--out", type=Path, help="JSON report path (default: stdout)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gen-net", help="write a seeded random network as JSON")
    _add_config_flags(p)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_gen_net)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DTDError, ValueError, IndexError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
