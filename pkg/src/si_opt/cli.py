"""Command line entry point: ``si-opt parse | eval-expr | study``."""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

from . import expr as ex
from .deck import DeckError, dump_ir, lower_to_ir, parse_text
from .measure import EdgeFidelityWarning
from .optimize import OptimizeError
from .report import ReportError, emit_report, summary_text
from .studies import STUDIES, StudyConfig, StudyError, run_study, sweep_mask_delay
from .units import UnitError, parse_value

EXIT_PASS, EXIT_FAIL, EXIT_ERROR = 0, 1, 2


def _pairs(items, what):
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise StudyError(f"{what} expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _cmd_parse(args) -> int:
    text = Path(args.file).read_text()
    deck = parse_text(text, strict=args.strict, fragment=args.fragment)
    if args.dump_ir:
        sys.stdout.write(dump_ir(lower_to_ir(deck)))
    else:
        print(f"{args.file}: {len(deck.params)} parameters, {len(deck.measures)} measures, "
              f"{len(deck.analyses)} analyses")
    return EXIT_PASS


def _cmd_eval(args) -> int:
    env = {k: parse_value(v) for k, v in _pairs(args.bind, "--bind").items()}
    print(repr(float(ex.eval_expr(ex.parse_expr(args.expr), env))))
    return EXIT_PASS


def _cmd_study(args) -> int:
    cfg = StudyConfig(args.study, deck=args.deck, overrides=_pairs(args.set, "--set"),
                      out_dir=args.out, emit=args.emit,
                      iterate_to_convergence=args.iterate_to_convergence, seed=args.seed,
                      jobs=args.jobs)
    with warnings.catch_warnings():
        warnings.simplefilter("always", EdgeFidelityWarning)
        report = run_study(cfg)
        if args.mask_delay_points and cfg.study == "linkwidth":
            curve = sweep_mask_delay(cfg, args.mask_delay_points)
            report.curve = curve.curve
            report.extras.update({k: curve.extras[k] for k in
                                  ("n_maxima", "best_delay", "period_error")})
            report.checks.update({f"mask delay sweep: {k}": v
                                  for k, v in curve.checks.items()})
    if args.out is not None:
        emit_report(report, cfg)
    sys.stdout.write(summary_text(report, cfg))
    return EXIT_PASS if report.passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="si-opt", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="parse a deck and report or dump its IR")
    p.add_argument("file")
    p.add_argument("--strict", action="store_true", help="reject unknown statements")
    p.add_argument("--fragment", action="store_true",
                   help="accept a deck excerpt with unresolved references")
    p.add_argument("--dump-ir", action="store_true", help="print the lowered scenario IR")
    p.set_defaults(func=_cmd_parse)

    p = sub.add_parser("eval-expr", help="evaluate a parameter expression")
    p.add_argument("expr")
    p.add_argument("--bind", action="append", metavar="NAME=VALUE",
                   help="parameter binding (repeatable)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("study", help="run a study and write its report")
    p.add_argument("study", choices=STUDIES)
    p.add_argument("--deck", help="deck file (default: built-in deck)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted config override (repeatable)")
    p.add_argument("--out", help="output directory for artifacts")
    p.add_argument("--emit", choices=("csv", "svg", "both"), default="both")
    p.add_argument("--iterate-to-convergence", action="store_true",
                   help="repeat the link schedule until the width settles")
    p.add_argument("--seed", type=int, help="PRBS seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    p.add_argument("--mask-delay-points", type=int, default=0, metavar="N",
                   help="linkwidth: also sweep mask delay over two bit periods")
    p.set_defaults(func=_cmd_study)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DeckError, ex.ExprError, UnitError, StudyError, OptimizeError, ReportError,
            OSError, ValueError) as exc:
        print(f"si-opt: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
