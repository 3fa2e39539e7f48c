"""Command-line entry point: ``recmem <subcommand> ...``.

Exit codes: 0 success, 1 internal error, 2 user or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import config as C
from . import container
from . import data as D
from . import pipeline as P
from .backbone import ConfigError as ModelConfigError
from .evaluation import VARIANTS, VariantError
from .memory import StaleMemoryError

log = logging.getLogger("recmem")

USER_ERRORS = (C.ConfigError, ModelConfigError, D.DataError, P.StaleArtifactError, P.DependencyError,
               StaleMemoryError, container.FormatError, VariantError, FileNotFoundError)


class UsageError(Exception):
    pass


def _overrides(pairs):
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise C.ConfigError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _run_config(args, run):
    """Settings for a stage: the run's snapshot, with --workers applied."""
    if not os.path.exists(os.path.join(run, "config.json")):
        raise P.DependencyError(f"{run} has no config.json; run `prepare-data` first")
    cfg = P.load_config(run)
    if getattr(args, "workers", None) is not None:
        cfg["workers"] = args.workers
    return cfg


def cmd_config(args):
    cfg = C.resolve(_overrides(args.set), args.config)
    if args.dump:
        sys.stdout.write(C.dump(cfg))
    else:
        sys.stdout.write(json.dumps(cfg, indent=1, sort_keys=True) + "\n")


def cmd_prepare(args):
    if bool(args.input) == bool(args.synthetic):
        raise UsageError("give exactly one of --input or --synthetic")
    if args.input and not os.path.exists(args.input):
        raise FileNotFoundError(f"input file {args.input} does not exist")
    overrides = _overrides(args.set)
    if args.workers is not None:
        overrides["workers"] = args.workers
    cfg = C.resolve(overrides, args.config)
    m = P.prepare_data(args.out, cfg, args.input, args.synthetic)
    print(json.dumps(m["counts"]))


def _stage(fn):
    def run(args):
        cfg = _run_config(args, args.run)
        m = fn(args.run, cfg)
        print(f"{m['stage']}: wrote {', '.join(m['outputs'])}")
    return run


def cmd_evaluate(args):
    cfg = _run_config(args, args.run)
    rep = P.evaluate_stage(args.run, cfg, args.variant, args.split, args.seed)
    print(json.dumps({"variant": rep.variant, **rep.metrics}))


def cmd_compare(args):
    if len(args.reports) < 2:
        raise UsageError("compare needs at least two reports")
    comp, n = P.compare_stage(args.reports, args.out)
    for row in comp["table"]:
        print(json.dumps(row, sort_keys=True))
    print(f"audit rows: {n}")


def cmd_verify(args):
    problems = P.verify(args.run)
    for p in problems:
        print(p, file=sys.stderr)
    if problems:
        raise P.StaleArtifactError(f"{len(problems)} broken link(s) in the hash chain")
    print("ok")


def cmd_run(args):
    overrides = _overrides(args.set)
    if args.workers is not None:
        overrides["workers"] = args.workers
    cfg = C.resolve(overrides, args.config)
    reports = P.run_all(args.out, cfg, args.input, synthetic=not args.input)
    for v, rep in reports.items():
        print(json.dumps({"variant": v, **rep.metrics}))


def build_parser():
    ap = argparse.ArgumentParser(prog="recmem", description="Memory-retrieval next-item recommendation pipeline")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, run=True):
        if run:
            p.add_argument("--run", required=True, help="run directory")
        p.add_argument("--workers", type=int, default=None, help="worker count (default: all cores)")

    def configurable(p):
        p.add_argument("--config", help="key=value or JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")

    p = sub.add_parser("config", help="print resolved settings")
    configurable(p)
    p.add_argument("--dump", action="store_true", help="print as a commented key=value file")
    p.set_defaults(fn=cmd_config)

    p = sub.add_parser("prepare-data", help="ingest or generate events, filter and split")
    src = p.add_argument_group("source")
    src.add_argument("--input", help="JSON-lines events file")
    src.add_argument("--synthetic", action="store_true", help="generate the planted synthetic dataset")
    p.add_argument("--out", required=True, help="run directory to create")
    configurable(p)
    common(p, run=False)
    p.set_defaults(fn=cmd_prepare)

    for name, fn, text in (("train-backbone", P.train_backbone_stage, "train the split transformer"),
                           ("build-memory", P.build_memory_stage, "encode memory banks"),
                           ("annotate", P.annotate_stage, "label memory entries by probability gain"),
                           ("train-retriever", P.train_retriever_stage, "fit the retriever to the labels")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.set_defaults(fn=_stage(fn))

    p = sub.add_parser("evaluate", help="full-ranking evaluation of one variant")
    common(p)
    p.add_argument("--variant", required=True, choices=VARIANTS)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--seed", type=int, default=None, help="seed for the random variant (default: run seed)")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("compare", help="compare reports and export audit data")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("verify", help="check the manifest hash chain of a run")
    p.add_argument("--run", required=True)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("run", help="every stage end to end")
    p.add_argument("--input", help="JSON-lines events file (default: synthetic data)")
    p.add_argument("--out", required=True)
    configurable(p)
    common(p, run=False)
    p.set_defaults(fn=cmd_run)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.fn(args)
    except (UsageError, *USER_ERRORS) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
