"""Command-line entry point: ``uast train``, ``uast eval`` and ``uast gen``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import SELECTION_POLICIES
from .data import KINDS, DomainData, gen_synthetic, load_csv, write_csv
from .errors import ConfigError, ParameterError, UastError
from .experiment import load_experiment, run_experiment, to_json, write_json
from .model import evaluate, load_checkpoint

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
USAGE_ERRORS = (ConfigError, ParameterError)


def _setup_logging() -> None:
    name = os.environ.get("UAST_LOG", "error").strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"UAST_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def cmd_train(args) -> int:
    exp = load_experiment(args.config).with_overrides(
        selection=args.selection, seed=args.seed, rounds=args.rounds, output_dir=args.out
    )
    summary = run_experiment(exp, parallel=args.parallel_seeds)
    print(to_json(summary))
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    data = load_csv(args.data, args.class_count if args.class_count is not None else model.class_count)
    report = evaluate(model, data)
    print(to_json(report))
    return 0


def cmd_gen(args) -> int:
    translation = None if args.translation is None else [float(v) for v in args.translation.split(",")]
    labeled, unlabeled, test = gen_synthetic(
        args.kind, args.n_source, args.n_target, args.rotation, translation, args.noise, args.seed,
        args.n_classes, args.dim,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(labeled, out / "source.csv")
    write_csv(unlabeled, out / "target_unlabeled.csv", include_labels=False)
    write_csv(test, out / "target_test.csv")
    # a ready-to-run experiment over the generated files
    write_json({
        "dataset": {"csv": {"labeled": "source.csv", "unlabeled": "target_unlabeled.csv",
                            "test": "target_test.csv", "class_count": DomainData(labeled, unlabeled).class_count}},
        "output_dir": "runs",
        "round": {"lr": 0.05},
        "seeds": [args.seed],
    }, out / "experiment.json")
    print(to_json({"out": str(out), "files": ["source.csv", "target_unlabeled.csv", "target_test.csv",
                                              "experiment.json"]}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uast", description="Uncertainty-aware self-training on toy domain shifts.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run self-training for every seed of an experiment")
    train.add_argument("--config", help="experiment JSON (default: bundled rotated two-moons)")
    train.add_argument("--selection", choices=SELECTION_POLICIES, help="override the selection policy")
    train.add_argument("--seed", type=int, help="run only this seed")
    train.add_argument("--rounds", type=int, help="override the number of self-training rounds")
    train.add_argument("--out", help="override the output directory")
    train.add_argument("--parallel-seeds", action="store_true", help="run seeds in worker processes")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="per-class accuracy of a checkpoint on a labeled CSV")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--class-count", type=int, help="declared class count (default: from the checkpoint)")
    ev.set_defaults(func=cmd_eval)

    gen = sub.add_parser("gen", help="write a synthetic source/target split as CSV")
    gen.add_argument("--kind", choices=KINDS, default="two_moons")
    gen.add_argument("--rotation", type=float, default=0.0, help="target rotation in degrees")
    gen.add_argument("--translation", help="comma-separated target translation, e.g. 0.5,0")
    gen.add_argument("--n-source", type=int, default=500)
    gen.add_argument("--n-target", type=int, default=500)
    gen.add_argument("--noise", type=float, default=0.1)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--n-classes", type=int, default=2)
    gen.add_argument("--dim", type=int, default=2)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen)
    return parser


def _report(exc: Exception, code: int) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    line = getattr(exc, "line", None)
    if line is not None:
        doc["line"] = line
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except USAGE_ERRORS as exc:
        return _report(exc, 2)
    except (UastError, OSError, ValueError) as exc:
        return _report(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
