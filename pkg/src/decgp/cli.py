"""Command-line entry point: ``decgp train|predict|bench --config <file>``.

Exit codes: 0 on success, 1 on invalid input, 2 when a solver or trainer
did not converge, 3 on conditioning failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from decgp.errors import ConditioningError, ContractError, NonConvergenceError
from decgp.experiments import PREDICTORS, ExperimentSpec, dumps_record, run_experiment, write_results

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED, EXIT_CONDITIONING = 0, 1, 2, 3

log = logging.getLogger("decgp")


def load_spec(path, command: str) -> ExperimentSpec:
    """Read a JSON config; ``DECGP_SEED`` overrides its seed."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ContractError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ContractError("config must be a JSON object")
    env_seed = os.environ.get("DECGP_SEED")
    if env_seed is not None:
        try:
            doc["seed"] = int(env_seed)
        except ValueError as exc:
            raise ContractError(f"DECGP_SEED must be an integer, got {env_seed!r}") from exc
    if command == "bench" and "predictors" not in doc:
        doc["predictors"] = list(PREDICTORS)
    return ExperimentSpec.from_dict(doc)


def exit_code(records) -> int:
    """Map recorded failures to the documented exit codes."""
    code = EXIT_OK
    for rec in records:
        train = rec.get("train")
        if train is not None and not train["converged"]:
            code = max(code, EXIT_NONCONVERGED)
        for m in rec.get("metrics", {}).values():
            if m.get("error") == "ConditioningError":
                code = max(code, EXIT_CONDITIONING)
            elif m.get("error") == "NonConvergenceError":
                code = max(code, EXIT_NONCONVERGED)
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decgp", description="Decentralized GP training and prediction")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("train", "train hyperparameters and print the estimates"),
                       ("predict", "train, predict and print the metrics"),
                       ("bench", "run all predictors and write JSON/CSV results")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", help="output directory (default: config 'out')")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = load_spec(args.config, args.command)
        records = run_experiment(spec, do_predict=args.command != "train")
    except ContractError as exc:
        print(f"decgp: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NonConvergenceError as exc:
        print(f"decgp: did not converge: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except ConditioningError as exc:
        print(f"decgp: conditioning failure: {exc}", file=sys.stderr)
        return EXIT_CONDITIONING

    if args.command == "bench" or args.out:
        for p in write_results(records, args.out or spec.out):
            log.info("wrote %s", p)
    else:
        for rec in records:
            sys.stdout.write(dumps_record(rec))
    return exit_code(records)


if __name__ == "__main__":
    sys.exit(main())
