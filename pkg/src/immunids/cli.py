"""Command-line entry point.

Exit codes: 0 success, 1 unexpected failure, 2 unreadable or malformed input,
3 training preconditions not met, 4 incompatible model file, 5 unknown report
ids in a confirmation file.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from collections import Counter
from pathlib import Path

from . import pipeline
from .config import ENV_PREFIX, build_config, env_overrides, parse_config_text
from .errors import (ConfigurationError, IDSError, ModelVersionError, ParseError, TrainingError,
                     ValidationError)
from .sync import Scenario, Topology, simulate
from .traffic import load_dataset

EXIT_OK, EXIT_FAIL, EXIT_PARSE, EXIT_TRAINING, EXIT_MODEL, EXIT_UNKNOWN_REPORT = 0, 1, 2, 3, 4, 5

# run-config keys that may override the configuration stored in a model file
DETECT_KEYS = ("innate_threshold", "adaptive_threshold", "threads")

log = logging.getLogger("immunids")


class CommandError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CommandError(f"cannot read {path}: {exc.strerror}", EXIT_PARSE) from None


def _run_settings(args) -> dict:
    """Explicit settings from the config file, environment and flags (no defaults)."""
    values = parse_config_text(_read_text(args.config)) if args.config else {}
    values.update(env_overrides())
    if args.seed is not None:
        values["seed"] = args.seed
    if args.threads is not None:
        values["threads"] = args.threads
    return values


def _load_model(path) -> pipeline.TrainedSystem:
    text = _read_text(path)
    try:
        return pipeline.load_system(text)
    except ModelVersionError as exc:
        raise CommandError(str(exc), EXIT_MODEL) from None
    except (ParseError, ValueError, KeyError) as exc:
        raise CommandError(f"corrupt model file {path}: {exc}", EXIT_MODEL) from None


def _with_overrides(system, settings):
    keep = {k: v for k, v in settings.items() if k in DETECT_KEYS}
    if keep:
        system.config = dataclasses.replace(system.config, **keep)
    return system


def _load_traffic(path, step):
    try:
        data = load_dataset(path, timestamp_step=step)
    except OSError as exc:
        raise CommandError(f"cannot read {path}: {exc.strerror}", EXIT_PARSE) from None
    except (ParseError, ValidationError) as exc:
        raise CommandError(f"{path}: {exc}", EXIT_PARSE) from None
    return data


def _write(path, text: str):
    Path(path).write_text(text, encoding="utf-8")


def cmd_train(args) -> int:
    settings = _run_settings(args)
    config = build_config(overrides=settings, environ={})
    data = _load_traffic(args.dataset, config.timestamp_step)
    if not data.records:
        raise CommandError(f"{args.dataset}: no records", EXIT_PARSE)
    try:
        system = pipeline.train(config, data)
    except TrainingError as exc:
        raise CommandError(str(exc), EXIT_TRAINING) from None
    _write(args.output, pipeline.save_system(system))
    for cid, pats in system.pattern_sets.items():
        print(f"patterns {cid}: self={pats.count('self')} nonself={pats.count('nonself')}")
    print(f"barrier rules: {len(system.barrier)}")
    print(f"explained variance ratio: {system.projection.explained_variance_ratio:.4f} (p={system.projection.p})")
    print(f"training accuracy: {pipeline.training_accuracy(system, data):.4f}")
    return EXIT_OK


def _detect(args, system):
    data = _load_traffic(args.traffic, system.config.timestamp_step)
    if not data.records:
        raise CommandError(f"{args.traffic}: no flows", EXIT_PARSE)
    return data, pipeline.detect(system, data.records)


def cmd_detect(args) -> int:
    system = _with_overrides(_load_model(args.model), _run_settings(args))
    _, reports = _detect(args, system)
    if args.format == "structured":
        text = "\n".join(r.to_structured() for r in reports) + "\n"
    else:
        text = "".join(r.to_line() + "\n" for r in reports)
    _write(args.output, text)
    layers = Counter(r.deciding_layer for r in reports)
    print(f"reports: {len(reports)}")
    for layer in ("surface", "innate", "adaptive", "none"):
        print(f"  {layer}: {layers.get(layer, 0)}")
    return EXIT_OK


def _read_confirmations(path):
    items = []
    for line_no, line in enumerate(_read_text(path).splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise CommandError(f"{path}: line {line_no}: expected '<report id> <label>'", EXIT_PARSE)
        items.append((parts[0], parts[1]))
    return items


def cmd_feedback(args) -> int:
    system = _with_overrides(_load_model(args.model), _run_settings(args))
    confirmations = _read_confirmations(args.confirmations)
    _, reports = _detect(args, system)
    by_id = {r.report_id: r for r in reports}
    unknown = [rid for rid, _ in confirmations if rid not in by_id]
    if unknown:
        raise CommandError("unknown report ids: " + ", ".join(unknown), EXIT_UNKNOWN_REPORT)
    try:
        updated, summary = pipeline.feedback_with_summary(
            system, [(by_id[rid], label) for rid, label in confirmations])
    except ValidationError as exc:
        raise CommandError(str(exc), EXIT_PARSE) from None
    _write(args.output, pipeline.save_system(updated))
    print(f"rules added: {summary.rules_added}")
    print(f"patterns added: {summary.patterns_added}")
    print(f"rows appended: {summary.rows_appended}")
    for c in summary.conflicts:
        print(f"conflict: {c}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        topology = Topology.from_text(_read_text(args.topology))
    except ParseError as exc:
        raise CommandError(f"{args.topology}: {exc}", EXIT_PARSE) from None
    try:
        scenario = Scenario.from_text(_read_text(args.scenario))
    except ParseError as exc:
        raise CommandError(f"{args.scenario}: {exc}", EXIT_PARSE) from None
    systems = {}
    for item in args.model or ():
        node, _, path = item.partition("=")
        if node not in topology.tokens or not path:
            raise CommandError(f"--model expects NODE=PATH with a known node, got {item!r}", EXIT_PARSE)
        system = _load_model(path)
        system.rename(node)
        systems[node] = system
    fragment_size = _run_settings(args).get("fragment_size", 512)
    try:
        result = simulate(topology, scenario, systems, fragment_size)
    except ValidationError as exc:
        raise CommandError(str(exc), EXIT_PARSE) from None
    if args.trace:
        _write(args.trace, result.trace)
    else:
        sys.stdout.write(result.trace)
    print(f"rounds run: {result.rounds}")
    print(f"diameter: {topology.diameter()}")
    for kind, rounds in result.rounds_to_consistency.items():
        print(f"rounds to consistency [{kind}]: {'not reached' if rounds is None else rounds}")
    for c in result.conflicts:
        print(f"conflict: {c}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import synthetic_kdd_lines

    _write(args.output, "\n".join(synthetic_kdd_lines(args.rows, args.seed or 0)) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="immunids", description="Layered immune-inspired intrusion detection.")
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train all layers from a labeled dataset")
    p.add_argument("dataset")
    p.add_argument("-o", "--output", required=True, help="model file to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run detection over a traffic file")
    p.add_argument("model")
    p.add_argument("traffic")
    p.add_argument("-o", "--output", required=True, help="report file to write")
    p.add_argument("--format", choices=("plain", "structured"),
                   default=os.environ.get(ENV_PREFIX + "FORMAT", "plain"))
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("feedback", help="fold confirmed verdicts back into a model")
    p.add_argument("model")
    p.add_argument("confirmations", help="lines of '<report id> <intrusion|normal|attack:NAME>'")
    p.add_argument("--traffic", required=True, help="traffic file the reports were produced from")
    p.add_argument("-o", "--output", required=True, help="updated model file to write")
    p.set_defaults(func=cmd_feedback)

    p = sub.add_parser("simulate", help="run the multi-instance sync simulator")
    p.add_argument("topology")
    p.add_argument("scenario")
    p.add_argument("--model", action="append", metavar="NODE=PATH", help="seed an instance with a model")
    p.add_argument("--trace", help="write the per-round trace here instead of stdout")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("synth", help="write synthetic KDD-format traffic")
    p.add_argument("rows", type=int)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigurationError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except IDSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
