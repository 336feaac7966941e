"""Command line: ``mesasfl run`` and ``mesasfl validate``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .experiment import ConfigError, ExperimentConfig, apply_overrides, emit_results, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("mesasfl")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mesasfl", description="FL poisoning simulator with the MESAS defense")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment and write reports")
    run.add_argument("--config", required=True)
    run.add_argument("--out", default=None, help="output directory (default: report_dir from the config)")
    run.add_argument("--threads", type=int, default=1)
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                     help="dotted config path, value parsed as JSON; repeatable")
    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("--config", required=True)
    val.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    return p


def load_config(path: str, overrides=()) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"{path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    return ExperimentConfig.from_dict(apply_overrides(raw, overrides))


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.override)
        if args.command == "run":
            if args.threads < 1:
                raise ConfigError("--threads", "must be >= 1")
            out = args.out or cfg.report_dir
            if not out:
                raise ConfigError("--out", "no output directory given and report_dir is unset")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        print("config ok")
        return EXIT_OK
    try:
        result = run_experiment(cfg, threads=args.threads)
        paths = emit_results(result, out)
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code
        log.error("run failed: %s", exc)
        return EXIT_RUNTIME
    f = result.final
    log.info("final MA %.4f BA %s ACC %s -> %s", f["ma"], f["ba"], f["acc"], paths["result"].parent)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
