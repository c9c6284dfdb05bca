"""
Command-line entry point: `ivmqr <subcommand> --config <path> [--out <dir>] [--seed <n>] [--threads <n>]`.

Every subcommand writes report.json plus one CSV per table, prints one summary line
per checked condition, and exits 0 on pass, 2 on a checked-condition failure and 1
on errors.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import COMMAND_CLASS_MAPPINGS, COMMAND_DISPLAY_NAME_MAPPINGS, __version__
from .errors import ConfigError, IvmqrError
from .utils.config_parser import build_model, load_config, load_sample

logger = logging.getLogger(__name__)

EXIT_PASS = 0
EXIT_ERROR = 1
EXIT_FAIL = 2

LOG_FORMAT = "[ivmqr] %(levelname)s %(name)s: %(message)s"


def validate_config_path(config_path: str, command: str | None = None) -> dict:
    """
    Validate a config file without running it.

    Args:
        config_path: Path to the JSON config
        command: Subcommand to validate against (defaults to the config's "command" key)

    Returns:
        dict with keys: valid, message
    """
    if not config_path or config_path.strip() == "":
        return {"valid": False, "message": "Path is empty"}

    path = Path(config_path)
    if not path.is_file():
        return {"valid": False, "message": "Path does not exist or is not a file"}

    if command is None:
        try:
            command = json.loads(path.read_text(encoding="utf-8")).get("command")
        except (OSError, ValueError, AttributeError):
            command = None
    if command not in COMMAND_CLASS_MAPPINGS:
        return {"valid": False, "message": f"Unknown or missing command: {command!r}"}

    try:
        config = load_config(path, command, COMMAND_CLASS_MAPPINGS[command])
    except ConfigError as e:
        return {"valid": False, "message": str(e)}
    return {"valid": True, "message": f"Valid {COMMAND_DISPLAY_NAME_MAPPINGS[command]} config (seed {config.seed})"}


def _to_json(value):
    """json.dump default hook for numpy values."""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, (set, tuple)):
        return list(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_outputs(out_dir: Path, report: dict, tables: dict) -> None:
    """report.json (sorted keys, no timestamps) and <name>.csv per table."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True, default=_to_json)
        f.write("\n")
    for name, frame in tables.items():
        frame.to_csv(out_dir / f"{name}.csv", index=False)
    logger.info("Wrote report.json and %d table(s) to %s", len(tables), out_dir)


def run(command: str, config_path: str, out: str | None = None, seed: int | None = None,
        threads: int | None = None) -> int:
    """
    Run one subcommand from its config file.

    Returns:
        Exit status (0 pass, 2 checked-condition failure)
    """
    cls = COMMAND_CLASS_MAPPINGS[command]
    config = load_config(config_path, command, cls)
    if seed is not None:
        config = config.with_seed(seed)
    for line in config.summary_lines():
        logger.info(line)

    model = build_model(config.model) if config.model is not None else None
    sample = None
    if config.data is not None:
        data_path = Path(config.data)
        if not data_path.is_absolute():
            data_path = Path(config_path).parent / data_path
        sample = load_sample(data_path)

    node = cls()
    report, tables, summary, passed = getattr(node, cls.FUNCTION)(
        model=model, seed=config.seed, sample=sample, max_workers=threads, **config.options
    )

    out_dir = Path(os.environ.get("IVMQR_OUT") or out or config.output_dir or ".")
    write_outputs(
        out_dir,
        {"command": command, "version": __version__, "config": config.resolved(), "passed": bool(passed),
         "result": report},
        tables,
    )
    for line in summary:
        print(line)
    return EXIT_PASS if passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivmqr", description="IV multivariate quantile regression laboratory")
    parser.add_argument("--version", action="version", version=f"ivmqr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, display in COMMAND_DISPLAY_NAME_MAPPINGS.items():
        p = sub.add_parser(name, help=display)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", default=None, help="Output directory (IVMQR_OUT overrides)")
        p.add_argument("--seed", type=int, default=None, help="Override the config seed")
        p.add_argument("--threads", type=int, default=None, help="Worker thread cap")
        p.add_argument("--verbose", action="store_true", help="Debug logging")

    p = sub.add_parser("validate", help="Schema check of a config file")
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--command", dest="target", default=None, choices=sorted(COMMAND_CLASS_MAPPINGS),
                   help="Subcommand to validate against (default: the config's command key)")
    p.add_argument("--verbose", action="store_true", help="Debug logging")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
    )

    if args.command == "validate":
        result = validate_config_path(args.config, args.target)
        print(("valid: " if result["valid"] else "invalid: ") + result["message"])
        return EXIT_PASS if result["valid"] else EXIT_ERROR

    if args.threads is not None and args.threads < 1:
        print("ivmqr: error: --threads must be at least 1", file=sys.stderr)
        return EXIT_ERROR
    try:
        return run(args.command, args.config, args.out, args.seed, args.threads)
    except (ConfigError, IvmqrError, OSError, ValueError) as e:
        message = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"ivmqr: error: {message}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
