"""``ngpflow <command> --config <path> [--out <dir>] [--seed <u64>] [--backend wick|quad] [--mode exp|lin]``

Exit status: 0 on success, 1 on a numerical failure, 2 on a configuration
or I/O problem.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .core import KernelConditionError
from .mnist import IdxFormatError

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    from .experiments import COMMANDS

    p = argparse.ArgumentParser(prog="ngpflow", description="Finite-width corrections for wide networks.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", type=Path, default=None, help="output directory (default: config output.directory or .)")
    p.add_argument("--seed", type=_u64, default=None)
    p.add_argument("--backend", choices=["wick", "quad"], default=None)
    p.add_argument("--mode", choices=["exp", "lin"], default=None)
    return p


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    data = dict(cfg)
    run = dict(data.get("run", {}))
    if args.backend:
        run["backend"] = args.backend
    if args.mode:
        run["mode"] = args.mode
    data["run"] = run
    return ExperimentConfig(data, cfg.base_dir)


def _fail(module: str, exc: Exception, code: int) -> int:
    print(f"ngpflow: error [{module}]: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    from .experiments import COMMANDS

    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(ExperimentConfig.load(args.config), args)
    except OSError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    out = args.out or cfg.resolve(cfg.section("output").get("directory", "."))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        return _fail("cli-io", exc, EXIT_CONFIG)

    fn = COMMANDS[args.command]
    kwargs = {} if args.command in ("flow", "density") else {"seed": args.seed}
    try:
        summary = fn(cfg, out, **kwargs)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except IdxFormatError as exc:
        return _fail("mnist", exc, EXIT_CONFIG)
    except OSError as exc:
        return _fail("cli-io", exc, EXIT_CONFIG)
    except KernelConditionError as exc:
        return _fail("core", exc, EXIT_NUMERIC)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        origin = exc.__traceback__
        while origin.tb_next is not None:
            origin = origin.tb_next
        where = Path(origin.tb_frame.f_code.co_filename).stem
        return _fail(where, exc, EXIT_NUMERIC)
    print(json.dumps({"command": args.command, "out": str(out), **summary}, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
