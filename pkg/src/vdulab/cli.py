"""Command line: ``vdulab {pretrain,stats,unlearn,eval,sweep} --config FILE [--out DIR] [--seed N]``.

Exit codes: 0 success, 2 config error, 3 numerical abort, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .checkpoints import CheckpointError
from .experiment import ConfigError, Experiment, dump_config, load_config
from .vdu import NumericalAbort

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

COMMANDS = {
    "pretrain": lambda e: e.run_pretrain(),
    "stats": lambda e: [e.run_stats()],
    "unlearn": lambda e: [e.run_unlearn()[1], e.trace_path(e.cfg.unlearn.gamma)],
    "eval": lambda e: [e.run_eval()],
    "sweep": lambda e: [e.run_sweep()],
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vdulab", description="Desk-scale variational diffusion unlearning.")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", required=True, help="YAML experiment config")
    p.add_argument("--out", default=None, help="output directory (overrides out_dir)")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides seed)")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(message)s", datefmt="%H:%M:%S")
    try:
        cfg = load_config(args.config, out_dir=args.out, seed=args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"cannot read config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    exp = Experiment(cfg)
    try:
        exp.out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, exp.out / "config.resolved.yaml")
        outputs = COMMANDS[args.command](exp)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbort, FloatingPointError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    for path in outputs:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
