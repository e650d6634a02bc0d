"""Command-line app factory for MPDiT."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from harness import services
from mpdit.cost_model import ATTENTION_CONVENTIONS
from mpdit.errors import ContainerError, MpditError

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# Exit codes by error category; anything unlisted exits 1.
EXIT_CODES = {
    "config": 2,
    "checkpoint": 3,
    "container": 4,
    "non_finite": 5,
    "gradcheck": 6,
}


def create_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpdit", description="Multi-patch diffusion transformer toolkit.")
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="root logger level (DEBUG also reports out-of-range timesteps)",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser, config_required: bool = True) -> None:
        sub.add_argument("--seed", type=int, default=None, help="overrides train.seed and sample.seed")
        sub.add_argument(
            "--deterministic",
            action="store_true",
            help="single-threaded BLAS and in-line batches (also MPDIT_DETERMINISTIC=1)",
        )
        if config_required:
            sub.add_argument("--config", required=True, help="YAML run config")

    # ------------------------------------------------------------------
    # analyze
    # ------------------------------------------------------------------

    analyze = commands.add_parser("analyze", help="parameter and GFLOPs table")
    analyze.add_argument("--config", action="append", default=[], help="YAML run config (repeatable)")
    analyze.add_argument("--preset", action="append", default=[], help="named model preset (repeatable)")
    analyze.add_argument("--baseline", default=None, help="config name that ratios are relative to")
    analyze.add_argument("--csv", default=None, help="also write the table as CSV")
    analyze.add_argument("--attention", default="finest", choices=ATTENTION_CONVENTIONS)
    common(analyze, config_required=False)

    # ------------------------------------------------------------------
    # train / sample / gradcheck
    # ------------------------------------------------------------------

    train = commands.add_parser("train", help="flow-matching training loop")
    train.add_argument("--ckpt", default=None, help="resume from this checkpoint")
    common(train)

    sample = commands.add_parser("sample", help="Euler sampling from a checkpoint")
    sample.add_argument("--ckpt", default=None, help="checkpoint (default: latest of the run)")
    common(sample)

    gradcheck = commands.add_parser("gradcheck", help="finite-difference gradient suite")
    gradcheck.add_argument(
        "--max-coords", type=int, default=8, help="coordinates checked per tensor in component checks"
    )
    gradcheck.add_argument(
        "--network-coords", type=int, default=None, help="coordinates per tensor in the network check (default: all)"
    )
    common(gradcheck)
    return parser


def error_line(exc: BaseException) -> tuple[str, int]:
    """Machine-parsable stderr line and exit code for a failure."""
    if isinstance(exc, MpditError):
        category = exc.category
        if isinstance(exc, ContainerError):
            category = f"{exc.category}:{exc.code}" if exc.code != exc.category else exc.category
        code = EXIT_CODES.get(exc.category, 1)
    elif isinstance(exc, OSError):
        category, code = "io", 1
    else:
        category, code = "internal", 1
    message = str(exc).replace("\n", " ")
    return f"mpdit: error[{category}]: {message}", code


def run(args: argparse.Namespace) -> int:
    if args.command == "analyze":
        return services.cmd_analyze(
            args.config,
            presets=args.preset,
            baseline=args.baseline,
            csv_path=args.csv,
            attention=args.attention,
        )
    if args.command == "train":
        return services.cmd_train(args.config, ckpt=args.ckpt, seed=args.seed, deterministic=args.deterministic)
    if args.command == "sample":
        return services.cmd_sample(args.config, ckpt=args.ckpt, seed=args.seed)
    return services.cmd_gradcheck(
        args.config, seed=args.seed, max_coords=args.max_coords, network_coords=args.network_coords
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = create_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT, stream=sys.stderr)
    try:
        return run(args)
    except Exception as exc:
        line, code = error_line(exc)
        logging.getLogger(__name__).debug("command failed", exc_info=True)
        print(line, file=sys.stderr)
        return code
