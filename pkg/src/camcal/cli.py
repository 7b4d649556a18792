"""Command-line entry points.

Subcommands:
  simulate   run the benchmark protocol, writing per-strategy CSVs + summary
  decompose  print the four guidance steps for a pose given in degrees/mm
  serve      host the session protocol (and optionally the frontend) over HTTP

Exit codes: 0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
from dataclasses import replace
from pathlib import Path

from .errors import CamcalError
from .geometry import Pose, decompose_pose
from .session import rotation_instruction, translation_instruction

logger = logging.getLogger("camcal")


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this tool reserves 2 for internal errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser() -> _Parser:
    parser = _Parser(prog="camcal", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the seeded benchmark experiments")
    sim.add_argument("--config", type=Path, default=None, help="experiment config JSON (defaults used when omitted)")
    sim.add_argument("--out", type=Path, required=True, help="output directory for CSVs and summary.json")
    sim.add_argument("--seed", type=int, default=None, help="override the base seed")
    sim.add_argument("--jobs", type=int, default=1, help="parallel workers for repetitions")

    dec = sub.add_parser("decompose", help="print the four guidance steps for a pose")
    dec.add_argument("pose", nargs=6, type=float, metavar="VALUE",
                     help="xr yr zr xt yt zt: rotations in degrees, translations in mm")

    srv = sub.add_parser("serve", help="host the session protocol over HTTP")
    srv.add_argument("--port", type=int, required=True)
    srv.add_argument("--config", type=Path, default=None, help="session config JSON")
    srv.add_argument("--static", type=Path, default=None, help="directory of frontend files to serve at /")

    return parser


def cmd_simulate(args) -> int:
    from .simulator import ExperimentConfig, run_experiment

    if args.config is not None:
        try:
            with open(args.config) as fh:
                config = ExperimentConfig.from_dict(json.load(fh))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            logger.error("event=config_error path=%s message=%r", args.config, str(exc))
            return 1
    else:
        config = ExperimentConfig()
    if args.seed is not None:
        config = replace(config, base_seed=args.seed)

    logger.info("event=simulate_start strategies=%s repetitions=%d frames_cap=%d seed=%d jobs=%d",
                ",".join(s.name for s in config.strategy_specs()), config.repetitions,
                config.frames_cap, config.base_seed, args.jobs)
    result = run_experiment(config, out_dir=args.out, jobs=args.jobs)
    for name, stats in result.summary["strategies"].items():
        logger.info("event=strategy_done name=%s final_abs_rms=%.9g final_sum_iod=%.9g",
                    name, stats["final_abs_rms"], stats["final_sum_iod"])
    logger.info("event=simulate_done out=%s", args.out)
    return 0


def cmd_decompose(args) -> int:
    xr, yr, zr, xt, yt, zt = args.pose
    pose = Pose.from_degrees(xr, yr, zr, xt, yt, zt)
    steps = decompose_pose(pose)
    instructions = [
        translation_instruction(steps[0]),
        rotation_instruction("x", pose.xr),
        rotation_instruction("y", pose.yr),
        rotation_instruction("z", pose.zr),
    ]
    for i, (step, ins) in enumerate(zip(steps, instructions), start=1):
        sx, sy, sz = step.rotation_degrees()
        print(f"step {i}: pose [xr={sx:g} yr={sy:g} zr={sz:g} xt={step.xt:g} yt={step.yt:g} zt={step.zt:g}]")
        print(f"  {ins.text}")
    return 0


def cmd_serve(args) -> int:
    from .service import make_server
    from .session import SessionConfig

    base_config = None
    if args.config is not None:
        try:
            with open(args.config) as fh:
                base_config = SessionConfig.from_dict(json.load(fh))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            logger.error("event=config_error path=%s message=%r", args.config, str(exc))
            return 1

    try:
        server, _ = make_server(args.port, base_config=base_config, static_dir=args.static)
    except OSError as exc:
        logger.error("event=bind_error port=%d message=%r", args.port, str(exc))
        return 1

    def shutdown(signum, frame):
        logger.info("event=shutdown signal=%d", signum)
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, shutdown)
    logger.info("event=serving port=%d static=%s", args.port, args.static)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "decompose":
            return cmd_decompose(args)
        if args.command == "serve":
            return cmd_serve(args)
        return 1
    except CamcalError as exc:
        logger.error("event=error type=%s message=%r", type(exc).__name__, str(exc))
        return 1
    except Exception as exc:  # internal
        logger.exception("event=internal_error message=%r", str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
