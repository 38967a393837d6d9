"""Command-line entry point.

Exit codes: 0 success, 2 invalid configuration or input, 3 failure during compute.
Log verbosity comes from ``HANDXFER_LOG_LEVEL`` (default INFO).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import pipeline
from .config import ConfigError, load_config
from .geometry import MeshError
from .hand_model import ChainError
from .io import FormatError
from .metrics import CD_MODES

EXIT_OK, EXIT_VALIDATION, EXIT_COMPUTE = 0, 2, 3
VALIDATION_ERRORS = (ConfigError, FormatError, ChainError, MeshError, pipeline.StageInputError)

log = logging.getLogger("handxfer")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline config (JSON)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for refinement")
    common.add_argument("--output", help="output directory (overrides the config)")
    common.add_argument("--cd-mode", choices=CD_MODES, help="headline Chamfer mode")
    common.add_argument("--strict-literal", action="store_true",
                        help="contact likelihood with the literal signed sum")
    common.add_argument("--force", action="store_true",
                        help="accept inputs produced under a different config")

    p = argparse.ArgumentParser(prog="handxfer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("retarget", parents=[common], help="stage 1: keypoints -> joint angles")
    c = sub.add_parser("contact", parents=[common], help="stage 2: contact timeline")
    c.add_argument("--retargeted")
    r = sub.add_parser("refine", parents=[common], help="stage 3: per-finger refinement")
    r.add_argument("--retargeted")
    r.add_argument("--contacts")
    m = sub.add_parser("metrics", parents=[common], help="score retargeted/refined sequences")
    m.add_argument("--retargeted")
    m.add_argument("--refined")
    m.add_argument("--contacts")
    sub.add_parser("run-all", parents=[common], help="all stages and the manifest")
    sub.add_parser("validate", parents=[common], help="check config and inputs only")
    return p


def _configure_logging():
    level = os.environ.get("HANDXFER_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def run(args):
    cfg = load_config(args.config, {"seed": args.seed, "output_dir": args.output})
    if args.strict_literal:
        cfg.contact.strict_literal = True
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    cmd = args.command
    if cmd == "validate":
        print(json.dumps(pipeline.validate(cfg), indent=1, sort_keys=True))
        return
    cfg.validate()
    if cmd == "retarget":
        out = pipeline.cmd_retarget(cfg, args.force)
    elif cmd == "contact":
        out = pipeline.cmd_contact(cfg, args.retargeted, args.force)
    elif cmd == "refine":
        out = pipeline.cmd_refine(cfg, args.retargeted, args.contacts, args.force, args.jobs)
    elif cmd == "metrics":
        out = pipeline.cmd_metrics(cfg, args.retargeted, args.refined, args.contacts, args.force,
                                   args.cd_mode)
    else:
        out = pipeline.cmd_run_all(cfg, args.force, args.jobs, args.cd_mode)
    if isinstance(out, dict):
        for k, v in out.items():
            print(f"{k}: {v}")
    else:
        print(out)


def main(argv=None):
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except VALIDATION_ERRORS as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except Exception as exc:  # compute failure, reported with its stage
        log.error("%s", exc)
        return EXIT_COMPUTE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
