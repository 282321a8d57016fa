"""``mpclab <stage> --config FILE [--seed N] [--out DIR] [--init CKPT]``.

Exit status: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import STAGES, load_config
from .errors import ConfigError, DataError, InfeasibleAlignmentError

EXIT_CONFIG = 2
EXIT_DATA = 3

COMMANDS = {
    "synth": lambda cfg: pipeline.cmd_synth(cfg),
    "pretrain": pipeline.cmd_pretrain,
    "adapt": pipeline.cmd_adapt,
    "finetune": pipeline.cmd_finetune,
    "probe": pipeline.cmd_probe,
    "average": lambda cfg: pipeline.cmd_average(cfg),
    "eval": pipeline.cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mpclab", description=__doc__.splitlines()[0])
    ap.add_argument("stage", choices=STAGES)
    ap.add_argument("--config", required=True, help="INI stage configuration")
    ap.add_argument("--seed", type=int, help="override [run] seed")
    ap.add_argument("--out", help="override [run] out directory")
    ap.add_argument("--init", help="checkpoint to start from")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.stage)
        if args.seed is not None:
            cfg.run.seed = args.seed
        if args.out is not None:
            cfg.run.out = str(Path(args.out).resolve())
        if args.init:
            cfg.init = args.init
        result = COMMANDS[args.stage](cfg)
    except ConfigError as exc:
        print(f"mpclab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, InfeasibleAlignmentError, OSError) as exc:
        print(f"mpclab: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(result.out_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
