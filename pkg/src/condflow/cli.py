"""Command-line entry point.

    condflow generate --config run.ini [--seed N] [--out DIR]
    condflow train    --config run.ini [--fresh]
    condflow sample   --config run.ini [--checkpoint ID] [--samples M]
    condflow evaluate --config run.ini
    condflow overfit-study --config toy.ini
    condflow report   --config run.ini

Exit codes: 0 success, 1 usage error, 2 numeric or convergence failure,
3 I/O failure (missing files, locked directory, unwritable output).
"""

import argparse
import json
import logging
import sys

from .config import parse_config
from .errors import (
    ConfigError,
    EmptyResultError,
    InvalidArgumentError,
    NonConvergenceError,
    NotFoundError,
    NumericError,
    UnsupportedError,
)
from .runner import Experiment, run_lock

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
COMMANDS = ("generate", "train", "sample", "evaluate", "overfit-study", "report")

log = logging.getLogger("condflow")


def build_parser():
    p = argparse.ArgumentParser(prog="condflow", description="Conditional flow matching experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="experiment INI file")
        s.add_argument("--seed", type=int, help="override experiment.seed")
        s.add_argument("--out", help="override paths.out_dir")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            s.add_argument("--fresh", action="store_true", help="ignore stored checkpoints")
        if name == "sample":
            s.add_argument("--checkpoint", default=None, help="iteration, 'selected', 'best' or 'last'")
            s.add_argument("--samples", type=int, default=None, help="override sample.n_samples")
    return p


def _dispatch(exp, args):
    cmd = args.command
    if cmd == "generate":
        return {"files": [str(p) for p in exp.generate()]}
    if cmd == "train":
        state, history = exp.train(resume=not args.fresh)
        return {"iteration": state.iteration, "final_test_loss": history.test_loss[-1] if history.test_loss else None}
    if cmd == "sample":
        return {"files": [str(p) for p in exp.sample(args.checkpoint, args.samples)]}
    if cmd == "evaluate":
        recs = exp.evaluate()
        return {"records": len(recs), "metrics": str(exp.eval_dir / "metrics.jsonl")}
    if cmd == "overfit-study":
        return exp.overfit_study()
    return exp.report()


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.out:
            cfg = cfg.with_out_dir(args.out)
        exp = Experiment(cfg)
        with run_lock(exp.out):
            result = _dispatch(exp, args)
    except (ConfigError, InvalidArgumentError, UnsupportedError) as e:
        print(f"condflow: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, NonConvergenceError, EmptyResultError) as e:
        print(f"condflow: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NotFoundError, OSError) as e:
        print(f"condflow: I/O failure: {e}", file=sys.stderr)
        return EXIT_IO
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
