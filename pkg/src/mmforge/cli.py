"""Command-line interface.

Subcommands: gen-data, train, eval, grad-check, validate-data. Exit codes:
0 success, 1 operational failure (bad data, failed check, training error),
2 usage error. The FMS_SEED environment variable, when set, overrides the
seed found in any loaded config.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import load_dataset_config, load_train_config
from .data import generate_dataset, read_dataset, write_dataset
from .errors import MMForgeError
from .gradcheck import CHECKS, run_checks
from .train import evaluate_checkpoint, train

log = logging.getLogger(__name__)


def _seed_override():
    raw = os.environ.get("FMS_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise MMForgeError(f"FMS_SEED must be an integer, got {raw!r}")


def _cmd_gen_data(args):
    cfg = load_dataset_config(args.config)
    seed = _seed_override()
    if seed is not None:
        cfg.seed = seed
    samples = generate_dataset(cfg)
    write_dataset(samples, args.out, cfg)
    print(f"wrote {len(samples)} samples to {args.out} (seed {cfg.seed})")
    return 0


def _cmd_train(args):
    cfg = load_train_config(args.config)
    seed = _seed_override()
    if seed is not None:
        cfg.seed = seed

    def progress(epoch, losses):
        print(f"epoch {epoch:3d}  total {losses['total']:.6f}")

    train(cfg, progress=progress)
    print(f"checkpoint written to {cfg.checkpoint_path}")
    return 0


def _cmd_eval(args):
    report = evaluate_checkpoint(args.ckpt, args.data)
    if args.json:
        print(report.to_json())
    else:
        print(report.render_table())
    return 0


def _cmd_grad_check(args):
    results = run_checks(module=args.module)
    failed = False
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:<16} max rel err {r.max_rel_err:.3e}  {status}")
        failed = failed or not r.ok
    return 1 if failed else 0


def _cmd_validate_data(args):
    cfg, samples = read_dataset(args.path)
    print(f"{args.path}: {len(samples)} valid samples "
          f"(grid {cfg.grid}, seq_len {cfg.seq_len}, seed {cfg.seed})")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mmforge",
        description="Multi-modal manipulation detection and grounding.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True, help="dataset config file")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True, help="training config file")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset JSONL path")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("grad-check",
                       help="verify gradients against finite differences")
    p.add_argument("--module", choices=sorted(CHECKS), default=None,
                   help="restrict to one module (default: all)")
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("validate-data", help="validate a dataset file")
    p.add_argument("path", help="dataset JSONL path")
    p.set_defaults(func=_cmd_validate_data)

    return parser


def main(argv=None):
    logging.basicConfig(level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MMForgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
