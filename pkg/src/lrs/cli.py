"""``lrs train|finetune|attack|eval|sweep|diag --config PATH [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 config error, 3 accuracy-gate failure, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline as pl
from .config import ConfigError, load_config
from .finetune import DivergenceError
from .models import CheckpointError

log = logging.getLogger("lrs")

EXIT_CONFIG, EXIT_GATE, EXIT_DIVERGENCE = 2, 3, 4


def _surrogates(cfg):
    surrogate, targets = pl.load_models(cfg)
    lrs = pl._load(cfg, pl.lrs_role(cfg))
    return {"pretrained": surrogate, cfg.lrs.variant.lower(): lrs}, targets


def cmd_train(cfg):
    train_set, test_set = pl.load_data(cfg)
    pl.train_models(cfg, train_set, test_set)


def cmd_finetune(cfg):
    train_set, test_set = pl.load_data(cfg)
    surrogate, _ = pl.load_models(cfg)
    _, report = pl.finetune_surrogate(cfg, surrogate, train_set, test_set)
    if report.test_accuracy:
        log.info("fine-tuned surrogate test accuracy %.4f", report.test_accuracy[-1])


def cmd_attack(cfg):
    _, test_set = pl.load_data(cfg)
    surrogates, targets = _surrogates(cfg)
    x, y = pl.eval_subset(cfg, test_set, [*surrogates.values(), *targets.values()])
    pl.craft(cfg, surrogates, x, y)


def cmd_eval(cfg):
    surrogates, targets = _surrogates(cfg)
    try:
        batches = pl.load_batches(cfg, surrogates)
    except ConfigError:
        cmd_attack(cfg)
        batches = pl.load_batches(cfg, surrogates)
    for rep in pl.report_batches(cfg, surrogates, targets, batches):
        log.info("%s %s: white-box %.3f, average transfer %.3f", rep.surrogate, rep.method, rep.white_box, rep.average)


def cmd_sweep(cfg):
    train_set, test_set = pl.load_data(cfg)
    surrogate, targets = pl.load_models(cfg)
    pl.run_sweep(cfg, surrogate, targets, train_set, test_set)


def cmd_diag(cfg):
    _, test_set = pl.load_data(cfg)
    surrogates, targets = _surrogates(cfg)
    first = cfg.targets[0]
    pl.diagnostics(cfg, surrogates, (first, targets[first]), test_set)


COMMANDS = {"train": cmd_train, "finetune": cmd_finetune, "attack": cmd_attack,
            "eval": cmd_eval, "sweep": cmd_sweep, "diag": cmd_diag}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrs", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=list(COMMANDS))
    parser.add_argument("--config", required=True, help="flat dotted key = value config file")
    parser.add_argument("--seed", type=int, help="override the global seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out})
        COMMANDS[args.command](cfg)
    except (ConfigError, CheckpointError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except pl.GateError as exc:
        log.error("%s", exc)
        return EXIT_GATE
    except DivergenceError as exc:
        log.error("divergence: %s", exc)
        return EXIT_DIVERGENCE
    return 0


if __name__ == "__main__":
    sys.exit(main())
