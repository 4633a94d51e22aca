"""Command-line entry point: ``coupled-diffusion <verb> --config FILE --out DIR``.

Exit codes: 0 success, 2 configuration error, 3 checkpoint error,
4 non-finite values or diverged training, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import harness
from .errors import CheckpointError, ConfigError, NonFiniteError, TrainingDivergedError

EXIT_CODES = ((ConfigError, 2), (CheckpointError, 3), (NonFiniteError, 4), (TrainingDivergedError, 4))

log = logging.getLogger("coupled_diffusion")


def exit_code(exc):
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def _steps(text):
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser():
    ap = argparse.ArgumentParser(prog="coupled-diffusion", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML experiment config")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed-override", type=int, default=None, help="replace the config's seed")
    common.add_argument("--threads", type=int, default=1, help="concurrent jobs (results are order-independent)")
    for verb, text in (("run", "evaluate every method on every corruption"),
                       ("train", "train and save the bundles the methods need"),
                       ("ablate-steps", "accuracy and NFE against sampling steps"),
                       ("ablate-guidance", "clean-estimate vs noisy-sample guidance"),
                       ("ablate-sampler", "ddpm vs ddim(0) sampling"),
                       ("sde-demo", "predictor-corrector enhancement of toy signals")):
        p = sub.add_parser(verb, parents=[common], help=text)
        if verb == "ablate-steps":
            p.add_argument("--steps", type=_steps, default=None, help="e.g. 10,50,150 (overrides the config)")
    p = sub.add_parser("inspect-trace", help="summarise a trace .jsonl file")
    p.add_argument("trace")
    return ap


def dispatch(args):
    if args.verb == "inspect-trace":
        return harness.inspect_trace(args.trace)
    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    cfg = harness.load_config(args.config, args.seed_override)
    os.makedirs(args.out, exist_ok=True)
    if args.verb == "run":
        table = harness.cmd_run(cfg, args.out, args.threads)
        return [{k: r[k] for k in ("corruption", "method", "accuracy", "se")} for r in table.rows]
    if args.verb == "train":
        return harness.cmd_train(cfg, args.out, args.threads)
    if args.verb == "ablate-steps":
        header, rows = harness.cmd_ablate_steps(cfg, args.out, args.threads, args.steps)
        return [dict(zip(header[:5], r[:5])) for r in rows]
    if args.verb == "ablate-guidance":
        _, diff = harness.cmd_ablate_guidance(cfg, args.out, args.threads)
        return diff
    if args.verb == "ablate-sampler":
        _, diff = harness.cmd_ablate_sampler(cfg, args.out, args.threads)
        return diff
    return harness.cmd_sde_demo(cfg, args.out, args.threads)


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        summary = dispatch(args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        code = exit_code(exc)
        log.error("%s: %s", type(exc).__name__, exc)
        return code
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
