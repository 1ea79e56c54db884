"""Command line front end: ``oneshot-nas <command> --config run.yaml``.

Exit codes: 0 success, 2 configuration error, 3 missing or stale stage
artifact, 4 numeric divergence during training, 1 anything else raised by
the library.
"""

import argparse
import json
import sys

from . import pipeline
from .config import ConfigError, load_config, with_overrides
from .errors import CheckpointError, NASError, NumericError, StageError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_STAGE, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _constraint(text):
    if text in ("small", "medium", "large"):
        return text
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected small, medium, large or a FLOPs count, got {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError("FLOPs budget must be positive")
    return value


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML pipeline configuration")
    common.add_argument("--seed", type=int, help="override the config's global seed")
    common.add_argument("--jobs", type=int, default=1, help="max concurrent fitness evaluations")
    common.add_argument("--deterministic", action="store_true",
                        help="force serial execution (results are identical either way)")
    common.add_argument("--constraint", type=_constraint,
                        help="FLOPs budget: small, medium, large or an integer")
    common.add_argument("--output-dir", help="override the config's output directory")

    parser = argparse.ArgumentParser(prog="oneshot-nas", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help="check a config file and print it normalised")
    sub.add_parser("pretrain", parents=[common], help="ensemble single-path supernet pretraining")
    ft = sub.add_parser("finetune", parents=[common], help="sandwich fine-tuning on the target task")
    ft.add_argument("--skip-finetune", action="store_true",
                    help="freeze the backbone and train only the new head")
    ft.add_argument("--allow-scratch", action="store_true",
                    help="fine-tune a freshly initialised supernet if none is pretrained")
    se = sub.add_parser("search", parents=[common], help="constrained evolutionary search")
    se.add_argument("--skip-finetune", action="store_true",
                    help="search the head-only supernet (ablation)")
    rt = sub.add_parser("retrain", parents=[common], help="train the searched genotype stand-alone")
    rt.add_argument("--genotype", help="genotype string instead of the search result")
    st = sub.add_parser("study", parents=[common], help="ranking and ablation studies")
    st.add_argument("name", choices=pipeline.STUDIES)
    rp = sub.add_parser("report", help="summarise a run directory")
    rp.add_argument("run_dir")
    return parser


def _config(args):
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.constraint is not None:
        changes["constraint"] = args.constraint
    if args.output_dir is not None:
        changes["output_dir"] = args.output_dir
    return with_overrides(cfg, **changes) if changes else cfg


def _dispatch(args):
    if args.command == "report":
        return pipeline.cmd_report(args.run_dir)
    cfg = _config(args)
    jobs = 1 if args.deterministic else max(1, args.jobs)
    if args.command == "validate":
        print(cfg.to_yaml(), end="")
        return pipeline.cmd_validate(cfg)
    if args.command == "pretrain":
        return pipeline.cmd_pretrain(cfg, jobs=jobs)
    if args.command == "finetune":
        return pipeline.cmd_finetune(cfg, args.skip_finetune, args.allow_scratch, jobs=jobs)
    if args.command == "search":
        return pipeline.cmd_search(cfg, args.skip_finetune, jobs=jobs)
    if args.command == "retrain":
        return pipeline.cmd_retrain(cfg, args.genotype, jobs=jobs)
    return pipeline.cmd_study(cfg, args.name, jobs=jobs)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        out = _dispatch(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, CheckpointError) as err:
        print(f"stage error: {err}", file=sys.stderr)
        return EXIT_STAGE
    except NumericError as err:
        print(f"numeric divergence: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except NASError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL
    if isinstance(out, str):
        print(out, end="")
    elif out is not None and args.command != "validate":
        print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
