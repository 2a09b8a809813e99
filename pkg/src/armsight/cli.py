"""Command-line entry point.

Verbs cover the pipeline end to end: generate, train-localizer,
train-instance, predict, evaluate, benchmark.  Logs go to stderr; the
only stdout output is a short machine-readable result line per verb.
Exit codes: 0 success, 1 unexpected failure, 2 bad configuration, 3 data
problems, 4 missing prerequisites, 5 training divergence.
"""

import argparse
import json
import logging
import sys

from . import pipeline
from .errors import ArmsightError

log = logging.getLogger("armsight")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", metavar="YAML",
        help="pipeline config file (defaults apply when omitted)",
    )
    parser = argparse.ArgumentParser(
        prog="armsight",
        description="synthetic multi-robot scenes, joint localization, "
                    "instance segmentation, and 3D pose decoding",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common],
                       help="render a randomized scene dataset")
    g.add_argument("--split", choices=["train", "test"], default="train")
    g.add_argument("--count", type=int, help="override the configured scene count")
    g.add_argument("--jobs", type=int, help="parallel generation workers")

    sub.add_parser("train-localizer", parents=[common],
                   help="train the joint localization network")
    sub.add_parser("train-instance", parents=[common],
                   help="train the recurrent instance network")

    p = sub.add_parser("predict", parents=[common],
                       help="run inference over a dataset")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--overlays", action="store_true",
                   help="also write overlay images")

    e = sub.add_parser("evaluate", parents=[common],
                       help="score predictions against ground truth")
    e.add_argument("--split", choices=["train", "test"], default="test")

    b = sub.add_parser("benchmark", parents=[common],
                       help="time the pipeline's hot paths")
    b.add_argument("--repeats", type=int, help="repetitions per task")
    return parser


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        cfg = (pipeline.load_config(args.config) if args.config
               else pipeline.PipelineConfig())
        if args.command == "generate":
            manifest = pipeline.cmd_generate(
                cfg, split=args.split, count=args.count, jobs=args.jobs, log=log
            )
            _emit({"command": "generate", "split": args.split,
                   "count": manifest["count"]})
        elif args.command == "train-localizer":
            history = pipeline.cmd_train_localizer(cfg, log=log)
            _emit({"command": "train-localizer",
                   "final_loss": history["epoch_loss"][-1],
                   "time_sec": history["time_sec"]})
        elif args.command == "train-instance":
            history = pipeline.cmd_train_instance(cfg, log=log)
            _emit({"command": "train-instance",
                   "final_loss": history["epoch_loss"][-1],
                   "time_sec": history["time_sec"]})
        elif args.command == "predict":
            result = pipeline.cmd_predict(
                cfg, split=args.split, overlays=args.overlays, log=log
            )
            _emit({"command": "predict", **result})
        elif args.command == "evaluate":
            results = pipeline.cmd_evaluate(cfg, split=args.split, log=log)
            _emit({"command": "evaluate", "ap": results["ap"],
                   "count_accuracy": results["count_accuracy"]})
        elif args.command == "benchmark":
            report = pipeline.cmd_benchmark(cfg, repeats=args.repeats, log=log)
            _emit({"command": "benchmark",
                   "nms_faster_than_log": report["nms_faster_than_log"]})
    except ArmsightError as err:
        log.error("%s", err)
        return err.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
