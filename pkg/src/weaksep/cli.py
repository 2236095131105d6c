"""Command line entry point: ``weaksep {synth,train,eval,sweep,plot}``.

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_yaml
from . import pipeline

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4

logger = logging.getLogger("weaksep")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="experiment YAML file (defaults when omitted)")
    p.add_argument("--out", type=Path, required=True, help="experiment output directory")
    p.add_argument("--seed", type=int, help="override the experiment seed")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weaksep", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render train/valid/test mixtures and manifests")
    _common(p)
    p.add_argument("--lambda", dest="lam", type=float, help="override the expected event count")

    p = sub.add_parser("train", help="train the classifier or the separator")
    _common(p)
    p.add_argument("--role", choices=("classifier", "separator"), required=True)
    p.add_argument("--classifier", type=Path, help="classifier checkpoint (default: OUT/classifier.ckpt)")

    p = sub.add_parser("eval", help="score a separator checkpoint on a split")
    _common(p)
    p.add_argument("--separator", type=Path, help="separator checkpoint (default: OUT/separator.ckpt)")
    p.add_argument("--classifier", type=Path, help="classifier checkpoint (default: OUT/classifier.ckpt)")
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")

    p = sub.add_parser("sweep", help="run one experiment per axis value and tabulate the results")
    _common(p)
    p.add_argument("--axis", required=True,
                   help=f"one of {', '.join(pipeline.SWEEP_AXES)} or a dotted config key")
    p.add_argument("--values", required=True, help="comma-separated axis values")

    p = sub.add_parser("plot", help="draw the delta SI-SDR scatter for an evaluation report")
    _common(p)
    p.add_argument("--report", type=Path, help="report directory (default: OUT/eval)")
    return parser


def _load_config(args) -> ExperimentConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "lam", None) is not None:
        overrides.append(f"dataset.lambda={args.lam}")
    return ExperimentConfig.load(args.config, overrides)


def _values(text: str) -> list:
    return [load_yaml(v.strip()) for v in text.split(",") if v.strip()]


def run(args) -> int:
    cfg = _load_config(args)
    out: Path = args.out
    data_dir = cfg.data_dir(out)
    if args.command == "synth":
        manifests = pipeline.synthesize(cfg, data_dir)
        for split, m in manifests.items():
            print(f"{split}: {len(m)} clips -> {data_dir / (split + '.jsonl')}")
    elif args.command == "train":
        clf_path = args.classifier or out / "classifier.ckpt"
        if args.role == "classifier":
            path = pipeline.train_classifier_stage(cfg, data_dir, clf_path, out / "logs" / "classifier.jsonl")
        else:
            path = pipeline.train_separator_stage(cfg, data_dir, out / "separator.ckpt",
                                                  out / "logs" / "separator.jsonl", clf_path)
        print(f"checkpoint: {path}")
    elif args.command == "eval":
        sep = args.separator or out / "separator.ckpt"
        clf = args.classifier or out / "classifier.ckpt"
        eval_dir = out / cfg.raw["eval"]["out_dir"]
        result = pipeline.evaluate_stage(cfg, data_dir, sep, eval_dir, clf if clf.exists() else None, args.split)
        overall = result["summary"]["overall"]
        print(json.dumps({"report": str(eval_dir), "count": overall["count"],
                          "delta_si_sdr_mean": overall["delta_si_sdr"]["mean"]}))
    elif args.command == "sweep":
        rows = pipeline.sweep(cfg, args.axis, _values(args.values), out)
        print(f"{args.axis:>12}  " + "  ".join(f"{k:>18}" for k in list(rows[0])[1:]))
        for row in rows:
            print(f"{str(row[args.axis]):>12}  " + "  ".join(f"{v:18.3f}" for v in list(row.values())[1:]))
    elif args.command == "plot":
        report = args.report or out / cfg.raw["eval"]["out_dir"]
        print(f"figure: {pipeline.plot_stage(report, out / 'plots')}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
