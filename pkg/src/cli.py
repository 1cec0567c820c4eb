#!/usr/bin/env python3
"""ToneRank command line: python -m src.cli <command> --config <yaml> [--set key=value ...]"""
import argparse
import logging
import sys
from pathlib import Path

from src import pipeline
from src.config import load_config
from src.errors import PreconditionError, exit_code_for
from src.logs import console, err, ok, setup_logging, warn

logger = logging.getLogger(__name__)

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tonerank", description="Learned perceptual audio quality metric")
    parser.add_argument("--config", type=Path, default=Path("configs/default.yaml"), help="run configuration (YAML)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set train.max_epochs=5 (repeatable)")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--jobs", type=int, default=None, help="parallel workers for clip processing")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", help="segment sources, encode the bitrate ladder, write the manifest")
    sub.add_parser("label", help="fill surrogate MOS labels")
    sub.add_parser("train", help="train the embedding model")
    score = sub.add_parser("score", help="score listening-test items, or one test/reference pair")
    score.add_argument("--test-file", type=Path, help="ad-hoc test signal")
    score.add_argument("--reference-file", type=Path, help="matched clean reference for --test-file")
    sub.add_parser("fit-mapping", help="fit the distance → subjective-score mapping")
    sub.add_parser("evaluate", help="PCC/SRCC report and scatter export")
    return parser


def run(args) -> None:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.jobs is not None:
        overrides.append(f"jobs={args.jobs}")
    cfg = load_config(args.config, overrides)

    if args.command == "prepare":
        manifest = pipeline.cmd_prepare(cfg, overrides)
        ok(f"prepared {len(manifest.records)} clips → {cfg.paths.manifest}")
    elif args.command == "label":
        manifest = pipeline.cmd_label(cfg, overrides)
        ok(f"labeled {sum(not r.is_clean for r in manifest.records)} coded clips")
    elif args.command == "train":
        result = pipeline.cmd_train(cfg, overrides)
        ok(f"trained {result.steps} steps; val loss {result.initial_val_loss:.4f} → {result.best_val_loss:.4f}")
        ok(f"best checkpoint: {result.best_checkpoint}")
    elif args.command == "score":
        pair = None
        if args.test_file is not None:
            if args.reference_file is None and cfg.scoring.mode == "full_reference":
                raise PreconditionError("--reference-file is required for full_reference scoring")
            pair = (str(args.test_file), str(args.reference_file) if args.reference_file else None)
        predictions = pipeline.cmd_score(cfg, overrides, pair)
        if pair is not None:
            console.print(predictions.to_string(index=False))
        else:
            ok(f"scored {len(predictions)} items → {pipeline.predictions_path(cfg)}")
    elif args.command == "fit-mapping":
        mapping_set = pipeline.cmd_fit_mapping(cfg, overrides)
        ok(f"{mapping_set.scope} mapping ({len(mapping_set.mappings)} fitted) → {pipeline.mapping_path(cfg)}")
    elif args.command == "evaluate":
        reports = pipeline.cmd_evaluate(cfg, overrides)
        for metric, report in reports.items():
            nulls = sum(r["pcc"] is None for r in report.rows)
            if nulls:
                warn(f"{metric}: {nulls} rows have undefined correlations")
        ok(f"reports written to {pipeline.report_dir(cfg)}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        run(args)
    except Exception as e:
        code = exit_code_for(e)
        logger.debug("command failed", exc_info=True)
        err(f"{args.command} failed: {e}")
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
