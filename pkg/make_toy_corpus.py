#!/usr/bin/env python3
"""
Write the synthetic sources and held-out toy listening test for a desk-scale run.

    python make_toy_corpus.py --config configs/toy.yaml
    python -m src.cli --config configs/toy.yaml prepare   (then label, train, score, evaluate)
"""
import argparse
import sys
from pathlib import Path

from src.config import load_config
from src.errors import ToneRankError
from src.logs import err, ok, setup_logging
from src.toycorpus import make_toy_listening_test, make_toy_sources


def make_toy_corpus(config_path, n_sources: int, seconds: float, overrides=None):
    cfg = load_config(config_path, overrides)

    print(f"\n{'='*70}")
    print(f"ToneRank toy corpus")
    print(f"{'='*70}\n")

    sources = make_toy_sources(cfg.paths.sources, n_sources=n_sources, seconds=seconds, seed=cfg.seed)
    ok(f"{len(sources)} sources → {cfg.paths.sources}")

    registry = make_toy_listening_test(
        cfg.evaluation.registry.parent,
        cfg.corpus.ladder,
        codecs=tuple(cfg.corpus.codecs),
        clip_seconds=cfg.corpus.clip_seconds,
        seed=cfg.seed,
    )
    ok(f"held-out listening test → {registry}")

    print(f"\n{'='*70}")
    print(f"Next: python -m src.cli --config {config_path} prepare")
    print(f"{'='*70}\n")
    return sources, registry


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description='Write the synthetic ToneRank corpus')
    parser.add_argument('--config', type=Path, default=Path('configs/toy.yaml'),
                        help='run configuration (YAML)')
    parser.add_argument('--sources', type=int, default=12,
                        help='number of synthetic source recordings')
    parser.add_argument('--seconds', type=float, default=2.0,
                        help='length of each source recording')
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='override a config value (repeatable)')

    args = parser.parse_args()
    setup_logging()
    try:
        make_toy_corpus(args.config, args.sources, args.seconds, args.overrides)
    except ToneRankError as e:
        err(str(e))
        sys.exit(e.exit_code)
