"""Shared fixtures: toy run configs and a small prepared + labeled toy corpus."""
from pathlib import Path

import pytest

from src import pipeline
from src.config import load_config
from src.encoder import build_encoder, configure_adaptation
from src.toycorpus import make_toy_listening_test, make_toy_sources

TOY_CONFIG = Path(__file__).parent / "configs" / "toy.yaml"


def toy_config(work_dir, *extra):
    work_dir = Path(work_dir)
    overrides = [
        f"paths.work_dir={work_dir}",
        f"paths.sources={work_dir / 'sources'}",
        f"evaluation.registry={work_dir / 'listening_tests' / 'tests_registry.json'}",
        *extra,
    ]
    return load_config(TOY_CONFIG, overrides), overrides


@pytest.fixture
def toy_cfg(tmp_path):
    cfg, _ = toy_config(tmp_path)
    return cfg


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """6 one-second sources → 12 clips, prepared and labeled once per session."""
    work_dir = tmp_path_factory.mktemp("toy_run")
    cfg, overrides = toy_config(work_dir, "train.max_epochs=2", "train.steps_per_epoch=2")
    make_toy_sources(cfg.paths.sources, n_sources=6, seconds=1.0, seed=cfg.seed)
    make_toy_listening_test(cfg.evaluation.registry.parent, cfg.corpus.ladder, seed=cfg.seed)
    pipeline.cmd_prepare(cfg, overrides)
    manifest = pipeline.cmd_label(cfg, overrides)
    return cfg, overrides, manifest


@pytest.fixture
def toy_encoder(toy_cfg):
    model = build_encoder(toy_cfg.encoder, seed=0)
    return configure_adaptation(model, "lora", toy_cfg.encoder.lora, seed=0)
