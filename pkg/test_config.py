#!/usr/bin/env python3
"""Test run configuration: YAML loading, --set overrides, validation and seeded streams"""
from pathlib import Path

import pytest

from src.config import load_config, substream, torch_generator
from src.errors import ConfigError

ROOT = Path(__file__).parent


def test_shipped_configs_load():
    default = load_config(ROOT / "configs" / "default.yaml")
    assert default.corpus.ladder == [16, 32, 48, 64, 80, 96, 128]
    assert default.encoder.lora.rank == 8 and default.encoder.lora.alpha == 16
    assert default.train.lr == 1e-4
    toy = load_config(ROOT / "configs" / "toy.yaml")
    assert toy.encoder.backbone.kind == "toy"
    assert toy.surrogate.client == "stub"


def test_overrides_are_yaml_typed(tmp_path):
    cfg = load_config(ROOT / "configs" / "toy.yaml",
                      ["train.max_epochs=3", "loss.bitrate_term=false", "mapping.calibration_tests=[A, B]"], seed=9)
    assert cfg.train.max_epochs == 3
    assert cfg.loss.bitrate_term is False
    assert cfg.mapping.calibration_tests == ["A", "B"]
    assert cfg.seed == 9


def test_learning_rate_defaults_by_mode():
    cfg = load_config(ROOT / "configs" / "default.yaml", ["train.adaptation_mode=transformer_finetune"])
    assert cfg.train.lr == 5e-5
    cfg = load_config(ROOT / "configs" / "default.yaml", ["train.initial_lr=0.01"])
    assert cfg.train.lr == 0.01


@pytest.mark.parametrize("override", [
    "train.max_epochz=3",
    "corpus.split_fractions={train: 0.5, val: 0.4}",
    "corpus.ladder=[16, 16]",
    "loss.temperature=0",
    "encoder.lora.dropout=1.0",
    "scoring.mode=psychic",
    "train.batch_size=1",
])
def test_invalid_settings_are_config_errors(override):
    with pytest.raises(ConfigError) as excinfo:
        load_config(ROOT / "configs" / "toy.yaml", [override])
    assert excinfo.value.exit_code == 1


def test_max_epochs_is_required(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 1\ntrain:\n  batch_size: 8\n")
    with pytest.raises(ConfigError, match="max_epochs"):
        load_config(path)
    assert load_config(path, ["train.max_epochs=1"]).train.max_epochs == 1


def test_malformed_inputs(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(ROOT / "configs" / "toy.yaml", ["novalue"])
    with pytest.raises(ConfigError):
        load_config(ROOT / "configs" / "toy.yaml", ["seed.inner=1"])


def test_substreams_are_reproducible_and_independent():
    assert substream(3, "split").integers(0, 1 << 30) == substream(3, "split").integers(0, 1 << 30)
    assert substream(3, "split").integers(0, 1 << 30) != substream(3, "sampling").integers(0, 1 << 30)
    assert substream(3, "split").integers(0, 1 << 30) != substream(4, "split").integers(0, 1 << 30)
    assert torch_generator(0, "init").initial_seed() == torch_generator(0, "init").initial_seed()
