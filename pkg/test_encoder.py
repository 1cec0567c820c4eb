#!/usr/bin/env python3
"""Test the embedding model: LoRA injection, adaptation modes, inference and checkpoints"""
import numpy as np
import pytest
import torch
import torch.nn as nn

from src.config import LoraConfig
from src.corpus import INF, Clip
from src.encoder import (
    LoRALinear,
    apply_lora,
    build_encoder,
    configure_adaptation,
    embed,
    embed_batch,
    frame_features,
    load_checkpoint,
    parameter_groups,
    save_checkpoint,
    trainable_report,
)
from src.errors import CheckpointError, ConfigError, NumericError, PreconditionError
from src.rnc import rnc_batch
from src.surrogate import SurrogateLabel


def _clip(seed=0, n=4000, rate=8000):
    rng = np.random.default_rng(seed)
    return Clip(0.2 * rng.standard_normal(n), rate, f"clip{seed}")


def _waves(n=3, length=4000):
    g = torch.Generator().manual_seed(5)
    return 0.2 * torch.randn(n, length, generator=g, dtype=torch.float64)


def test_lora_starts_as_identity(toy_cfg):
    plain = configure_adaptation(build_encoder(toy_cfg.encoder, seed=0), "head_only", toy_cfg.encoder.lora)
    adapted = configure_adaptation(build_encoder(toy_cfg.encoder, seed=0), "lora", toy_cfg.encoder.lora)
    plain.eval()
    adapted.eval()
    with torch.no_grad():
        torch.testing.assert_close(plain(_waves()), adapted(_waves()), rtol=0, atol=1e-12)


def test_lora_linear_update():
    base = nn.Linear(6, 4).double()
    layer = LoRALinear(base, rank=2, alpha=8.0)
    with torch.no_grad():
        layer.lora_B.fill_(0.5)
    x = torch.randn(3, 6, dtype=torch.float64)
    delta = layer.lora_B @ layer.lora_A
    torch.testing.assert_close(layer(x), base(x) + 4.0 * x @ delta.T)
    assert not base.weight.requires_grad


def test_lora_linear_rank_bound():
    with pytest.raises(ConfigError):
        LoRALinear(nn.Linear(4, 3), rank=4, alpha=8.0)


def test_lora_linear_gradients():
    layer = LoRALinear(nn.Linear(5, 3).double(), rank=2, alpha=4.0)
    with torch.no_grad():
        layer.lora_B.normal_()
    x = torch.randn(2, 5, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(layer, (x,))


def test_lora_targets_only_attention_projections(toy_encoder):
    trainable = [n for n, p in toy_encoder.named_parameters() if p.requires_grad]
    assert trainable
    assert all(".lora_" in n or n.startswith("head.") for n in trainable)
    adapted = {n.split(".lora_")[0] for n in trainable if ".lora_" in n}
    assert adapted == {f"backbone.blocks.{i}.{k}" for i in range(2) for k in ("query", "value")}


def test_lora_rejects_unknown_and_repeated_targets(toy_cfg):
    model = build_encoder(toy_cfg.encoder)
    with pytest.raises(ConfigError):
        apply_lora(model, LoraConfig(targets=["gate"]))
    apply_lora(model, LoraConfig(rank=2))
    with pytest.raises(ConfigError):
        apply_lora(model, LoraConfig(rank=2))


def test_trainable_fraction_by_mode(toy_cfg):
    fractions = {}
    for mode in ("head_only", "lora", "transformer_finetune"):
        model = configure_adaptation(build_encoder(toy_cfg.encoder), mode, toy_cfg.encoder.lora)
        fractions[mode] = trainable_report(model)["fraction"]
    assert 0 < fractions["head_only"] < fractions["lora"] < fractions["transformer_finetune"] < 1
    with pytest.raises(ConfigError):
        configure_adaptation(build_encoder(toy_cfg.encoder), "full", toy_cfg.encoder.lora)


def test_weight_decay_only_on_lora(toy_encoder):
    groups = parameter_groups(toy_encoder, 0.01)
    assert [g["weight_decay"] for g in groups] == [0.0, 0.01]
    lora_ids = {id(p) for n, p in toy_encoder.named_parameters() if ".lora_" in n}
    assert {id(p) for p in groups[1]["params"]} == lora_ids


def test_embedding_shape_and_determinism(toy_encoder, toy_cfg):
    a, b = embed(_clip(1), toy_encoder), embed(_clip(1), toy_encoder)
    assert a.vector.shape == (toy_cfg.encoder.embedding_dim,)
    np.testing.assert_array_equal(a.vector, b.vector)
    assert a.norm == pytest.approx(np.linalg.norm(a.vector))
    batch = embed_batch([_clip(1), _clip(2)], toy_encoder)
    np.testing.assert_allclose(batch[0].vector, a.vector, atol=1e-10)


def test_embed_rejects_wrong_rate(toy_encoder):
    with pytest.raises(PreconditionError):
        embed(_clip(rate=16000), toy_encoder)


def test_nonfinite_backbone_output_names_the_layer(toy_encoder):
    x = _waves(1)
    x[0, 100] = float("nan")
    with pytest.raises(NumericError, match="layer 0"):
        toy_encoder.features(x)


def test_frame_features_shape(toy_encoder, toy_cfg):
    frames = frame_features(_clip(), toy_encoder)
    toy = toy_cfg.encoder.backbone.toy
    assert frames.shape == ((4000 - toy.frame_length) // toy.hop_length + 1, toy.width)


def test_checkpoint_round_trip(toy_encoder, toy_cfg, tmp_path):
    with torch.no_grad():
        for name, p in toy_encoder.named_parameters():
            if ".lora_B" in name:
                p.normal_(std=0.1)
    path = save_checkpoint(tmp_path / "ckpt.pt", toy_encoder, toy_cfg.encoder, {"epoch": 3})
    restored, state = load_checkpoint(path)
    assert state["extra"] == {"epoch": 3}
    assert restored.adaptation_mode == "lora"
    np.testing.assert_allclose(embed(_clip(4), restored).vector, embed(_clip(4), toy_encoder).vector, atol=1e-12)


def test_checkpoint_backbone_mismatch(toy_encoder, toy_cfg, tmp_path):
    path = save_checkpoint(tmp_path / "ckpt.pt", toy_encoder, toy_cfg.encoder)
    other = toy_cfg.encoder.model_copy(deep=True)
    other.backbone.toy.seed = 7
    with pytest.raises(CheckpointError):
        load_checkpoint(path, other)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")


def test_trainable_count_matches_adapter_shapes(toy_encoder, toy_cfg):
    toy, lora = toy_cfg.encoder.backbone.toy, toy_cfg.encoder.lora
    adapters = toy.num_blocks * len(lora.targets) * lora.rank * (toy.width + toy.width)
    flat = (toy.num_blocks + 1) * toy.width
    head = flat * toy_cfg.encoder.embedding_dim + toy_cfg.encoder.embedding_dim
    report = trainable_report(toy_encoder)
    assert report["trainable"] == adapters + head == 4128
    assert report["trainable"] == sum(p.numel() for p in toy_encoder.parameters() if p.requires_grad)
    assert report["fraction"] == pytest.approx(4128 / report["total"])


def test_frozen_model_has_no_trainable_fraction(toy_encoder):
    for p in toy_encoder.parameters():
        p.requires_grad_(False)
    assert trainable_report(toy_encoder)["fraction"] == 0.0


def test_end_to_end_gradients_match_finite_differences(toy_encoder):
    with torch.no_grad():
        g = torch.Generator().manual_seed(2)
        for name, p in toy_encoder.named_parameters():
            if ".lora_B" in name:
                p.copy_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    labels = [SurrogateLabel(5.0, INF, "none"), SurrogateLabel(4.0, 64.0, "aac"),
              SurrogateLabel(2.5, 32.0, "aac"), SurrogateLabel(3.0, 48.0, "opus"),
              SurrogateLabel(1.5, 16.0, "opus"), SurrogateLabel(3.5, 96.0, "aac")]
    waves = _waves(len(labels), length=1000)
    loss_of = lambda: rnc_batch(labels, toy_encoder(waves), 0.8)

    toy_encoder.zero_grad()
    loss_of().backward()
    params = [(n, p) for n, p in toy_encoder.named_parameters() if p.requires_grad]
    rng = np.random.default_rng(0)
    eps = 1e-6
    for _ in range(100):
        name, p = params[int(rng.integers(len(params)))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            saved = p[idx].item()
            p[idx] = saved + eps
            up = float(loss_of())
            p[idx] = saved - eps
            down = float(loss_of())
            p[idx] = saved
        numeric = (up - down) / (2 * eps)
        assert p.grad[idx].item() == pytest.approx(numeric, rel=1e-4, abs=1e-7), name
