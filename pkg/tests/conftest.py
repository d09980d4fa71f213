"""Shared fixtures: bundled meshes, micro model configs, a memorized checkpoint."""

import pathlib

import pytest
import torch

from iflame import mesh_codec
from iflame.hourglass import ModelConfig, build_model
from iflame.training import TrainConfig, train

ASSETS = pathlib.Path(__file__).resolve().parent.parent / "assets" / "meshes"


@pytest.fixture(scope="session")
def asset_dir():
    assert ASSETS.is_dir(), f"missing bundled meshes at {ASSETS}"
    return ASSETS


@pytest.fixture(scope="session")
def icosahedron(asset_dir):
    return mesh_codec.normalize(mesh_codec.load_obj(asset_dir / "icosahedron.obj"))


@pytest.fixture(scope="session")
def tetrahedron(asset_dir):
    return mesh_codec.normalize(mesh_codec.load_obj(asset_dir / "tetrahedron.obj"))


def micro_hourglass_config(**overrides) -> ModelConfig:
    base = dict(embed_dim=64, heads=4, stage_depths=(2, 2, 4, 2, 2), max_context=300)
    base.update(overrides)
    return ModelConfig(**base)


def micro_plain_config(**overrides) -> ModelConfig:
    base = dict(embed_dim=64, heads=4, stage_depths=(8,), max_context=300,
                layer_mix="interleaved")
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def trained_tetra_checkpoint(tmp_path_factory, tetrahedron):
    """A tiny model memorizing the tetrahedron, saved once per session."""
    from iflame.checkpoint import save_checkpoint

    qcfg = mesh_codec.QuantizerConfig()
    config = ModelConfig(embed_dim=32, heads=2, stage_depths=(1, 1, 2, 1, 1), max_context=64)
    model = build_model(config, seed=0)
    tcfg = TrainConfig(epochs=220, batch_size=1, peak_lr=5e-3, warmup_epochs=20,
                       seed=0, augment=False)
    train(model, [tetrahedron], tcfg, qcfg)
    path = tmp_path_factory.mktemp("ckpt") / "tetra.ckpt"
    save_checkpoint(model, path)
    return path


def seeded_tokens(seed: int, batch: int, length: int, vocab: int = 131) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randint(0, vocab, (batch, length), generator=gen)
