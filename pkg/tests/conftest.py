from pathlib import Path

import pytest
import torch

from consor.cir import CirConfig
from consor.encoders import EncoderConfig
from consor.features import FeatureStore
from consor.model import Dataset, ImageRecord, PairSample, PersonBox, RelationTaxonomy
from consor.msat import AdapterConfig, FusionSchedule
from consor.network import build_model
from consor.toy import ToySpec, generate_toy_dataset


@pytest.fixture(scope="session")
def mini_encoder() -> EncoderConfig:
    """Desk-scale frozen-encoder geometry shared by most tests."""

    return EncoderConfig.miniature()


@pytest.fixture(scope="session")
def small_toy():
    """Eight toy images, three persons each, three classes."""

    return generate_toy_dataset(ToySpec(n_images=8, seed=0))


@pytest.fixture()
def small_store(small_toy):
    return FeatureStore(small_toy.dataset, small_toy.provider(), small_toy.selector())


@pytest.fixture()
def make_model(mini_encoder):
    """Factory for a seeded miniature model; keyword overrides go to the adapter/reasoner configs."""

    def factory(
        n_classes: int = 3,
        dtype: torch.dtype = torch.float32,
        schedule: FusionSchedule | None = None,
        cir: CirConfig | None = None,
        seed: int = 0,
        logit_scale: float = 1.0,
        **adapter_overrides,
    ):
        adapter = AdapterConfig.miniature(**adapter_overrides)
        return build_model(
            mini_encoder,
            adapter,
            schedule if schedule is not None else FusionSchedule.default(mini_encoder.n_layers, adapter.n_layers),
            cir if cir is not None else CirConfig(),
            n_classes,
            logit_scale=logit_scale,
            seed=seed,
            dtype=dtype,
        )

    return factory


@pytest.fixture()
def tiny_taxonomy() -> RelationTaxonomy:
    return RelationTaxonomy("tiny", ("friends", "family", "colleagues"))


@pytest.fixture()
def tiny_dataset(tiny_taxonomy) -> Dataset:
    images = (
        ImageRecord("img-a", 640, 480, (PersonBox(0.1, 0.1, 0.4, 0.9), PersonBox(0.5, 0.2, 0.9, 0.8))),
        ImageRecord("img-b", 320, 320, (PersonBox(0.0, 0.0, 0.5, 0.5), PersonBox(0.5, 0.5, 1.0, 1.0))),
    )
    samples = (PairSample("img-a", 0, 1, 2), PairSample("img-a", 1, 0, 2), PairSample("img-b", 0, 1, 0))
    return Dataset(tiny_taxonomy, images, samples, split="train")


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return Path(__file__).parent / "data"
