"""Deterministic toy datasets generated directly in frozen-feature space.

By default every image carries one relation class and every ordered person pair in it is labelled
with that class. With ``label_mode="pair"`` each person draws a relation role instead and the
ordered pair ``(i, j)`` takes the role of person ``i``, so labels vary within an image and
``(i, j)`` may differ from ``(j, i)``.

Visual layers are Gaussian noise; inside each person box, frozen layer ``l`` additionally carries
``separation * l / n_layers`` times the prototype of that person's class, so layer 0 holds no label
signal and only fused deeper layers do. The CLS token carries ``separation`` times the joint
embedding of the class sentence (the mean over persons in pair mode). With
``class_separation == 0`` features are independent of the labels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np

from .annotations import write_annotations
from .encoders import (
    EncoderConfig,
    FixtureProvider,
    SyntheticProvider,
    VisualFeatures,
    image_fixture_path,
    text_fixture_path,
    text_pack,
    visual_pack,
)
from .errors import ConfigError
from .featurepack import FeaturePack, write_feature_pack
from .model import Dataset, ImageRecord, PairSample, PersonBox, RelationTaxonomy
from .prompts import CORPUS_KINDS, DEFAULT_TOP_K, Corpus, VocabSelector, class_name_prompts

logger = logging.getLogger(__name__)

LABEL_MODES = ("image", "pair")

TOY_CORPORA: Dict[str, Tuple[str, ...]] = {
    "scene_category": ("office", "beach", "kitchen", "church", "stadium", "classroom", "restaurant", "park"),
    "scene_attribute": ("indoor", "outdoor", "crowded", "sunny", "cluttered", "formal", "noisy", "quiet"),
    "object_category": ("suit", "ball", "guitar", "desk", "cake", "bottle", "backpack", "bicycle"),
    "emotion": ("joy", "trust", "surprise"),
}


@dataclass(frozen=True)
class ToySpec:
    n_images: int = 64
    persons_per_image: int = 3
    n_classes: int = 3
    seed: int = 0
    encoder_config: EncoderConfig = field(default_factory=EncoderConfig.miniature)
    class_separation: float = 2.0
    class_names: Tuple[str, ...] = ()
    taxonomy_name: str = ""
    label_mode: str = "image"

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.class_names and len(self.class_names) != self.n_classes:
            raise ConfigError(f"toy class_names lists {len(self.class_names)} classes but n_classes is {self.n_classes}")
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"toy label_mode must be one of {LABEL_MODES}, got {self.label_mode!r}")
        if self.n_images < 1:
            raise ConfigError("toy n_images must be >= 1")
        if self.class_separation < 0:
            raise ConfigError("toy class_separation must be >= 0")
        if self.n_classes < 2:
            raise ConfigError("toy n_classes must be >= 2")
        if not 2 <= self.persons_per_image <= self.encoder_config.n_patches:
            raise ConfigError(
                f"toy persons_per_image must be in [2, {self.encoder_config.n_patches}] (one grid cell each)"
            )


def toy_taxonomy(n_classes: int, class_names: Sequence[str] = (), name: str = "") -> RelationTaxonomy:
    names = tuple(class_names) or tuple(f"relation-{c}" for c in range(n_classes))
    return RelationTaxonomy(name or f"toy-{n_classes}", names, "generated")


def toy_corpora() -> List[Corpus]:
    return [Corpus(kind, TOY_CORPORA[kind], DEFAULT_TOP_K[kind]) for kind in CORPUS_KINDS]


@dataclass
class ToyBundle:
    spec: ToySpec
    dataset: Dataset
    image_packs: Dict[str, FeaturePack]
    text_packs: Dict[str, FeaturePack]
    corpora: List[Corpus]

    def provider(self) -> FixtureProvider:
        return FixtureProvider.from_packs(self.spec.encoder_config, self.image_packs, self.text_packs)

    def selector(self) -> VocabSelector:
        return VocabSelector(self.corpora, self.provider())


def _cell_box(cell: int, grid: Tuple[int, int]) -> PersonBox:
    gh, gw = grid
    row, col = divmod(int(cell), gw)
    return PersonBox(col / gw, row / gh, (col + 1) / gw, (row + 1) / gh)


def generate_toy_dataset(spec: ToySpec) -> ToyBundle:
    """Pure function of ``spec``: same spec, bit-identical dataset and packs."""

    cfg = spec.encoder_config
    n = cfg.n_layers
    taxonomy = toy_taxonomy(spec.n_classes, spec.class_names, spec.taxonomy_name)
    text_encoder = SyntheticProvider(cfg, seed=spec.seed)

    # Prototypes depend only on (seed, class), never on the class count.
    protos = np.stack(
        [np.random.default_rng([spec.seed, 4, c]).normal(size=(n + 1, cfg.vis_hidden)) for c in range(spec.n_classes)]
    )
    class_texts = class_name_prompts(taxonomy)
    joint_protos = np.stack([np.sqrt(cfg.joint_dim) * text_encoder.joint_embed_text(text) for text in class_texts])

    layout = np.random.default_rng([spec.seed, 1])
    label_rng = np.random.default_rng([spec.seed, 2])
    noise = np.random.default_rng([spec.seed, 3])
    role_rng = np.random.default_rng([spec.seed, 5])
    sep = spec.class_separation

    images: List[ImageRecord] = []
    samples: List[PairSample] = []
    image_packs: Dict[str, FeaturePack] = {}
    for idx in range(spec.n_images):
        image_id = f"toy-{idx:04d}"
        cells = layout.permutation(cfg.n_patches)[: spec.persons_per_image]
        layers = noise.normal(size=(n + 1, cfg.n_patches, cfg.vis_hidden))
        if spec.label_mode == "pair":
            roles = role_rng.integers(spec.n_classes, size=spec.persons_per_image)
            for layer in range(1, n + 1):
                layers[layer, cells] += sep * (layer / n) * protos[roles, layer]
            cls = noise.normal(size=cfg.joint_dim) + sep * joint_protos[roles].mean(axis=0)
            labels = [int(role) for role in roles]
        else:
            label = int(label_rng.integers(spec.n_classes))
            for layer in range(1, n + 1):
                layers[layer, cells] += sep * (layer / n) * protos[label, layer]
            cls = noise.normal(size=cfg.joint_dim) + sep * joint_protos[label]
            labels = [label] * spec.persons_per_image
        features = VisualFeatures(layers.astype(np.float32), cls.astype(np.float32))
        image_packs[image_id] = visual_pack(image_id, features, joint=features.cls)

        boxes = tuple(_cell_box(cell, cfg.patch_grid) for cell in cells)
        images.append(ImageRecord(image_id, cfg.image_size, cfg.image_size, boxes))
        for i in range(spec.persons_per_image):
            for j in range(spec.persons_per_image):
                if i != j:
                    samples.append(PairSample(image_id, i, j, labels[i]))

    dataset = Dataset(taxonomy, tuple(images), tuple(samples), split="train")
    corpora = toy_corpora()

    text_packs: Dict[str, FeaturePack] = {}

    def add_text(text: str) -> None:
        if text not in text_packs:
            text_packs[text] = text_pack(text, text_encoder.text_features(text), text_encoder.joint_embed_text(text))

    for corpus in corpora:
        for text in corpus.rendered():
            add_text(text)
    for text in class_texts:
        add_text(text)

    selector = VocabSelector(corpora, FixtureProvider.from_packs(cfg, image_packs, text_packs))
    for image in images:
        for text in selector.prompt_texts(image.image_id, taxonomy):
            add_text(text)

    truncated = sum(1 for pack in text_packs.values() if pack.attrs.get("truncated"))
    if truncated:
        logger.warning("%d toy prompt(s) exceeded %d tokens and were truncated", truncated, cfg.max_text_len)
    return ToyBundle(spec, dataset, image_packs, text_packs, corpora)


def write_corpora(corpora: List[Corpus], directory: Union[str, Path]) -> List[Path]:
    target = Path(directory)
    target.mkdir(parents=True, exist_ok=True)
    paths = []
    for corpus in corpora:
        path = target / f"{corpus.kind}.txt"
        with path.open("w", encoding="utf-8") as handle:
            handle.write(f"# {corpus.kind} (toy corpus)\n")
            for vocab in corpus.vocabs:
                handle.write(vocab + "\n")
        paths.append(path)
    return paths


def write_toy_bundle(bundle: ToyBundle, out_dir: Union[str, Path]) -> Mapping[str, Path]:
    """Lay the bundle out as ``annotations.json``, ``fixtures/`` and ``corpora/`` under ``out_dir``."""

    root = Path(out_dir)
    fixtures = root / "fixtures"
    for image_id, pack in bundle.image_packs.items():
        write_feature_pack(pack, image_fixture_path(fixtures, image_id))
    for text, pack in bundle.text_packs.items():
        write_feature_pack(pack, text_fixture_path(fixtures, text))
    annotations = root / "annotations.json"
    write_annotations(bundle.dataset, annotations)
    corpora_dir = root / "corpora"
    write_corpora(bundle.corpora, corpora_dir)
    return {"annotations": annotations, "fixtures": fixtures, "corpora": corpora_dir}
