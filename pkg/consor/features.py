"""Turn dataset samples plus provider features into the tensors a forward pass consumes."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .annotations import unique_image_ids
from .encoders import EncoderProvider
from .errors import MissingFixtureError
from .model import Dataset, PairSample
from .prompts import VocabSelector

logger = logging.getLogger(__name__)


@dataclass
class PairBatch:
    image_ids: List[str]
    visual: torch.Tensor  # [B, n+1, L_v, r_v]
    cls: torch.Tensor  # [B, r]
    boxes: List[torch.Tensor]  # per image [N_b, 4]
    pairs: torch.Tensor  # [P, 3] (image row, i, j)
    labels: torch.Tensor  # [P]
    sample_ids: List[str]
    prompt_layers: Optional[torch.Tensor] = None  # [B, C, n+1, L_t, r_t]
    prompt_eot: Optional[torch.Tensor] = None  # [B, C]

    @property
    def n_pairs(self) -> int:
        return int(self.pairs.shape[0])


class FeatureStore:
    """Caches frozen per-image and per-prompt features as tensors of one dtype.

    Prompt *frozen* features are cached here; their adapter encodings are recomputed on every
    forward pass because the adapter is trainable.
    """

    def __init__(
        self,
        dataset: Dataset,
        provider: EncoderProvider,
        selector: Optional[VocabSelector] = None,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        self.dataset = dataset
        self.provider = provider
        self.selector = selector
        self.dtype = dtype
        self._images: Dict[str, Tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = {}
        self._prompts: Dict[str, Tuple[torch.Tensor, torch.Tensor]] = {}

    def _tensor(self, array: np.ndarray) -> torch.Tensor:
        return torch.tensor(np.asarray(array), dtype=self.dtype)

    def check_available(self, samples: Optional[Sequence[PairSample]] = None) -> None:
        """Raise one MissingFixtureError naming every image or prompt text without features."""

        samples = self.dataset.samples if samples is None else samples
        image_ids = list(unique_image_ids(samples))
        self.provider.require_images(image_ids)
        if self.selector is None:
            return
        self.provider.require_texts(self.selector.candidate_texts())
        texts: List[str] = []
        for image_id in image_ids:
            texts.extend(self.selector.prompt_texts(image_id, self.dataset.taxonomy))
        self.provider.require_texts(texts)

    def image_inputs(self, image_id: str) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        cached = self._images.get(image_id)
        if cached is None:
            features = self.provider.visual_features(image_id)
            record = self.dataset.image(image_id)
            boxes = torch.tensor([box.as_tuple() for box in record.persons], dtype=self.dtype)
            cached = (self._tensor(features.per_layer), self._tensor(features.cls), boxes)
            self._images[image_id] = cached
        return cached

    def prompt_texts(self, image_id: str) -> List[str]:
        if self.selector is None:
            raise MissingFixtureError([image_id], kind="prompt selection")
        return self.selector.prompt_texts(image_id, self.dataset.taxonomy)

    def prompt_inputs(self, image_id: str) -> Tuple[torch.Tensor, torch.Tensor]:
        cached = self._prompts.get(image_id)
        if cached is None:
            layers = []
            eot = []
            for text in self.prompt_texts(image_id):
                features = self.provider.text_features(text)
                layers.append(features.per_layer)
                eot.append(features.eot_position)
            cached = (self._tensor(np.stack(layers)), torch.tensor(eot, dtype=torch.long))
            self._prompts[image_id] = cached
        return cached

    def batch(self, samples: Sequence[PairSample]) -> PairBatch:
        image_ids = list(unique_image_ids(samples))
        row = {image_id: idx for idx, image_id in enumerate(image_ids)}
        visual, cls, boxes = zip(*(self.image_inputs(image_id) for image_id in image_ids))
        pairs = torch.tensor([[row[s.image_id], s.i, s.j] for s in samples], dtype=torch.long)
        labels = torch.tensor([s.label for s in samples], dtype=torch.long)
        batch = PairBatch(
            image_ids=image_ids,
            visual=torch.stack(visual),
            cls=torch.stack(cls),
            boxes=list(boxes),
            pairs=pairs,
            labels=labels,
            sample_ids=[s.sample_id for s in samples],
        )
        if self.selector is not None:
            layers, eot = zip(*(self.prompt_inputs(image_id) for image_id in image_ids))
            batch.prompt_layers = torch.stack(layers)
            batch.prompt_eot = torch.stack(eot)
        return batch
