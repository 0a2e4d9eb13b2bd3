"""The full recognizer: side adapter, interpersonal reasoning, and the classification head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import torch
from torch import nn

from .cir import CirConfig, CirOutput, ContextualReasoner
from .encoders import EncoderConfig
from .errors import ConfigError
from .features import PairBatch
from .head import classify_logits
from .msat import AdapterConfig, FusionSchedule, SideAdapter


@dataclass
class ModelOutput:
    logits: torch.Tensor  # [P, C]
    pair_features: torch.Tensor  # [P, d]
    prompt_embeds: Optional[torch.Tensor]  # [B, C, d]
    cross_attention: Optional[List[torch.Tensor]]


class ConsorModel(nn.Module):
    def __init__(
        self,
        encoder: EncoderConfig,
        adapter: AdapterConfig,
        schedule: FusionSchedule,
        cir: CirConfig,
        n_classes: int,
        logit_scale: float = 1.0,
    ) -> None:
        super().__init__()
        if logit_scale <= 0:
            raise ConfigError(f"logit_scale must be > 0, got {logit_scale}")
        self.encoder_config = encoder
        self.adapter_config = adapter
        self.n_classes = n_classes
        self.logit_scale = float(logit_scale)
        self.adapter = SideAdapter(encoder, adapter, schedule)
        self.reasoner = ContextualReasoner(cir, adapter.dim, encoder.joint_dim, encoder.patch_grid)
        self.classifier: Optional[nn.Linear] = None
        if adapter.classifier == "linear":
            self.classifier = nn.Linear(adapter.dim, n_classes)

    @property
    def uses_prompts(self) -> bool:
        return self.classifier is None

    def encode_prompts(self, batch: PairBatch) -> torch.Tensor:
        if batch.prompt_layers is None or batch.prompt_eot is None:
            raise ConfigError("prompt classifier needs prompt features in the batch")
        B, C = batch.prompt_eot.shape
        _, eot = self.adapter.text_forward(batch.prompt_layers.flatten(0, 1), batch.prompt_eot.flatten())
        return eot.view(B, C, -1)

    def forward(self, batch: PairBatch, retain_attention: bool = False) -> ModelOutput:
        v_sn = self.adapter.visual_forward(batch.visual)
        cir_out: CirOutput = self.reasoner(v_sn, batch.cls, batch.boxes, batch.pairs, retain_attention)
        features = cir_out.pair_features
        if self.classifier is not None:
            return ModelOutput(self.classifier(features), features, None, cir_out.cross_attention)
        prompts = self.encode_prompts(batch)
        logits = classify_logits(features, prompts[batch.pairs[:, 0]], self.logit_scale)
        return ModelOutput(logits, features, prompts, cir_out.cross_attention)


def build_model(
    encoder: EncoderConfig,
    adapter: AdapterConfig,
    schedule: FusionSchedule,
    cir: CirConfig,
    n_classes: int,
    logit_scale: float = 1.0,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> ConsorModel:
    """Seeded construction: the same arguments always give the same initial weights."""

    generator_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = ConsorModel(encoder, adapter, schedule, cir, n_classes, logit_scale)
    finally:
        torch.random.set_rng_state(generator_state)
    return model.to(dtype)
