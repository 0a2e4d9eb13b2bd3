"""Contextual interpersonal reasoning: person pooling, person-set attention, pair decoding, global fusion."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
from torch import nn
from torch.nn.utils.rnn import pad_sequence
from torchvision.ops import roi_align

from .errors import AttentionNotRetainedError, ConfigError
from .layers import Block, DecoderLayer
from .model import PersonBox

ROI_SIZE = 3


@dataclass(frozen=True)
class CirConfig:
    n_interpersonal: int = 1
    n_context: int = 1
    num_heads: int = 8
    use_interpersonal: bool = True
    use_context: bool = True
    use_global_fusion: bool = True

    def __post_init__(self) -> None:
        if self.n_interpersonal < 0 or self.n_context < 0:
            raise ConfigError("reasoning layer counts must be >= 0")
        if self.num_heads < 1:
            raise ConfigError("reasoning num_heads must be >= 1")

    @property
    def interpersonal_layers(self) -> int:
        return self.n_interpersonal if self.use_interpersonal else 0

    @property
    def context_layers(self) -> int:
        return self.n_context if self.use_context else 0


def _grid_boxes(boxes: torch.Tensor, grid: Tuple[int, int]) -> torch.Tensor:
    """Normalized ``[K, 4]`` boxes -> grid units; sub-cell boxes collapse onto their centre."""

    gh, gw = grid
    scale = boxes.new_tensor([gw, gh, gw, gh])
    scaled = boxes * scale
    area = (scaled[:, 2] - scaled[:, 0]) * (scaled[:, 3] - scaled[:, 1])
    cx = (scaled[:, 0] + scaled[:, 2]) / 2
    cy = (scaled[:, 1] + scaled[:, 3]) / 2
    collapsed = torch.stack([cx, cy, cx, cy], dim=1)
    return torch.where((area < 1.0)[:, None], collapsed, scaled)


def grid_sampling_ratio(grid: Tuple[int, int], roi_size: int = ROI_SIZE) -> int:
    """Smallest per-bin sampling ratio whose samples tile every grid axis at a whole-cell fraction.

    With it the whole-image box pools to exactly the grid mean: 1 on a 3x3 grid, 14 on 14x14.
    """

    span = math.lcm(*grid)
    return span // math.gcd(span, roi_size)


def extract_person_features(
    states: torch.Tensor,
    boxes: torch.Tensor,
    batch_index: torch.Tensor,
    grid: Tuple[int, int],
    roi_size: int = ROI_SIZE,
) -> torch.Tensor:
    """ROI-align a ``roi_size x roi_size`` bilinear sub-grid per box and mean-pool it.

    ``states`` is ``[B, L_v, d]`` in row-major grid order, ``boxes`` ``[K, 4]`` normalized, and
    ``batch_index`` ``[K]`` the image each box belongs to. Returns ``[K, d]``. Each bin averages
    ``grid_sampling_ratio(grid)`` squared bilinear samples.
    """

    B, L, d = states.shape
    gh, gw = grid
    fmap = states.transpose(1, 2).reshape(B, d, gh, gw)
    rois = torch.cat([batch_index.to(states.dtype)[:, None], _grid_boxes(boxes.to(states.dtype), grid)], dim=1)
    pooled = roi_align(
        fmap,
        rois,
        output_size=roi_size,
        spatial_scale=1.0,
        sampling_ratio=grid_sampling_ratio(grid, roi_size),
        aligned=True,
    )
    return pooled.mean(dim=(2, 3))


def extract_person_feature(v_sn: torch.Tensor, box: PersonBox, grid: Tuple[int, int]) -> torch.Tensor:
    """Single-image form: ``[L_v, d]`` states and one box -> ``[d]``."""

    boxes = v_sn.new_tensor([box.as_tuple()])
    return extract_person_features(v_sn[None], boxes, torch.zeros(1, dtype=torch.long), grid)[0]


@dataclass
class CirOutput:
    pair_features: torch.Tensor
    cross_attention: Optional[List[torch.Tensor]] = None  # per decoder layer, [P, heads, 2, L_v]


class ContextualReasoner(nn.Module):
    def __init__(self, cfg: CirConfig, dim: int, joint_dim: int, grid: Tuple[int, int]) -> None:
        super().__init__()
        if dim % cfg.num_heads:
            raise ConfigError(f"reasoning width {dim} not divisible by {cfg.num_heads} heads")
        self.cfg = cfg
        self.grid = tuple(grid)
        self.interpersonal = nn.ModuleList([Block(dim, cfg.num_heads) for _ in range(cfg.interpersonal_layers)])
        self.decoder = nn.ModuleList([DecoderLayer(dim, cfg.num_heads) for _ in range(cfg.context_layers)])
        self.pair_proj = nn.Linear(2 * dim, dim)
        if cfg.use_global_fusion:
            self.clip_cls_proj = nn.Linear(joint_dim, dim)
            self.gate_u = nn.Linear(dim, dim)  # bias is b_g
            self.gate_clip = nn.Linear(dim, dim, bias=False)

    def interpersonal_reason(self, persons: torch.Tensor, padding: Optional[torch.Tensor] = None) -> torch.Tensor:
        """``[B, N, d]`` person tokens -> same shape; no positions, so the set order does not matter."""

        mask = None if padding is None else padding[:, None, None, :]
        for block in self.interpersonal:
            persons = block(persons, mask=mask)
        return persons

    def contextual_decode(
        self, p_i: torch.Tensor, p_j: torch.Tensor, memory: torch.Tensor
    ) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """``[P, d]`` pair tokens against ``[P, L_v, d]`` memory -> (``[P, d]`` pair feature, cross weights)."""

        queries = torch.stack([p_i, p_j], dim=1)
        weights: List[torch.Tensor] = []
        for layer in self.decoder:
            queries, cross = layer(queries, memory)
            weights.append(cross)
        return self.pair_proj(queries.flatten(1)), weights

    def global_context_fuse(self, u_bar: torch.Tensor, clip_cls: torch.Tensor) -> torch.Tensor:
        if not self.cfg.use_global_fusion:
            return u_bar
        g = self.clip_cls_proj(clip_cls)
        z = torch.sigmoid(self.gate_u(u_bar) + self.gate_clip(g))
        return z * u_bar + (1 - z) * g

    def pair_features(
        self,
        persons: torch.Tensor,
        v_sn: torch.Tensor,
        clip_cls: torch.Tensor,
        pairs: Sequence[Tuple[int, int]],
    ) -> torch.Tensor:
        """One image: ``[N, d]`` pooled persons, ``[L_v, d]`` states, ``[r]`` CLS -> ``[len(pairs), d]``."""

        refined = self.interpersonal_reason(persons[None])[0]
        idx_i = torch.tensor([i for i, _ in pairs], dtype=torch.long)
        idx_j = torch.tensor([j for _, j in pairs], dtype=torch.long)
        memory = v_sn[None].expand(len(pairs), -1, -1)
        u_bar, _ = self.contextual_decode(refined[idx_i], refined[idx_j], memory)
        return self.global_context_fuse(u_bar, clip_cls[None].expand(len(pairs), -1))

    def forward(
        self,
        v_sn: torch.Tensor,
        clip_cls: torch.Tensor,
        boxes: Sequence[torch.Tensor],
        pairs: torch.Tensor,
        retain_attention: bool = False,
    ) -> CirOutput:
        """Pair features for a batch of images.

        ``v_sn`` ``[B, L_v, d]``, ``clip_cls`` ``[B, r]``, ``boxes`` one ``[N_b, 4]`` tensor per image
        and ``pairs`` ``[P, 3]`` rows of (image index, i, j).
        """

        counts = [int(b.shape[0]) for b in boxes]
        batch_index = torch.cat([torch.full((n,), b, dtype=torch.long) for b, n in enumerate(counts)])
        pooled = extract_person_features(v_sn, torch.cat(list(boxes)), batch_index, self.grid)
        per_image = list(torch.split(pooled, counts))
        persons = pad_sequence(per_image, batch_first=True)
        padding = None
        if len(set(counts)) > 1:
            n_max = persons.shape[1]
            padding = torch.arange(n_max)[None, :] >= torch.tensor(counts)[:, None]
        refined = self.interpersonal_reason(persons, padding)

        img, i, j = pairs[:, 0], pairs[:, 1], pairs[:, 2]
        u_bar, weights = self.contextual_decode(refined[img, i], refined[img, j], v_sn[img])
        features = self.global_context_fuse(u_bar, clip_cls[img])
        return CirOutput(features, weights if retain_attention else None)


def export_attention_maps(
    output: CirOutput,
    row: int,
    image_id: str,
    pair: Tuple[int, int],
    grid: Tuple[int, int],
) -> Dict[str, Any]:
    """Cross-attention of pair row ``row`` as ``{"image_id", "pair", "grid", "layers"}``.

    ``layers`` holds one entry per decoder layer, each a list of per-head ``[2, L_v]`` maps.
    """

    if not output.cross_attention:
        raise AttentionNotRetainedError("no cross-attention was retained for this forward pass")
    layers = [weights[row].detach().cpu().double().tolist() for weights in output.cross_attention]
    return {"image_id": image_id, "pair": [int(pair[0]), int(pair[1])], "grid": [int(grid[0]), int(grid[1])], "layers": layers}


def write_attention_maps(maps: Dict[str, Any], path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(maps, handle)
        handle.write("\n")
