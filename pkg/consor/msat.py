"""Multi-modal side adapter: a small transformer beside the frozen encoders, fed through sigmoid gates."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, Mapping, Optional, Tuple, Union

import torch
from torch import nn

from .encoders import EncoderConfig
from .errors import ConfigError, ScheduleError, ShapeMismatchError
from .layers import Block, causal_mask

SHARING_MODES = ("shared", "dual", "visual-only", "text-only", "none")
SHARING_ALIASES = {"visual": "visual-only", "text": "text-only"}
CLASSIFIERS = ("prompt", "linear")


def canonical_sharing_mode(mode: str) -> str:
    mode = SHARING_ALIASES.get(mode, mode)
    if mode not in SHARING_MODES:
        raise ConfigError(f"unknown sharing mode {mode!r}; expected one of {', '.join(SHARING_MODES)}")
    return mode


@dataclass(frozen=True)
class AdapterConfig:
    dim: int = 192
    n_layers: int = 4
    num_heads: int = 6
    tau: float = 0.1
    sharing_mode: str = "shared"
    classifier: str = "prompt"

    def __post_init__(self) -> None:
        object.__setattr__(self, "sharing_mode", canonical_sharing_mode(self.sharing_mode))
        if self.classifier not in CLASSIFIERS:
            raise ConfigError(f"unknown classifier {self.classifier!r}; expected prompt or linear")
        if self.tau <= 0:
            raise ConfigError(f"adapter tau must be > 0, got {self.tau}")
        if self.dim < 1 or self.n_layers < 1 or self.num_heads < 1:
            raise ConfigError("adapter dim, n_layers and num_heads must be >= 1")
        if self.dim % self.num_heads:
            raise ConfigError(f"adapter dim {self.dim} not divisible by {self.num_heads} heads")

    @property
    def adapts_visual(self) -> bool:
        return self.sharing_mode in ("shared", "dual", "visual-only")

    @property
    def adapts_text(self) -> bool:
        return self.sharing_mode in ("shared", "dual", "text-only")

    @classmethod
    def miniature(cls, **overrides: Any) -> "AdapterConfig":
        return cls(**{"dim": 24, "num_heads": 6, **overrides})


def gate_value(alpha: Union[float, torch.Tensor], tau: float) -> torch.Tensor:
    """mu = sigmoid(alpha / tau)."""

    if tau <= 0:
        raise ConfigError(f"gate temperature must be > 0, got {tau}")
    if not isinstance(alpha, torch.Tensor):
        alpha = torch.tensor(float(alpha), dtype=torch.float64)
    return torch.sigmoid(alpha / tau)


def fuse(side_state: torch.Tensor, clip_feat: torch.Tensor, mu: Union[float, torch.Tensor]) -> torch.Tensor:
    """Convex blend ``mu * side + (1 - mu) * clip`` of two equally shaped states."""

    if side_state.shape != clip_feat.shape:
        raise ShapeMismatchError(
            f"cannot fuse side state {tuple(side_state.shape)} with frozen feature {tuple(clip_feat.shape)}"
        )
    return mu * side_state + (1 - mu) * clip_feat


Pair = Tuple[int, int]


def _default_clip_layer(k: int, n_layers: int, n_adapter_layers: int) -> int:
    return int(math.floor(k * n_layers / n_adapter_layers + 0.5))


@dataclass(frozen=True)
class FusionSchedule:
    """(frozen layer i -> adapter state j) pairs per modality.

    Adapter state 0 is the embedded input and state j >= 1 the output of block j; fusion at state j
    happens before block j + 1 (or before the output projection for the last state).
    """

    visual_pairs: Tuple[Pair, ...] = ()
    text_pairs: Tuple[Pair, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "visual_pairs", tuple((int(i), int(j)) for i, j in self.visual_pairs))
        object.__setattr__(self, "text_pairs", tuple((int(i), int(j)) for i, j in self.text_pairs))

    @classmethod
    def default(cls, n_layers: int = 12, n_adapter_layers: int = 4) -> "FusionSchedule":
        """{0,3,6,9,12} -> {0..4} visually and {3,6,9,12} -> {1..4} for text, scaled to any depth."""

        visual = [(_default_clip_layer(k, n_layers, n_adapter_layers), k) for k in range(n_adapter_layers + 1)]
        return cls(tuple(visual), tuple(visual[1:]))

    @classmethod
    def empty(cls) -> "FusionSchedule":
        return cls((), ())

    @classmethod
    def from_layers(
        cls,
        visual_layers: Iterable[int],
        n_layers: int,
        n_adapter_layers: int = 4,
        text_layers: Optional[Iterable[int]] = None,
    ) -> "FusionSchedule":
        """Keep only the listed frozen layers of the default schedule (e.g. ``9,12``)."""

        default = cls.default(n_layers, n_adapter_layers)
        v_lookup = dict(default.visual_pairs)
        t_lookup = dict(default.text_pairs)
        visual_layers = sorted(set(int(layer) for layer in visual_layers))
        unknown = [layer for layer in visual_layers if layer not in v_lookup]
        if unknown:
            raise ScheduleError(
                f"fusion layer(s) {unknown} are not fusion points; choose from {sorted(v_lookup)}"
            )
        if text_layers is None:
            text_selected = [layer for layer in visual_layers if layer in t_lookup]
        else:
            text_selected = sorted(set(int(layer) for layer in text_layers))
            bad = [layer for layer in text_selected if layer not in t_lookup]
            if bad:
                raise ScheduleError(f"text fusion layer(s) {bad} are not fusion points; choose from {sorted(t_lookup)}")
        return cls(
            tuple((layer, v_lookup[layer]) for layer in visual_layers),
            tuple((layer, t_lookup[layer]) for layer in text_selected),
        )

    def validate(self, n_layers: int, n_adapter_layers: int) -> None:
        for name, pairs in (("visual", self.visual_pairs), ("text", self.text_pairs)):
            previous = -1
            for clip_layer, adapter_layer in pairs:
                if not 0 <= clip_layer <= n_layers:
                    raise ScheduleError(
                        f"{name} fusion pair ({clip_layer}->{adapter_layer}): frozen layer outside 0..{n_layers}"
                    )
                if not 0 <= adapter_layer <= n_adapter_layers:
                    raise ScheduleError(
                        f"{name} fusion pair ({clip_layer}->{adapter_layer}): adapter state outside 0..{n_adapter_layers}"
                    )
                if adapter_layer <= previous:
                    raise ScheduleError(f"{name} fusion adapter states must be strictly increasing: {list(pairs)}")
                previous = adapter_layer

    def to_mapping(self) -> Dict[str, Any]:
        return {"visual": [list(pair) for pair in self.visual_pairs], "text": [list(pair) for pair in self.text_pairs]}

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "FusionSchedule":
        try:
            return cls(
                tuple(tuple(pair) for pair in data.get("visual", ())),  # type: ignore[misc]
                tuple(tuple(pair) for pair in data.get("text", ())),  # type: ignore[misc]
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"fusion schedule must list [clip_layer, adapter_state] pairs: {exc}") from exc


def _point_key(clip_layer: int, adapter_layer: int) -> str:
    return f"c{clip_layer}_a{adapter_layer}"


class FusionGates(nn.Module):
    """Trainable gate scalars alpha per fusion point (initialised to 0, i.e. mu = 0.5); tau is fixed."""

    def __init__(self, schedule: FusionSchedule, tau: float, visual: bool = True, text: bool = True) -> None:
        super().__init__()
        self.tau = float(tau)
        self.alpha_v = nn.ParameterDict(
            {_point_key(i, j): nn.Parameter(torch.zeros(())) for i, j in schedule.visual_pairs} if visual else {}
        )
        self.alpha_t = nn.ParameterDict(
            {_point_key(i, j): nn.Parameter(torch.zeros(())) for i, j in schedule.text_pairs} if text else {}
        )

    def mu_v(self, key: str) -> torch.Tensor:
        return gate_value(self.alpha_v[key], self.tau)

    def mu_t(self, key: str) -> torch.Tensor:
        return gate_value(self.alpha_t[key], self.tau)


class AdapterCore(nn.Module):
    """The shareable part of the side network: transformer blocks, final norm, output projection."""

    def __init__(self, cfg: AdapterConfig) -> None:
        super().__init__()
        self.blocks = nn.ModuleList([Block(cfg.dim, cfg.num_heads) for _ in range(cfg.n_layers)])
        self.norm = nn.LayerNorm(cfg.dim)
        self.out_proj = nn.Linear(cfg.dim, cfg.dim)

    def project(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.out_proj(self.norm(hidden))


def _frozen_path(in_dim: int, dim: int) -> nn.Sequential:
    return nn.Sequential(nn.LayerNorm(in_dim), nn.Linear(in_dim, dim))


class SideAdapter(nn.Module):
    """Side network over frozen visual/text features.

    Modalities the sharing mode does not adapt take a frozen path instead: the last frozen layer is
    normalised and linearly projected to the adapter width.
    """

    def __init__(self, encoder: EncoderConfig, cfg: AdapterConfig, schedule: FusionSchedule) -> None:
        super().__init__()
        schedule.validate(encoder.n_layers, cfg.n_layers)
        self.encoder = encoder
        self.cfg = cfg
        self.schedule = schedule
        d = cfg.dim

        self.cores = nn.ModuleDict()
        if cfg.sharing_mode == "shared":
            self.cores["shared"] = AdapterCore(cfg)
        else:
            if cfg.adapts_visual:
                self.cores["visual"] = AdapterCore(cfg)
            if cfg.adapts_text:
                self.cores["text"] = AdapterCore(cfg)

        self.gates = FusionGates(schedule, cfg.tau, visual=cfg.adapts_visual, text=cfg.adapts_text)
        if cfg.adapts_visual:
            self.patch_embed = nn.Linear(encoder.vis_hidden, d)
            self.pos_embed = nn.Parameter(torch.zeros(encoder.n_patches, d))
            nn.init.trunc_normal_(self.pos_embed, std=0.02)
            self.clip_proj_v = nn.ModuleDict(
                {_point_key(i, j): nn.Linear(encoder.vis_hidden, d) for i, j in schedule.visual_pairs}
            )
        else:
            self.frozen_v = _frozen_path(encoder.vis_hidden, d)
        if cfg.adapts_text:
            self.text_down_proj = nn.Linear(encoder.txt_hidden, d)
            self.clip_proj_t = nn.ModuleDict(
                {_point_key(i, j): nn.Linear(encoder.txt_hidden, d) for i, j in schedule.text_pairs}
            )
        else:
            self.frozen_t = _frozen_path(encoder.txt_hidden, d)
        self.register_buffer("_text_mask", causal_mask(encoder.max_text_len), persistent=False)

    def core_for(self, modality: str) -> AdapterCore:
        if "shared" in self.cores:
            return self.cores["shared"]  # type: ignore[return-value]
        return self.cores[modality]  # type: ignore[return-value]

    def _run(
        self,
        hidden: torch.Tensor,
        layers: torch.Tensor,
        points: Dict[int, Tuple[int, str]],
        projections: nn.ModuleDict,
        mu: Callable[[str], torch.Tensor],
        core: AdapterCore,
        mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        n_blocks = len(core.blocks)
        for state in range(n_blocks + 1):
            point = points.get(state)
            if point is not None:
                clip_layer, key = point
                hidden = fuse(hidden, projections[key](layers[:, clip_layer]), mu(key))
            if state < n_blocks:
                hidden = core.blocks[state](hidden, mask=mask)
        return core.project(hidden)

    def visual_forward(self, per_layer: torch.Tensor) -> torch.Tensor:
        """``[B, n+1, L_v, r_v]`` frozen layers -> side-network patch states ``[B, L_v, d]``."""

        if per_layer.shape[1:] != (self.encoder.n_layers + 1, self.encoder.n_patches, self.encoder.vis_hidden):
            raise ShapeMismatchError(f"visual layers shaped {tuple(per_layer.shape)} do not match the encoder config")
        if not self.cfg.adapts_visual:
            return self.frozen_v(per_layer[:, -1])
        hidden = self.patch_embed(per_layer[:, 0]) + self.pos_embed
        points = {j: (i, _point_key(i, j)) for i, j in self.schedule.visual_pairs}
        return self._run(hidden, per_layer, points, self.clip_proj_v, self.gates.mu_v, self.core_for("visual"))

    def text_forward(self, per_layer: torch.Tensor, eot_positions: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """``[B, n+1, L_t, r_t]`` frozen layers -> (token states ``[B, L_t, d]``, EOT embeddings ``[B, d]``)."""

        if per_layer.shape[1:] != (self.encoder.n_layers + 1, self.encoder.max_text_len, self.encoder.txt_hidden):
            raise ShapeMismatchError(f"text layers shaped {tuple(per_layer.shape)} do not match the encoder config")
        rows = torch.arange(per_layer.shape[0])
        if not self.cfg.adapts_text:
            states = self.frozen_t(per_layer[:, -1])
            return states, states[rows, eot_positions]
        hidden = self.text_down_proj(per_layer[:, 0])
        points = {j: (i, _point_key(i, j)) for i, j in self.schedule.text_pairs}
        states = self._run(
            hidden, per_layer, points, self.clip_proj_t, self.gates.mu_t, self.core_for("text"), mask=self._text_mask
        )
        return states, states[rows, eot_positions]

    def adapter_block_parameter_count(self) -> int:
        """Unique parameters held by adapter transformer blocks (shared blocks count once)."""

        seen: Dict[int, int] = {}
        for core in self.cores.values():
            for param in core.blocks.parameters():  # type: ignore[union-attr]
                seen[id(param)] = param.numel()
        return sum(seen.values())


def trainable_parameter_count(module: nn.Module) -> int:
    return sum(param.numel() for param in module.parameters() if param.requires_grad)
