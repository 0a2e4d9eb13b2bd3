"""Run configuration: one JSON or TOML file of frozen dataclass sections, overridable from flags."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar, Union

from .cir import CirConfig
from .encoders import EncoderConfig
from .errors import ConfigError
from .evaluation import EvalConfig
from .msat import AdapterConfig, FusionSchedule
from .prompts import CORPUS_KINDS, DEFAULT_TOP_K
from .training import TrainConfig

PROVIDERS = ("fixture", "synthetic", "clip")

T = TypeVar("T")


@dataclass(frozen=True)
class PathsConfig:
    annotations: Optional[str] = None
    fixtures: Optional[str] = None
    corpora: Optional[str] = None
    images: Optional[str] = None
    checkpoint: Optional[str] = None


@dataclass(frozen=True)
class PromptConfig:
    kinds: Tuple[str, ...] = CORPUS_KINDS
    top_k: Dict[str, int] = field(default_factory=lambda: dict(DEFAULT_TOP_K))

    def __post_init__(self) -> None:
        object.__setattr__(self, "kinds", tuple(self.kinds))
        unknown = [kind for kind in self.kinds if kind not in CORPUS_KINDS]
        unknown += [kind for kind in self.top_k if kind not in CORPUS_KINDS]
        if unknown:
            raise ConfigError(f"unknown corpus kind(s): {', '.join(unknown)}")
        object.__setattr__(self, "top_k", {**DEFAULT_TOP_K, **{k: int(v) for k, v in self.top_k.items()}})


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    taxonomy: Optional[str] = None
    provider: str = "fixture"
    provider_seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    fusion: Optional[FusionSchedule] = None
    cir: CirConfig = field(default_factory=CirConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)

    def __post_init__(self) -> None:
        if self.provider not in PROVIDERS:
            raise ConfigError(f"unknown provider {self.provider!r}; expected one of {', '.join(PROVIDERS)}")
        self.schedule.validate(self.encoder.n_layers, self.adapter.n_layers)

    @property
    def schedule(self) -> FusionSchedule:
        if self.fusion is not None:
            return self.fusion
        return FusionSchedule.default(self.encoder.n_layers, self.adapter.n_layers)

    @classmethod
    def miniature(cls, **overrides: Any) -> "RunConfig":
        """Desk-scale preset matching toy datasets."""

        base = cls(encoder=EncoderConfig.miniature(), adapter=AdapterConfig.miniature())
        return dataclasses.replace(base, **overrides) if overrides else base

    def replace(self, **changes: Any) -> "RunConfig":
        try:
            return dataclasses.replace(self, **changes)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_mapping(self) -> Dict[str, Any]:
        return {
            "paths": dataclasses.asdict(self.paths),
            "taxonomy": self.taxonomy,
            "provider": self.provider,
            "provider_seed": self.provider_seed,
            "encoder": self.encoder.to_mapping(),
            "adapter": dataclasses.asdict(self.adapter),
            "fusion": self.schedule.to_mapping(),
            "cir": dataclasses.asdict(self.cir),
            "train": self.train.to_mapping(),
            "eval": dataclasses.asdict(self.eval),
            "prompts": {"kinds": list(self.prompts.kinds), "top_k": dict(sorted(self.prompts.top_k.items()))},
        }

    def model_mapping(self) -> Dict[str, Any]:
        """The sections that determine model architecture and initialisation."""

        full = self.to_mapping()
        return {key: full[key] for key in ("encoder", "adapter", "fusion", "cir", "train")}

    def digest(self) -> str:
        canonical = json.dumps(self.to_mapping(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "RunConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("run config must be a table/object at the top level")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        kwargs: Dict[str, Any] = {}
        sections: Dict[str, Type[Any]] = {
            "paths": PathsConfig,
            "encoder": EncoderConfig,
            "adapter": AdapterConfig,
            "cir": CirConfig,
            "train": TrainConfig,
            "eval": EvalConfig,
            "prompts": PromptConfig,
        }
        for name, section_cls in sections.items():
            if name in data:
                kwargs[name] = _section(section_cls, data[name], name)
        if "fusion" in data and data["fusion"] is not None:
            _check_keys(data["fusion"], {"visual", "text"}, "fusion")
            kwargs["fusion"] = FusionSchedule.from_mapping(data["fusion"])
        for name in ("taxonomy", "provider", "provider_seed"):
            if name in data:
                kwargs[name] = data[name]
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        """Read a ``.json`` or ``.toml`` run config; relative paths resolve against its directory."""

        source = Path(path)
        if not source.is_file():
            raise ConfigError(f"config file not found: {source}")
        try:
            if source.suffix.lower() == ".toml":
                with source.open("rb") as handle:
                    data = tomllib.load(handle)
            else:
                data = json.loads(source.read_text(encoding="utf-8"))
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        config = cls.from_mapping(data)
        return config.replace(paths=_resolve_paths(config.paths, source.parent))

    def write(self, path: Union[str, Path]) -> None:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        with target.open("w", encoding="utf-8") as handle:
            json.dump(self.to_mapping(), handle, indent=2, sort_keys=True)
            handle.write("\n")


def _check_keys(data: Any, allowed: set, section: str) -> None:
    if not isinstance(data, Mapping):
        raise ConfigError(f"config section {section!r} must be a table/object")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def _section(section_cls: Type[T], data: Any, section: str) -> T:
    allowed = {f.name for f in dataclasses.fields(section_cls)}  # type: ignore[arg-type]
    _check_keys(data, allowed, section)
    values = dict(data)
    for key in ("patch_grid", "class_weights", "kinds"):
        if key in values and isinstance(values[key], list):
            values[key] = tuple(values[key])
    try:
        return section_cls(**values)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[{section}] {exc}") from exc


def _resolve_paths(paths: PathsConfig, base: Path) -> PathsConfig:
    resolved = {}
    for item in dataclasses.fields(paths):
        value = getattr(paths, item.name)
        if value is not None and not Path(value).is_absolute():
            value = str(base / value)
        resolved[item.name] = value
    return PathsConfig(**resolved)
