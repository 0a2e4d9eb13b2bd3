"""Frozen dual-encoder feature providers.

Two interchangeable implementations sit behind :class:`EncoderProvider`:

* :class:`FixtureProvider` serves feature packs laid out as ``<root>/<image_id>.fpk`` and
  ``<root>/text/<sha256(text)>.fpk`` (or an in-memory mapping of packs).
* :class:`SyntheticProvider` derives deterministic pseudo-encoder features from ``(seed, id)`` so
  the whole pipeline runs without pretrained weights.

Every array handed out is read-only; providers never change their answers between calls.
"""

from __future__ import annotations

import hashlib
import logging
import re
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, MissingFixtureError, PromptError, ShapeMismatchError, ZeroNormError
from .featurepack import FeaturePack, read_feature_pack, txt_layer_tag, vis_layer_tag, write_feature_pack

logger = logging.getLogger(__name__)

SOT_TOKEN = "<sot>"
EOT_TOKEN = "<eot>"
PAD_TOKEN = "<pad>"
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


@dataclass(frozen=True)
class EncoderConfig:
    """Frozen-encoder geometry; defaults follow CLIP ViT-B/16."""

    n_layers: int = 12
    vis_hidden: int = 768
    txt_hidden: int = 512
    joint_dim: int = 512
    patch_grid: Tuple[int, int] = (14, 14)
    max_text_len: int = 77
    image_size: int = 224

    def __post_init__(self) -> None:
        object.__setattr__(self, "patch_grid", tuple(int(v) for v in self.patch_grid))
        if self.n_layers < 1:
            raise ConfigError(f"encoder n_layers must be >= 1, got {self.n_layers}")
        if len(self.patch_grid) != 2 or min(self.patch_grid) < 1:
            raise ConfigError(f"encoder patch_grid must be two dims >= 1, got {self.patch_grid}")
        for name in ("vis_hidden", "txt_hidden", "joint_dim", "image_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"encoder {name} must be >= 1")
        if self.max_text_len < 2:
            raise ConfigError("encoder max_text_len must leave room for start and end tokens")

    @property
    def n_patches(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]

    @classmethod
    def miniature(cls) -> "EncoderConfig":
        """Desk-scale geometry used by the toy pipeline and the test suite."""

        return cls(
            n_layers=4,
            vis_hidden=24,
            txt_hidden=16,
            joint_dim=16,
            patch_grid=(3, 3),
            max_text_len=77,
            image_size=48,
        )

    def to_mapping(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["patch_grid"] = list(self.patch_grid)
        return payload


@dataclass(frozen=True)
class VisualFeatures:
    """Per-layer patch features ``[n_layers + 1, L_v, r_v]`` and the joint-projected CLS ``[r]``."""

    per_layer: np.ndarray
    cls: np.ndarray

    @property
    def n_layers(self) -> int:
        return self.per_layer.shape[0] - 1


@dataclass(frozen=True)
class TextFeatures:
    """Per-layer token features ``[n_layers + 1, L_t, r_t]``; ``eot`` is joint-projected."""

    per_layer: np.ndarray
    eot: np.ndarray
    token_count: int
    truncated: bool = False

    @property
    def eot_position(self) -> int:
        return self.token_count - 1


def tokenize(text: str) -> List[str]:
    """Lower-cased word/punctuation split; prompts are otherwise used verbatim."""

    return [token.lower() for token in _TOKEN_RE.findall(text)]


def frame_tokens(text: str, max_len: int) -> Tuple[List[str], bool]:
    """Wrap tokens in start/end markers, truncating at ``max_len`` while keeping the end marker."""

    if not text or not text.strip():
        raise PromptError("text is empty")
    tokens = [SOT_TOKEN, *tokenize(text), EOT_TOKEN]
    truncated = len(tokens) > max_len
    if truncated:
        logger.warning(
            "text of %d tokens truncated to %d (end token kept): %.60s...", len(tokens), max_len, text
        )
        tokens = tokens[: max_len - 1] + [EOT_TOKEN]
    return tokens, truncated


def text_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def unit(vector: np.ndarray, *, what: str = "vector") -> np.ndarray:
    vector = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(vector))
    if norm == 0.0 or not np.isfinite(norm):
        raise ZeroNormError(f"{what} has zero or non-finite norm")
    return vector / norm


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float32, copy=True)
    array.setflags(write=False)
    return array


class EncoderProvider(ABC):
    """Uniform read-only access to frozen encoder features."""

    config: EncoderConfig

    @abstractmethod
    def visual_features(self, image_id: str) -> VisualFeatures:
        ...

    @abstractmethod
    def text_features(self, text: str) -> TextFeatures:
        ...

    def joint_embed_image(self, image_id: str) -> np.ndarray:
        return unit(self.visual_features(image_id).cls, what=f"image {image_id!r} embedding")

    def joint_embed_text(self, text: str) -> np.ndarray:
        return unit(self.text_features(text).eot, what="text embedding")

    def joint_embed(self, image_id: Optional[str] = None, text: Optional[str] = None) -> np.ndarray:
        """Unit-norm joint-space embedding of exactly one image or one text."""

        if (image_id is None) == (text is None):
            raise ValueError("joint_embed takes exactly one of image_id or text")
        if image_id is not None:
            return self.joint_embed_image(image_id)
        assert text is not None
        return self.joint_embed_text(text)

    def missing_images(self, image_ids: Iterable[str]) -> List[str]:
        return []

    def missing_texts(self, texts: Iterable[str]) -> List[str]:
        return []

    def require_images(self, image_ids: Iterable[str]) -> None:
        missing = self.missing_images(image_ids)
        if missing:
            raise MissingFixtureError(missing, kind="image")

    def require_texts(self, texts: Iterable[str]) -> None:
        missing = self.missing_texts(texts)
        if missing:
            raise MissingFixtureError(missing, kind="text")


def visual_pack(image_id: str, features: VisualFeatures, joint: Optional[np.ndarray] = None) -> FeaturePack:
    entries: Dict[str, np.ndarray] = {
        vis_layer_tag(index): layer for index, layer in enumerate(features.per_layer)
    }
    entries["vis.cls"] = features.cls
    if joint is not None:
        entries["joint"] = joint
    return FeaturePack(image_id, entries, {"kind": "image"})


def text_pack(text: str, features: TextFeatures, joint: Optional[np.ndarray] = None) -> FeaturePack:
    entries: Dict[str, np.ndarray] = {
        txt_layer_tag(index): layer for index, layer in enumerate(features.per_layer)
    }
    entries["txt.eot"] = features.eot
    if joint is not None:
        entries["joint"] = joint
    attrs = {
        "kind": "text",
        "text": text,
        "token_count": features.token_count,
        "truncated": features.truncated,
    }
    return FeaturePack(text_key(text), entries, attrs)


def image_fixture_path(root: Union[str, Path], image_id: str) -> Path:
    return Path(root) / f"{image_id}.fpk"


def text_fixture_path(root: Union[str, Path], text: str) -> Path:
    return Path(root) / "text" / f"{text_key(text)}.fpk"


class FixtureProvider(EncoderProvider):
    """Serves precomputed feature packs from a fixture directory or an in-memory mapping."""

    def __init__(
        self,
        config: EncoderConfig,
        root: Optional[Union[str, Path]] = None,
        packs: Optional[Mapping[str, FeaturePack]] = None,
    ) -> None:
        if root is None and packs is None:
            raise ConfigError("fixture provider needs a fixture directory or in-memory packs")
        self.config = config
        self.root = Path(root) if root is not None else None
        self._packs: Dict[str, FeaturePack] = dict(packs or {})
        self._visual: Dict[str, VisualFeatures] = {}
        self._text: Dict[str, TextFeatures] = {}
        self._joint: Dict[str, np.ndarray] = {}

    @classmethod
    def from_packs(
        cls,
        config: EncoderConfig,
        image_packs: Mapping[str, FeaturePack],
        text_packs: Mapping[str, FeaturePack],
        root: Optional[Union[str, Path]] = None,
    ) -> "FixtureProvider":
        """In-memory fixtures: image packs keyed by image id, text packs keyed by their text."""

        packs = {f"image:{image_id}": pack for image_id, pack in image_packs.items()}
        packs.update({f"text:{text_key(text)}": pack for text, pack in text_packs.items()})
        return cls(config, root=root, packs=packs)

    def _image_key(self, image_id: str) -> str:
        return f"image:{image_id}"

    def _text_key(self, text: str) -> str:
        return f"text:{text_key(text)}"

    def _load(self, key: str, path: Optional[Path], ident: str, kind: str) -> FeaturePack:
        pack = self._packs.get(key)
        if pack is not None:
            return pack
        if path is None or not path.is_file():
            raise MissingFixtureError([ident], kind=kind)
        pack = read_feature_pack(path)
        self._packs[key] = pack
        return pack

    def _image_pack(self, image_id: str) -> FeaturePack:
        path = image_fixture_path(self.root, image_id) if self.root is not None else None
        return self._load(self._image_key(image_id), path, image_id, "image")

    def _text_pack(self, text: str) -> FeaturePack:
        path = text_fixture_path(self.root, text) if self.root is not None else None
        return self._load(self._text_key(text), path, text, "text")

    def has_image(self, image_id: str) -> bool:
        if self._image_key(image_id) in self._packs:
            return True
        return self.root is not None and image_fixture_path(self.root, image_id).is_file()

    def has_text(self, text: str) -> bool:
        if self._text_key(text) in self._packs:
            return True
        return self.root is not None and text_fixture_path(self.root, text).is_file()

    def missing_images(self, image_ids: Iterable[str]) -> List[str]:
        return sorted({image_id for image_id in image_ids if not self.has_image(image_id)})

    def missing_texts(self, texts: Iterable[str]) -> List[str]:
        return sorted({text for text in texts if not self.has_text(text)})

    def visual_features(self, image_id: str) -> VisualFeatures:
        cached = self._visual.get(image_id)
        if cached is not None:
            return cached
        pack = self._image_pack(image_id)
        cfg = self.config
        per_layer = pack.layer_stack("vis")
        expected = (cfg.n_layers + 1, cfg.n_patches, cfg.vis_hidden)
        if per_layer.shape != expected:
            raise ShapeMismatchError(
                f"image {image_id!r}: visual layers shaped {per_layer.shape}, encoder config expects {expected}"
            )
        cls = pack["vis.cls"]
        if cls.shape != (cfg.joint_dim,):
            raise ShapeMismatchError(f"image {image_id!r}: cls shaped {cls.shape}, expected ({cfg.joint_dim},)")
        features = VisualFeatures(_frozen(per_layer), _frozen(cls))
        self._visual[image_id] = features
        return features

    def text_features(self, text: str) -> TextFeatures:
        if not text or not text.strip():
            raise PromptError("text is empty")
        cached = self._text.get(text)
        if cached is not None:
            return cached
        pack = self._text_pack(text)
        cfg = self.config
        per_layer = pack.layer_stack("txt")
        expected = (cfg.n_layers + 1, cfg.max_text_len, cfg.txt_hidden)
        if per_layer.shape != expected:
            raise ShapeMismatchError(
                f"text fixture {text_key(text)[:12]}: layers shaped {per_layer.shape}, expected {expected}"
            )
        token_count = int(pack.attrs.get("token_count", 0))
        if not 2 <= token_count <= cfg.max_text_len:
            raise ShapeMismatchError(f"text fixture {text_key(text)[:12]}: token_count {token_count} out of range")
        truncated = bool(pack.attrs.get("truncated", False))
        if truncated:
            logger.warning("text fixture %s was truncated to %d tokens", text_key(text)[:12], token_count)
        features = TextFeatures(_frozen(per_layer), _frozen(pack["txt.eot"]), token_count, truncated)
        self._text[text] = features
        return features

    def joint_embed_image(self, image_id: str) -> np.ndarray:
        pack = self._image_pack(image_id)
        if "joint" in pack:
            return unit(pack["joint"], what=f"image {image_id!r} embedding")
        return super().joint_embed_image(image_id)

    def joint_embed_text(self, text: str) -> np.ndarray:
        pack = self._text_pack(text)
        if "joint" in pack:
            return unit(pack["joint"], what="text embedding")
        return super().joint_embed_text(text)


def _stable_int(value: str) -> int:
    return int.from_bytes(hashlib.sha256(value.encode("utf-8")).digest()[:8], "little")


class SyntheticProvider(EncoderProvider):
    """Deterministic pseudo-encoder: a pure function of ``(seed, config, id)``.

    Visual layer 0 is seeded noise per image; each later layer adds ``tanh(h @ W_l)``. Text layer 0 is
    hashed word embeddings plus position embeddings; later layers add a causal running-mean update so
    every token only sees its prefix. Joint vectors can be planted to script zero-shot rankings.
    """

    def __init__(self, config: EncoderConfig, seed: int = 0) -> None:
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng([self.seed, 0xC0])
        self._w_vis = rng.normal(0.0, 1.0 / np.sqrt(config.vis_hidden), (config.n_layers, config.vis_hidden, config.vis_hidden))
        self._w_txt = rng.normal(0.0, 1.0 / np.sqrt(config.txt_hidden), (config.n_layers, config.txt_hidden, config.txt_hidden))
        self._proj_v = rng.normal(0.0, 1.0 / np.sqrt(config.vis_hidden), (config.vis_hidden, config.joint_dim))
        self._proj_t = rng.normal(0.0, 1.0 / np.sqrt(config.txt_hidden), (config.txt_hidden, config.joint_dim))
        self._pos_t = rng.normal(0.0, 0.1, (config.max_text_len, config.txt_hidden))
        self._visual: Dict[str, VisualFeatures] = {}
        self._text: Dict[str, TextFeatures] = {}
        self._planted_images: Dict[str, np.ndarray] = {}
        self._planted_texts: Dict[str, np.ndarray] = {}

    def plant_image(self, image_id: str, vector: Sequence[float]) -> None:
        self._planted_images[image_id] = unit(np.asarray(vector), what="planted image vector")

    def plant_text(self, text: str, vector: Sequence[float]) -> None:
        self._planted_texts[text] = unit(np.asarray(vector), what="planted text vector")

    def _word_embedding(self, token: str) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0x70, _stable_int(token)])
        return rng.normal(0.0, 1.0, self.config.txt_hidden)

    def visual_features(self, image_id: str) -> VisualFeatures:
        cached = self._visual.get(image_id)
        if cached is not None:
            return cached
        cfg = self.config
        rng = np.random.default_rng([self.seed, 0x1A, _stable_int(image_id)])
        hidden = rng.normal(0.0, 1.0, (cfg.n_patches, cfg.vis_hidden))
        layers = [hidden]
        for weight in self._w_vis:
            hidden = hidden + np.tanh(hidden @ weight)
            layers.append(hidden)
        cls = hidden.mean(axis=0) @ self._proj_v
        features = VisualFeatures(_frozen(np.stack(layers)), _frozen(cls))
        self._visual[image_id] = features
        return features

    def text_features(self, text: str) -> TextFeatures:
        cached = self._text.get(text)
        if cached is not None:
            return cached
        cfg = self.config
        tokens, truncated = frame_tokens(text, cfg.max_text_len)
        padded = tokens + [PAD_TOKEN] * (cfg.max_text_len - len(tokens))
        hidden = np.stack([self._word_embedding(token) for token in padded]) + self._pos_t
        counts = np.arange(1, cfg.max_text_len + 1)[:, None]
        layers = [hidden]
        for weight in self._w_txt:
            prefix_mean = np.cumsum(hidden, axis=0) / counts
            hidden = hidden + np.tanh(prefix_mean @ weight)
            layers.append(hidden)
        eot = hidden[len(tokens) - 1] @ self._proj_t
        features = TextFeatures(_frozen(np.stack(layers)), _frozen(eot), len(tokens), truncated)
        self._text[text] = features
        return features

    def joint_embed_image(self, image_id: str) -> np.ndarray:
        planted = self._planted_images.get(image_id)
        if planted is not None:
            return planted.copy()
        return super().joint_embed_image(image_id)

    def joint_embed_text(self, text: str) -> np.ndarray:
        planted = self._planted_texts.get(text)
        if planted is not None:
            return planted.copy()
        return super().joint_embed_text(text)


def export_fixtures(
    provider: EncoderProvider,
    root: Union[str, Path],
    image_ids: Iterable[str] = (),
    texts: Iterable[str] = (),
) -> Tuple[int, int]:
    """Write provider features as fixture packs; returns (images written, texts written)."""

    n_images = 0
    for image_id in image_ids:
        features = provider.visual_features(image_id)
        write_feature_pack(
            visual_pack(image_id, features, provider.joint_embed_image(image_id)),
            image_fixture_path(root, image_id),
        )
        n_images += 1
    n_texts = 0
    for text in dict.fromkeys(texts):
        features = provider.text_features(text)
        write_feature_pack(
            text_pack(text, features, provider.joint_embed_text(text)), text_fixture_path(root, text)
        )
        n_texts += 1
    return n_images, n_texts
