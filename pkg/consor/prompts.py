"""Descriptive social prompts: corpora, zero-shot visual-vocab selection, and prompt assembly."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .encoders import EncoderProvider
from .errors import PromptError
from .model import RelationTaxonomy

logger = logging.getLogger(__name__)

CORPUS_KINDS = ("scene_category", "scene_attribute", "object_category", "emotion")
DEFAULT_SIZES = {"scene_category": 365, "scene_attribute": 94, "object_category": 1000, "emotion": 24}
DEFAULT_TOP_K = {"scene_category": 5, "scene_attribute": 5, "object_category": 5, "emotion": 1}

# Single-vocab templates used for zero-shot selection.
VOCAB_TEMPLATES = {
    "scene_category": "The photo is taken in {v}.",
    "scene_attribute": "The scene attribute of the image is {v}.",
    "object_category": "There are {v} in the photo.",
    "emotion": "The emotion in this photo is {v}.",
}
# Multi-vocab sentences of the assembled social prompt (wording kept as published).
SUFFIX_TEMPLATES = {
    "scene_category": "The photo is taken in {v}.",
    "scene_attribute": "This scene attribute of the image are {v}.",
    "object_category": "There are {v} in the photo.",
    "emotion": "This emotion in this photo is {v}.",
}
CLASS_TEMPLATE = "In this photo, the social relation of this person pair is {r}."


def _check_kind(kind: str) -> None:
    if kind not in CORPUS_KINDS:
        raise PromptError(f"unknown corpus kind {kind!r}; expected one of {', '.join(CORPUS_KINDS)}")


@dataclass(frozen=True)
class Corpus:
    kind: str
    vocabs: Tuple[str, ...]
    top_k: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "vocabs", tuple(self.vocabs))
        _check_kind(self.kind)
        if self.top_k < 1:
            raise PromptError(f"{self.kind}: top_k must be >= 1, got {self.top_k}")
        if len(self.vocabs) < self.top_k:
            raise PromptError(f"{self.kind}: corpus has {len(self.vocabs)} vocab(s), top_k is {self.top_k}")
        if any(not vocab for vocab in self.vocabs):
            raise PromptError(f"{self.kind}: corpus contains an empty vocab")

    @property
    def digest(self) -> str:
        hasher = hashlib.sha256(self.kind.encode("utf-8"))
        for vocab in self.vocabs:
            hasher.update(b"\n" + vocab.encode("utf-8"))
        return hasher.hexdigest()

    def rendered(self) -> List[str]:
        return [render_vocab_prompt(self.kind, vocab) for vocab in self.vocabs]


def corpora_digest(corpora: Sequence[Corpus]) -> str:
    hasher = hashlib.sha256()
    for corpus in corpora:
        hasher.update(f"{corpus.digest}:{corpus.top_k};".encode("ascii"))
    return hasher.hexdigest()


def render_vocab_prompt(kind: str, vocab: str) -> str:
    _check_kind(kind)
    if not vocab:
        raise PromptError(f"{kind}: empty vocab")
    return VOCAB_TEMPLATES[kind].format(v=vocab)


def class_sentence(relation: str) -> str:
    return CLASS_TEMPLATE.format(r=relation)


def parse_corpus_lines(lines: Iterable[str]) -> List[str]:
    vocabs: List[str] = []
    for raw in lines:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        vocabs.append(line)
    return vocabs


# Corpora shipped as package data; object categories come from torchvision's weight metadata.
BUNDLED_FILES = {
    "scene_category": "scene_category.txt",
    "scene_attribute": "scene_attribute.txt",
    "emotion": "emotion_category.txt",
}


def _warn_cardinality(kind: str, size: int) -> None:
    expected = DEFAULT_SIZES[kind]
    if size != expected:
        logger.warning("bundled %s corpus has %d vocabs, expected %d", kind, size, expected)


def imagenet_object_vocabs() -> List[str]:
    """ImageNet-1k category names as shipped in torchvision's weight metadata (no download)."""

    from torchvision.models import ResNet50_Weights

    return list(ResNet50_Weights.IMAGENET1K_V2.meta["categories"])


def bundled_vocabs(kind: str) -> List[str]:
    """Default vocab list for ``kind``: Places365 scenes and attributes, ImageNet objects, Plutchik emotions."""

    _check_kind(kind)
    if kind == "object_category":
        vocabs = imagenet_object_vocabs()
    else:
        text = resources.files("consor").joinpath("data", "corpora", BUNDLED_FILES[kind]).read_text(encoding="utf-8")
        vocabs = parse_corpus_lines(text.splitlines())
    _warn_cardinality(kind, len(vocabs))
    return vocabs


def load_corpus(path: Union[str, Path], kind: str, top_k: Optional[int] = None) -> Corpus:
    _check_kind(kind)
    with open(path, encoding="utf-8") as handle:
        vocabs = parse_corpus_lines(handle)
    return Corpus(kind, tuple(vocabs), top_k if top_k is not None else DEFAULT_TOP_K[kind])


def load_corpora(
    directory: Optional[Union[str, Path]],
    kinds: Sequence[str] = CORPUS_KINDS,
    top_k: Optional[Mapping[str, int]] = None,
) -> List[Corpus]:
    """Load ``<directory>/<kind>.txt`` per kind; kinds without a file fall back to the bundled lists."""

    unknown = [kind for kind in kinds if kind not in CORPUS_KINDS]
    if unknown:
        raise PromptError(f"unknown corpus kind(s): {', '.join(unknown)}")
    top_k = {**DEFAULT_TOP_K, **dict(top_k or {})}
    corpora: List[Corpus] = []
    for kind in CORPUS_KINDS:
        if kind not in kinds:
            continue
        path = Path(directory) / f"{kind}.txt" if directory is not None else None
        if path is not None and path.is_file():
            corpora.append(load_corpus(path, kind, top_k[kind]))
        else:
            logger.info("%s: using the bundled corpus", kind)
            corpora.append(Corpus(kind, tuple(bundled_vocabs(kind)), top_k[kind]))
    return corpora


@dataclass(frozen=True)
class VisualVocabSelection:
    """Per-corpus ranked (vocab, cosine) lists for one image, in corpus-kind order."""

    image_id: str
    ranked: Dict[str, Tuple[Tuple[str, float], ...]] = field(default_factory=dict)
    top_k: Dict[str, int] = field(default_factory=dict)

    def vocabs(self, kind: str) -> Tuple[str, ...]:
        return tuple(vocab for vocab, _ in self.ranked.get(kind, ()))

    def scores(self, kind: str) -> Tuple[float, ...]:
        return tuple(score for _, score in self.ranked.get(kind, ()))

    def to_mapping(self) -> Dict[str, Any]:
        return {
            "image_id": self.image_id,
            "corpora": {
                kind: {
                    "top_k": self.top_k.get(kind, len(items)),
                    "ranked": [{"vocab": vocab, "score": score} for vocab, score in items],
                }
                for kind, items in self.ranked.items()
            },
        }

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "VisualVocabSelection":
        ranked: Dict[str, Tuple[Tuple[str, float], ...]] = {}
        top_k: Dict[str, int] = {}
        for kind, body in data.get("corpora", {}).items():
            _check_kind(kind)
            ranked[kind] = tuple((str(item["vocab"]), float(item["score"])) for item in body["ranked"])
            top_k[kind] = int(body.get("top_k", len(ranked[kind])))
        return cls(str(data["image_id"]), ranked, top_k)


@dataclass(frozen=True)
class SocialPrompt:
    relation: str
    text: str


def select_visual_vocabs(
    image_id: str, corpora: Sequence[Corpus], provider: EncoderProvider
) -> VisualVocabSelection:
    """Rank each corpus by cosine against the image embedding; ties keep corpus order."""

    image_vec = provider.joint_embed_image(image_id)
    ranked: Dict[str, Tuple[Tuple[str, float], ...]] = {}
    top_k: Dict[str, int] = {}
    for corpus in corpora:
        text_vecs = np.stack([provider.joint_embed_text(text) for text in corpus.rendered()])
        scores = text_vecs @ image_vec
        order = np.argsort(-scores, kind="stable")[: corpus.top_k]
        ranked[corpus.kind] = tuple((corpus.vocabs[idx], float(scores[idx])) for idx in order)
        top_k[corpus.kind] = corpus.top_k
    return VisualVocabSelection(image_id, ranked, top_k)


def format_vocab_sentences(selection: VisualVocabSelection) -> str:
    """Shared prompt suffix: one sentence per corpus kind, vocabs comma-joined inside it."""

    sentences = []
    for kind in CORPUS_KINDS:
        if kind not in selection.ranked:
            continue
        sentences.append(SUFFIX_TEMPLATES[kind].format(v=", ".join(selection.vocabs(kind))))
    return " ".join(sentences)


def assemble_social_prompts(
    selection: VisualVocabSelection, taxonomy: RelationTaxonomy
) -> List[SocialPrompt]:
    for kind, items in selection.ranked.items():
        expected = selection.top_k.get(kind, DEFAULT_TOP_K.get(kind, 0))
        if len(items) != expected:
            raise PromptError(
                f"image {selection.image_id!r}: {kind} selection has {len(items)} vocab(s), expected {expected}"
            )
    suffix = format_vocab_sentences(selection)
    prompts = []
    for relation in taxonomy.classes:
        text = class_sentence(relation)
        if suffix:
            text = f"{text} {suffix}"
        prompts.append(SocialPrompt(relation, text))
    return prompts


def class_name_prompts(taxonomy: RelationTaxonomy) -> List[str]:
    """Class sentences alone; the zero-shot evaluation contrasts images against these."""

    return [class_sentence(relation) for relation in taxonomy.classes]


class VocabSelector:
    """Selection cache keyed by (image_id, corpora digest); selections never change under frozen encoders."""

    def __init__(self, corpora: Sequence[Corpus], provider: EncoderProvider) -> None:
        self.corpora = list(corpora)
        self.provider = provider
        self.digest = corpora_digest(self.corpora)
        self._cache: Dict[Tuple[str, str], VisualVocabSelection] = {}

    def select(self, image_id: str) -> VisualVocabSelection:
        key = (image_id, self.digest)
        selection = self._cache.get(key)
        if selection is None:
            selection = select_visual_vocabs(image_id, self.corpora, self.provider)
            self._cache[key] = selection
        return selection

    def prompts(self, image_id: str, taxonomy: RelationTaxonomy) -> List[SocialPrompt]:
        return assemble_social_prompts(self.select(image_id), taxonomy)

    def prompt_texts(self, image_id: str, taxonomy: RelationTaxonomy) -> List[str]:
        return [prompt.text for prompt in self.prompts(image_id, taxonomy)]

    def candidate_texts(self) -> List[str]:
        """Every rendered single-vocab prompt the selector may embed."""

        texts: List[str] = []
        for corpus in self.corpora:
            texts.extend(corpus.rendered())
        return texts


def write_vocab_report(selection: VisualVocabSelection, path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(selection.to_mapping(), handle, indent=2)
        handle.write("\n")


def read_vocab_report(path: Union[str, Path]) -> VisualVocabSelection:
    with open(path, encoding="utf-8") as handle:
        return VisualVocabSelection.from_mapping(json.load(handle))


def write_prompt_file(prompts: Sequence[SocialPrompt], path: Union[str, Path]) -> None:
    """One ``relation<TAB>prompt`` line per class, in taxonomy order."""

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for prompt in prompts:
            handle.write(f"{prompt.relation}\t{prompt.text}\n")
