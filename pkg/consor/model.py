"""Data structures shared by annotation loading, feature access, training, and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, Iterator, Mapping, Optional, Sequence, Tuple

from .errors import TaxonomyError

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class RelationTaxonomy:
    """Ordered social-relation label space; list position is the logit index."""

    name: str
    classes: Tuple[str, ...]
    provenance: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(self.classes))
        if not self.name:
            raise TaxonomyError("taxonomy name is empty")
        if len(self.classes) < 2:
            raise TaxonomyError(f"taxonomy {self.name!r} needs at least 2 classes, got {len(self.classes)}")
        blanks = [idx for idx, cls in enumerate(self.classes) if not cls or not cls.strip()]
        if blanks:
            raise TaxonomyError(f"taxonomy {self.name!r} has empty class name(s) at {blanks}")
        seen = set()
        dupes = []
        for cls in self.classes:
            if cls in seen:
                dupes.append(cls)
            seen.add(cls)
        if dupes:
            raise TaxonomyError(f"taxonomy {self.name!r} has duplicate classes: {', '.join(dupes)}")

    @property
    def size(self) -> int:
        return len(self.classes)

    def index(self, class_name: str) -> int:
        try:
            return self.classes.index(class_name)
        except ValueError as exc:
            raise TaxonomyError(f"{class_name!r} is not a class of taxonomy {self.name!r}") from exc

    def to_mapping(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"name": self.name, "classes": list(self.classes)}
        if self.provenance:
            payload["provenance"] = self.provenance
        return payload

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "RelationTaxonomy":
        if not isinstance(data, Mapping) or "name" not in data or "classes" not in data:
            raise TaxonomyError("taxonomy config must be an object with 'name' and 'classes'")
        classes = data["classes"]
        if not isinstance(classes, Sequence) or isinstance(classes, str):
            raise TaxonomyError("taxonomy 'classes' must be a list of strings")
        return cls(
            name=str(data["name"]),
            classes=tuple(str(item) for item in classes),
            provenance=str(data.get("provenance", "")),
        )


@dataclass(frozen=True)
class PersonBox:
    """Person bounding box in normalized [0, 1] image coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2

    @property
    def in_range(self) -> bool:
        return all(0.0 <= value <= 1.0 for value in (self.x0, self.y0, self.x1, self.y1))

    @property
    def is_proper(self) -> bool:
        return self.x0 < self.x1 and self.y0 < self.y1

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return self.x0, self.y0, self.x1, self.y1

    @classmethod
    def from_pixels(cls, coords: Sequence[float], width: float, height: float) -> "PersonBox":
        x0, y0, x1, y1 = (float(value) for value in coords)
        return cls(x0 / width, y0 / height, x1 / width, y1 / height)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: int
    height: int
    persons: Tuple[PersonBox, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "persons", tuple(self.persons))

    @property
    def n_persons(self) -> int:
        return len(self.persons)


@dataclass(frozen=True)
class PairSample:
    """One ordered (person i, person j) classification instance."""

    image_id: str
    i: int
    j: int
    label: int

    @property
    def sample_id(self) -> str:
        return f"{self.image_id}:{self.i}-{self.j}"


@dataclass(frozen=True)
class Dataset:
    taxonomy: RelationTaxonomy
    images: Tuple[ImageRecord, ...]
    samples: Tuple[PairSample, ...]
    split: str = "train"

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "samples", tuple(self.samples))

    @cached_property
    def image_index(self) -> Dict[str, ImageRecord]:
        return {image.image_id: image for image in self.images}

    def image(self, image_id: str) -> ImageRecord:
        return self.image_index[image_id]

    def samples_by_image(self) -> Dict[str, Tuple[PairSample, ...]]:
        grouped: Dict[str, list] = {}
        for sample in self.samples:
            grouped.setdefault(sample.image_id, []).append(sample)
        return {key: tuple(value) for key, value in grouped.items()}

    def label_counts(self) -> Tuple[int, ...]:
        counts = [0] * self.taxonomy.size
        for sample in self.samples:
            if 0 <= sample.label < self.taxonomy.size:
                counts[sample.label] += 1
        return tuple(counts)

    def __iter__(self) -> Iterator[PairSample]:
        return iter(self.samples)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class ValidationIssue:
    code: str
    message: str
    image_index: Optional[int] = None
    sample_index: Optional[int] = None

    def describe(self) -> str:
        where = []
        if self.image_index is not None:
            where.append(f"image[{self.image_index}]")
        if self.sample_index is not None:
            where.append(f"sample[{self.sample_index}]")
        prefix = " ".join(where)
        return f"{prefix} {self.code}: {self.message}".strip()


@dataclass(frozen=True)
class ValidationReport:
    """Every violated dataset invariant; empty iff the dataset is valid."""

    issues: Tuple[ValidationIssue, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.issues

    @property
    def codes(self) -> Tuple[str, ...]:
        return tuple(issue.code for issue in self.issues)

    def __len__(self) -> int:
        return len(self.issues)

    def __iter__(self) -> Iterator[ValidationIssue]:
        return iter(self.issues)

    def text(self, limit: int = 10) -> str:
        lines = [issue.describe() for issue in self.issues[:limit]]
        if len(self.issues) > limit:
            lines.append(f"... {len(self.issues) - limit} more")
        return "; ".join(lines)
