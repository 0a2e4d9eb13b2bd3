"""Annotation reader for the canonical social-relation JSON schema, plus dataset validation."""

from __future__ import annotations

import json
import logging
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Tuple, Union

from .errors import AnnotationError, TaxonomyError
from .model import (
    SPLITS,
    Dataset,
    ImageRecord,
    PairSample,
    PersonBox,
    RelationTaxonomy,
    ValidationIssue,
    ValidationReport,
)

logger = logging.getLogger(__name__)

BUILTIN_TAXONOMIES = ("pisc-coarse", "pisc-fine", "pipa-coarse", "pipa-fine")

TOP_LEVEL_KEYS = {"taxonomy", "images", "samples", "coords", "split"}
IMAGE_KEYS = {"id", "width", "height", "persons"}
SAMPLE_KEYS = {"image", "i", "j", "label"}
# Field spellings seen in PISC/PIPA conversions that map onto the canonical schema.
IMAGE_ALIASES = {"image_id": "id", "imgid": "id", "w": "width", "h": "height", "bboxes": "persons", "boxes": "persons"}
SAMPLE_ALIASES = {"image_id": "image", "p1": "i", "p2": "j", "person_i": "i", "person_j": "j", "relation": "label"}


def builtin_taxonomy(name: str) -> RelationTaxonomy:
    """Return one of the shipped PISC/PIPA taxonomies by name."""

    key = (name or "").strip().lower()
    if key not in BUILTIN_TAXONOMIES:
        raise TaxonomyError(
            f"unknown taxonomy {name!r}; valid options: {', '.join(BUILTIN_TAXONOMIES)}"
        )
    text = resources.files("consor").joinpath("data", "taxonomies", f"{key}.json").read_text(
        encoding="utf-8"
    )
    return RelationTaxonomy.from_mapping(json.loads(text))


def load_taxonomy(path: Union[str, Path]) -> RelationTaxonomy:
    """Load a taxonomy config file ``{"name": str, "classes": [str, ...]}``."""

    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TaxonomyError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return RelationTaxonomy.from_mapping(data)


def resolve_taxonomy(spec: Union[str, Mapping[str, Any], RelationTaxonomy]) -> RelationTaxonomy:
    """Accept a built-in name, a path to a taxonomy JSON, an inline mapping, or a taxonomy."""

    if isinstance(spec, RelationTaxonomy):
        return spec
    if isinstance(spec, Mapping):
        return RelationTaxonomy.from_mapping(spec)
    if not isinstance(spec, str):
        raise TaxonomyError(f"taxonomy must be a name, a JSON path or an object, got {type(spec).__name__}")
    if spec.strip().lower() in BUILTIN_TAXONOMIES:
        return builtin_taxonomy(spec)
    if Path(spec).is_file():
        return load_taxonomy(spec)
    raise TaxonomyError(
        f"unknown taxonomy {spec!r}; valid options: {', '.join(BUILTIN_TAXONOMIES)} or a JSON path"
    )


def validate_dataset(ds: Dataset) -> ValidationReport:
    """Collect every violated dataset invariant without raising."""

    issues: List[ValidationIssue] = []
    seen_ids: Dict[str, int] = {}
    for idx, image in enumerate(ds.images):
        if not image.image_id:
            issues.append(ValidationIssue("empty image id", "image id is empty", image_index=idx))
        elif image.image_id in seen_ids:
            issues.append(
                ValidationIssue(
                    "duplicate image id",
                    f"{image.image_id!r} already used by image[{seen_ids[image.image_id]}]",
                    image_index=idx,
                )
            )
        else:
            seen_ids[image.image_id] = idx
        if image.width <= 0 or image.height <= 0:
            issues.append(
                ValidationIssue(
                    "invalid image size",
                    f"width={image.width}, height={image.height}",
                    image_index=idx,
                )
            )
        if not image.persons:
            issues.append(ValidationIssue("no persons", "image has no person boxes", image_index=idx))
        for p_idx, box in enumerate(image.persons):
            if not box.in_range:
                issues.append(
                    ValidationIssue(
                        "box out of range",
                        f"person {p_idx} box {box.as_tuple()} leaves [0, 1]",
                        image_index=idx,
                    )
                )
            if not box.is_proper:
                issues.append(
                    ValidationIssue(
                        "degenerate box",
                        f"person {p_idx} box {box.as_tuple()} needs x0 < x1 and y0 < y1",
                        image_index=idx,
                    )
                )

    n_classes = ds.taxonomy.size
    for s_idx, sample in enumerate(ds.samples):
        image_idx = seen_ids.get(sample.image_id)
        if image_idx is None:
            issues.append(
                ValidationIssue(
                    "unknown image",
                    f"sample references missing image {sample.image_id!r}",
                    sample_index=s_idx,
                )
            )
        else:
            n_persons = ds.images[image_idx].n_persons
            for name, value in (("i", sample.i), ("j", sample.j)):
                if not 0 <= value < n_persons:
                    issues.append(
                        ValidationIssue(
                            "person index out of range",
                            f"{name}={value} but image has {n_persons} person(s)",
                            image_index=image_idx,
                            sample_index=s_idx,
                        )
                    )
        if sample.i == sample.j:
            issues.append(
                ValidationIssue("self-pair", f"i == j == {sample.i}", sample_index=s_idx)
            )
        if not 0 <= sample.label < n_classes:
            issues.append(
                ValidationIssue(
                    "label out of range",
                    f"label {sample.label} not in [0, {n_classes})",
                    sample_index=s_idx,
                )
            )
    if ds.split not in SPLITS:
        issues.append(ValidationIssue("unknown split", f"split {ds.split!r} not in {SPLITS}"))
    return ValidationReport(tuple(issues))


def _rename(entry: Mapping[str, Any], aliases: Mapping[str, str], known: set, where: str) -> Dict[str, Any]:
    renamed: Dict[str, Any] = {}
    for key, value in entry.items():
        target = key if key in known else aliases.get(key)
        if target is None:
            logger.info("%s: ignoring unmapped field %r", where, key)
            continue
        renamed.setdefault(target, value)
    return renamed


def _as_int(value: Any, where: str, field_name: str, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise AnnotationError(f"{field_name} must be an integer, got {value!r}", path=path, position=where)
    return int(value)


def _parse_box(raw: Any, image: Mapping[str, Any], pixel: bool, where: str, path: str) -> PersonBox:
    if isinstance(raw, Mapping):
        raw = [raw.get("x0"), raw.get("y0"), raw.get("x1"), raw.get("y1")]
    if not isinstance(raw, Sequence) or isinstance(raw, str) or len(raw) != 4:
        raise AnnotationError(f"person box must be [x0, y0, x1, y1], got {raw!r}", path=path, position=where)
    try:
        coords = [float(value) for value in raw]
    except (TypeError, ValueError) as exc:
        raise AnnotationError(f"non-numeric box coordinate in {raw!r}", path=path, position=where) from exc
    if pixel:
        return PersonBox.from_pixels(coords, float(image["width"]), float(image["height"]))
    return PersonBox(*coords)


def _label_index(value: Any, taxonomy: RelationTaxonomy, where: str, path: str) -> int:
    if isinstance(value, str):
        try:
            return taxonomy.index(value)
        except TaxonomyError as exc:
            raise AnnotationError(str(exc), path=path, position=where) from exc
    return _as_int(value, where, "label", path)


def parse_annotations(data: Mapping[str, Any], *, path: str = "<memory>") -> Dataset:
    """Build a Dataset from an already-decoded annotation document."""

    if not isinstance(data, Mapping):
        raise AnnotationError("top level must be a JSON object", path=path)
    for key in data:
        if key not in TOP_LEVEL_KEYS:
            logger.info("%s: ignoring unmapped top-level field %r", path, key)
    if "taxonomy" not in data:
        raise AnnotationError("missing 'taxonomy'", path=path)
    try:
        taxonomy = resolve_taxonomy(data["taxonomy"])
    except TaxonomyError as exc:
        raise AnnotationError(str(exc), path=path, position="taxonomy") from exc
    coords = data.get("coords", "normalized")
    if coords not in ("normalized", "pixel"):
        raise AnnotationError(f"coords must be 'normalized' or 'pixel', got {coords!r}", path=path)
    pixel = coords == "pixel"

    images: List[ImageRecord] = []
    for idx, raw_image in enumerate(data.get("images", [])):
        where = f"images[{idx}]"
        if not isinstance(raw_image, Mapping):
            raise AnnotationError("image entry must be an object", path=path, position=where)
        entry = _rename(raw_image, IMAGE_ALIASES, IMAGE_KEYS, f"{path}: {where}")
        missing = [key for key in ("id", "width", "height", "persons") if key not in entry]
        if missing:
            raise AnnotationError(f"missing field(s) {', '.join(missing)}", path=path, position=where)
        entry["width"] = _as_int(entry["width"], where, "width", path)
        entry["height"] = _as_int(entry["height"], where, "height", path)
        if pixel and (entry["width"] <= 0 or entry["height"] <= 0):
            raise AnnotationError("pixel coordinates need positive width/height", path=path, position=where)
        boxes = tuple(
            _parse_box(raw_box, entry, pixel, f"{where}.persons[{p_idx}]", path)
            for p_idx, raw_box in enumerate(entry["persons"])
        )
        images.append(ImageRecord(str(entry["id"]), entry["width"], entry["height"], boxes))

    samples: List[PairSample] = []
    for idx, raw_sample in enumerate(data.get("samples", [])):
        where = f"samples[{idx}]"
        if not isinstance(raw_sample, Mapping):
            raise AnnotationError("sample entry must be an object", path=path, position=where)
        entry = _rename(raw_sample, SAMPLE_ALIASES, SAMPLE_KEYS, f"{path}: {where}")
        missing = [key for key in ("image", "i", "j", "label") if key not in entry]
        if missing:
            raise AnnotationError(f"missing field(s) {', '.join(missing)}", path=path, position=where)
        samples.append(
            PairSample(
                image_id=str(entry["image"]),
                i=_as_int(entry["i"], where, "i", path),
                j=_as_int(entry["j"], where, "j", path),
                label=_label_index(entry["label"], taxonomy, where, path),
            )
        )

    split = str(data.get("split", "train"))
    dataset = Dataset(taxonomy=taxonomy, images=tuple(images), samples=tuple(samples), split=split)
    report = validate_dataset(dataset)
    if not report.ok:
        first = report.issues[0].code
        raise AnnotationError(
            f"{first}: {len(report)} invariant violation(s): {report.text()}",
            path=path,
            report=report,
        )
    return dataset


def load_annotations(path: Union[str, Path]) -> Dataset:
    """Read and validate a canonical annotation JSON file."""

    text_path = str(path)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise AnnotationError(f"cannot read annotations: {exc.strerror}", path=text_path) from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationError(exc.msg, path=text_path, position=f"line {exc.lineno} column {exc.colno}") from exc
    return parse_annotations(data, path=text_path)


def dataset_to_mapping(ds: Dataset, *, inline_taxonomy: bool = False) -> Dict[str, Any]:
    """Serialize a Dataset back into the canonical schema (normalized coordinates)."""

    taxonomy: Union[str, Dict[str, Any]]
    if not inline_taxonomy and ds.taxonomy.name in BUILTIN_TAXONOMIES:
        taxonomy = ds.taxonomy.name
    else:
        taxonomy = ds.taxonomy.to_mapping()
    return {
        "taxonomy": taxonomy,
        "coords": "normalized",
        "split": ds.split,
        "images": [
            {
                "id": image.image_id,
                "width": image.width,
                "height": image.height,
                "persons": [list(box.as_tuple()) for box in image.persons],
            }
            for image in ds.images
        ],
        "samples": [
            {"image": sample.image_id, "i": sample.i, "j": sample.j, "label": sample.label}
            for sample in ds.samples
        ],
    }


def write_annotations(ds: Dataset, path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(dataset_to_mapping(ds), handle, indent=1, sort_keys=True)
        handle.write("\n")


def unique_image_ids(samples: Sequence[PairSample]) -> Tuple[str, ...]:
    """Image ids in first-appearance order."""

    ordered: Dict[str, None] = {}
    for sample in samples:
        ordered.setdefault(sample.image_id, None)
    return tuple(ordered)
