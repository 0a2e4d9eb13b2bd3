"""PISC/PIPA-style metrics: per-class recall, class-wise AP / mAP, top-1 accuracy."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

from .annotations import unique_image_ids
from .encoders import EncoderProvider
from .errors import ConfigError, EmptyTableError
from .features import FeatureStore
from .logs import emit
from .model import Dataset
from .network import ConsorModel
from .prompts import class_name_prompts
from .training import make_batches

logger = logging.getLogger(__name__)

EVAL_MODES = ("standard", "zeroshot")
AP_MODES = ("ranked", "voc11")


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "standard"
    ap_mode: str = "ranked"
    zeroshot_scale: float = 100.0
    batch_size: int = 64

    def __post_init__(self) -> None:
        if self.mode not in EVAL_MODES:
            raise ConfigError(f"unknown eval mode {self.mode!r}; expected standard or zeroshot")
        if self.ap_mode not in AP_MODES:
            raise ConfigError(f"unknown ap_mode {self.ap_mode!r}; expected ranked or voc11")
        if self.zeroshot_scale <= 0 or self.batch_size < 1:
            raise ConfigError("zeroshot_scale must be > 0 and batch_size >= 1")


@dataclass
class ScoreTable:
    """Rows of (sample_id, label, post-softmax scores)."""

    sample_ids: List[str]
    labels: np.ndarray
    scores: np.ndarray

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or len(self.sample_ids) != len(self.labels) or len(self.labels) != self.scores.shape[0]:
            raise ConfigError("score table needs matching sample ids, labels and an [N, C] score matrix")
        if len(self.labels) and not np.allclose(self.scores.sum(axis=1), 1.0, atol=1e-5):
            raise ConfigError("score rows must sum to 1 (post-softmax probabilities)")

    @property
    def n_rows(self) -> int:
        return len(self.sample_ids)

    @property
    def n_classes(self) -> int:
        return int(self.scores.shape[1])

    @classmethod
    def from_logits(cls, sample_ids: Sequence[str], labels: Sequence[int], logits: np.ndarray) -> "ScoreTable":
        logits = np.asarray(logits, dtype=np.float64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        return cls(list(sample_ids), np.asarray(labels), exp / exp.sum(axis=1, keepdims=True))

    def permuted(self, order: Sequence[int]) -> "ScoreTable":
        order = list(order)
        return ScoreTable([self.sample_ids[i] for i in order], self.labels[order], self.scores[order])


def _require_rows(table: ScoreTable) -> None:
    if table.n_rows == 0:
        raise EmptyTableError("score table is empty")


def per_class_recall(table: ScoreTable) -> np.ndarray:
    """Top-1 recall per class; NaN marks classes without ground-truth rows."""

    _require_rows(table)
    predicted = table.scores.argmax(axis=1)
    recall = np.full(table.n_classes, np.nan)
    for c in range(table.n_classes):
        rows = table.labels == c
        if rows.any():
            recall[c] = float((predicted[rows] == c).mean())
    return recall


def _ranking(table: ScoreTable, c: int) -> List[int]:
    """Rows by descending class-c score; ties ordered by sample_id."""

    return sorted(range(table.n_rows), key=lambda r: (-table.scores[r, c], table.sample_ids[r]))


def ranked_average_precision(hits: Sequence[bool]) -> float:
    """Mean of precision@k over the ranks k holding a positive."""

    precisions = []
    found = 0
    for k, hit in enumerate(hits, start=1):
        if hit:
            found += 1
            precisions.append(found / k)
    return float(np.mean(precisions)) if precisions else math.nan


def voc11_average_precision(hits: Sequence[bool]) -> float:
    """11-point interpolated AP over the same ranking."""

    n_pos = sum(hits)
    if n_pos == 0:
        return math.nan
    tp = np.cumsum(np.asarray(hits, dtype=np.float64))
    ranks = np.arange(1, len(hits) + 1)
    precision = tp / ranks
    recall = tp / n_pos
    points = []
    for threshold in np.linspace(0.0, 1.0, 11):
        reached = precision[recall >= threshold - 1e-12]
        points.append(float(reached.max()) if reached.size else 0.0)
    return float(np.mean(points))


def mean_average_precision(table: ScoreTable, ap_mode: str = "ranked") -> Tuple[np.ndarray, float]:
    """Per-class AP (NaN without positives) and their mean over defined classes."""

    _require_rows(table)
    if ap_mode not in AP_MODES:
        raise ConfigError(f"unknown ap_mode {ap_mode!r}")
    ap_fn = ranked_average_precision if ap_mode == "ranked" else voc11_average_precision
    per_class = np.full(table.n_classes, np.nan)
    for c in range(table.n_classes):
        if not (table.labels == c).any():
            continue
        per_class[c] = ap_fn([bool(table.labels[r] == c) for r in _ranking(table, c)])
    defined = per_class[~np.isnan(per_class)]
    return per_class, float(defined.mean()) if defined.size else math.nan


def top1_accuracy(table: ScoreTable) -> float:
    _require_rows(table)
    return float((table.scores.argmax(axis=1) == table.labels).mean())


def _nan_to_none(values: Sequence[float]) -> List[Optional[float]]:
    return [None if value is None or math.isnan(value) else float(value) for value in values]


def _none_to_nan(values: Sequence[Optional[float]]) -> List[float]:
    return [math.nan if value is None else float(value) for value in values]


@dataclass
class MetricsReport:
    taxonomy: str
    classes: List[str]
    mode: str
    ap_mode: str
    per_class_recall: List[float]
    per_class_ap: List[float]
    map: float
    acc1: float
    n_samples: int
    classifier: str = "prompt"
    label_counts: List[int] = field(default_factory=list)

    @property
    def mean_recall(self) -> float:
        defined = [value for value in self.per_class_recall if not math.isnan(value)]
        return float(np.mean(defined)) if defined else math.nan

    def to_mapping(self) -> Dict[str, Any]:
        return {
            "taxonomy": self.taxonomy,
            "classes": list(self.classes),
            "mode": self.mode,
            "ap_mode": self.ap_mode,
            "classifier": self.classifier,
            "per_class_recall": _nan_to_none(self.per_class_recall),
            "per_class_ap": _nan_to_none(self.per_class_ap),
            "map": None if math.isnan(self.map) else self.map,
            "acc1": self.acc1,
            "n_samples": self.n_samples,
            "label_counts": list(self.label_counts),
        }

    @classmethod
    def from_mapping(cls, data: Dict[str, Any]) -> "MetricsReport":
        return cls(
            taxonomy=str(data["taxonomy"]),
            classes=[str(c) for c in data["classes"]],
            mode=str(data["mode"]),
            ap_mode=str(data.get("ap_mode", "ranked")),
            per_class_recall=_none_to_nan(data["per_class_recall"]),
            per_class_ap=_none_to_nan(data["per_class_ap"]),
            map=math.nan if data.get("map") is None else float(data["map"]),
            acc1=float(data["acc1"]),
            n_samples=int(data["n_samples"]),
            classifier=str(data.get("classifier", "prompt")),
            label_counts=[int(n) for n in data.get("label_counts", [])],
        )


def compute_metrics(
    table: ScoreTable, taxonomy: str, classes: Sequence[str], mode: str = "standard", ap_mode: str = "ranked", classifier: str = "prompt"
) -> MetricsReport:
    recall = per_class_recall(table)
    ap, map_value = mean_average_precision(table, ap_mode)
    counts = [int((table.labels == c).sum()) for c in range(table.n_classes)]
    return MetricsReport(
        taxonomy=taxonomy,
        classes=list(classes),
        mode=mode,
        ap_mode=ap_mode,
        per_class_recall=[float(v) for v in recall],
        per_class_ap=[float(v) for v in ap],
        map=map_value,
        acc1=top1_accuracy(table),
        n_samples=table.n_rows,
        classifier=classifier,
        label_counts=counts,
    )


def score_model(model: ConsorModel, store: FeatureStore, batch_size: int = 64, progress: bool = False) -> ScoreTable:
    samples = list(store.dataset.samples)
    store.check_available(samples)
    model.eval()
    ids: List[str] = []
    labels: List[int] = []
    logits: List[np.ndarray] = []
    with torch.no_grad():
        for chunk in tqdm(make_batches(samples, batch_size), desc="eval", disable=not progress, leave=False):
            batch = store.batch(chunk)
            logits.append(model(batch).logits.double().cpu().numpy())
            ids.extend(batch.sample_ids)
            labels.extend(batch.labels.tolist())
    return ScoreTable.from_logits(ids, labels, np.concatenate(logits))


def score_zeroshot(dataset: Dataset, provider: EncoderProvider, scale: float = 100.0) -> ScoreTable:
    """Frozen-encoder baseline: image embedding vs class-sentence embeddings, softmax(scale * cos)."""

    image_ids = list(unique_image_ids(dataset.samples))
    prompts = class_name_prompts(dataset.taxonomy)
    provider.require_images(image_ids)
    provider.require_texts(prompts)
    text_vecs = np.stack([provider.joint_embed_text(text) for text in prompts])
    image_logits = {image_id: scale * (text_vecs @ provider.joint_embed_image(image_id)) for image_id in image_ids}
    logits = np.stack([image_logits[sample.image_id] for sample in dataset.samples])
    return ScoreTable.from_logits(
        [s.sample_id for s in dataset.samples], [s.label for s in dataset.samples], logits
    )


def evaluate(
    dataset: Dataset,
    provider: EncoderProvider,
    cfg: EvalConfig,
    model: Optional[ConsorModel] = None,
    store: Optional[FeatureStore] = None,
    progress: bool = False,
) -> Tuple[MetricsReport, ScoreTable]:
    if not dataset.samples:
        raise EmptyTableError("dataset has no samples to evaluate")
    classifier = "zeroshot"
    if cfg.mode == "zeroshot":
        table = score_zeroshot(dataset, provider, cfg.zeroshot_scale)
    else:
        if model is None or store is None:
            raise ConfigError("standard evaluation needs a trained model (pass --checkpoint)")
        table = score_model(model, store, cfg.batch_size, progress)
        classifier = model.adapter_config.classifier
    report = compute_metrics(table, dataset.taxonomy.name, dataset.taxonomy.classes, cfg.mode, cfg.ap_mode, classifier)
    emit("eval.done", mode=cfg.mode, n_samples=report.n_samples, acc1=report.acc1, map=report.map)
    return report, table


def write_score_csv(table: ScoreTable, path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["sample_id", "label", *[f"score_{c}" for c in range(table.n_classes)]])
        for sample_id, label, row in zip(table.sample_ids, table.labels, table.scores):
            writer.writerow([sample_id, int(label), *[repr(float(v)) for v in row]])


def read_score_csv(path: Union[str, Path]) -> ScoreTable:
    with open(path, encoding="utf-8", newline="") as handle:
        rows = list(csv.DictReader(handle))
    if not rows:
        raise EmptyTableError(f"{path}: no score rows")
    score_cols = [key for key in rows[0] if key.startswith("score_")]
    return ScoreTable(
        [row["sample_id"] for row in rows],
        np.asarray([int(row["label"]) for row in rows]),
        np.asarray([[float(row[col]) for col in score_cols] for row in rows]),
    )


def write_metrics_report(report: MetricsReport, path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(report.to_mapping(), handle, indent=2)
        handle.write("\n")


def read_metrics_report(path: Union[str, Path]) -> MetricsReport:
    with open(path, encoding="utf-8") as handle:
        return MetricsReport.from_mapping(json.load(handle))
