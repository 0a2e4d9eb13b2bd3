"""Seeded AdamW training loop with per-step cosine annealing."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch.optim import AdamW
from torch.optim.lr_scheduler import CosineAnnealingLR
from tqdm import tqdm

from .errors import ConfigError, NonFiniteLossError
from .features import FeatureStore, PairBatch
from .head import contrastive_loss
from .logs import emit
from .model import PairSample
from .network import ConsorModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    epochs: int = 6
    batch_size: int = 32
    logit_scale: float = 1.0
    seed: int = 0
    class_weights: Optional[Tuple[float, ...]] = None

    def __post_init__(self) -> None:
        if self.class_weights is not None:
            object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
            if any(w <= 0 for w in self.class_weights):
                raise ConfigError("class_weights must all be > 0")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.logit_scale <= 0:
            raise ConfigError("logit_scale must be > 0")

    def to_mapping(self) -> Dict[str, Any]:
        payload = asdict(self)
        if self.class_weights is not None:
            payload["class_weights"] = list(self.class_weights)
        return payload


@dataclass
class StepMetrics:
    step: int
    epoch: int
    loss: float
    lr: float
    n_pairs: int


@dataclass
class TrainHistory:
    steps: List[StepMetrics] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [metrics.loss for metrics in self.steps]

    def epoch_means(self) -> List[float]:
        grouped: Dict[int, List[float]] = {}
        for metrics in self.steps:
            grouped.setdefault(metrics.epoch, []).append(metrics.loss)
        return [float(np.mean(grouped[epoch])) for epoch in sorted(grouped)]


def epoch_order(n_samples: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n_samples)


def make_batches(samples: Sequence[PairSample], batch_size: int, order: Optional[np.ndarray] = None) -> List[List[PairSample]]:
    indices = range(len(samples)) if order is None else order
    ordered = [samples[int(idx)] for idx in indices]
    return [ordered[start : start + batch_size] for start in range(0, len(ordered), batch_size)]


class Trainer:
    """Owns the optimizer and schedule for one model; ``step`` and ``epoch`` count completed work."""

    def __init__(
        self,
        model: ConsorModel,
        store: FeatureStore,
        cfg: TrainConfig,
        out_dir: Optional[Union[str, Path]] = None,
    ) -> None:
        self.model = model
        self.store = store
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.optimizer = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.scheduler: Optional[CosineAnnealingLR] = None
        self.step = 0
        self.epoch = 0

    def configure_schedule(self, total_steps: int) -> CosineAnnealingLR:
        """Anneal from ``lr`` at the first step to 0 at the last one."""

        self.scheduler = CosineAnnealingLR(self.optimizer, T_max=max(total_steps - 1, 1), eta_min=0.0)
        return self.scheduler

    @property
    def current_lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    def _dump_nonfinite(self, batch: PairBatch, logits: torch.Tensor, loss: torch.Tensor) -> Optional[str]:
        if self.out_dir is None:
            return None
        path = self.out_dir / f"nonfinite_step{self.step}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "step": self.step,
            "epoch": self.epoch,
            "loss": repr(float(loss.detach())),
            "sample_ids": batch.sample_ids,
            "logits": [[repr(float(v)) for v in row] for row in logits.detach().cpu().tolist()],
            "parameter_norms": {
                name: repr(float(param.detach().norm())) for name, param in self.model.named_parameters()
            },
        }
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, indent=1)
        return str(path)

    def compute_loss(self, batch: PairBatch) -> Tuple[torch.Tensor, torch.Tensor]:
        output = self.model(batch)
        return contrastive_loss(output.logits, batch.labels, self.cfg.class_weights), output.logits

    def train_step(self, samples: Sequence[PairSample]) -> StepMetrics:
        if not samples:
            raise ConfigError("train_step needs a non-empty batch")
        self.model.train()
        batch = self.store.batch(samples)
        loss, logits = self.compute_loss(batch)
        if not bool(torch.isfinite(loss)):
            dump = self._dump_nonfinite(batch, logits, loss)
            raise NonFiniteLossError(f"non-finite loss at step {self.step}", dump_path=dump)
        lr = self.current_lr
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        if self.scheduler is not None:
            self.scheduler.step()
        metrics = StepMetrics(self.step, self.epoch, float(loss.detach()), lr, batch.n_pairs)
        self.step += 1
        emit("train.step", step=metrics.step, epoch=metrics.epoch, loss=metrics.loss, lr=metrics.lr, n_pairs=metrics.n_pairs)
        return metrics

    def fit(
        self,
        samples: Optional[Sequence[PairSample]] = None,
        epochs: Optional[int] = None,
        progress: bool = False,
    ) -> TrainHistory:
        samples = list(self.store.dataset.samples if samples is None else samples)
        if not samples:
            raise ConfigError("no training samples")
        epochs = self.cfg.epochs if epochs is None else epochs
        steps_per_epoch = -(-len(samples) // self.cfg.batch_size)
        if self.scheduler is None:
            self.configure_schedule(steps_per_epoch * epochs)
        self.store.check_available(samples)
        history = TrainHistory()
        logger.info("training %d pairs for %d epoch(s), %d step(s) each", len(samples), epochs, steps_per_epoch)
        for _ in range(epochs):
            order = epoch_order(len(samples), self.cfg.seed, self.epoch)
            batches = make_batches(samples, self.cfg.batch_size, order)
            iterator = tqdm(batches, desc=f"epoch {self.epoch + 1}", disable=not progress, leave=False)
            for chunk in iterator:
                metrics = self.train_step(chunk)
                history.steps.append(metrics)
                iterator.set_postfix(loss=f"{metrics.loss:.4f}")
            epoch_losses = [m.loss for m in history.steps if m.epoch == self.epoch]
            emit("train.epoch", epoch=self.epoch, mean_loss=float(np.mean(epoch_losses)), steps=self.step)
            self.epoch += 1
        return history


def train_accuracy(model: ConsorModel, store: FeatureStore, samples: Sequence[PairSample], batch_size: int = 64) -> float:
    model.eval()
    correct = 0
    with torch.no_grad():
        for chunk in make_batches(list(samples), batch_size):
            batch = store.batch(chunk)
            logits = model(batch).logits
            correct += int((logits.argmax(dim=1) == batch.labels).sum())
    return correct / max(len(samples), 1)
