"""Checkpoints reuse the feature-pack container: tensors as entries, the manifest in the header attrs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np
import torch

from .errors import ConfigError, PackCorruptError
from .featurepack import FeaturePack, read_feature_pack, write_feature_pack
from .training import Trainer

PARAM_PREFIX = "param/"
EXP_AVG_PREFIX = "adam.exp_avg/"
EXP_AVG_SQ_PREFIX = "adam.exp_avg_sq/"


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    manifest: Dict[str, Any]

    @property
    def config(self) -> Dict[str, Any]:
        return dict(self.manifest.get("config", {}))

    @property
    def config_digest(self) -> str:
        return str(self.manifest.get("config_digest", ""))

    def parameters(self) -> Dict[str, np.ndarray]:
        return {
            name[len(PARAM_PREFIX) :]: value for name, value in self.tensors.items() if name.startswith(PARAM_PREFIX)
        }


def _numpy(tensor: torch.Tensor) -> np.ndarray:
    if tensor.dtype != torch.float32:
        raise ConfigError(f"checkpoints store float32 tensors only, got {tensor.dtype}")
    return tensor.detach().cpu().numpy().copy()


def save_checkpoint(
    path: Union[str, Path],
    trainer: Trainer,
    config: Mapping[str, Any],
    config_digest: str,
) -> Path:
    model = trainer.model
    entries: Dict[str, np.ndarray] = {}
    names = [name for name, _ in model.named_parameters()]
    for name, param in model.named_parameters():
        entries[PARAM_PREFIX + name] = _numpy(param)

    opt_state = trainer.optimizer.state_dict()
    steps: Dict[str, float] = {}
    for index, state in opt_state["state"].items():
        name = names[index]
        entries[EXP_AVG_PREFIX + name] = _numpy(state["exp_avg"])
        entries[EXP_AVG_SQ_PREFIX + name] = _numpy(state["exp_avg_sq"])
        steps[name] = float(state["step"])
    groups = []
    for group in opt_state["param_groups"]:
        plain = {key: (list(value) if isinstance(value, tuple) else value) for key, value in group.items() if key != "params"}
        plain["params"] = [names[index] for index in group["params"]]
        groups.append(plain)

    manifest = {
        "kind": "checkpoint",
        "epoch": trainer.epoch,
        "step": trainer.step,
        "config_digest": config_digest,
        "config": dict(config),
        "optimizer": {"param_groups": groups, "steps": steps},
        "scheduler": None if trainer.scheduler is None else trainer.scheduler.state_dict(),
    }
    return write_feature_pack(FeaturePack("checkpoint", entries, manifest), path)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    pack = read_feature_pack(path)
    if pack.attrs.get("kind") != "checkpoint":
        raise PackCorruptError(f"{path}: not a checkpoint pack")
    return Checkpoint(dict(pack.entries), dict(pack.attrs))


def restore_model(model: torch.nn.Module, checkpoint: Checkpoint) -> None:
    params = checkpoint.parameters()
    state = {name: torch.from_numpy(np.array(value, dtype=np.float32)) for name, value in params.items()}
    missing = sorted(set(dict(model.named_parameters())) - set(state))
    unexpected = sorted(set(state) - set(dict(model.named_parameters())))
    if missing or unexpected:
        raise ConfigError(
            f"checkpoint does not match the model (missing: {missing[:5]}, unexpected: {unexpected[:5]})"
        )
    model.load_state_dict(state, strict=False)


def restore_trainer(trainer: Trainer, checkpoint: Checkpoint) -> None:
    """Restore parameters, AdamW moments, step counters and the schedule."""

    restore_model(trainer.model, checkpoint)
    names = [name for name, _ in trainer.model.named_parameters()]
    index_of = {name: index for index, name in enumerate(names)}
    opt_manifest = checkpoint.manifest.get("optimizer", {})
    state: Dict[int, Dict[str, torch.Tensor]] = {}
    for name, step in opt_manifest.get("steps", {}).items():
        state[index_of[name]] = {
            "step": torch.tensor(float(step), dtype=torch.float32),
            "exp_avg": torch.from_numpy(np.array(checkpoint.tensors[EXP_AVG_PREFIX + name], dtype=np.float32)),
            "exp_avg_sq": torch.from_numpy(np.array(checkpoint.tensors[EXP_AVG_SQ_PREFIX + name], dtype=np.float32)),
        }
    groups = []
    for group in opt_manifest.get("param_groups", []):
        restored = dict(group)
        restored["betas"] = tuple(restored.get("betas", (0.9, 0.999)))
        restored["params"] = [index_of[name] for name in group["params"]]
        groups.append(restored)
    if groups:
        trainer.optimizer.load_state_dict({"state": state, "param_groups": groups})
    scheduler_state: Optional[Dict[str, Any]] = checkpoint.manifest.get("scheduler")
    if scheduler_state is not None:
        if trainer.scheduler is None:
            trainer.configure_schedule(int(scheduler_state.get("T_max", 1)) + 1)
        assert trainer.scheduler is not None
        trainer.scheduler.load_state_dict(scheduler_state)
    trainer.step = int(checkpoint.manifest.get("step", 0))
    trainer.epoch = int(checkpoint.manifest.get("epoch", 0))
