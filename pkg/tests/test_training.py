import json

import numpy as np
import pytest
import torch

from consor.checkpoint import load_checkpoint, restore_model, restore_trainer, save_checkpoint
from consor.errors import ConfigError, NonFiniteLossError, PackCorruptError
from consor.featurepack import FeaturePack, write_feature_pack
from consor.training import Trainer, TrainConfig, epoch_order, make_batches, train_accuracy


def _trainer(make_model, store, tmp_path=None, **overrides):
    cfg = TrainConfig(**{"lr": 1e-3, "batch_size": 16, "epochs": 1, **overrides})
    model = make_model(logit_scale=cfg.logit_scale)
    return Trainer(model, store, cfg, out_dir=tmp_path)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(logit_scale=0.0)
    with pytest.raises(ConfigError, match="class_weights"):
        TrainConfig(class_weights=(1.0, 0.0))
    assert TrainConfig(class_weights=[1, 2]).to_mapping()["class_weights"] == [1.0, 2.0]


def test_epoch_order_is_seeded_permutation():
    first = epoch_order(10, seed=3, epoch=0)
    assert sorted(first.tolist()) == list(range(10))
    assert np.array_equal(first, epoch_order(10, seed=3, epoch=0))
    assert not np.array_equal(first, epoch_order(10, seed=3, epoch=1))


def test_make_batches_keeps_remainder():
    batches = make_batches(list(range(7)), 3)
    assert [len(b) for b in batches] == [3, 3, 1]
    assert make_batches(list("abc"), 2, np.array([2, 0, 1])) == [["c", "a"], ["b"]]


def test_zero_learning_rate_leaves_every_parameter_unchanged(make_model, small_store):
    trainer = _trainer(make_model, small_store, lr=0.0)
    before = {name: value.clone() for name, value in trainer.model.state_dict().items()}
    metrics = trainer.train_step(list(small_store.dataset.samples[:8]))
    assert metrics.lr == 0.0
    assert np.isfinite(metrics.loss)
    assert any(p.grad is not None and bool(p.grad.abs().sum() > 0) for p in trainer.model.parameters())
    after = trainer.model.state_dict()
    assert after.keys() == before.keys()
    for name, value in before.items():
        assert torch.equal(after[name], value), name


def test_overfits_a_small_batch(make_model, small_store):
    samples = [s for s in small_store.dataset.samples if s.image_id in {"toy-0000", "toy-0001", "toy-0002", "toy-0003"}]
    trainer = _trainer(make_model, small_store, logit_scale=20.0, weight_decay=0.0)
    losses = [trainer.train_step(samples).loss for _ in range(200)]
    assert losses[-1] < 0.05
    assert losses[-1] < losses[0]
    assert train_accuracy(trainer.model, small_store, samples) == 1.0


def test_training_is_deterministic(make_model, small_store):
    first = _trainer(make_model, small_store)
    second = _trainer(make_model, small_store)
    assert first.fit().losses == second.fit().losses
    for (name, a), (_, b) in zip(first.model.named_parameters(), second.model.named_parameters()):
        assert torch.equal(a, b), name


def test_cosine_schedule_reaches_zero(make_model, small_store):
    trainer = _trainer(make_model, small_store, epochs=2)
    history = trainer.fit()
    lrs = [m.lr for m in history.steps]
    assert lrs[0] == pytest.approx(1e-3)
    assert lrs[-1] == pytest.approx(0.0, abs=1e-12)
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert len(history.epoch_means()) == 2


def test_checkpoint_reproduces_forward_pass(make_model, small_store, tmp_path):
    trainer = _trainer(make_model, small_store)
    trainer.fit()
    path = save_checkpoint(tmp_path / "checkpoint.fpk", trainer, {"name": "unit"}, "digest-1")

    checkpoint = load_checkpoint(path)
    assert checkpoint.config == {"name": "unit"}
    assert checkpoint.config_digest == "digest-1"
    assert checkpoint.manifest["step"] == trainer.step

    fresh = make_model(seed=9)
    restore_model(fresh, checkpoint)
    batch = small_store.batch(list(small_store.dataset.samples[:10]))
    trainer.model.eval()
    fresh.eval()
    with torch.no_grad():
        assert torch.equal(trainer.model(batch).logits, fresh(batch).logits)


def test_resume_continues_bit_for_bit(make_model, small_store, tmp_path):
    straight = _trainer(make_model, small_store, epochs=2)
    straight_losses = straight.fit().losses

    first = _trainer(make_model, small_store, epochs=2)
    first.configure_schedule(len(straight_losses))
    first_losses = first.fit(epochs=1).losses
    save_checkpoint(tmp_path / "half.fpk", first, {}, "")

    resumed = _trainer(make_model, small_store, epochs=2)
    restore_trainer(resumed, load_checkpoint(tmp_path / "half.fpk"))
    assert resumed.epoch == 1
    rest = resumed.fit(epochs=1).losses

    assert first_losses + rest == straight_losses
    for (name, a), (_, b) in zip(straight.model.named_parameters(), resumed.model.named_parameters()):
        assert torch.equal(a, b), name


def test_checkpoint_mismatch_and_wrong_kind(make_model, small_store, tmp_path):
    trainer = _trainer(make_model, small_store)
    save_checkpoint(tmp_path / "c.fpk", trainer, {}, "")
    linear = make_model(classifier="linear")
    with pytest.raises(ConfigError, match="does not match"):
        restore_model(linear, load_checkpoint(tmp_path / "c.fpk"))

    write_feature_pack(FeaturePack("x", {"v": np.zeros(2)}, {"kind": "image"}), tmp_path / "img.fpk")
    with pytest.raises(PackCorruptError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "img.fpk")


def test_checkpoints_are_float32_only(make_model, small_store, tmp_path):
    trainer = Trainer(make_model(dtype=torch.float64), small_store, TrainConfig())
    with pytest.raises(ConfigError, match="float32"):
        save_checkpoint(tmp_path / "c.fpk", trainer, {}, "")


def test_non_finite_loss_is_dumped(make_model, small_store, tmp_path):
    trainer = _trainer(make_model, small_store, tmp_path)
    with torch.no_grad():
        trainer.model.reasoner.pair_proj.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as excinfo:
        trainer.train_step(list(small_store.dataset.samples[:4]))
    dump = json.loads((tmp_path / "nonfinite_step0.json").read_text(encoding="utf-8"))
    assert excinfo.value.dump_path == str(tmp_path / "nonfinite_step0.json")
    assert dump["sample_ids"] == [s.sample_id for s in small_store.dataset.samples[:4]]
    assert "reasoner.pair_proj.bias" in dump["parameter_norms"]


def test_empty_batch_is_config_error(make_model, small_store):
    with pytest.raises(ConfigError):
        _trainer(make_model, small_store).train_step([])
