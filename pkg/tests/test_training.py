import math

import numpy as np
import pytest
import torch

from conftest import phantom_samples
from glomseg.network import ModelConfig
from glomseg.training import (CheckpointError, InvalidTargetError, TrainConfig, build_segmenter, load_checkpoint,
                              loss_fn, save_checkpoint, select_best, soft_dice_loss, train)
from glomseg.taxonomy import Taxonomy, TAXONOMY


def test_zero_logits_cross_entropy_is_ln2():
    logits = torch.zeros(2, 2, 4, 4, dtype=torch.float64)
    target = torch.randint(0, 2, (2, 4, 4))
    assert loss_fn(logits, target, "bce").item() == pytest.approx(math.log(2), abs=1e-7)


def test_soft_dice_smoothing():
    # empty target, empty prediction: (0 + 1) / (0 + 1) -> zero loss
    assert soft_dice_loss(torch.zeros(1, 4, 4), torch.zeros(1, 4, 4)).item() == 0.0
    # p = 0.5 everywhere on 16 pixels, 4 foreground: 1 - (2*2 + 1) / (8 + 4 + 1)
    p = torch.full((1, 4, 4), 0.5)
    t = torch.zeros(1, 4, 4)
    t[0, 0] = 1
    assert soft_dice_loss(p, t).item() == pytest.approx(1 - 5 / 13)


def test_perfect_prediction_dice_near_zero():
    t = torch.zeros(1, 8, 8)
    t[0, 2:6, 2:6] = 1
    logits = torch.stack([-20 * (2 * t - 1), 20 * (2 * t - 1)], 1)
    assert loss_fn(logits, t, "dice").item() < 1e-6


def test_non_binary_target_rejected():
    with pytest.raises(InvalidTargetError):
        loss_fn(torch.zeros(1, 2, 2, 2), torch.full((1, 2, 2), 0.5))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="match"):
        loss_fn(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 3))


def test_unknown_loss():
    with pytest.raises(ValueError, match="unknown loss"):
        loss_fn(torch.zeros(1, 2, 2, 2), torch.zeros(1, 2, 2), "focal")


def test_select_best_examples():
    assert select_best([0.1, 0.7, 0.3]) == 2
    assert select_best([0.5, 0.5]) == 1
    assert select_best([{"epoch": 1, "val_dice": float("nan")}, {"epoch": 2, "val_dice": 0.2}]) == 2
    with pytest.raises(ValueError):
        select_best([])
    with pytest.raises(ValueError):
        select_best([float("nan")])


@pytest.fixture(scope="module")
def tiny():
    return build_segmenter(ModelConfig.reduced(32, stage_channels=(8, 16, 32)), seed=3)


def test_checkpoint_round_trip(tmp_path, tiny):
    tiny.mean, tiny.std = (0.4, 0.5, 0.6), (0.2, 0.2, 0.3)
    save_checkpoint(tmp_path / "m.ckpt", tiny, {"epoch": 7})
    seg, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"epoch": 7}
    assert seg.checkpoint_id() == tiny.checkpoint_id()
    x = tiny.prepare(np.random.default_rng(0).integers(0, 256, (2, 32, 32, 3), dtype=np.uint8))
    with torch.no_grad():
        a = tiny.model.eval().forward_tasks(x, range(14))
        b = seg.model.forward_tasks(x, range(14))
    assert torch.equal(a, b)
    assert not (tmp_path / "m.ckpt.tmp").exists()


def test_checkpoint_taxonomy_mismatch(tmp_path, tiny):
    save_checkpoint(tmp_path / "m.ckpt", tiny)
    other = Taxonomy(list(TAXONOMY)[:-1])
    with pytest.raises(CheckpointError, match="taxonomy"):
        load_checkpoint(tmp_path / "m.ckpt", other)


def test_checkpoint_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    torch.save({"format": "other"}, p)
    with pytest.raises(CheckpointError, match="not a version"):
        load_checkpoint(p)


def test_gradients_reach_backbone_and_controller(tiny):
    model = tiny.model.train()
    model.zero_grad()
    x = torch.randn(2, 3, 32, 32)
    loss = loss_fn(model(x, torch.tensor([0, 5])), torch.randint(0, 2, (2, 32, 32)))
    loss.backward()
    assert model.controller.conv.weight.grad.abs().sum() > 0
    assert all(p.grad is not None for p in model.backbone.parameters() if p.requires_grad)
    model.eval()


def _short_run(seed):
    seg = build_segmenter(ModelConfig.reduced(64, stage_channels=(8, 16, 32)), seed=seed)
    data = phantom_samples(range(3), 64, ["Cap", "Tuft", "GS"])
    cfg = TrainConfig(epochs=6, optimizer="adam", lr=3e-3, seed=seed)
    return seg, train(seg, data, config=cfg)


def test_training_reduces_loss_and_is_deterministic():
    seg_a, state_a = _short_run(1)
    seg_b, state_b = _short_run(1)
    losses = [r["loss"] for r in state_a.history]
    assert np.mean(losses[-2:]) < np.mean(losses[:2])
    assert losses == [r["loss"] for r in state_b.history]
    assert seg_a.checkpoint_id() == seg_b.checkpoint_id()
    assert state_a.best_epoch == select_best(state_a.history)


def test_run_dir_checkpoint(tmp_path):
    seg = build_segmenter(ModelConfig.reduced(64, stage_channels=(8, 16, 32)), seed=0)
    data = phantom_samples([0], 64, ["Cap", "Tuft"])
    state = train(seg, data, config=TrainConfig(epochs=2, seed=0), run_dir=tmp_path)
    assert state.best_checkpoint == str(tmp_path / "best.ckpt")
    loaded, meta = load_checkpoint(state.best_checkpoint)
    assert meta["epoch"] == state.best_epoch
    assert loaded.checkpoint_id() == seg.checkpoint_id()


def test_empty_training_set():
    seg = build_segmenter(ModelConfig.reduced(32, stage_channels=(8, 16, 32)))
    with pytest.raises(ValueError, match="empty"):
        train(seg, [], config=TrainConfig(epochs=1))
