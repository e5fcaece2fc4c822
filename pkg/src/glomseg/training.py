"""Partial-label training: loss, optimisation loop, checkpoints, model selection."""
from __future__ import annotations

import copy
import hashlib
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import (DatasetManifest, ImagePool, PatchSample, channel_stats, interleave_by_class,
                        load_samples)
from .network import DynamicHeadNet, ModelConfig, Prediction
from .taxonomy import TAXONOMY, Taxonomy

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "glomseg-checkpoint"
CHECKPOINT_VERSION = 1


class InvalidTargetError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- loss

def soft_dice_loss(prob: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """1 - smoothed soft Dice per item, averaged over the batch."""
    dims = tuple(range(1, prob.ndim))
    inter = (prob * target).sum(dims)
    denom = prob.sum(dims) + target.sum(dims)
    return (1 - (2 * inter + eps) / (denom + eps)).mean()


def bce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Pixel-mean cross-entropy of the two-channel logits, i.e. BCE on the foreground probability."""
    return F.cross_entropy(logits, target.long())


def loss_fn(prediction, target: torch.Tensor, kind: str = "dice_bce", eps: float = 1.0) -> torch.Tensor:
    logits = prediction.logits if isinstance(prediction, Prediction) else prediction
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ValueError(f"prediction {tuple(logits.shape)} and target {tuple(target.shape)} do not match")
    if not torch.all((target == 0) | (target == 1)):
        raise InvalidTargetError("target mask must be binary (0/1)")
    target = target.to(logits.dtype)
    if kind == "bce":
        return bce_loss(logits, target)
    prob = torch.softmax(logits, dim=1)[:, 1]
    if kind == "dice":
        return soft_dice_loss(prob, target, eps)
    if kind == "dice_bce":
        return soft_dice_loss(prob, target, eps) + bce_loss(logits, target)
    raise ValueError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------- inference wrapper

class Segmenter:
    """A network plus the input normalisation it was trained with."""

    def __init__(self, model: DynamicHeadNet, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25),
                 taxonomy: Taxonomy = TAXONOMY):
        self.model = model
        self.mean = tuple(float(v) for v in mean)
        self.std = tuple(float(v) for v in std)
        self.taxonomy = taxonomy

    @property
    def input_size(self) -> int:
        return self.model.cfg.backbone.input_size

    @property
    def dtype(self):
        return next(self.model.parameters()).dtype

    def prepare(self, images: np.ndarray) -> torch.Tensor:
        """uint8 (B, H, W, 3) -> normalised float (B, 3, H, W)."""
        x = torch.from_numpy(np.array(images, copy=True)).to(self.dtype) / 255.0
        x = x.permute(0, 3, 1, 2).contiguous()
        mean = torch.tensor(self.mean, dtype=self.dtype)[None, :, None, None]
        std = torch.tensor(self.std, dtype=self.dtype)[None, :, None, None]
        return (x - mean) / std

    @torch.no_grad()
    def predict(self, image: np.ndarray, tasks) -> np.ndarray:
        """Binary masks (len(tasks), H, W) for one image, one backbone pass."""
        was_training = self.model.training
        self.model.eval()
        try:
            logits = self.model.forward_tasks(self.prepare(image[None]), list(tasks))[0]
        finally:
            self.model.train(was_training)
        return (torch.softmax(logits, dim=1)[:, 1] > 0.5).numpy()

    def checkpoint_id(self) -> str:
        return weights_digest(self.model)


def weights_digest(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:12]


def save_checkpoint(path, segmenter: Segmenter, metadata: dict | None = None) -> None:
    """Atomic write of config, taxonomy, normalisation, weights and run metadata."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": segmenter.model.cfg.to_dict(),
        "dtype": str(segmenter.dtype).replace("torch.", ""),
        "taxonomy": segmenter.taxonomy.to_manifest(),
        "taxonomy_fingerprint": segmenter.taxonomy.fingerprint,
        "norm_mean": list(segmenter.mean),
        "norm_std": list(segmenter.std),
        "weights": {k: v.detach().cpu().clone() for k, v in segmenter.model.state_dict().items()},
        "metadata": dict(metadata or {}),
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, taxonomy: Taxonomy = TAXONOMY) -> tuple[Segmenter, dict]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} is not a version {CHECKPOINT_VERSION} {CHECKPOINT_FORMAT}")
    if payload["taxonomy_fingerprint"] != taxonomy.fingerprint:
        raise CheckpointError(
            f"checkpoint taxonomy {payload['taxonomy_fingerprint']} does not match live registry {taxonomy.fingerprint}"
        )
    model = DynamicHeadNet(ModelConfig.from_dict(payload["model_config"]))
    model.to(getattr(torch, payload["dtype"]))
    model.load_state_dict(payload["weights"])
    model.eval()
    return Segmenter(model, payload["norm_mean"], payload["norm_std"], taxonomy), payload["metadata"]


# ---------------------------------------------------------------- training loop

@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    loss: str = "dice_bce"
    optimizer: str = "sgd"  # or "adam"
    lr: float = 1e-2
    momentum: float = 0.99
    nesterov: bool = True
    weight_decay: float = 1e-4
    lr_power: float = 0.9
    seed: int = 0
    flip: bool = True
    rotate90: bool = True
    drop_last: bool = False
    eval_every: int = 1


@dataclass
class TrainState:
    epoch: int = 0
    best_val_dice: float = -1.0
    best_epoch: int = 0
    best_checkpoint: str | None = None
    history: list = field(default_factory=list)  # one dict per epoch


def select_best(history: list) -> int:
    """Epoch (1-based) with the highest mean validation Dice; earliest wins ties.

    ``history`` holds TrainState rows or bare Dice values; unevaluated
    (NaN) epochs are skipped.
    """
    if not history:
        raise ValueError("empty history")
    best_epoch, best = None, -math.inf
    for i, row in enumerate(history, start=1):
        value = row["val_dice"] if isinstance(row, dict) else row
        epoch = row.get("epoch", i) if isinstance(row, dict) else i
        if not math.isnan(value) and value > best:
            best_epoch, best = epoch, value
    if best_epoch is None:
        raise ValueError("no evaluated epoch in history")
    return best_epoch


def _make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, nesterov=cfg.nesterov,
                               weight_decay=cfg.weight_decay)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def _augment(images: np.ndarray, masks: np.ndarray, rng: np.random.Generator, cfg: TrainConfig):
    out_i, out_m = [], []
    for img, m in zip(images, masks):
        if cfg.flip and rng.random() < 0.5:
            img, m = img[:, ::-1], m[:, ::-1]
        if cfg.flip and rng.random() < 0.5:
            img, m = img[::-1], m[::-1]
        if cfg.rotate90:
            k = int(rng.integers(4))
            img, m = np.rot90(img, k), np.rot90(m, k)
        out_i.append(np.ascontiguousarray(img))
        out_m.append(np.ascontiguousarray(m))
    return np.stack(out_i), np.stack(out_m)


def per_class_dice(segmenter: Segmenter, samples: list[PatchSample]) -> dict:
    """Mean per-sample Dice for each task present with nonempty ground truth."""
    from .evaluation import score_samples

    scores, _ = score_samples(segmenter, samples)
    return {t: float(np.mean(v)) for t, v in sorted(scores.items())}


def _as_samples(data, size: int, taxonomy: Taxonomy):
    if data is None:
        return None
    if isinstance(data, DatasetManifest):
        data.validate(taxonomy, check_files=False)
        return load_samples(data, size, taxonomy)
    return list(data)


def train(segmenter: Segmenter, train_data, val_data=None, config: TrainConfig | None = None,
          run_dir=None, taxonomy: Taxonomy = TAXONOMY, progress=None) -> TrainState:
    """Train ``segmenter`` in place and leave it holding the best-validation weights.

    ``train_data``/``val_data`` are manifests or lists of PatchSample. When
    no validation data is given, selection uses the training samples.
    With ``run_dir`` the best weights are written to ``run_dir/best.ckpt``.
    """
    cfg = config or TrainConfig()
    if isinstance(train_data, DatasetManifest) and train_data.norm_mean is not None:
        segmenter.mean, segmenter.std = train_data.norm_mean, train_data.norm_std
    elif isinstance(train_data, DatasetManifest) and len(train_data):
        segmenter.mean, segmenter.std = channel_stats(train_data)
    samples = _as_samples(train_data, segmenter.input_size, taxonomy)
    if not samples:
        raise ValueError("training set is empty")
    if not isinstance(train_data, DatasetManifest):
        segmenter.mean, segmenter.std = _sample_stats(samples)
    val = _as_samples(val_data, segmenter.input_size, taxonomy) or samples

    model = segmenter.model
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = _make_optimizer(model.parameters(), cfg)
    tasks = sorted({s.task for s in samples})
    capacity = max(len(tasks), cfg.batch_size + 1)
    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    state = TrainState()
    best_weights = copy.deepcopy(model.state_dict())
    step = 0

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        pool = ImagePool(capacity, cfg.batch_size, seed=int(rng.integers(2**31)), drop_last=cfg.drop_last,
                         tasks=tasks)
        losses = []
        for batch in pool.feed(interleave_by_class(samples, rng)):
            lr = cfg.lr * (1 - min(step, total_steps - 1) / total_steps) ** cfg.lr_power
            for g in opt.param_groups:
                g["lr"] = lr
            imgs, masks = _augment(np.stack([s.image for s in batch]), np.stack([s.mask for s in batch]), rng, cfg)
            x = segmenter.prepare(imgs)
            y = torch.from_numpy(masks)
            t = torch.tensor([s.task for s in batch])
            loss = loss_fn(model(x, t), y, cfg.loss)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}, lr {lr:.3g}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1

        row = {"epoch": epoch, "loss": float(np.mean(losses)), "val_dice": float("nan"), "per_class": {}}
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            pcd = per_class_dice(segmenter, val)
            row["per_class"] = {taxonomy[t].code: v for t, v in pcd.items()}
            row["val_dice"] = float(np.mean(list(pcd.values()))) if pcd else 0.0
            if row["val_dice"] > state.best_val_dice:
                state.best_val_dice = row["val_dice"]
                state.best_epoch = epoch
                best_weights = copy.deepcopy(model.state_dict())
                if run_dir is not None:
                    state.best_checkpoint = os.path.join(run_dir, "best.ckpt")
                    save_checkpoint(state.best_checkpoint, segmenter,
                                    {"epoch": epoch, "val_dice": row["val_dice"], "config": asdict(cfg)})
        state.history.append(row)
        state.epoch = epoch
        if progress is not None:
            progress(row)
        log.info("epoch %d loss %.4f val dice %.4f", epoch, row["loss"], row["val_dice"])

    model.load_state_dict(best_weights)
    model.eval()
    return state


def _sample_stats(samples: list[PatchSample]):
    arr = np.stack([s.image for s in samples]).reshape(-1, 3).astype(np.float64) / 255.0
    return tuple(arr.mean(0).tolist()), tuple(np.maximum(arr.std(0), 1e-6).tolist())


def build_segmenter(cfg: ModelConfig | None = None, seed: int = 0, dtype=torch.float32,
                    taxonomy: Taxonomy = TAXONOMY) -> Segmenter:
    torch.manual_seed(seed)
    model = DynamicHeadNet(cfg or ModelConfig()).to(dtype)
    return Segmenter(model, taxonomy=taxonomy)
