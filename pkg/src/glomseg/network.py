"""Residual U-Net backbone with a class-aware controller and dynamic head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .taxonomy import NUM_CLASSES


@dataclass
class BackboneConfig:
    in_channels: int = 3
    stage_channels: tuple = (32, 64, 128, 256, 512)
    blocks_per_stage: int = 2
    decoder_out_channels: int = 8
    input_size: int = 512
    strict_size: bool = True

    @property
    def stages(self) -> int:
        return len(self.stage_channels)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.stages - 1)


@dataclass
class HeadConfig:
    hidden_channels: int = 8
    out_channels: int = 2


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    task_dim: int = NUM_CLASSES

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["stage_channels"] = list(self.backbone.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        bb = dict(d["backbone"])
        bb["stage_channels"] = tuple(bb["stage_channels"])
        return cls(BackboneConfig(**bb), HeadConfig(**d["head"]), d["task_dim"])

    @classmethod
    def reduced(cls, input_size: int = 64, stage_channels=(16, 32, 64), blocks_per_stage: int = 1, **kw):
        return cls(
            BackboneConfig(stage_channels=tuple(stage_channels), blocks_per_stage=blocks_per_stage,
                           input_size=input_size, **kw)
        )


def head_layout(in_channels: int = 8, hidden: int = 8, out: int = 2) -> list[tuple[int, int]]:
    """(out, in) shapes of the three 1x1 head layers."""
    return [(hidden, in_channels), (hidden, hidden), (out, hidden)]


def kernel_count(in_channels: int = 8, hidden: int = 8, out: int = 2) -> int:
    return sum(o * i + o for o, i in head_layout(in_channels, hidden, out))


class DynamicKernels(NamedTuple):
    """Per-item weights (B, out, in) and biases (B, out) of the three head layers."""

    weights: tuple
    biases: tuple

    @classmethod
    def from_flat(cls, omega: torch.Tensor, layout: list[tuple[int, int]]) -> "DynamicKernels":
        if omega.shape[-1] != sum(o * i + o for o, i in layout):
            raise ValueError(f"kernel vector has {omega.shape[-1]} values, layout needs "
                             f"{sum(o * i + o for o, i in layout)}")
        b = omega.shape[0]
        weights, biases, pos = [], [], 0
        for o, i in layout:
            weights.append(omega[:, pos:pos + o * i].reshape(b, o, i))
            pos += o * i
            biases.append(omega[:, pos:pos + o])
            pos += o
        return cls(tuple(weights), tuple(biases))

    def flat(self) -> torch.Tensor:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.flatten(1), b]
        return torch.cat(parts, dim=1)


class Prediction(NamedTuple):
    logits: torch.Tensor  # (B, 2, H, W)
    tasks: torch.Tensor  # (B,)

    @property
    def foreground_prob(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=1)[:, 1]

    def mask(self, threshold: float = 0.5) -> torch.Tensor:
        return self.foreground_prob > threshold


def _norm(ch: int) -> nn.GroupNorm:
    groups = 8 if ch % 8 == 0 else 1
    return nn.GroupNorm(groups, ch)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = _norm(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), _norm(out_ch))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResUNet(nn.Module):
    """Mirror-symmetric residual U-Net returning bottleneck features and decoder output."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        ch = list(cfg.stage_channels)
        self.stem = nn.Sequential(nn.Conv2d(cfg.in_channels, ch[0], 3, padding=1, bias=False), _norm(ch[0]), nn.ReLU())
        self.encoder = nn.ModuleList()
        for s, c in enumerate(ch):
            prev = ch[s - 1] if s else ch[0]
            blocks = [ResidualBlock(prev, c, stride=1 if s == 0 else 2)]
            blocks += [ResidualBlock(c, c) for _ in range(cfg.blocks_per_stage - 1)]
            self.encoder.append(nn.Sequential(*blocks))
        self.upsample = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for s in reversed(range(len(ch) - 1)):
            self.upsample.append(nn.ConvTranspose2d(ch[s + 1], ch[s], 2, stride=2))
            blocks = [ResidualBlock(2 * ch[s], ch[s])]
            blocks += [ResidualBlock(ch[s], ch[s]) for _ in range(cfg.blocks_per_stage - 1)]
            self.decoder.append(nn.Sequential(*blocks))
        self.out = nn.Conv2d(ch[0], cfg.decoder_out_channels, 1)

    def forward(self, x):
        skips = []
        x = self.stem(x)
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
        feats = x
        for up, dec, skip in zip(self.upsample, self.decoder, reversed(skips[:-1])):
            x = dec(torch.cat([up(x), skip], dim=1))
        return feats, self.out(x)


class Controller(nn.Module):
    """Maps pooled bottleneck features concatenated with the task vector to head kernels."""

    def __init__(self, feature_dim: int, task_dim: int, n_kernels: int):
        super().__init__()
        self.feature_dim = feature_dim
        self.task_dim = task_dim
        self.conv = nn.Conv2d(feature_dim + task_dim, n_kernels, 1)

    def forward(self, feats: torch.Tensor, task: torch.Tensor) -> torch.Tensor:
        if task.ndim != 2 or task.shape[1] != self.task_dim:
            raise ValueError(f"task vectors must have shape (B, {self.task_dim}), got {tuple(task.shape)}")
        if feats.shape[1] != self.feature_dim:
            raise ValueError(f"expected {self.feature_dim} feature channels, got {feats.shape[1]}")
        pooled = feats.mean(dim=(2, 3))
        x = torch.cat([pooled, task.to(pooled.dtype)], dim=1)
        return self.conv(x[:, :, None, None]).flatten(1)


def head_forward(m: torch.Tensor, kernels: DynamicKernels) -> torch.Tensor:
    """Apply the three per-item 1x1 convolutions; ReLU after the first two."""
    x = m
    n = len(kernels.weights)
    for k, (w, b) in enumerate(zip(kernels.weights, kernels.biases)):
        if w.shape[2] != x.shape[1]:
            raise ValueError(f"head layer {k + 1} expects {w.shape[2]} channels, got {x.shape[1]}")
        x = torch.einsum("boc,bchw->bohw", w, x) + b[:, :, None, None]
        if k < n - 1:
            x = F.relu(x)
    return x


class DynamicHeadNet(nn.Module):
    """One network serving every segmentation task through task-conditioned kernels."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.backbone = ResUNet(cfg.backbone)
        self.layout = head_layout(cfg.backbone.decoder_out_channels, cfg.head.hidden_channels, cfg.head.out_channels)
        self.n_kernels = sum(o * i + o for o, i in self.layout)
        self.controller = Controller(cfg.backbone.stage_channels[-1], cfg.task_dim, self.n_kernels)
        assert self.controller.conv.out_channels == self.n_kernels

    def check_input(self, x: torch.Tensor) -> None:
        bb = self.cfg.backbone
        if x.ndim != 4 or x.shape[1] != bb.in_channels:
            raise ValueError(f"expected (B, {bb.in_channels}, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if bb.strict_size:
            if (h, w) != (bb.input_size, bb.input_size):
                raise ValueError(f"expected {bb.input_size}x{bb.input_size} input, got {h}x{w}; resize before the network")
        elif h % bb.downsample_factor or w % bb.downsample_factor:
            raise ValueError(f"input size {h}x{w} is not a multiple of {bb.downsample_factor}")

    def backbone_forward(self, x: torch.Tensor):
        self.check_input(x)
        return self.backbone(x)

    def controller_forward(self, feats: torch.Tensor, task: torch.Tensor) -> DynamicKernels:
        return DynamicKernels.from_flat(self.controller(feats, task), self.layout)

    def forward(self, x: torch.Tensor, task: torch.Tensor) -> Prediction:
        """``task`` is either (B,) class indices or (B, m) one-hot vectors."""
        if task.ndim == 1:
            idx = task.long()
            task = F.one_hot(idx, self.cfg.task_dim).to(x.dtype)
        else:
            idx = task.argmax(dim=1)
        feats, m = self.backbone_forward(x)
        kernels = self.controller_forward(feats, task)
        return Prediction(head_forward(m, kernels), idx)

    def forward_tasks(self, x: torch.Tensor, tasks: list[int]) -> torch.Tensor:
        """Logits (B, len(tasks), 2, H, W) for several tasks sharing one backbone pass."""
        feats, m = self.backbone_forward(x)
        out = []
        for t in tasks:
            onehot = torch.zeros(x.shape[0], self.cfg.task_dim, dtype=x.dtype, device=x.device)
            onehot[:, t] = 1
            out.append(head_forward(m, self.controller_forward(feats, onehot)))
        return torch.stack(out, dim=1)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {"backbone": list(self.backbone.parameters()), "controller": list(self.controller.parameters())}
