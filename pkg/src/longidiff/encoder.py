"""Semantic encoder Enc(x) -> z and the binary outcome head."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import DEFAULT_GROUPS


class OutcomeTask(str, enum.Enum):
    NIHSS24 = "nihss24"
    MRS_DISCHARGE = "mrs_discharge"
    SYNTHETIC = "synthetic"


@dataclass
class EncoderConfig:
    """Small residual CNN standing in for the full-scale ResNet-50."""

    input_size: int = 32
    in_channels: int = 1
    base_channels: int = 16
    stage_multipliers: tuple = (1, 2, 4, 8)
    z_dim: int = 64
    groups: int = DEFAULT_GROUPS

    def __post_init__(self):
        self.stage_multipliers = tuple(int(m) for m in self.stage_multipliers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_multipliers"] = list(self.stage_multipliers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


class _EncoderBlock(nn.Module):
    def __init__(self, cin, cout, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SemanticEncoder(nn.Module):
    """Residual stages with 2x average-pool downsampling, global pooling and a
    final linear projection (``proj``) to the latent width."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        ch = config.base_channels
        self.stem = nn.Conv2d(config.in_channels, ch, 3, padding=1)
        self.stages = nn.ModuleList()
        for m in config.stage_multipliers:
            out = config.base_channels * m
            self.stages.append(_EncoderBlock(ch, out, config.groups))
            ch = out
        self.out_norm = nn.GroupNorm(config.groups, ch)
        self.proj = nn.Linear(ch, config.z_dim)

    def forward(self, x):
        return encode(self, x)

    def final_layer_parameters(self):
        return list(self.proj.parameters())


def build_encoder(config: EncoderConfig, seed: int = 0, dtype=torch.float32) -> SemanticEncoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        enc = SemanticEncoder(config)
    return enc.to(dtype=dtype)


def encode(encoder: SemanticEncoder, x: torch.Tensor) -> torch.Tensor:
    """(B, 1, S, S) images -> (B, z_dim) latent codes. No normalization of z."""
    cfg = encoder.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[-2:] != (cfg.input_size, cfg.input_size):
        raise ValueError(f"encoder expects (B, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}),"
                         f" got {tuple(x.shape)}")
    h = encoder.stem(x)
    for i, stage in enumerate(encoder.stages):
        if i > 0:
            h = F.avg_pool2d(h, 2)
        h = stage(h)
    h = F.silu(encoder.out_norm(h)).mean(dim=(2, 3))
    return encoder.proj(h)


class OutcomeHead(nn.Module):
    """Linear map from z to a logit, for one binary task."""

    def __init__(self, z_dim: int, task: OutcomeTask = OutcomeTask.SYNTHETIC):
        super().__init__()
        self.task = OutcomeTask(task)
        self.linear = nn.Linear(z_dim, 1)

    def forward(self, z):
        if z.shape[-1] != self.linear.in_features:
            raise ValueError(f"head expects {self.linear.in_features}-d latents, got {z.shape[-1]}")
        return self.linear(z).squeeze(-1)


def build_head(z_dim: int, task=OutcomeTask.SYNTHETIC, seed: int = 0, dtype=torch.float32) -> OutcomeHead:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        head = OutcomeHead(z_dim, task)
    return head.to(dtype=dtype)


def predict_outcome(encoder: SemanticEncoder, head: OutcomeHead, x: torch.Tensor) -> torch.Tensor:
    """P(positive outcome) per image.

    A (B, L, 1, S, S) input holds L lesion slices per patient; their latents
    are mean-pooled before the head.
    """
    if x.ndim == 5:
        B, L = x.shape[:2]
        z = encode(encoder, x.reshape(B * L, *x.shape[2:])).reshape(B, L, -1).mean(1)
        return torch.sigmoid(head(z))
    return torch.sigmoid(head(encode(encoder, x)))
