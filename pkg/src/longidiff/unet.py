"""
Conditional U-Net noise predictor eps_theta(x_t, t, z[, n]).

BigGAN-style residual blocks do the down/upsampling, self-attention sits at
the configured resolutions, each residual block's 1x1 skip convolution is
followed by a plain GroupNorm, and every other normalization is an
AdaGroupNorm driven by (z, psi(t)) or (z, psi(t), psi(log n)).
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import (DEFAULT_GROUPS, DEFAULT_MAX_PERIOD, AdaGroupNorm,
                           sinusoidal_encode, time_to_feature)


class ConditioningMode(str, enum.Enum):
    SPATIAL = "spatial"
    TEMPORAL = "temporal"


class ConfigError(ValueError):
    pass


@dataclass
class UNetConfig:
    base_channels: int = 8
    channel_multipliers: tuple = (1, 2, 4)
    attention_resolutions: tuple = (8,)
    input_size: int = 32
    conditioning_mode: ConditioningMode = ConditioningMode.TEMPORAL
    z_dim: int = 64
    num_res_blocks: int = 1
    groups: int = DEFAULT_GROUPS
    t_dim: int = 32
    n_dim: int = 32
    head_channels: int = 64
    in_channels: int = 1
    mlp_hidden: Optional[int] = None  # defaults to 2 * z_dim
    max_period: float = DEFAULT_MAX_PERIOD

    def __post_init__(self):
        self.conditioning_mode = ConditioningMode(self.conditioning_mode)
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        self.attention_resolutions = tuple(int(r) for r in self.attention_resolutions)

    @classmethod
    def full_scale(cls, mode=ConditioningMode.TEMPORAL) -> "UNetConfig":
        """Full-scale architecture: 512 px input, 7 levels, z of size 512."""
        return cls(base_channels=16, channel_multipliers=(1, 2, 4, 8, 16, 32, 64),
                   attention_resolutions=(16,), input_size=512, conditioning_mode=mode,
                   z_dim=512, t_dim=128, n_dim=128)

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or 2 * self.z_dim

    @property
    def block_dims(self) -> tuple:
        if self.conditioning_mode is ConditioningMode.TEMPORAL:
            return (self.z_dim, self.t_dim, self.n_dim)
        return (self.z_dim, self.t_dim)

    def level_resolutions(self) -> list[int]:
        return [self.input_size // 2 ** i for i in range(len(self.channel_multipliers))]

    def validate(self) -> None:
        if not self.channel_multipliers:
            raise ConfigError("channel_multipliers must be non-empty")
        levels = len(self.channel_multipliers)
        if self.input_size % 2 ** (levels - 1):
            raise ConfigError(f"input_size {self.input_size} not divisible by 2^{levels - 1}")
        reachable = set(self.level_resolutions())
        for r in self.attention_resolutions:
            if r not in reachable:
                raise ConfigError(f"attention resolution {r} not reachable from {self.input_size}")
        for m in self.channel_multipliers:
            if (self.base_channels * m) % self.groups:
                raise ConfigError(f"width {self.base_channels * m} not divisible by {self.groups} groups")
        for d in (self.t_dim, self.n_dim):
            if d % 2:
                raise ConfigError("embedding widths must be even")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conditioning_mode"] = self.conditioning_mode.value
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def _conv3(cin, cout):
    return nn.Conv2d(cin, cout, 3, padding=1)


def _zero(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ResBlock(nn.Module):
    def __init__(self, cin, cout, cfg: UNetConfig, updown: Optional[str] = None,
                 zero_init: bool = True):
        super().__init__()
        self.updown = updown
        self.in_norm = AdaGroupNorm(cin, cfg.block_dims, cfg.hidden, cfg.groups, zero_init=zero_init)
        self.in_conv = _conv3(cin, cout)
        self.out_norm = AdaGroupNorm(cout, cfg.block_dims, cfg.hidden, cfg.groups, zero_init=zero_init)
        self.out_conv = _conv3(cout, cout)
        if zero_init:
            _zero(self.out_conv)
        self.skip_conv = nn.Conv2d(cin, cout, 1)
        self.skip_norm = nn.GroupNorm(cfg.groups, cout)

    def _resample(self, x):
        if self.updown == "down":
            return F.avg_pool2d(x, 2)
        if self.updown == "up":
            return F.interpolate(x, scale_factor=2, mode="nearest")
        return x

    def forward(self, x, cond):
        h = F.silu(self.in_norm(x, cond))
        h = self._resample(h)
        x = self._resample(x)
        h = self.in_conv(h)
        h = F.silu(self.out_norm(h, cond))
        h = self.out_conv(h)
        return self.skip_norm(self.skip_conv(x)) + h


class AttentionBlock(nn.Module):
    def __init__(self, channels, cfg: UNetConfig, zero_init: bool = True):
        super().__init__()
        self.heads = max(1, channels // cfg.head_channels)
        self.norm = AdaGroupNorm(channels, cfg.block_dims, cfg.hidden, cfg.groups, zero_init=zero_init)
        self.qkv = nn.Conv1d(channels, 3 * channels, 1)
        self.proj = nn.Conv1d(channels, channels, 1)
        if zero_init:
            _zero(self.proj)

    def forward(self, x, cond):
        B, C, H, W = x.shape
        qkv = self.qkv(self.norm(x, cond).reshape(B, C, H * W))
        q, k, v = qkv.reshape(B * self.heads, 3 * C // self.heads, H * W).chunk(3, dim=1)
        scale = (C // self.heads) ** -0.5
        w = torch.softmax(torch.einsum("bci,bcj->bij", q, k) * scale, dim=-1)
        a = torch.einsum("bij,bcj->bci", w, v).reshape(B, C, H * W)
        return x + self.proj(a).reshape(B, C, H, W)


class DenoiserNet(nn.Module):
    """The conditional U-Net. ``forward`` is :func:`predict_noise`."""

    def __init__(self, config: UNetConfig, zero_init: bool = True):
        super().__init__()
        config.validate()
        self.config = cfg = config
        ch = cfg.base_channels
        self.input_conv = _conv3(cfg.in_channels, ch)

        self.down = nn.ModuleList()
        skips = [ch]
        res = cfg.input_size
        levels = len(cfg.channel_multipliers)
        for i, mult in enumerate(cfg.channel_multipliers):
            out = cfg.base_channels * mult
            for _ in range(cfg.num_res_blocks):
                layers = [ResBlock(ch, out, cfg, zero_init=zero_init)]
                ch = out
                if res in cfg.attention_resolutions:
                    layers.append(AttentionBlock(ch, cfg, zero_init))
                self.down.append(nn.ModuleList(layers))
                skips.append(ch)
            if i < levels - 1:
                self.down.append(nn.ModuleList([ResBlock(ch, ch, cfg, "down", zero_init)]))
                skips.append(ch)
                res //= 2

        mid = [ResBlock(ch, ch, cfg, zero_init=zero_init)]
        if res in cfg.attention_resolutions:
            mid.append(AttentionBlock(ch, cfg, zero_init))
        mid.append(ResBlock(ch, ch, cfg, zero_init=zero_init))
        self.middle = nn.ModuleList(mid)

        self.up = nn.ModuleList()
        for i, mult in reversed(list(enumerate(cfg.channel_multipliers))):
            out = cfg.base_channels * mult
            for j in range(cfg.num_res_blocks + 1):
                layers = [ResBlock(ch + skips.pop(), out, cfg, zero_init=zero_init)]
                ch = out
                if res in cfg.attention_resolutions:
                    layers.append(AttentionBlock(ch, cfg, zero_init))
                if i > 0 and j == cfg.num_res_blocks:
                    layers.append(ResBlock(ch, ch, cfg, "up", zero_init))
                    res *= 2
                self.up.append(nn.ModuleList(layers))

        self.out_norm = AdaGroupNorm(ch, cfg.block_dims, cfg.hidden, cfg.groups, zero_init=zero_init)
        self.out_conv = _conv3(ch, cfg.in_channels)
        if zero_init:
            _zero(self.out_conv)

    def conditioning(self, t, z, n, dtype):
        cfg = self.config
        B = z.shape[0]
        t = torch.as_tensor(t, dtype=dtype).expand(B) if np.ndim(t) == 0 else torch.as_tensor(t, dtype=dtype)
        cond = [z, sinusoidal_encode(t, cfg.t_dim, cfg.max_period, dtype=dtype)]
        if cfg.conditioning_mode is ConditioningMode.TEMPORAL:
            n = torch.as_tensor(n, dtype=dtype)
            if n.ndim == 0:
                n = n.expand(B)
            cond.append(sinusoidal_encode(time_to_feature(n), cfg.n_dim, cfg.max_period, dtype=dtype))
        return cond

    @staticmethod
    def _run(layers, h, cond):
        for layer in layers:
            h = layer(h, cond)
        return h

    def forward(self, x_t, t, z, n=None):
        return predict_noise(self, x_t, t, z, n)


def predict_noise(net: DenoiserNet, x_t: torch.Tensor, t, z: torch.Tensor,
                  n=None) -> torch.Tensor:
    """eps_hat for a (B, 1, S, S) batch at timestep(s) ``t`` given latent ``z``.

    ``n`` (minutes since onset) must be given exactly when the network is in
    temporal mode.
    """
    cfg = net.config
    temporal = cfg.conditioning_mode is ConditioningMode.TEMPORAL
    if temporal and n is None:
        raise ValueError("temporal network needs the scan time n")
    if not temporal and n is not None:
        raise ValueError("spatial network does not take a scan time")
    if x_t.ndim != 4 or x_t.shape[1] != cfg.in_channels or x_t.shape[-2:] != (cfg.input_size, cfg.input_size):
        raise ValueError(f"expected (B, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}) input,"
                         f" got {tuple(x_t.shape)}")
    if z.ndim != 2 or z.shape[0] != x_t.shape[0] or z.shape[1] != cfg.z_dim:
        raise ValueError(f"latent must be (B, {cfg.z_dim}), got {tuple(z.shape)}")
    cond = net.conditioning(t, z, n, x_t.dtype)
    h = net.input_conv(x_t)
    hs = [h]
    for layers in net.down:
        h = net._run(layers, h, cond)
        hs.append(h)
    h = net._run(net.middle, h, cond)
    for layers in net.up:
        h = torch.cat([h, hs.pop()], dim=1)
        h = net._run(layers, h, cond)
    return net.out_conv(F.silu(net.out_norm(h, cond)))


def build_unet(config: UNetConfig, seed: int = 0, zero_init: bool = True,
               dtype: torch.dtype = torch.float32, device=None) -> DenoiserNet:
    """Construct a DenoiserNet with parameters drawn from a private seeded stream.

    ``zero_init=False`` skips the zero initialization of output projections and
    conditioning heads, giving a network whose output depends on every input
    (used for sensitivity and gradient checks). ``device="meta"`` builds the
    module without allocating parameters, which is enough to count them.
    """
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if device is not None and str(device) == "meta":
            with torch.device("meta"):
                return DenoiserNet(config, zero_init=zero_init)
        net = DenoiserNet(config, zero_init=zero_init)
    return net.to(dtype=dtype)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
