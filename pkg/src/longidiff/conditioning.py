"""Sinusoidal encodings and the adaptive (latent/time conditioned) group norms."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_GROUPS = 8
NORM_EPS = 1e-5
DEFAULT_MAX_PERIOD = 10000.0


def time_to_feature(n):
    """log(1 + n) of an onset-to-scan time in minutes (n = 0 allowed)."""
    if torch.is_tensor(n):
        if (n < 0).any():
            raise ValueError("scan time must be non-negative")
        return torch.log1p(n)
    arr = np.asarray(n, dtype=np.float64)
    if np.any(arr < 0):
        raise ValueError("scan time must be non-negative")
    out = np.log1p(arr)
    return float(out) if out.ndim == 0 else out


def sinusoidal_encode(value, dim: int, max_period: float = DEFAULT_MAX_PERIOD,
                      dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Interleaved [sin, cos, sin, cos, ...] encoding of a scalar or a batch.

    Frequencies are ``max_period ** (-k / (dim / 2))`` for ``k = 0 .. dim/2 - 1``.
    Returns shape ``(dim,)`` for a scalar and ``(B, dim)`` for a length-B input.
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"encoding dim must be a positive even number, got {dim}")
    if max_period <= 0:
        raise ValueError("max_period must be positive")
    v = torch.as_tensor(value, dtype=dtype)
    scalar = v.ndim == 0
    v = v.reshape(-1, 1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=dtype, device=v.device) / half)
    args = v * freqs
    out = torch.stack([torch.sin(args), torch.cos(args)], dim=-1).reshape(v.shape[0], dim)
    return out[0] if scalar else out


def group_normalize(k: torch.Tensor, groups: int = DEFAULT_GROUPS, eps: float = NORM_EPS) -> torch.Tensor:
    """Parameter-free GroupNorm over (C, H, W) or (B, C, H, W) feature maps."""
    squeeze = k.ndim == 3
    if squeeze:
        k = k.unsqueeze(0)
    if k.shape[1] % groups:
        raise ValueError(f"{k.shape[1]} channels not divisible into {groups} groups")
    out = F.group_norm(k, groups, eps=eps)
    return out[0] if squeeze else out


class ConditionerMLP(nn.Module):
    """Two-layer perceptron mapping conditioning blocks to per-channel (s, b).

    The first layer keeps one weight matrix per input block (latent, time-since-
    onset encoding, timestep encoding), which is the same map as one linear layer
    on their concatenation but lets a block be dropped or zeroed exactly.
    With ``zero_init`` the output layer starts at zero, so s = 1 and b = 0.
    """

    def __init__(self, block_dims: Sequence[int], channels: int, hidden: int,
                 zero_init: bool = True):
        super().__init__()
        self.block_dims = tuple(int(d) for d in block_dims)
        self.channels = channels
        self.inputs = nn.ModuleList(
            nn.Linear(d, hidden, bias=(i == 0)) for i, d in enumerate(self.block_dims))
        self.out = nn.Linear(hidden, 2 * channels)
        if zero_init:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, *blocks: torch.Tensor):
        if len(blocks) != len(self.block_dims):
            raise ValueError(f"expected {len(self.block_dims)} conditioning blocks, got {len(blocks)}")
        h = None
        for layer, x, d in zip(self.inputs, blocks, self.block_dims):
            if x.shape[-1] != d:
                raise ValueError(f"conditioning block has width {x.shape[-1]}, expected {d}")
            y = layer(x)
            h = y if h is None else h + y
        out = self.out(F.silu(h))
        s, b = out.split(self.channels, dim=-1)
        return 1.0 + s, b


def _modulate(k: torch.Tensor, s: torch.Tensor, b: torch.Tensor, groups: int, eps: float):
    squeeze = k.ndim == 3
    if squeeze:
        k = k.unsqueeze(0)
        s, b = s.reshape(1, -1), b.reshape(1, -1)
    if s.shape[-1] != k.shape[1]:
        raise ValueError(f"affine params for {s.shape[-1]} channels, features have {k.shape[1]}")
    out = s[:, :, None, None] * group_normalize(k, groups, eps) + b[:, :, None, None]
    return out[0] if squeeze else out


def ada_spa_gn(k, z, t, mlp: ConditionerMLP, t_dim: int, groups: int = DEFAULT_GROUPS,
               eps: float = NORM_EPS, max_period: float = DEFAULT_MAX_PERIOD):
    """s * GroupNorm(k) + b with (s, b) = MLP(z, psi(t))."""
    if len(mlp.block_dims) != 2:
        raise ValueError("spatial conditioning expects an MLP over (z, psi(t))")
    t_emb = sinusoidal_encode(t, t_dim, max_period, dtype=k.dtype)
    if z.ndim == 1:
        t_emb = t_emb.reshape(-1)
    s, b = mlp(z, t_emb)
    return _modulate(k, s, b, groups, eps)


def ada_temp_gn(k, z, n, t, mlp: ConditionerMLP, t_dim: int, n_dim: int,
                groups: int = DEFAULT_GROUPS, eps: float = NORM_EPS,
                max_period: float = DEFAULT_MAX_PERIOD):
    """s * GroupNorm(k) + b with (s, b) = MLP(z, psi(t), psi(log(1 + n))).

    ``n`` is minutes since symptom onset. The MLP blocks are ordered
    (z, psi(t), psi(log-time)) so dropping the last block recovers
    :func:`ada_spa_gn` bit for bit.
    """
    if len(mlp.block_dims) != 3:
        raise ValueError("temporal conditioning expects an MLP over (z, psi(t), psi(log n))")
    n = torch.as_tensor(n, dtype=k.dtype)
    t_emb = sinusoidal_encode(t, t_dim, max_period, dtype=k.dtype)
    n_emb = sinusoidal_encode(time_to_feature(n), n_dim, max_period, dtype=k.dtype)
    if z.ndim == 1:
        t_emb, n_emb = t_emb.reshape(-1), n_emb.reshape(-1)
    s, b = mlp(z, t_emb, n_emb)
    return _modulate(k, s, b, groups, eps)


class AdaGroupNorm(nn.Module):
    """GroupNorm whose per-channel scale and shift come from a ConditionerMLP.

    The embeddings are computed once per network call and passed in as blocks;
    spatial layers take (z, psi(t)) and temporal layers (z, psi(t), psi(log n)).
    """

    def __init__(self, channels: int, block_dims: Sequence[int], hidden: int,
                 groups: int = DEFAULT_GROUPS, eps: float = NORM_EPS, zero_init: bool = True):
        super().__init__()
        if channels % groups:
            raise ValueError(f"{channels} channels not divisible into {groups} groups")
        self.groups = groups
        self.eps = eps
        self.mlp = ConditionerMLP(block_dims, channels, hidden, zero_init=zero_init)

    def forward(self, k: torch.Tensor, cond: Sequence[torch.Tensor]) -> torch.Tensor:
        s, b = self.mlp(*cond)
        return _modulate(k, s, b, self.groups, self.eps)
