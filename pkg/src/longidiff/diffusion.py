"""
Noise schedule, forward noising and reverse sampling for the conditional DDPM.

Timesteps are 1-indexed throughout (``t`` in ``1..T``); the schedule arrays
are stored 0-indexed, so ``alpha_bars[t - 1]`` is the cumulative product up to
and including step ``t``.

Note on notation: the noising formula ``x_t = sqrt(a_t) x_0 + sqrt(1 - a_t) eps``
uses the *cumulative* product ``alpha_bar_t = prod_{s<=t} (1 - beta_s)`` as
``a_t``. That is the usual DDPM reading and the one implemented here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear variance schedule with cached cumulative products (float64)."""

    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        if self.betas.shape != (self.T,) or self.alpha_bars.shape != (self.T,):
            raise ValueError("schedule arrays must have length T")

    def _check_t(self, t: int) -> None:
        if not 1 <= int(t) <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at step t; ``alpha_bar(0)`` is 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def posterior_variance(self, t: int) -> float:
        """Variance of q(x_{t-1} | x_t, x_0), i.e. beta_tilde_t."""
        ab = self.alpha_bar(t)
        ab_prev = self.alpha_bar(t - 1)
        return self.beta(t) * (1.0 - ab_prev) / (1.0 - ab)


def build_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                   beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    T = int(T)
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    # float64 limits: 1 - beta may round to 1, and the product may underflow
    if alpha_bars[-1] <= 0.0 or np.any(np.diff(alpha_bars) >= 0) or alpha_bars[0] >= 1.0:
        raise ValueError(f"schedule ({T}, {beta_start}, {beta_end}) is not representable in float64:"
                         " alpha_bar must stay strictly inside (0, 1) and strictly decreasing")
    return NoiseSchedule(T=T, betas=betas, alpha_bars=alpha_bars)


def _coef(values, like: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-sample coefficient against a (B, ...) tensor."""
    c = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if c.ndim == 0:
        return c
    return c.reshape(-1, *([1] * (like.ndim - 1)))


def _alpha_bar_at(s: NoiseSchedule, t) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > s.T):
        raise ValueError(f"timestep outside [1, {s.T}]")
    return s.alpha_bars[t - 1]


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Sample x_t from q(x_t | x_0) given the Gaussian draw ``eps``.

    ``t`` is an int or a length-B integer array for batched input.
    """
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    ab = _alpha_bar_at(s, t)
    return _coef(np.sqrt(ab), x0) * x0 + _coef(np.sqrt(1.0 - ab), x0) * eps


def predict_x0(x_t: torch.Tensor, t, eps_hat: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Invert the forward affine map given a noise estimate."""
    ab = _alpha_bar_at(s, t)
    return (x_t - _coef(np.sqrt(1.0 - ab), x_t) * eps_hat) / _coef(np.sqrt(ab), x_t)


def reverse_step(x_t: torch.Tensor, t: int, eps_hat: torch.Tensor, s: NoiseSchedule,
                 noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """One ancestral DDPM step x_t -> x_{t-1}.

    Uses the posterior variance beta_tilde_t. ``noise`` is a unit Gaussian draw;
    ``None`` means zero noise. No noise is added at t = 1 regardless.
    """
    if eps_hat.shape != x_t.shape:
        raise ValueError("eps_hat shape must match x_t")
    if not torch.isfinite(eps_hat).all():
        raise ValueError("eps_hat contains non-finite values")
    beta = s.beta(t)
    ab = s.alpha_bar(t)
    mean = (x_t - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
    if t > 1 and noise is not None:
        if noise.shape != x_t.shape:
            raise ValueError("noise shape must match x_t")
        mean = mean + np.sqrt(s.posterior_variance(t)) * noise
    return mean


def ddim_step(x_t: torch.Tensor, t: int, t_prev: int, eps_hat: torch.Tensor,
              s: NoiseSchedule) -> torch.Tensor:
    """Deterministic (zero-noise) step from t to t_prev < t; t_prev may be 0."""
    ab_prev = s.alpha_bar(t_prev)
    x0 = predict_x0(x_t, t, eps_hat, s)
    return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_hat


def ddim_invert_step(x_prev: torch.Tensor, t_prev: int, t: int, eps_hat: torch.Tensor,
                     s: NoiseSchedule) -> torch.Tensor:
    """Deterministic encoding step t_prev -> t (the reverse of :func:`ddim_step`)."""
    ab_prev = s.alpha_bar(t_prev)
    ab = s.alpha_bar(t)
    x0 = (x_prev - np.sqrt(1.0 - ab_prev) * eps_hat) / np.sqrt(ab_prev)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps_hat


def timestep_sequence(T: int, steps: int) -> list[int]:
    """Uniformly strided timesteps, descending, from T to 1 (``steps`` of them)."""
    if steps < 0 or steps > T:
        raise ValueError(f"steps must be in [0, {T}]")
    if steps == 0:
        return []
    return [int(v) for v in np.round(np.linspace(T, 1, steps))]


# (x_t, t) -> eps_hat, with z / n already bound by the caller
NoisePredictor = Callable[[torch.Tensor, int], torch.Tensor]


@torch.no_grad()
def sample_loop(start: torch.Tensor, predictor: NoisePredictor, s: NoiseSchedule,
                steps: int, generator: Optional[torch.Generator] = None,
                deterministic: bool = False) -> torch.Tensor:
    """Run the reverse chain from ``start`` through ``steps`` strided timesteps.

    With ``steps == T`` and ``deterministic=False`` this is plain ancestral
    DDPM sampling. Strided ancestral sampling uses the respaced betas
    ``1 - ab_t / ab_prev``; ``deterministic=True`` uses DDIM (eta = 0).
    """
    seq = timestep_sequence(s.T, steps)
    x = start
    if not seq:
        return x.clone()
    strided = len(seq) != s.T
    for i, t in enumerate(seq):
        t_prev = seq[i + 1] if i + 1 < len(seq) else 0
        eps_hat = predictor(x, t)
        if deterministic:
            x = ddim_step(x, t, t_prev, eps_hat, s)
        elif not strided:
            noise = None
            if t > 1:
                noise = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
            x = reverse_step(x, t, eps_hat, s, noise)
        else:
            x = _respaced_ancestral_step(x, t, t_prev, eps_hat, s, generator)
    return x


def _respaced_ancestral_step(x, t, t_prev, eps_hat, s, generator):
    ab = s.alpha_bar(t)
    ab_prev = s.alpha_bar(t_prev)
    beta = 1.0 - ab / ab_prev
    mean = (x - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
    if t_prev == 0:
        return mean
    var = beta * (1.0 - ab_prev) / (1.0 - ab)
    noise = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
    return mean + np.sqrt(var) * noise


@torch.no_grad()
def invert_loop(x0: torch.Tensor, predictor: NoisePredictor, s: NoiseSchedule,
                steps: int) -> torch.Tensor:
    """Deterministically encode a clean image to its terminal noise map."""
    seq = timestep_sequence(s.T, steps)[::-1]
    x = x0
    t_prev = 0
    for t in seq:
        # eps is evaluated at the current point, as in DDIM inversion
        eps_hat = predictor(x, max(t_prev, 1))
        x = ddim_invert_step(x, t_prev, t, eps_hat, s)
        t_prev = t
    return x


def _bind(net, z, n) -> NoisePredictor:
    def predictor(x, t):
        return net(x, torch.full((x.shape[0],), t, dtype=torch.long), z, n)
    return predictor


def reconstruct(start: torch.Tensor, z: torch.Tensor, n, net, s: NoiseSchedule, steps: Optional[int] = None,
                generator: Optional[torch.Generator] = None, deterministic: bool = False) -> torch.Tensor:
    """Decode ``start`` (terminal noise) into an image conditioned on z (and n).

    ``steps`` defaults to T. Ancestral noise comes from ``generator``, so a
    seeded generator makes the output reproducible bit for bit.
    """
    steps = s.T if steps is None else steps
    return sample_loop(start, _bind(net, z, n), s, steps, generator, deterministic)


def encode_noise(x0: torch.Tensor, z: torch.Tensor, n, net, s: NoiseSchedule,
                 steps: Optional[int] = None) -> torch.Tensor:
    """Deterministic terminal noise map of ``x0`` under the conditional model."""
    steps = s.T if steps is None else steps
    return invert_loop(x0, _bind(net, z, n), s, steps)
