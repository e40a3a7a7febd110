"""Outcome dichotomization, classification metrics, paired AUC permutation test,
and reconstruction metrics (Frechet distance, MSE)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.stats import rankdata

FID_EPS = 1e-6


def mrs_good(mrs: int) -> bool:
    """Functionally independent at discharge: modified Rankin score below 3."""
    if not 0 <= mrs <= 6:
        raise ValueError(f"mRS must be in 0..6, got {mrs}")
    return mrs < 3


def nihss_improved(admission: int, day1: int) -> bool:
    """Next-day NIHSS at least 4 points below the admission score."""
    for v in (admission, day1):
        if not 0 <= v <= 42:
            raise ValueError(f"NIHSS must be in 0..42, got {v}")
    return admission - day1 >= 4


def _labels(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.dtype != bool:
        y = y.astype(int)
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be binary")
        y = y.astype(bool)
    return y


def auc(scores, labels) -> float:
    """Mann-Whitney AUC, P(s+ > s-) + P(s+ = s-) / 2, exact via mid-ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = _labels(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels must align")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def acc_f1(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    s = np.asarray(scores, dtype=np.float64)
    y = _labels(labels)
    if s.size == 0:
        raise ValueError("empty input")
    pred = s >= threshold
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    acc = float((pred == y).mean())
    denom = 2 * tp + fp + fn
    f1 = 2 * tp / denom if denom else 0.0
    return acc, float(f1)


def _auc_rows(s: np.ndarray, y: np.ndarray) -> np.ndarray:
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    ranks = rankdata(s, axis=1)
    return (ranks[:, y].sum(axis=1) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def permutation_test_auc(scores_a, scores_b, labels, n_perm: int = 1000, seed: int = 0) -> float:
    """Two-sided paired permutation p-value for AUC(a) - AUC(b).

    Each permutation swaps the two models' scores for every subject
    independently with probability 1/2.
    """
    if n_perm < 100:
        raise ValueError("use at least 100 permutations")
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    y = _labels(labels)
    if not (a.shape == b.shape == y.shape):
        raise ValueError("scores and labels must align")
    observed = abs(auc(a, y) - auc(b, y))
    rng = np.random.default_rng(seed)
    hits = 0
    for start in range(0, n_perm, 256):
        swap = rng.random((min(256, n_perm - start), a.shape[0])) < 0.5
        delta = _auc_rows(np.where(swap, b, a), y) - _auc_rows(np.where(swap, a, b), y)
        # tolerance guards against rounding when a permuted difference equals the observed one
        hits += int((np.abs(delta) >= observed - 1e-12).sum())
    return (1 + hits) / (1 + n_perm)


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.min() < -1e-8 * max(1.0, abs(w).max()):
        raise ValueError("matrix is not positive semi-definite")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The cross term uses the symmetric form (S_a^1/2 S_b S_a^1/2)^1/2, which has
    the same trace.
    """
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    ra = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(ra @ cov_b @ ra)
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * np.trace(cross))


def _gaussian_fit(feats: np.ndarray, eps: float):
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError("features must be (N >= 2, d)")
    cov = np.atleast_2d(np.cov(feats, rowvar=False)) + eps * np.eye(feats.shape[1])
    if np.linalg.eigvalsh(cov).min() <= 0:
        raise ValueError("degenerate covariance after regularization")
    return feats.mean(axis=0), cov


def fid(features_a, features_b, eps: float = FID_EPS) -> float:
    """Frechet distance between Gaussian fits of two feature sets; each
    covariance gets ``eps * I`` added."""
    mu_a, cov_a = _gaussian_fit(features_a, eps)
    mu_b, cov_b = _gaussian_fit(features_b, eps)
    return max(frechet_distance(mu_a, cov_a, mu_b, cov_b), 0.0)


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


class RandomFeatureEmbedder(nn.Module):
    """Frozen, seeded random conv net used as the feature map for FID here.

    Scores are only comparable between runs that use the same embedder seed.
    """

    def __init__(self, seed: int = 1234, width: int = 16, dim: int = 32, in_channels: int = 1):
        super().__init__()
        g = torch.Generator().manual_seed(seed)

        def conv(cin, cout):
            w = torch.randn(cout, cin, 3, 3, generator=g, dtype=torch.float64) / np.sqrt(cin * 9)
            return nn.Parameter(w, requires_grad=False)

        self.w1 = conv(in_channels, width)
        self.w2 = conv(width, 2 * width)
        self.w3 = conv(2 * width, 2 * width)
        self.proj = nn.Parameter(torch.randn(4 * width, dim, generator=g, dtype=torch.float64)
                                 / np.sqrt(4 * width), requires_grad=False)

    @torch.no_grad()
    def forward(self, x):
        x = torch.as_tensor(x, dtype=torch.float64)
        if x.ndim == 3:
            x = x[:, None]
        h = torch.tanh(F.conv2d(x, self.w1, padding=1))
        h = torch.tanh(F.conv2d(F.avg_pool2d(h, 2), self.w2, padding=1))
        h = torch.tanh(F.conv2d(F.avg_pool2d(h, 2), self.w3, padding=1))
        pooled = torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1)
        return (pooled @ self.proj).numpy()


def image_fid(images_a, images_b, embedder: Optional[nn.Module] = None) -> float:
    emb = embedder or RandomFeatureEmbedder()
    return fid(emb(images_a), emb(images_b))


@dataclass
class MetricReport:
    auc: Optional[float] = None
    acc: Optional[float] = None
    f1: Optional[float] = None
    fid: Optional[float] = None
    mse: Optional[float] = None
    p_values: dict = field(default_factory=dict)
    n: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        for k in ("auc", "acc", "f1"):
            v = getattr(self, k)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{k}={v} outside [0, 1]")
        for k in ("fid", "mse"):
            v = getattr(self, k)
            if v is not None and not v >= 0.0:
                raise ValueError(f"{k}={v} is negative")
        for k, p in self.p_values.items():
            if not 0.0 < p <= 1.0:
                raise ValueError(f"p-value {k}={p} outside (0, 1]")

    def to_json(self) -> str:
        """Stable serialization: sorted keys, two-space indent, trailing newline."""
        self.validate()
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))
