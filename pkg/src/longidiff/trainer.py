"""
Joint encoder + DDPM pretraining on image pairs, and the two-phase
fine-tuning of the encoder for a binary outcome.

Training is deterministic for a given seed: pair sampling and augmentation
draw from one numpy Generator, timesteps and noise from one torch Generator,
and everything runs in a single process.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, save_checkpoint
from .data import (AugmentRanges, PairStrategy, ScanRecord, augment, count_single_scan,
                   sample_augment_params, sample_batch)
from .diffusion import NoiseSchedule, build_schedule, forward_diffuse
from .encoder import (EncoderConfig, OutcomeHead, OutcomeTask, SemanticEncoder, build_encoder,
                      build_head, encode)
from .evaluation import auc
from .unet import ConditioningMode, DenoiserNet, UNetConfig, build_unet

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    strategy: PairStrategy = PairStrategy.EARLIEST_TO_LATER
    conditioning_mode: ConditioningMode = ConditioningMode.TEMPORAL
    augment: bool = True
    seed: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    freeze_steps: int = 0
    grad_clip: float = 1.0
    loss_reduction: str = "mean"
    dtype: str = "float32"

    def __post_init__(self):
        self.strategy = PairStrategy(self.strategy)
        self.conditioning_mode = ConditioningMode(self.conditioning_mode)
        if self.steps < 0 or self.batch_size < 1 or self.T < 1:
            raise ValueError("steps, batch_size and T must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError("loss_reduction must be 'mean' or 'sum'")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @classmethod
    def finetune_defaults(cls, **kw) -> "TrainConfig":
        """10% of the steps with only the final layers trainable, lr 1e-4."""
        steps = kw.pop("steps", 10000)
        kw.setdefault("freeze_steps", steps // 10)
        return cls(steps=steps, learning_rate=kw.pop("learning_rate", 1e-4), **kw)

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        d["conditioning_mode"] = self.conditioning_mode.value
        return d


def schedule_for(cfg: TrainConfig) -> NoiseSchedule:
    return build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)


def loss_simple(net, encoder, x_a: torch.Tensor, x_b: torch.Tensor, n_b, s: NoiseSchedule,
                generator: Optional[torch.Generator] = None, t=None, eps=None,
                reduction: str = "mean") -> torch.Tensor:
    """Noise-prediction loss for a batch of pairs.

    Draws t ~ U{1..T} and eps ~ N(0, I) unless given, encodes z = Enc(x_a),
    noises x_b to step t and compares the network's prediction with eps.
    ``reduction="mean"`` averages over pixels and batch; ``"sum"`` sums the
    squared error per image and averages over the batch. ``n_b`` is None for
    spatial networks.
    """
    B = x_b.shape[0]
    if t is None:
        t = torch.randint(1, s.T + 1, (B,), generator=generator)
    t = np.asarray(t, dtype=np.int64).reshape(-1)
    if eps is None:
        eps = torch.randn(x_b.shape, generator=generator, dtype=x_b.dtype)
    z = encoder(x_a)
    x_t = forward_diffuse(x_b, t, eps, s)
    err = (net(x_t, torch.as_tensor(t), z, n_b) - eps) ** 2
    if reduction == "mean":
        return err.mean()
    if reduction == "sum":
        return err.flatten(1).sum(dim=1).mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def _grad_norm(params) -> float:
    sq = [p.grad.detach().pow(2).sum() for p in params if p.grad is not None]
    return float(torch.sqrt(torch.stack(sq).sum())) if sq else 0.0


def _check_finite(loss: torch.Tensor, step: int, lr: float, params, dump_dir: Optional[Path]):
    if torch.isfinite(loss):
        return
    diag = {"step": step, "lr": lr, "loss": float(loss.detach()), "grad_norm": _grad_norm(params)}
    if dump_dir is not None:
        (Path(dump_dir) / "nan_abort.json").write_text(json.dumps(diag, sort_keys=True) + "\n")
    raise NumericalError(f"non-finite loss at step {step}: {diag}")


class _StepLog:
    """Newline-delimited JSON training log: step, loss, lr, grad_norm, wall_ms."""

    def __init__(self, path: Optional[Path]):
        self.fh = open(path, "w") if path is not None else None
        self.t0 = time.perf_counter()

    def write(self, **rec):
        if self.fh is None:
            return
        rec["wall_ms"] = round((time.perf_counter() - self.t0) * 1000.0, 3)
        self.fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _records_to_torch(arr: np.ndarray, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


@dataclass
class PretrainResult:
    net: DenoiserNet
    encoder: SemanticEncoder
    losses: list
    checkpoint: Checkpoint
    checkpoint_path: Optional[Path] = None


def pretrain_checkpoint(net: DenoiserNet, encoder: SemanticEncoder, cfg: TrainConfig, step: int,
                        extra_meta: Optional[dict] = None) -> Checkpoint:
    ckpt = Checkpoint(meta={"kind": "pretrain", "step": step, "train_config": cfg.to_dict(),
                            "schedule": {"T": cfg.T, "beta_start": cfg.beta_start, "beta_end": cfg.beta_end},
                            **(extra_meta or {})})
    ckpt.add_module("denoiser", net, net.config.to_dict())
    ckpt.add_module("encoder", encoder, encoder.config.to_dict())
    return ckpt


def pretrain(cfg: TrainConfig, records: Sequence[ScanRecord], unet_cfg: Optional[UNetConfig] = None,
             enc_cfg: Optional[EncoderConfig] = None, out_dir=None,
             ranges: AugmentRanges = AugmentRanges.desk(), pixel_spacing_mm: float = 1.0,
             progress: Optional[Callable[[int, float], None]] = None) -> PretrainResult:
    """Jointly optimize encoder and denoiser with AdamW on sampled pairs.

    Spatial mode always samples same-time pairs. With ``out_dir`` set, writes
    ``train_log.jsonl``, periodic ``checkpoint_<step>.ckpt`` files and the
    final ``checkpoint.ckpt``.
    """
    if not records:
        raise ValueError("no training records")
    unet_cfg = unet_cfg or UNetConfig()
    enc_cfg = enc_cfg or EncoderConfig(z_dim=unet_cfg.z_dim, input_size=unet_cfg.input_size)
    unet_cfg.conditioning_mode = cfg.conditioning_mode
    strategy = cfg.strategy
    if cfg.conditioning_mode is ConditioningMode.SPATIAL:
        strategy = PairStrategy.SAME_TIME
    dtype = cfg.torch_dtype
    net = build_unet(unet_cfg, seed=cfg.seed, dtype=dtype)
    encoder = build_encoder(enc_cfg, seed=cfg.seed + 1, dtype=dtype)
    params = list(encoder.parameters()) + list(net.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    s = schedule_for(cfg)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    temporal = cfg.conditioning_mode is ConditioningMode.TEMPORAL
    single = count_single_scan(records)
    if strategy is not PairStrategy.SAME_TIME and single:
        log.info("%d of %d patients have a single scan; their pairs are same-scan views",
                 single, len(records))

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    steplog = _StepLog(out_dir / "train_log.jsonl" if out_dir is not None else None)
    losses = []
    try:
        for step in range(1, cfg.steps + 1):
            x_a, x_b, n_b = sample_batch(records, cfg.batch_size, strategy, rng, cfg.augment,
                                         ranges, pixel_spacing_mm)
            x_a, x_b = _records_to_torch(x_a, dtype), _records_to_torch(x_b, dtype)
            n = _records_to_torch(n_b, dtype) if temporal else None
            loss = loss_simple(net, encoder, x_a, x_b, n, s, gen, reduction=cfg.loss_reduction)
            _check_finite(loss, step, cfg.learning_rate, params, out_dir)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            gnorm = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip))
            opt.step()
            value = float(loss.detach())
            losses.append(value)
            steplog.write(step=step, loss=value, lr=cfg.learning_rate, grad_norm=gnorm)
            if progress is not None:
                progress(step, value)
            if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0 \
                    and step != cfg.steps:
                save_checkpoint(out_dir / f"checkpoint_{step:07d}.ckpt",
                                pretrain_checkpoint(net, encoder, cfg, step))
    finally:
        steplog.close()
    ckpt = pretrain_checkpoint(net, encoder, cfg, cfg.steps)
    path = save_checkpoint(out_dir / "checkpoint.ckpt", ckpt) if out_dir is not None else None
    return PretrainResult(net, encoder, losses, ckpt, path)


def checkpoint_schedule(ckpt: Checkpoint) -> NoiseSchedule:
    """Noise schedule the checkpoint's denoiser was trained with."""
    sched = ckpt.meta.get("schedule")
    if sched is None:
        tc = ckpt.meta.get("train_config", {})
        sched = {k: tc[k] for k in ("T", "beta_start", "beta_end") if k in tc}
    return build_schedule(**sched)


def load_pretrained(ckpt: Checkpoint) -> tuple[DenoiserNet, SemanticEncoder]:
    """Denoiser plus the encoder it was trained with (not a fine-tuned one)."""
    section = "recon_encoder" if ckpt.has("recon_encoder") else "encoder"
    ucfg = UNetConfig.from_dict(ckpt.sections["denoiser"]["config"])
    ecfg = EncoderConfig.from_dict(ckpt.sections[section]["config"])
    net = ckpt.load_into("denoiser", DenoiserNet(ucfg))
    enc = ckpt.load_into(section, SemanticEncoder(ecfg))
    return net, enc


# ---------------------------------------------------------------- fine-tuning

def task_label(rec: ScanRecord, task: OutcomeTask) -> Optional[int]:
    from .evaluation import mrs_good, nihss_improved
    task = OutcomeTask(task)
    if task is OutcomeTask.SYNTHETIC:
        return rec.synthetic_label
    if task is OutcomeTask.MRS_DISCHARGE:
        return None if rec.mrs_discharge is None else int(mrs_good(rec.mrs_discharge))
    if rec.nihss_admission is None or rec.nihss_24h is None:
        return None
    return int(nihss_improved(rec.nihss_admission, rec.nihss_24h))


def labeled(records: Sequence[ScanRecord], task) -> tuple[list, np.ndarray]:
    keep, ys = [], []
    for r in records:
        y = task_label(r, task)
        if y is not None:
            keep.append(r)
            ys.append(y)
    return keep, np.asarray(ys, dtype=np.int64)


def baseline_images(records: Sequence[ScanRecord]) -> np.ndarray:
    """Earliest scan of each patient, (N, 1, H, W)."""
    return np.stack([r.images[0] for r in records])[:, None]


@torch.no_grad()
def predict_scores(encoder: SemanticEncoder, head: OutcomeHead, images: np.ndarray,
                   batch: int = 128) -> np.ndarray:
    dtype = next(encoder.parameters()).dtype
    out = []
    for i in range(0, len(images), batch):
        x = _records_to_torch(images[i:i + batch], dtype)
        out.append(torch.sigmoid(head(encode(encoder, x))).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


@dataclass
class FinetuneResult:
    encoder: SemanticEncoder
    head: OutcomeHead
    history: list  # per-epoch {"epoch", "step", "val_auc", "train_loss"}
    losses: list


def finetune(encoder: SemanticEncoder, records: Sequence[ScanRecord], task, cfg: TrainConfig,
             val_records: Sequence[ScanRecord] = (), ranges: AugmentRanges = AugmentRanges.desk(),
             pixel_spacing_mm: float = 1.0, head: Optional[OutcomeHead] = None,
             on_epoch: Optional[Callable[[dict], None]] = None,
             on_step: Optional[Callable[[int, SemanticEncoder], None]] = None) -> FinetuneResult:
    """Train encoder + linear head with binary cross-entropy on baseline scans.

    For the first ``cfg.freeze_steps`` steps only the head and the encoder's
    final projection receive updates; afterwards every encoder weight does.
    An epoch is ``ceil(n_labeled / batch_size)`` steps; validation AUC is
    recorded after each one when ``val_records`` has both classes.
    """
    task = OutcomeTask(task)
    train, y = labeled(records, task)
    if not train:
        raise ValueError(f"no labeled records for task {task.value}")
    dtype = cfg.torch_dtype
    encoder = encoder.to(dtype)
    head = head if head is not None else build_head(encoder.config.z_dim, task, seed=cfg.seed + 2, dtype=dtype)
    images = baseline_images(train)
    val, y_val = labeled(val_records, task)
    val_images = baseline_images(val) if val else None
    can_validate = val and 0 < y_val.sum() < len(y_val)

    final = {id(p) for p in encoder.final_layer_parameters()}
    frozen = [p for p in encoder.parameters() if id(p) not in final]
    params = list(encoder.parameters()) + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = max(1, math.ceil(len(train) / cfg.batch_size))
    history, losses, running = [], [], []

    def set_frozen(flag: bool):
        for p in frozen:
            p.requires_grad_(not flag)

    set_frozen(cfg.freeze_steps > 0)
    try:
        for step in range(1, cfg.steps + 1):
            if step == cfg.freeze_steps + 1:
                set_frozen(False)
            idx = rng.integers(len(train), size=cfg.batch_size)
            batch = images[idx, 0]
            if cfg.augment:
                batch = np.stack([augment(im, sample_augment_params(rng, ranges), pixel_spacing_mm, ranges)
                                  for im in batch])
            x = _records_to_torch(batch[:, None], dtype)
            target = torch.as_tensor(y[idx], dtype=dtype)
            loss = F.binary_cross_entropy_with_logits(head(encode(encoder, x)), target)
            _check_finite(loss, step, cfg.learning_rate, params, None)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_([p for p in params if p.requires_grad], cfg.grad_clip)
            opt.step()
            losses.append(float(loss.detach()))
            running.append(losses[-1])
            if on_step is not None:
                on_step(step, encoder)
            if step % steps_per_epoch == 0 or step == cfg.steps:
                rec = {"epoch": len(history) + 1, "step": step,
                       "train_loss": float(np.mean(running))}
                running = []
                if can_validate:
                    rec["val_auc"] = auc(predict_scores(encoder, head, val_images), y_val)
                history.append(rec)
                if on_epoch is not None:
                    on_epoch(rec)
    finally:
        set_frozen(False)
    return FinetuneResult(encoder, head, history, losses)


def train_direct(records: Sequence[ScanRecord], task, cfg: TrainConfig, enc_cfg: EncoderConfig,
                 val_records: Sequence[ScanRecord] = (), **kw) -> FinetuneResult:
    """Supervised baseline: same encoder architecture from random init, no
    pretraining and no frozen phase."""
    encoder = build_encoder(enc_cfg, seed=cfg.seed + 1, dtype=cfg.torch_dtype)
    direct = TrainConfig(**{**cfg.to_dict(), "freeze_steps": 0})
    return finetune(encoder, records, task, direct, val_records, **kw)


def finetune_checkpoint(result: FinetuneResult, cfg: TrainConfig, task, base: Optional[Checkpoint] = None,
                        extra_meta: Optional[dict] = None) -> Checkpoint:
    """Encoder + head, carrying the denoiser section over from ``base``."""
    ckpt = Checkpoint(meta={"kind": "finetune", "task": OutcomeTask(task).value,
                            "train_config": cfg.to_dict(), **(extra_meta or {})})
    if base is not None and base.has("denoiser"):
        ckpt.sections["denoiser"] = dict(base.sections["denoiser"])
        s = checkpoint_schedule(base)
        ckpt.meta["schedule"] = {"T": s.T, "beta_start": float(s.betas[0]), "beta_end": float(s.betas[-1])}
        ckpt.tensors.update({k: v for k, v in base.tensors.items() if k.startswith("denoiser/")})
        # the denoiser was trained against the pretrained encoder, keep it for reconstruction
        src = "recon_encoder" if base.has("recon_encoder") else "encoder"
        ckpt.sections["recon_encoder"] = dict(base.sections[src])
        ckpt.tensors.update({"recon_encoder/" + k[len(src) + 1:]: v for k, v in base.tensors.items()
                             if k.startswith(src + "/")})
    ckpt.add_module("encoder", result.encoder, result.encoder.config.to_dict())
    ckpt.add_module("head", result.head, {"z_dim": result.encoder.config.z_dim},
                    task=OutcomeTask(task).value)
    return ckpt


def load_classifier(ckpt: Checkpoint) -> tuple[SemanticEncoder, OutcomeHead]:
    ecfg = EncoderConfig.from_dict(ckpt.sections["encoder"]["config"])
    enc = ckpt.load_into("encoder", SemanticEncoder(ecfg))
    head = OutcomeHead(ecfg.z_dim, ckpt.sections["head"].get("task", "synthetic"))
    ckpt.load_into("head", head)
    return enc, head
