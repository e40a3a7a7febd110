"""Shared test utilities: finite-difference gradient checks and a tiny cohort."""

import numpy as np
import torch

from longidiff.data import ScanRecord, preprocess
from longidiff.synth import PhantomSpec, draw_patient, render_scan


def make_records(n_patients=6, seed=0, spec=None):
    """Small preprocessed cohort held in memory (no files)."""
    spec = spec or PhantomSpec()
    out = []
    for k in range(n_patients):
        draw = draw_patient(np.random.default_rng([seed, k]), spec)
        noise = np.random.default_rng([seed, k, 1])
        imgs = [preprocess(render_scan(draw, n, spec, noise)[0], spec.pixel_spacing_mm) for n in draw.times]
        out.append(ScanRecord(f"P{k:04d}", imgs, list(draw.times), synthetic_label=draw.label))
    return out


def rel_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_check_tensors(fn, tensors, fraction=0.01, h=1e-4, seed=0, min_count=3):
    """Compare autograd with central differences for a sample of entries.

    ``fn`` maps nothing to a scalar, reading the (float64, requires_grad)
    ``tensors``. Returns (worst relative error, number of entries checked).
    The step h = 1e-4 balances O(h^2) truncation against O(eps/h) roundoff;
    it matters for entries whose true gradient is exactly zero, such as conv
    biases feeding a group norm.
    """
    for t in tensors:
        t.grad = None
    out = fn()
    out.backward()
    grads = [t.grad.detach().clone().reshape(-1) if t.grad is not None else torch.zeros(t.numel(), dtype=t.dtype)
             for t in tensors]
    sizes = np.array([t.numel() for t in tensors])
    total = int(sizes.sum())
    count = max(min_count, int(np.ceil(fraction * total)))
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(count, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            i = int(flat - offsets[k])
            view = tensors[k].data.view(-1)
            orig = float(view[i])
            view[i] = orig + h
            plus = float(fn())
            view[i] = orig - h
            minus = float(fn())
            view[i] = orig
            worst = max(worst, rel_error(float(grads[k][i]), (plus - minus) / (2 * h)))
    return worst, len(picks)


def fd_check_module(module, loss_fn, fraction=0.01, h=1e-4, seed=0):
    params = [p for p in module.parameters() if p.requires_grad]
    return fd_check_tensors(loss_fn, params, fraction, h, seed)
