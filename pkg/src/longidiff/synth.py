"""
Synthetic longitudinal lesion cohort.

Each patient gets a latent severity s* ~ U(0, 1) and 1-5 scans. A scan is a
head phantom (skull ring around uniform brain tissue, additive Gaussian
noise) with a dark lesion blob whose area and depth grow with time since
onset at a rate set by s*. The label is ``s* > 0.5``. Because the first scan
is taken at a random time, its lesion size is only a noisy readout of s*,
which keeps the prediction task learnable but not trivial.

Alongside the manifest the generator writes ``phantoms.csv``: the true
severity, lesion centre, area and contrast of every scan, for evaluation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.stats import norm

from .data import ManifestRow, write_manifest, write_raw

GROUND_TRUTH_COLUMNS = ["patient_id", "scan_index", "time_minutes", "severity", "center_row",
                        "center_col", "area_px", "contrast"]


def lognormal_from_quartiles(median: float, q1: float, q3: float) -> tuple[float, float]:
    """(mu, sigma) of a log-normal with exact ``median`` and quartiles fitted
    in log space by least squares."""
    mu = math.log(median)
    z = norm.ppf(0.75)
    sigma = ((math.log(q3) - mu) - (math.log(q1) - mu)) / (2 * z)
    return mu, sigma


@dataclass
class PhantomSpec:
    image_size: int = 32
    pixel_spacing_mm: float = 1.0
    skull_axes: tuple = (14.0, 12.0)  # outer semi-axes (rows, cols) in px
    skull_axes_jitter: float = 0.75
    skull_thickness: float = 1.6
    background: float = 0.0
    brain_intensity: float = 40.0
    skull_intensity: float = 80.0
    noise_sigma: float = 3.0
    lesion_center_extent: float = 0.55  # fraction of the inner axes
    area_min_px: float = 3.0
    area_max_px: float = 50.0
    contrast_max: float = 24.0
    growth_tau_minutes: float = 60.0
    scan_count_probs: tuple = (0.64, 0.19, 0.10, 0.04, 0.03)
    first_scan_median: float = 180.0
    first_scan_q1: float = 95.0
    first_scan_q3: float = 522.0
    interval_hours: tuple = (12.0, 48.0)
    missing_label_fraction: float = 0.0

    def __post_init__(self):
        self.skull_axes = tuple(float(a) for a in self.skull_axes)
        self.scan_count_probs = tuple(float(p) for p in self.scan_count_probs)
        self.interval_hours = tuple(float(h) for h in self.interval_hours)

    def validate(self) -> None:
        if len(self.scan_count_probs) != 5 or abs(sum(self.scan_count_probs) - 1) > 1e-9:
            raise ValueError("scan_count_probs must be 5 probabilities summing to 1")
        inner = min(self.skull_axes) - self.skull_thickness - self.skull_axes_jitter
        reach = self.lesion_center_extent * inner + math.sqrt(self.area_max_px / math.pi)
        if reach >= inner:
            raise ValueError("largest lesion would cross the skull")
        if max(self.skull_axes) + self.skull_axes_jitter >= self.image_size / 2:
            raise ValueError("skull does not fit in the image")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("skull_axes", "scan_count_probs", "interval_hours"):
            d[k] = list(d[k])
        return d


def lesion_footprint(severity: float, n: float, spec: PhantomSpec) -> tuple[float, float]:
    """(area in px, contrast) of the lesion ``n`` minutes after onset.

    Both grow as ``severity * (1 - exp(-n / tau))``, so they are monotone
    non-decreasing in severity and time, start at the seed area with zero
    contrast, and saturate at ``area_max_px`` / ``contrast_max``.
    """
    severity = min(max(float(severity), 0.0), 1.0)
    progress = severity * (1.0 - math.exp(-max(float(n), 0.0) / spec.growth_tau_minutes))
    area = spec.area_min_px + (spec.area_max_px - spec.area_min_px) * progress
    return area, spec.contrast_max * progress


@dataclass
class PatientDraw:
    severity: float
    times: list
    center: tuple  # (row, col) offset from image centre, px
    axes: tuple
    label: int
    label_missing: bool
    seed: int


def draw_patient(rng: np.random.Generator, spec: PhantomSpec) -> PatientDraw:
    severity = float(rng.uniform())
    k = int(rng.choice(5, p=spec.scan_count_probs)) + 1
    mu, sigma = lognormal_from_quartiles(spec.first_scan_median, spec.first_scan_q1, spec.first_scan_q3)
    times = [float(np.exp(rng.normal(mu, sigma)))]
    lo, hi = spec.interval_hours
    for _ in range(k - 1):
        times.append(times[-1] + 60.0 * float(rng.uniform(lo, hi)))
    axes = tuple(float(a + rng.uniform(-spec.skull_axes_jitter, spec.skull_axes_jitter))
                 for a in spec.skull_axes)
    inner = np.array(axes) - spec.skull_thickness
    r = math.sqrt(rng.uniform()) * spec.lesion_center_extent
    phi = rng.uniform(0, 2 * math.pi)
    center = (float(r * inner[0] * math.sin(phi)), float(r * inner[1] * math.cos(phi)))
    missing = bool(rng.uniform() < spec.missing_label_fraction)
    return PatientDraw(severity=severity, times=times, center=center, axes=axes,
                       label=int(severity > 0.5), label_missing=missing,
                       seed=int(rng.integers(2 ** 31)))


def _soft(d, width=0.5):
    return 1.0 / (1.0 + np.exp(np.clip(d / width, -50, 50)))


def render_scan(draw: PatientDraw, n: float, spec: PhantomSpec,
                rng: Optional[np.random.Generator]) -> tuple[np.ndarray, float, float]:
    """Raw phantom image for one scan, plus the lesion (area, contrast)."""
    size = spec.image_size
    c = (size - 1) / 2.0
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    y, x = rr - c, cc - c
    a0, a1 = draw.axes
    t = spec.skull_thickness
    outer = np.sqrt((y / a0) ** 2 + (x / a1) ** 2)
    inner = np.sqrt((y / (a0 - t)) ** 2 + (x / (a1 - t)) ** 2)
    head = _soft((outer - 1.0) * min(a0, a1))
    brain = _soft((inner - 1.0) * min(a0 - t, a1 - t))
    img = spec.background + (spec.skull_intensity - spec.background) * head
    img += (spec.brain_intensity - spec.skull_intensity) * brain

    area, contrast = lesion_footprint(draw.severity, n, spec)
    radius = math.sqrt(area / math.pi)
    d = np.hypot(y - draw.center[0], x - draw.center[1]) - radius
    img -= contrast * _soft(d) * brain
    if rng is not None and spec.noise_sigma > 0:
        img += rng.normal(0.0, spec.noise_sigma, img.shape)
    return img, area, contrast


def generate_cohort(n_patients: int, seed: int, spec: Optional[PhantomSpec] = None,
                    out_dir=".", manifest_name: str = "manifest.csv"):
    """Render the cohort to ``out_dir`` and write its manifest.

    Patient ``k`` draws from ``default_rng([seed, k])``, so every patient is
    reproducible on its own and the output does not depend on generation order.
    """
    if n_patients < 1:
        raise ValueError("need at least one patient")
    spec = spec or PhantomSpec()
    spec.validate()
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rows, truth = [], []
    width = max(4, len(str(n_patients - 1)))
    for k in range(n_patients):
        pid = f"P{k:0{width}d}"
        draw = draw_patient(np.random.default_rng([seed, k]), spec)
        noise_rng = np.random.default_rng([seed, k, draw.seed])
        label = None if draw.label_missing else draw.label
        for i, n in enumerate(draw.times):
            img, area, contrast = render_scan(draw, n, spec, noise_rng)
            rel = f"images/{pid}_s{i}.raw"
            write_raw(out_dir / rel, img)
            rows.append(ManifestRow(patient_id=pid, scan_index=i, time_minutes=round(n, 3),
                                    image_path=rel, synthetic_label=label))
            c = (spec.image_size - 1) / 2.0
            truth.append([pid, i, round(n, 3), repr(draw.severity), repr(c + draw.center[0]),
                          repr(c + draw.center[1]), repr(area), repr(contrast)])
    with open(out_dir / "phantoms.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GROUND_TRUTH_COLUMNS)
        w.writerows(truth)
    return write_manifest(out_dir / manifest_name, rows)


def read_ground_truth(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["scan_index"] = int(r["scan_index"])
        for k in ("time_minutes", "severity", "center_row", "center_col", "area_px", "contrast"):
            r[k] = float(r[k])
    return rows


def lesion_center_of_mass(img: np.ndarray, smooth: float = 1.0, rel_threshold: float = 0.5):
    """Centre (row, col) of the dark lesion in a normalized phantom slice.

    The brain is the region enclosed by the bright skull ring; lesion weight is
    how far a smoothed pixel falls below the brain's median, kept where it is
    at least ``rel_threshold`` of the deepest point. Returns None when no
    brain region or no lesion signal is found.
    """
    img = np.asarray(img, dtype=np.float64)
    sm = ndimage.gaussian_filter(img, smooth)
    skull_level = np.percentile(sm, 95)
    skull = sm > 0.5 * (skull_level + np.median(sm))
    interior = ndimage.binary_fill_holes(skull) & ~ndimage.binary_dilation(skull, iterations=1)
    if interior.sum() < 10:
        return None
    depth = np.where(interior, np.median(sm[interior]) - sm, 0.0)
    peak = depth.max()
    if peak <= 0:
        return None
    w = np.where(depth >= rel_threshold * peak, depth, 0.0)
    return tuple(float(v) for v in ndimage.center_of_mass(w))
