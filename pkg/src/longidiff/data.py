"""
Preprocessing, CT-style augmentation, longitudinal pair sampling and the
cohort manifest.

Manifest: one CSV, one row per scan, columns ``MANIFEST_COLUMNS``. Empty cells
mean a missing outcome. ``image_path`` is relative to the manifest's folder.

Images are either

* ``.raw``: little-endian float64, C order, with a sidecar ``<name>.raw.hdr``
  text file holding ``shape = H W`` and ``dtype = float64-le``; or
* any grayscale format Pillow reads (``.pgm``, ``.png``), loaded as float.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["patient_id", "scan_index", "time_minutes", "image_path", "nihss_admission",
                    "nihss_24h", "mrs_discharge", "synthetic_label"]
MAX_SCANS = 5

FULL_SIZE = 512
FULL_SPACING_MM = 0.45
DESK_SIZE = 32
DESK_SPACING_MM = 1.0


class DataError(ValueError):
    """Malformed or degenerate input data."""


# ---------------------------------------------------------------- records

@dataclass
class ScanRecord:
    patient_id: str
    images: list  # preprocessed (H, W) float arrays, sorted by time
    times: list  # minutes since symptom onset
    nihss_admission: Optional[int] = None
    nihss_24h: Optional[int] = None
    mrs_discharge: Optional[int] = None
    synthetic_label: Optional[int] = None

    def __post_init__(self):
        if not self.images:
            raise DataError(f"patient {self.patient_id} has no scans")
        if len(self.images) != len(self.times):
            raise DataError(f"patient {self.patient_id}: images/times length mismatch")
        if len(self.images) > MAX_SCANS:
            raise DataError(f"patient {self.patient_id} has {len(self.images)} scans (max {MAX_SCANS})")
        if any(t < 0 for t in self.times):
            raise DataError(f"patient {self.patient_id}: negative scan time")
        if any(b < a for a, b in zip(self.times, self.times[1:])):
            raise DataError(f"patient {self.patient_id}: scans not sorted by time")

    @property
    def n_scans(self) -> int:
        return len(self.images)


class PairStrategy(str, enum.Enum):
    SAME_TIME = "same_time"
    EARLIEST_TO_LATER = "earliest_to_later"
    ANY_FORWARD = "any_forward"
    ANY_PAIR = "any_pair"


@dataclass
class PairSample:
    x_a: np.ndarray
    x_b: np.ndarray
    n_b: float
    strategy: PairStrategy
    index_a: int
    index_b: int
    n_a: float


# ---------------------------------------------------------------- preprocessing

def preprocess(raw: np.ndarray, pixel_spacing_mm: float, target_size: int = DESK_SIZE,
               target_spacing_mm: float = DESK_SPACING_MM, low_pct: float = 0.5,
               high_pct: float = 99.5) -> np.ndarray:
    """Resample to ``target_size``^2 at ``target_spacing_mm``, clip, z-score.

    Resampling is bilinear about the image centre; out-of-field samples take
    the image minimum. The clip bounds are nearest-rank percentiles (lower
    rank for the low bound, upper rank for the high one) so that re-applying
    the function to its own output is a no-op.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.size == 0:
        raise DataError("preprocess expects a non-empty 2-D image")
    zoom = target_spacing_mm / pixel_spacing_mm
    if raw.shape == (target_size, target_size) and zoom == 1.0:
        img = raw.copy()
    else:
        out_c = (target_size - 1) / 2.0
        in_c = (np.array(raw.shape, dtype=np.float64) - 1) / 2.0
        img = ndimage.affine_transform(raw, np.diag([zoom, zoom]), offset=in_c - zoom * out_c,
                                       output_shape=(target_size, target_size), order=1,
                                       mode="constant", cval=float(raw.min()))
    lo = np.percentile(img, low_pct, method="lower")
    hi = np.percentile(img, high_pct, method="higher")
    img = np.clip(img, lo, hi)
    std = img.std()
    if not std > 0:
        raise DataError("image has zero variance after clipping")
    return (img - img.mean()) / std


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentRanges:
    max_scale_dev: float = 0.05
    max_translation_mm: float = 20.0
    max_rotation: float = 0.5

    @classmethod
    def desk(cls) -> "AugmentRanges":
        # 32 px at 1 mm/px: +-4 px keeps the shift proportionate to the field of view
        return cls(max_translation_mm=4.0)


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    scale: float = 1.0
    translation: tuple = (0.0, 0.0)  # (dx, dy) in mm
    rotation: float = 0.0  # radians

    def validate(self, ranges: AugmentRanges = AugmentRanges()) -> None:
        if abs(self.scale - 1.0) > ranges.max_scale_dev + 1e-12:
            raise ValueError(f"scale {self.scale} outside 1 +- {ranges.max_scale_dev}")
        if any(abs(d) > ranges.max_translation_mm + 1e-12 for d in self.translation):
            raise ValueError(f"translation {self.translation} exceeds {ranges.max_translation_mm} mm")
        if abs(self.rotation) > ranges.max_rotation + 1e-12:
            raise ValueError(f"rotation {self.rotation} exceeds {ranges.max_rotation} rad")


def sample_augment_params(rng: np.random.Generator, ranges: AugmentRanges = AugmentRanges()) -> AugmentParams:
    return AugmentParams(
        flip=bool(rng.integers(2)),
        scale=float(1.0 + rng.uniform(-ranges.max_scale_dev, ranges.max_scale_dev)),
        translation=tuple(float(v) for v in rng.uniform(-ranges.max_translation_mm,
                                                         ranges.max_translation_mm, size=2)),
        rotation=float(rng.uniform(-ranges.max_rotation, ranges.max_rotation)),
    )


def augment(x: np.ndarray, p: AugmentParams, pixel_spacing_mm: float = DESK_SPACING_MM,
            ranges: AugmentRanges = AugmentRanges(), cval: float = 0.0) -> np.ndarray:
    """Left-right flip, then isotropic scale and rotation about the centre, then
    translation. Bilinear resampling, constant padding with ``cval``."""
    p.validate(ranges)
    x = np.asarray(x, dtype=np.float64)
    if p.flip:
        x = x[:, ::-1]
    if p.scale == 1.0 and p.rotation == 0.0 and p.translation == (0.0, 0.0):
        return x.copy()
    c = (np.array(x.shape, dtype=np.float64) - 1) / 2.0
    cos, sin = np.cos(p.rotation), np.sin(p.rotation)
    # forward map (row, col): out = c + s R (in - c) + shift; affine_transform wants the inverse
    fwd = p.scale * np.array([[cos, -sin], [sin, cos]])
    shift = np.array([p.translation[1], p.translation[0]]) / pixel_spacing_mm
    inv = np.linalg.inv(fwd)
    offset = c - inv @ (c + shift)
    return ndimage.affine_transform(x, inv, offset=offset, order=1, mode="constant", cval=cval)


# ---------------------------------------------------------------- pair sampling

def _pick_indices(n: int, strategy: PairStrategy, rng: np.random.Generator) -> tuple[int, int]:
    if strategy is PairStrategy.SAME_TIME:
        i = int(rng.integers(n))
        return i, i
    if strategy is PairStrategy.EARLIEST_TO_LATER:
        return 0, int(rng.integers(n))
    if strategy is PairStrategy.ANY_FORWARD:
        # uniform over the n(n+1)/2 ordered pairs i <= j
        k = int(rng.integers(n * (n + 1) // 2))
        i = 0
        while k >= n - i:
            k -= n - i
            i += 1
        return i, i + k
    if strategy is PairStrategy.ANY_PAIR:
        return int(rng.integers(n)), int(rng.integers(n))
    raise ValueError(f"unknown strategy {strategy}")


def sample_pair(rec: ScanRecord, strategy: PairStrategy, rng: np.random.Generator,
                augment_on: bool = True, ranges: AugmentRanges = AugmentRanges.desk(),
                pixel_spacing_mm: float = DESK_SPACING_MM) -> PairSample:
    """Draw (x_a, x_b, n_b) from one patient's scans.

    A single-scan patient always yields two views of that scan whatever the
    strategy.
    """
    strategy = PairStrategy(strategy)
    if rec.n_scans == 0:
        raise DataError("cannot sample a pair from an empty record")
    i, j = _pick_indices(rec.n_scans, strategy, rng)
    x_a, x_b = rec.images[i], rec.images[j]
    if augment_on:
        x_a = augment(x_a, sample_augment_params(rng, ranges), pixel_spacing_mm, ranges)
        x_b = augment(x_b, sample_augment_params(rng, ranges), pixel_spacing_mm, ranges)
    else:
        x_a, x_b = np.array(x_a, dtype=np.float64), np.array(x_b, dtype=np.float64)
    return PairSample(x_a=x_a, x_b=x_b, n_b=float(rec.times[j]), strategy=strategy,
                      index_a=i, index_b=j, n_a=float(rec.times[i]))


def sample_batch(records: Sequence[ScanRecord], batch_size: int, strategy: PairStrategy,
                 rng: np.random.Generator, augment_on: bool = True,
                 ranges: AugmentRanges = AugmentRanges.desk(),
                 pixel_spacing_mm: float = DESK_SPACING_MM):
    """Stack ``batch_size`` pairs from patients drawn uniformly with replacement.

    Returns (x_a, x_b, n_b) as float64 arrays of shape (B, 1, H, W), (B, 1, H, W), (B,).
    """
    idx = rng.integers(len(records), size=batch_size)
    pairs = [sample_pair(records[k], strategy, rng, augment_on, ranges, pixel_spacing_mm) for k in idx]
    x_a = np.stack([p.x_a for p in pairs])[:, None]
    x_b = np.stack([p.x_b for p in pairs])[:, None]
    n_b = np.array([p.n_b for p in pairs])
    return x_a, x_b, n_b


def count_single_scan(records: Sequence[ScanRecord]) -> int:
    return sum(r.n_scans == 1 for r in records)


# ---------------------------------------------------------------- image files

def write_raw(path, arr: np.ndarray) -> None:
    path = Path(path)
    arr = np.ascontiguousarray(arr, dtype="<f8")
    path.write_bytes(arr.tobytes())
    Path(str(path) + ".hdr").write_text(
        "shape = " + " ".join(str(s) for s in arr.shape) + "\ndtype = float64-le\n")


def read_raw(path) -> np.ndarray:
    hdr = {}
    for line in Path(str(path) + ".hdr").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            hdr[k.strip()] = v.strip()
    if hdr.get("dtype") != "float64-le":
        raise DataError(f"{path}: unsupported raw dtype {hdr.get('dtype')!r}")
    shape = tuple(int(s) for s in hdr["shape"].split())
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f8")
    if data.size != int(np.prod(shape)):
        raise DataError(f"{path}: {data.size} values, header says {shape}")
    return data.reshape(shape).astype(np.float64)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing image {path}")
    if path.suffix == ".raw":
        return read_raw(path)
    from PIL import Image
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64)


# ---------------------------------------------------------------- manifest

@dataclass
class ManifestRow:
    patient_id: str
    scan_index: int
    time_minutes: float
    image_path: str
    nihss_admission: Optional[int] = None
    nihss_24h: Optional[int] = None
    mrs_discharge: Optional[int] = None
    synthetic_label: Optional[int] = None


@dataclass
class CohortManifest:
    path: Path
    rows: list = field(default_factory=list)

    @property
    def root(self) -> Path:
        return self.path.parent

    def patient_ids(self) -> list[str]:
        return sorted({r.patient_id for r in self.rows})


def _opt_int(s: str):
    s = s.strip()
    return None if s == "" else int(s)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_manifest(path, rows: Sequence[ManifestRow]) -> CohortManifest:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in rows:
            w.writerow([_fmt(getattr(r, c)) for c in MANIFEST_COLUMNS])
    return CohortManifest(path, list(rows))


def read_manifest(path) -> CohortManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"manifest missing columns: {sorted(missing)}")
        for line in reader:
            try:
                rows.append(ManifestRow(
                    patient_id=line["patient_id"], scan_index=int(line["scan_index"]),
                    time_minutes=float(line["time_minutes"]), image_path=line["image_path"],
                    nihss_admission=_opt_int(line["nihss_admission"]),
                    nihss_24h=_opt_int(line["nihss_24h"]),
                    mrs_discharge=_opt_int(line["mrs_discharge"]),
                    synthetic_label=_opt_int(line["synthetic_label"])))
            except ValueError as exc:
                raise DataError(f"bad manifest row {line}: {exc}") from exc
    return CohortManifest(path, rows)


def load_records(manifest: CohortManifest, pixel_spacing_mm: float = DESK_SPACING_MM,
                 target_size: int = DESK_SIZE, target_spacing_mm: float = DESK_SPACING_MM,
                 patient_ids: Optional[Sequence[str]] = None) -> list[ScanRecord]:
    """Read and preprocess every scan, grouped per patient and sorted by time."""
    by_patient: dict[str, list[ManifestRow]] = {}
    for r in manifest.rows:
        by_patient.setdefault(r.patient_id, []).append(r)
    wanted = sorted(by_patient) if patient_ids is None else list(patient_ids)
    records = []
    for pid in wanted:
        rows = sorted(by_patient[pid], key=lambda r: (r.time_minutes, r.scan_index))
        images = [preprocess(read_image(manifest.root / r.image_path), pixel_spacing_mm,
                             target_size, target_spacing_mm) for r in rows]
        first = rows[0]
        records.append(ScanRecord(
            patient_id=pid, images=images, times=[r.time_minutes for r in rows],
            nihss_admission=first.nihss_admission, nihss_24h=first.nihss_24h,
            mrs_discharge=first.mrs_discharge, synthetic_label=first.synthetic_label))
    return records


# ---------------------------------------------------------------- splits

def _unit_hash(*parts) -> float:
    h = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "big") / 2.0 ** 64


def assign_split(patient_id: str, seed: int, test_fraction: float = 0.2, folds: int = 5) -> str:
    """'test' or 'fold<k>' as a pure function of (patient_id, seed)."""
    if _unit_hash("test", seed, patient_id) < test_fraction:
        return "test"
    return f"fold{int(_unit_hash('fold', seed, patient_id) * folds)}"


def split_patients(patient_ids: Sequence[str], seed: int, test_fraction: float = 0.2,
                   folds: int = 5) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {"test": []}
    out.update({f"fold{k}": [] for k in range(folds)})
    for pid in sorted(patient_ids):
        out[assign_split(pid, seed, test_fraction, folds)].append(pid)
    return out


def split_hash(ids: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(sorted(ids)).encode()).hexdigest()[:16]
