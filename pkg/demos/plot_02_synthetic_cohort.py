"""
A synthetic longitudinal lesion cohort
======================================

Each patient has one to five 32x32 head phantoms taken at increasing times
after onset. A dark lesion grows toward a final size set by the patient's
severity, and the binary label is drawn from that severity. This script
generates a small cohort and looks at what a classifier could hope to learn
from the first scan alone.
"""

import tempfile
from collections import Counter

import numpy as np

from longidiff.data import load_records, read_manifest
from longidiff.evaluation import auc
from longidiff.synth import generate_cohort, lesion_center_of_mass, read_ground_truth

out = tempfile.mkdtemp(prefix="cohort_")
generate_cohort(200, seed=7, out_dir=out)
records = load_records(read_manifest(f"{out}/manifest.csv"))
truth = read_ground_truth(f"{out}/phantoms.csv")
print(f"{len(records)} patients, {len(truth)} scans written to {out}")

# scan counts and timing
counts = Counter(len(r.times) for r in records)
print("scans per patient:", dict(sorted(counts.items())))
first = np.array([r.times[0] for r in records])
print(f"first scan: median {np.median(first):.0f} min, IQR {np.percentile(first, 25):.0f}-{np.percentile(first, 75):.0f}")

# the label is noisy: even the true first-scan lesion area does not separate it perfectly
labels = np.array([r.synthetic_label for r in records])
area0 = {t["patient_id"]: t["area_px"] for t in truth if t["scan_index"] == 0}
print(f"positives {labels.mean():.0%}; AUC of the true first-scan area {auc([area0[r.patient_id] for r in records], labels):.3f}")

# the lesion detector used by the reconstruction check, on visible lesions
errs = []
for t in truth:
    if t["contrast"] < 6:
        continue
    rec = next(r for r in records if r.patient_id == t["patient_id"])
    c = lesion_center_of_mass(rec.images[t["scan_index"]])
    if c is not None:
        errs.append(np.hypot(c[0] - t["center_row"], c[1] - t["center_col"]))
errs = np.array(errs)
print(f"detector error on {len(errs)} visible lesions: median {np.median(errs):.2f} px, within 3 px {np.mean(errs <= 3):.0%}")
