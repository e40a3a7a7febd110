"""
The whole pipeline in miniature
===============================

The same command-line stages the full experiment runs, shrunk to a couple of
minutes on one CPU core. They are synth, spatiotemporal pretraining,
fine-tuning against direct training, evaluation with a permutation test, and
reconstruction at a later time point. With so few steps the numbers are not
meaningful. The full-size run is ``python -m longidiff.experiment <dir>``.
"""

import csv
import json
import tempfile
from pathlib import Path

from longidiff.cli import main, read_pgm_values
from longidiff.synth import lesion_center_of_mass

work = Path(tempfile.mkdtemp(prefix="longidiff_"))
m = str(work / "cohort" / "manifest.csv")


def run(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, f"{argv[0]} exited with {code}"


run("synth", "--patients", 120, "--out", work / "cohort")

# Pretraining pairs an earlier scan x_a with a later one x_b of the same
# patient. The denoiser learns to rebuild x_b from z = Enc(x_a) and x_b's time.
run("pretrain", "--manifest", m, "--steps", 300, "--checkpoint-every", 0, "--out", work / "pre")
log = [json.loads(l) for l in open(work / "pre" / "train_log.jsonl")]
print(f"pretrain loss: first {log[0]['loss']:.3f}, last 20 mean {sum(r['loss'] for r in log[-20:]) / 20:.3f}")

# Fine-tuning starts from the pretrained encoder. The direct baseline starts
# from scratch with the same step budget.
ckpt = work / "pre" / "checkpoint.ckpt"
run("finetune", "--manifest", m, "--checkpoint", ckpt, "--steps", 300, "--fold", -1, "--out", work / "ft")
run("finetune", "--direct", "--manifest", m, "--steps", 300, "--fold", -1, "--out", work / "dr")
run("eval", "--manifest", m, "--checkpoint", work / "ft" / "head.ckpt",
    "--compare", work / "ft" / "head.ckpt", work / "dr" / "head.ckpt",
    "--recon-steps", 20, "--out", work / "ev")
rep = json.loads((work / "ev" / "metrics.json").read_text())
print(f"held-out AUC: pretrained {rep['extra']['auc_a']:.3f}, direct {rep['extra']['auc_b']:.3f}, "
      f"p = {rep['p_values']['auc_a_vs_b']:.3f} (n = {rep['n']})")

# Reconstruct two scans as they would look one day after onset.
run("reconstruct", "--manifest", m, "--checkpoint", ckpt, "--count", 2, "--times", "1440",
    "--steps", 100, "--out", work / "rec")
fmt = lambda c: "none" if c is None else f"({c[0]:.1f}, {c[1]:.1f})"
for row in csv.DictReader(open(work / "rec" / "reconstructions.csv")):
    img = read_pgm_values(work / "rec" / row["file"])
    half = img.shape[1] // 2
    print(f"{row['patient_id']} scan {row['scan_index']}: {float(row['source_time']):.0f} -> "
          f"{float(row['target_time']):.0f} min, lesion centre {fmt(lesion_center_of_mass(img[:, :half]))} -> "
          f"{fmt(lesion_center_of_mass(img[:, half:]))}")
print("outputs in", work)
