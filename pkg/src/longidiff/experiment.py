"""
End-to-end synthetic experiment, driven entirely through the command line
entry points.

    synth -> pretrain (spatiotemporal) -> finetune -> finetune --direct
          -> eval --compare -> reconstruct -> lesion centre-of-mass check

``run_experiment`` returns a summary dict (also written to
``<work>/summary.json``) holding the held-out AUCs, the permutation p-value
and the reconstruction localisation rate.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import cli
from .data import read_manifest, split_patients
from .synth import lesion_center_of_mass, read_ground_truth


@dataclass
class ExperimentConfig:
    patients: int = 500
    cohort_seed: int = 7
    seed: int = 0
    pretrain_steps: int = 20000
    finetune_steps: int = 10000
    recon_cases: int = 50
    recon_steps: int = 1000
    # a lesion counts as visible from this ground-truth contrast (noise sigma is 3)
    min_contrast: float = 6.0
    com_tolerance_px: float = 3.0
    eval_recon_steps: int = 100
    n_perm: int = 1000


class StageFailed(RuntimeError):
    pass


def _run(argv: list[str]) -> None:
    code = cli.main(argv)
    if code != 0:
        raise StageFailed(f"`{' '.join(argv)}` exited with {code}")


def pick_recon_cases(manifest_path, split_seed: int, count: int, min_contrast: float) -> list[tuple[str, int]]:
    """Held-out scans with a visible lesion, in patient/scan order."""
    manifest = read_manifest(manifest_path)
    test = set(split_patients(manifest.patient_ids(), split_seed)["test"])
    truth = read_ground_truth(manifest.root / "phantoms.csv")
    picks = [(r["patient_id"], r["scan_index"]) for r in truth
             if r["patient_id"] in test and r["contrast"] >= min_contrast]
    return sorted(picks)[:count]


def com_check(recon_dir, tolerance_px: float = 3.0) -> dict:
    """Compare lesion centres of each original/reconstruction pair written by
    the reconstruct command."""
    recon_dir = Path(recon_dir)
    rows = []
    with open(recon_dir / "reconstructions.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            img = cli.read_pgm_values(recon_dir / row["file"])
            w = img.shape[1] // 2
            c_in = lesion_center_of_mass(img[:, :w])
            c_out = lesion_center_of_mass(img[:, w:])
            dist = None
            if c_in is not None and c_out is not None:
                dist = float(np.hypot(c_in[0] - c_out[0], c_in[1] - c_out[1]))
            rows.append({"patient_id": row["patient_id"], "scan_index": int(row["scan_index"]),
                         "distance_px": dist})
    hits = sum(r["distance_px"] is not None and r["distance_px"] <= tolerance_px for r in rows)
    return {"cases": len(rows), "within_tolerance": hits,
            "fraction": hits / len(rows) if rows else 0.0, "per_case": rows}


def run_experiment(work_dir, config: Optional[ExperimentConfig] = None) -> dict:
    c = config or ExperimentConfig()
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    seed = str(c.seed)
    split = str(c.cohort_seed)
    timings = {}

    def stage(name, argv):
        t0 = time.perf_counter()
        _run(argv)
        timings[name] = round(time.perf_counter() - t0, 1)

    cohort = work / "cohort"
    manifest = str(cohort / "manifest.csv")
    stage("synth", ["synth", "--patients", str(c.patients), "--seed", str(c.cohort_seed), "--out", str(cohort)])
    stage("pretrain", ["pretrain", "--manifest", manifest, "--split-seed", split, "--seed", seed,
                       "--mode", "spatiotemporal", "--steps", str(c.pretrain_steps),
                       "--out", str(work / "pretrain")])
    pre_ckpt = str(work / "pretrain" / "checkpoint.ckpt")
    stage("finetune", ["finetune", "--manifest", manifest, "--split-seed", split, "--seed", seed,
                       "--checkpoint", pre_ckpt, "--steps", str(c.finetune_steps), "--fold", "-1",
                       "--out", str(work / "finetune")])
    stage("direct", ["finetune", "--direct", "--manifest", manifest, "--split-seed", split, "--seed", seed,
                     "--steps", str(c.finetune_steps), "--fold", "-1", "--out", str(work / "direct")])
    ft_ckpt = str(work / "finetune" / "head.ckpt")
    dr_ckpt = str(work / "direct" / "head.ckpt")
    stage("eval", ["eval", "--manifest", manifest, "--split-seed", split, "--seed", seed,
                   "--checkpoint", ft_ckpt, "--compare", ft_ckpt, dr_ckpt,
                   "--n-perm", str(c.n_perm), "--recon-steps", str(c.eval_recon_steps),
                   "--out", str(work / "eval")])
    cases = pick_recon_cases(manifest, c.cohort_seed, c.recon_cases, c.min_contrast)
    stage("reconstruct", ["reconstruct", "--manifest", manifest, "--split-seed", split, "--seed", seed,
                          "--checkpoint", pre_ckpt, "--steps", str(c.recon_steps),
                          "--inputs", ",".join(f"{p}:{i}" for p, i in cases),
                          "--out", str(work / "reconstruct")])

    report = json.loads((work / "eval" / "metrics.json").read_text())
    com = com_check(work / "reconstruct", c.com_tolerance_px)
    summary = {
        "config": asdict(c),
        "auc_pretrained": report["extra"]["auc_a"],
        "auc_direct": report["extra"]["auc_b"],
        "p_value": report["p_values"]["auc_a_vs_b"],
        "n_test": report["n"],
        "fid": report["fid"],
        "mse": report["mse"],
        "com_fraction": com["fraction"],
        "com_cases": com["cases"],
        "com_per_case": com["per_case"],
        "seconds": timings,
    }
    (work / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary


if __name__ == "__main__":
    import sys
    out = run_experiment(sys.argv[1] if len(sys.argv) > 1 else "experiment_run")
    print(json.dumps({k: v for k, v in out.items() if k != "com_per_case"}, sort_keys=True, indent=2))
