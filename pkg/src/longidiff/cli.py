"""
Command-line entry points: synth, pretrain, finetune, eval, reconstruct.

Every command resolves its effective configuration as built-in defaults,
overridden by the ``[<command>]`` section of ``--config`` (an INI file of
``key = value`` lines, values parsed as Python literals), overridden by
explicit flags. The effective configuration is printed at startup and
written to ``<out>/effective_config.json``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (DataError, PairStrategy, load_records, read_manifest,
                   split_hash, split_patients)
from .diffusion import encode_noise, reconstruct
from .encoder import EncoderConfig, OutcomeTask
from .evaluation import MetricReport, acc_f1, auc, image_fid, mse, permutation_test_auc
from .synth import PhantomSpec, generate_cohort
from .trainer import (NumericalError, TrainConfig, baseline_images, checkpoint_schedule, finetune,
                      finetune_checkpoint, labeled, load_classifier, load_pretrained, predict_scores, pretrain, train_direct)
from .unet import ConditioningMode, UNetConfig

log = logging.getLogger("longidiff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

PGM_WINDOW = (-5.0, 5.0)


class UsageError(Exception):
    pass


DEFAULTS = {
    "synth": {"patients": 500, "seed": 7, "out": "cohort", "missing_label_fraction": 0.0,
              "noise_sigma": PhantomSpec.noise_sigma, "growth_tau_minutes": PhantomSpec.growth_tau_minutes},
    "pretrain": {"manifest": None, "out": "pretrain", "seed": 0, "mode": "spatiotemporal",
                 "strategy": None, "no_augment": False, "steps": 20000, "batch_size": 16,
                 "learning_rate": 1e-3, "weight_decay": 1e-2, "T": 1000, "beta_start": 1e-4,
                 "beta_end": 0.02, "checkpoint_every": 5000, "loss_reduction": "mean",
                 "dtype": "float32", "split_seed": 7, "base_channels": 8,
                 "channel_multipliers": [1, 2, 4], "attention_resolutions": [8], "z_dim": 64,
                 "num_res_blocks": 1},
    "finetune": {"checkpoint": None, "manifest": None, "out": "finetune", "seed": 0,
                 "task": "synthetic", "steps": 10000, "batch_size": 16, "learning_rate": None,
                 "weight_decay": 1e-2, "freeze_fraction": 0.1, "no_augment": False, "direct": False,
                 "fold": 0, "split_seed": 7, "dtype": "float32"},
    "eval": {"checkpoint": None, "manifest": None, "out": "eval", "seed": 0, "compare": None,
             "n_perm": 1000, "recon_steps": 100, "split_seed": 7, "task": None, "threshold": 0.5},
    "reconstruct": {"checkpoint": None, "manifest": None, "out": "reconstruct", "seed": 0,
                    "inputs": None, "count": 8, "times": None, "allow_backward": False,
                    "steps": 1000, "start": "inverted", "split_seed": 7},
}


def _parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    p = argparse.ArgumentParser(prog="longidiff", description=__doc__.split("\n\n")[0].strip())
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpt=False, manifest=True):
        sp.add_argument("--config", default=None, help="INI file with a [command] section")
        sp.add_argument("--seed", type=int, default=S)
        sp.add_argument("--out", default=S, help="output directory")
        if manifest:
            sp.add_argument("--manifest", default=S)
            sp.add_argument("--split-seed", dest="split_seed", type=int, default=S)
        if ckpt:
            sp.add_argument("--checkpoint", default=S)

    sp = sub.add_parser("synth", help="generate a synthetic longitudinal cohort")
    common(sp, manifest=False)
    sp.add_argument("--patients", type=int, default=S)
    sp.add_argument("--missing-label-fraction", dest="missing_label_fraction", type=float, default=S)

    sp = sub.add_parser("pretrain", help="train encoder + conditional DDPM")
    common(sp)
    sp.add_argument("--mode", choices=["spatial", "spatiotemporal"], default=S)
    sp.add_argument("--strategy", choices=[s.value for s in PairStrategy], default=S)
    sp.add_argument("--no-augment", dest="no_augment", action="store_true", default=S)
    sp.add_argument("--steps", type=int, default=S)
    sp.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    sp.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=S)

    sp = sub.add_parser("finetune", help="fine-tune the encoder for an outcome")
    common(sp, ckpt=True)
    sp.add_argument("--task", choices=[t.value for t in OutcomeTask], default=S)
    sp.add_argument("--steps", type=int, default=S)
    sp.add_argument("--no-augment", dest="no_augment", action="store_true", default=S)
    sp.add_argument("--direct", action="store_true", default=S,
                    help="train the encoder from scratch (supervised baseline)")
    sp.add_argument("--fold", type=int, default=S, help="validation fold, -1 for none")

    sp = sub.add_parser("eval", help="metrics on the held-out split")
    common(sp, ckpt=True)
    sp.add_argument("--compare", nargs=2, metavar=("A", "B"), default=S)
    sp.add_argument("--n-perm", dest="n_perm", type=int, default=S)
    sp.add_argument("--recon-steps", dest="recon_steps", type=int, default=S)

    sp = sub.add_parser("reconstruct", help="reconstruct inputs at one or more scan times")
    common(sp, ckpt=True)
    sp.add_argument("--inputs", default=S, help="comma list of PATIENT[:SCAN_INDEX]")
    sp.add_argument("--count", type=int, default=S)
    sp.add_argument("--times", default=S, help="comma list of target times in minutes")
    sp.add_argument("--allow-backward", dest="allow_backward", action="store_true", default=S)
    sp.add_argument("--steps", type=int, default=S)
    sp.add_argument("--start", choices=["inverted", "noise"], default=S)
    return p


def _literal(v: str):
    try:
        return ast.literal_eval(v)
    except (ValueError, SyntaxError):
        return v


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        if not cp.read(args.config):
            raise UsageError(f"cannot read config file {args.config}")
        if cp.has_section(command):
            for k, v in cp.items(command):
                if k not in cfg:
                    raise UsageError(f"unknown key {k!r} in [{command}] of {args.config}")
                cfg[k] = _literal(v)
    for k, v in vars(args).items():
        if k in ("command", "config"):
            continue
        cfg[k] = v
    return cfg


def _start(command: str, cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(cfg, sort_keys=True, indent=2)
    print(f"[{command}] effective config:\n{text}", flush=True)
    (out / "effective_config.json").write_text(text + "\n")
    return out


def _require(cfg: dict, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _splits(manifest, cfg):
    sp = split_patients(manifest.patient_ids(), cfg["split_seed"])
    test = sp.pop("test")
    return test, sp


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: dict) -> Path:
    if int(cfg["patients"]) < 1:
        raise UsageError("--patients must be at least 1")
    out = _start("synth", cfg)
    spec = PhantomSpec(missing_label_fraction=cfg["missing_label_fraction"],
                       noise_sigma=cfg["noise_sigma"], growth_tau_minutes=cfg["growth_tau_minutes"])
    try:
        m = generate_cohort(int(cfg["patients"]), int(cfg["seed"]), spec, out)
    except OSError as exc:
        raise DataError(f"cannot write cohort: {exc}") from exc
    print(f"[synth] wrote {len(m.patient_ids())} patients, {len(m.rows)} scans to {m.path}")
    return m.path


def _pretrain_configs(cfg: dict):
    mode = ConditioningMode.SPATIAL if cfg["mode"] == "spatial" else ConditioningMode.TEMPORAL
    strategy = cfg["strategy"]
    if mode is ConditioningMode.SPATIAL:
        if strategy not in (None, PairStrategy.SAME_TIME.value):
            raise UsageError("spatial mode always uses same_time pairs; drop --strategy")
        strategy = PairStrategy.SAME_TIME.value
    elif strategy is None:
        strategy = PairStrategy.EARLIEST_TO_LATER.value
    tcfg = TrainConfig(steps=int(cfg["steps"]), batch_size=int(cfg["batch_size"]),
                       learning_rate=float(cfg["learning_rate"]), weight_decay=float(cfg["weight_decay"]),
                       T=int(cfg["T"]), beta_start=float(cfg["beta_start"]), beta_end=float(cfg["beta_end"]),
                       strategy=strategy, conditioning_mode=mode, augment=not cfg["no_augment"],
                       seed=int(cfg["seed"]), checkpoint_every=int(cfg["checkpoint_every"]),
                       loss_reduction=cfg["loss_reduction"], dtype=cfg["dtype"])
    ucfg = UNetConfig(base_channels=int(cfg["base_channels"]),
                      channel_multipliers=tuple(cfg["channel_multipliers"]),
                      attention_resolutions=tuple(cfg["attention_resolutions"]),
                      conditioning_mode=mode, z_dim=int(cfg["z_dim"]),
                      num_res_blocks=int(cfg["num_res_blocks"]))
    ecfg = EncoderConfig(z_dim=ucfg.z_dim, input_size=ucfg.input_size)
    return tcfg, ucfg, ecfg


def cmd_pretrain(cfg: dict) -> Path:
    _require(cfg, "manifest")
    tcfg, ucfg, ecfg = _pretrain_configs(cfg)
    out = _start("pretrain", cfg)
    manifest = read_manifest(cfg["manifest"])
    test, folds = _splits(manifest, cfg)
    train_ids = sorted(p for ids in folds.values() for p in ids)
    records = load_records(manifest, patient_ids=train_ids)
    print(f"[pretrain] {len(records)} training patients, test split hash {split_hash(test)}", flush=True)

    def progress(step, loss):
        if step % 1000 == 0:
            print(f"[pretrain] step {step} loss {loss:.5f}", flush=True)

    res = pretrain(tcfg, records, ucfg, ecfg, out_dir=out, progress=progress)
    print(f"[pretrain] wrote {res.checkpoint_path}")
    return res.checkpoint_path


def cmd_finetune(cfg: dict) -> Path:
    _require(cfg, "manifest")
    if not cfg["direct"]:
        _require(cfg, "checkpoint")
    direct = bool(cfg["direct"])
    lr = cfg["learning_rate"] if cfg["learning_rate"] is not None else (1e-3 if direct else 1e-4)
    steps = int(cfg["steps"])
    freeze = 0 if direct else int(round(float(cfg["freeze_fraction"]) * steps))
    tcfg = TrainConfig(steps=steps, batch_size=int(cfg["batch_size"]), learning_rate=float(lr),
                       weight_decay=float(cfg["weight_decay"]), freeze_steps=freeze,
                       augment=not cfg["no_augment"], seed=int(cfg["seed"]), dtype=cfg["dtype"])
    out = _start("finetune", cfg)
    manifest = read_manifest(cfg["manifest"])
    test, folds = _splits(manifest, cfg)
    fold = int(cfg["fold"])
    val_ids = folds.get(f"fold{fold}", []) if fold >= 0 else []
    train_ids = sorted(p for k, ids in folds.items() if k != f"fold{fold}" for p in ids)
    records = load_records(manifest, patient_ids=train_ids)
    val = load_records(manifest, patient_ids=val_ids) if val_ids else []
    task = OutcomeTask(cfg["task"])
    if not labeled(records, task)[0]:
        raise DataError(f"no labeled training rows for task {task.value}")

    base = None
    epoch_log = open(out / "finetune_log.jsonl", "w")

    def on_epoch(rec):
        epoch_log.write(json.dumps(rec, sort_keys=True) + "\n")
        if "val_auc" in rec:
            print(f"[finetune] epoch {rec['epoch']} step {rec['step']} val_auc {rec['val_auc']:.4f}", flush=True)

    try:
        if direct:
            ecfg = EncoderConfig()
            if cfg.get("checkpoint"):
                ecfg = EncoderConfig.from_dict(load_checkpoint(cfg["checkpoint"]).sections["encoder"]["config"])
            res = train_direct(records, task, tcfg, ecfg, val, on_epoch=on_epoch)
        else:
            base = load_checkpoint(cfg["checkpoint"])
            _, encoder = load_pretrained(base)
            res = finetune(encoder, records, task, tcfg, val, on_epoch=on_epoch)
    finally:
        epoch_log.close()
    ckpt = finetune_checkpoint(res, tcfg, task, base, {"direct": direct, "fold": fold})
    path = save_checkpoint(out / "head.ckpt", ckpt)
    print(f"[finetune] wrote {path}")
    return path


def _test_scores(ckpt_path, records, task):
    enc, head = load_classifier(load_checkpoint(ckpt_path))
    lab, y = labeled(records, task)
    return predict_scores(enc, head, baseline_images(lab)), y


def _reconstruct_batch(net, encoder, images, times, s, steps, start="inverted", target_times=None,
                       generator=None):
    dtype = next(net.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(images)).to(dtype)
    temporal = net.config.conditioning_mode is ConditioningMode.TEMPORAL
    with torch.no_grad():
        z = encoder(x)
        n_src = torch.as_tensor(times, dtype=dtype) if temporal else None
        n_tgt = torch.as_tensor(target_times if target_times is not None else times, dtype=dtype) \
            if temporal else None
        if start == "inverted":
            x_T = encode_noise(x, z, n_src, net, s, steps)
        else:
            x_T = torch.randn(x.shape, generator=generator, dtype=dtype)
        out = reconstruct(x_T, z, n_tgt, net, s, steps, generator=generator,
                          deterministic=(start == "inverted"))
    return out.double().numpy()


def _short(path) -> str:
    p = Path(path)
    return f"{p.parent.name}/{p.name}"


def cmd_eval(cfg: dict) -> Path:
    _require(cfg, "manifest")
    if not cfg["compare"]:
        _require(cfg, "checkpoint")
    out = _start("eval", cfg)
    manifest = read_manifest(cfg["manifest"])
    test, _ = _splits(manifest, cfg)
    shash = split_hash(test)
    print(f"[eval] test split: {len(test)} patients, hash {shash}", flush=True)
    records = load_records(manifest, patient_ids=test)
    primary = cfg["checkpoint"] or cfg["compare"][0]
    ckpt = load_checkpoint(primary)
    task = OutcomeTask(cfg["task"] or ckpt.meta.get("task", "synthetic"))
    report = MetricReport(seed=int(cfg["seed"]), extra={"split_hash": shash, "task": task.value,
                                                         "checkpoint": _short(primary)})
    if ckpt.has("head"):
        scores, y = _test_scores(primary, records, task)
        report.n = int(len(y))
        if len(y) and 0 < y.sum() < len(y):
            report.auc = auc(scores, y)
        if len(y):
            report.acc, report.f1 = acc_f1(scores, y, float(cfg["threshold"]))
    if ckpt.has("denoiser"):
        net, encoder = load_pretrained(ckpt)
        s = checkpoint_schedule(ckpt)
        images = baseline_images(records)
        times = [r.times[0] for r in records]
        recon = _reconstruct_batch(net, encoder, images, times, s, int(cfg["recon_steps"]))
        report.mse = mse(recon, images)
        report.fid = image_fid(recon, images)
    if cfg["compare"]:
        a, b = cfg["compare"]
        sa, y = _test_scores(a, records, task)
        sb, _ = _test_scores(b, records, task)
        p = permutation_test_auc(sa, sb, y, int(cfg["n_perm"]), int(cfg["seed"]))
        report.p_values = {"auc_a_vs_b": p}
        report.extra.update({"compare_a": _short(a), "compare_b": _short(b),
                             "auc_a": auc(sa, y), "auc_b": auc(sb, y)})
    path = out / "metrics.json"
    path.write_text(report.to_json())
    print(report.to_json(), end="")
    return path


def _write_pgm(path: Path, img: np.ndarray):
    lo, hi = PGM_WINDOW
    q = np.round((np.clip(img, lo, hi) - lo) / (hi - lo) * 65535).astype(">u2")
    h, w = q.shape
    path.write_bytes(f"P5\n{w} {h}\n65535\n".encode() + q.tobytes())


def read_pgm_values(path) -> np.ndarray:
    """Inverse of the reconstruct output mapping: 16-bit PGM back to z-units."""
    from PIL import Image
    lo, hi = PGM_WINDOW
    with Image.open(path) as im:
        q = np.asarray(im, dtype=np.float64)
    return lo + q / 65535.0 * (hi - lo)


def cmd_reconstruct(cfg: dict) -> Path:
    _require(cfg, "manifest", "checkpoint")
    ckpt = load_checkpoint(cfg["checkpoint"])
    if not ckpt.has("denoiser"):
        raise UsageError("checkpoint has no denoiser section")
    temporal = ckpt.sections["denoiser"]["config"]["conditioning_mode"] == ConditioningMode.TEMPORAL.value
    times = cfg["times"]
    if isinstance(times, str):
        times = [float(v) for v in times.split(",") if v.strip()]
    elif isinstance(times, (int, float)):
        times = [float(times)]
    if times and not temporal:
        raise UsageError("--times needs a spatiotemporal checkpoint")
    out = _start("reconstruct", cfg)
    manifest = read_manifest(cfg["manifest"])
    if cfg["inputs"]:
        picks = []
        for tok in str(cfg["inputs"]).split(","):
            pid, _, idx = tok.strip().partition(":")
            picks.append((pid, int(idx) if idx else 0))
    else:
        test, _ = _splits(manifest, cfg)
        picks = [(pid, 0) for pid in test[:int(cfg["count"])]]
    known = set(manifest.patient_ids())
    for pid, _ in picks:
        if pid not in known:
            raise DataError(f"unknown patient {pid}")
    recs = {r.patient_id: r for r in load_records(manifest, patient_ids=sorted({p for p, _ in picks}))}
    jobs = []
    for pid, idx in picks:
        rec = recs[pid]
        if idx >= rec.n_scans:
            raise DataError(f"patient {pid} has no scan {idx}")
        src = rec.times[idx]
        for tgt in (times or [src]):
            if tgt < src and not cfg["allow_backward"]:
                raise UsageError(f"target time {tgt} precedes source time {src} of {pid}:{idx};"
                                 " pass --allow-backward to permit")
            jobs.append((pid, idx, rec.images[idx], src, tgt))

    net, encoder = load_pretrained(ckpt)
    s = checkpoint_schedule(ckpt)
    steps = min(int(cfg["steps"]), s.T)
    gen = torch.Generator().manual_seed(int(cfg["seed"]))
    images = np.stack([j[2] for j in jobs])[:, None]
    recon = _reconstruct_batch(net, encoder, images, [j[3] for j in jobs], s, steps, cfg["start"],
                               [j[4] for j in jobs], gen)
    index = out / "reconstructions.csv"
    with open(index, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "scan_index", "source_time", "target_time", "file",
                    "window_lo", "window_hi"])
        for (pid, idx, img, src, tgt), rec_img in zip(jobs, recon):
            name = f"recon_{pid}_s{idx}_t{tgt:g}.pgm"
            _write_pgm(out / name, np.concatenate([img, rec_img[0]], axis=1))
            w.writerow([pid, idx, repr(src), repr(tgt), name, PGM_WINDOW[0], PGM_WINDOW[1]])
    print(f"[reconstruct] wrote {len(jobs)} images to {out}")
    return index


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "reconstruct": cmd_reconstruct}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("LONGIDIFF_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    parser = _parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        COMMANDS[args.command](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"longidiff {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"longidiff {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"longidiff {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
