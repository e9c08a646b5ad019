"""Command-line surface: gen / train / detect / eval / sweep.

One JSON config document drives every command; flags override config
values; every run directory receives a fully materialized
resolved_config.json. Exit codes: 0 ok, 2 config, 3 io, 4 format,
5 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dpl, evaluation, mke, synth, train as train_mod
from .errors import ConfigError, FormatError, HabitError, ZeroRow

log = logging.getLogger("habit")

DEFAULT_CONFIG = {
    "gen": {
        "n_triplets": 2000,
        "n_gallery": 2500,
        "d_in": 16,
        "n_attrs": 8,
        "sigma": 0.0,
        "partial_fraction": 0.5,
        "unmentioned_noise_std": 0.1,
        "seed": 0,
    },
    "train": {
        "epochs": 100,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "weight_decay": 1e-4,
        "tau": 0.1,
        "tau_mk": 0.1,
        "kappa": 10.0,
        "gamma": 0.5,
        "m_base": 0.2,
        "dbscan_eps": 0.05,
        "dbscan_min_pts": 0,
        "q_tokens": 4,
        "dim": 16,
        "seed": 0,
        "ablations": [],
    },
    "split": {"test_fraction": 0.2, "seed": 0},
    "eval": {"ks": [1, 5, 10, 50], "subset_size": 6, "subset_seed": 0},
}


def _merge_section(defaults, given, path):
    out = dict(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path}.{key}" if path else f"unknown config key {key}")
        if isinstance(defaults[key], dict):
            out[key] = _merge_section(defaults[key], value, f"{path}.{key}" if path else key)
        else:
            out[key] = value
    return out


def load_config(path: str | None, seed: int | None = None) -> dict:
    given = {}
    if path is not None:
        with open(path) as fh:
            try:
                given = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: not valid JSON: {exc}") from exc
        if not isinstance(given, dict):
            raise FormatError(f"{path}: config root must be a JSON object")
    cfg = _merge_section(DEFAULT_CONFIG, given, "")
    if seed is not None:
        cfg["gen"]["seed"] = seed
        cfg["train"]["seed"] = seed
        cfg["split"]["seed"] = seed
        cfg["eval"]["subset_seed"] = seed
    return cfg


def gen_config(cfg: dict) -> synth.GenConfig:
    g = synth.GenConfig(**cfg["gen"])
    g.validate()
    return g


def train_config(cfg: dict) -> train_mod.TrainConfig:
    kw = dict(cfg["train"])
    kw["ablations"] = frozenset(kw.get("ablations", []))
    t = train_mod.TrainConfig(**kw)
    t.validate()
    return t


def write_resolved(cfg: dict, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w", newline="\n") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_data(data_dir: Path):
    ds = data_dir / "dataset.jsonl"
    gal = data_dir / "gallery.jsonl"
    if not ds.exists() or not gal.exists():
        raise FileNotFoundError(f"missing dataset files under {data_dir}")
    return synth.read_dataset(ds), synth.read_gallery(gal)


def cmd_gen(cfg: dict, out_dir: Path) -> int:
    g = gen_config(cfg)
    records, gallery = synth.generate(g)
    out_dir.mkdir(parents=True, exist_ok=True)
    synth.write_dataset(records, out_dir / "dataset.jsonl")
    synth.write_gallery(gallery, out_dir / "gallery.jsonl")
    write_resolved(cfg, out_dir)
    log.info("wrote %d records / %d gallery entries to %s", len(records), len(gallery), out_dir)
    return 0


def cmd_train(cfg: dict, data_dir: Path, out_dir: Path) -> int:
    records, gallery = _load_data(data_dir)
    tcfg = train_config(cfg)
    train_records, _ = synth.split(records, cfg["split"]["test_fraction"], cfg["split"]["seed"])
    ckpt, metrics = train_mod.train(train_records, gallery, tcfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_mod.save_checkpoint(ckpt, out_dir / "checkpoint.bin")
    header = [
        "epoch", "iter", "loss_total", "loss_rank", "loss_kl", "loss_soft",
        "masked_count", "mean_cleanliness",
    ]
    with open(out_dir / "metrics.csv", "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in metrics:
            writer.writerow([repr(row[h]) if isinstance(row[h], float) else row[h] for h in header])
    write_resolved(cfg, out_dir)
    log.info("trained %d epochs, checkpoint at %s", tcfg.epochs, out_dir / "checkpoint.bin")
    return 0


def detect_masks(params, records, gallery, tcfg):
    """Inference-mode cleanliness + outlier mask over fixed batches."""
    refs = np.stack([r.ref_vec for r in records])
    mods = np.stack([r.mod_vec for r in records])
    gal = np.stack([g.vec for g in gallery])
    tgts = gal[[r.target_id for r in records]]
    batches = train_mod.fixed_partition(len(records), tcfg.batch_size, tcfg.seed)
    cleanliness = np.full(len(records), np.nan)
    mask = np.ones(len(records))
    for idx in batches:
        x_c = np.concatenate([refs[idx], mods[idx]], axis=1)
        f_c = train_mod._encode_batch(params.w_c, params.b_c, x_c, params.q_tokens, params.dim)[0]
        f_t = train_mod._encode_batch(params.w_t, params.b_t, tgts[idx], params.q_tokens, params.dim)[0]
        q = f_c.mean(axis=1)
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        t = f_t.mean(axis=1)
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        sim = q @ t.T
        est = mke.estimate_batch(list(f_c), list(f_t), sim, tcfg.tau, tcfg.tau_mk)
        outliers = dpl.dbscan_1d(est, tcfg.dbscan_eps, tcfg.min_pts())
        cleanliness[idx] = est
        for pos in outliers:
            mask[idx[pos]] = 0.0
    covered = ~np.isnan(cleanliness)
    return cleanliness, mask, covered


def cmd_detect(cfg: dict, ckpt_path: Path, data_dir: Path, out_dir: Path) -> int:
    ckpt = train_mod.load_checkpoint(ckpt_path)
    records, gallery = _load_data(data_dir)
    tcfg = train_config(cfg)
    train_records, _ = synth.split(records, cfg["split"]["test_fraction"], cfg["split"]["seed"])
    cleanliness, mask, covered = detect_masks(ckpt.params, train_records, gallery, tcfg)
    kept = [i for i in range(len(train_records)) if covered[i]]
    report = evaluation.detection_metrics(
        mask[kept], cleanliness[kept], [train_records[i].noise_label for i in kept]
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "detection.csv", "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "cleanliness", "mask", "truth"])
        for i in kept:
            writer.writerow(
                [train_records[i].id, repr(float(cleanliness[i])), int(mask[i]),
                 train_records[i].noise_label]
            )
        for name in ("precision", "recall", "f1", "auc"):
            writer.writerow([name, repr(getattr(report, name))])
    write_resolved(cfg, out_dir)
    log.info("detection F1=%.4f AUC=%.4f", report.f1, report.auc)
    return 0


def cmd_eval(cfg: dict, ckpt_path: Path, data_dir: Path, out_dir: Path, ks=None) -> int:
    ckpt = train_mod.load_checkpoint(ckpt_path)
    records, gallery = _load_data(data_dir)
    _, test_records = synth.split(records, cfg["split"]["test_fraction"], cfg["split"]["seed"])
    if not test_records:
        raise ConfigError("empty test split; nothing to evaluate")
    ks = list(ks) if ks is not None else list(cfg["eval"]["ks"])
    refs = np.stack([r.ref_vec for r in test_records])
    mods = np.stack([r.mod_vec for r in test_records])
    gal = np.stack([g.vec for g in gallery])
    true_ids = [r.target_id for r in test_records]

    ranked = evaluation.rank_gallery(ckpt.params, refs, mods, gal)
    report = evaluation.recall_at_k(ranked, true_ids, ks)
    subsets = evaluation.build_subsets(
        true_ids, len(gallery), cfg["eval"]["subset_seed"], cfg["eval"]["subset_size"]
    )
    sub = evaluation.recall_subset(ckpt.params, refs, mods, gal, true_ids, subsets)

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.csv", "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "k", "value"])
        for k in sorted(report.recall_at):
            writer.writerow(["recall", k, repr(report.recall_at[k])])
        for k in sorted(sub):
            writer.writerow(["recall_sub", k, repr(sub[k])])
    write_resolved(cfg, out_dir)
    log.info("R@K over %d queries: %s", report.n_queries, report.recall_at)
    return 0


SWEEP_AXES = {"sigma": ("gen", "sigma"), "kappa": ("train", "kappa"), "gamma": ("train", "gamma")}


def cmd_sweep(cfg: dict, axis: str, values, out_dir: Path) -> int:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; pick one of {sorted(SWEEP_AXES)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    section, key = SWEEP_AXES[axis]
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        run_cfg = copy.deepcopy(cfg)
        run_cfg[section][key] = value
        run_dir = out_dir / f"{axis}_{value:g}"
        status = "ok"
        r10 = ""
        f1 = ""
        try:
            cmd_gen(run_cfg, run_dir / "data")
            cmd_train(run_cfg, run_dir / "data", run_dir)
            cmd_eval(run_cfg, run_dir / "checkpoint.bin", run_dir / "data", run_dir)
            cmd_detect(run_cfg, run_dir / "checkpoint.bin", run_dir / "data", run_dir)
            with open(run_dir / "report.csv") as fh:
                for row in csv.DictReader(fh):
                    if row["metric"] == "recall" and row["k"] == "10":
                        r10 = row["value"]
            with open(run_dir / "detection.csv") as fh:
                for line in fh:
                    parts = line.rstrip("\n").split(",")
                    if parts[0] == "f1":
                        f1 = parts[1]
        except HabitError as exc:
            status = f"failed: {exc}"
            log.warning("sweep value %s failed: %s", value, exc)
        rows.append([axis, value, status, r10, f1])
    with open(out_dir / "sweep_summary.csv", "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["axis", "value", "status", "r_at_10", "detection_f1"])
        writer.writerows(rows)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="habit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, ckpt=False):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override every seed")
        if data:
            p.add_argument("--data", required=True, help="directory with dataset.jsonl/gallery.jsonl")
        if ckpt:
            p.add_argument("--ckpt", required=True, help="checkpoint file")

    common(sub.add_parser("gen", help="generate a synthetic noisy triplet dataset"))
    common(sub.add_parser("train", help="train on a generated dataset"), data=True)
    common(sub.add_parser("detect", help="score/flag noisy training samples"), data=True, ckpt=True)
    p_eval = sub.add_parser("eval", help="retrieval recall on the clean test split")
    common(p_eval, data=True, ckpt=True)
    p_eval.add_argument("--ks", default=None, help="comma-separated K values, e.g. 1,5,10")
    p_sweep = sub.add_parser("sweep", help="run gen/train/eval/detect across one axis")
    common(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    return parser


def _parse_ks(text):
    if text is None:
        return None
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --ks value {text!r}: {exc}") from exc


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("HABIT_LOG", "info").lower(), logging.INFO
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    if args.command == "gen":
        return cmd_gen(cfg, out)
    if args.command == "train":
        return cmd_train(cfg, Path(args.data), out)
    if args.command == "detect":
        return cmd_detect(cfg, Path(args.ckpt), Path(args.data), out)
    if args.command == "eval":
        return cmd_eval(cfg, Path(args.ckpt), Path(args.data), out, _parse_ks(args.ks))
    if args.command == "sweep":
        try:
            values = [float(x) for x in args.values.split(",") if x.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad --values {args.values!r}: {exc}") from exc
        return cmd_sweep(cfg, args.axis, values, out)
    raise ConfigError(f"unknown command {args.command}")  # pragma: no cover


def main(argv=None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, PermissionError, IsADirectoryError, OSError) as exc:
        if isinstance(exc, HabitError):  # pragma: no cover - HabitError is not OSError
            raise
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 4
    except (ZeroRow, FloatingPointError, HabitError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
