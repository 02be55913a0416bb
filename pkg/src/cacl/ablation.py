"""Ablation suite: train each arm for several seeds and tabulate retrieval,
probes and pair similarities."""

from __future__ import annotations

import csv
import logging
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig
from .evaluate import evaluate_retrieval, probe_linear, probe_sdp, similarity_report
from .loss import PAIRS
from .synth import Dataset
from .train import Trainer, build_models, dataset_from_config, pretrain_frame_extractor, write_metrics

log = logging.getLogger(__name__)

_G_ONLY = dict(enable_transformer=False, positive_pairs=PAIRS[:1])

ARMS: dict[str, dict] = {
    "random_init": dict(epochs=0, **_G_ONLY),
    "sdp_nonuniform": dict(enable_nce=False, enable_sdp=True, uniform_sampling=False, **_G_ONLY),
    "sdp": dict(enable_nce=False, enable_sdp=True, **_G_ONLY),
    "vmoco": dict(enable_nce=True, enable_sdp=False, **_G_ONLY),
    "sdp_vmoco": dict(enable_nce=True, enable_sdp=True, **_G_ONLY),
    "vmoco_t": dict(enable_nce=True, enable_sdp=False, enable_transformer=True, positive_pairs=PAIRS),
    "cacl_pairs2": dict(enable_nce=True, enable_sdp=True, enable_transformer=True, positive_pairs=PAIRS[:2]),
    "cacl_pairs3": dict(enable_nce=True, enable_sdp=True, enable_transformer=True, positive_pairs=PAIRS[:3]),
    "cacl": dict(enable_nce=True, enable_sdp=True, enable_transformer=True, positive_pairs=PAIRS),
}

# the arms needed for the headline comparisons
CORE_ARMS = ("random_init", "sdp_nonuniform", "sdp", "vmoco", "sdp_vmoco", "cacl")


def arm_config(base: RunConfig, arm: str, seed: int) -> RunConfig:
    if arm not in ARMS:
        raise KeyError(f"unknown arm {arm!r}; choose from {sorted(ARMS)}")
    overrides = dict(ARMS[arm])
    if arm == "random_init":
        # untrained weights: keep the base switches so validation passes
        overrides = {"epochs": 0, **_G_ONLY, "enable_nce": True, "enable_sdp": True}
    return base.replace(seed=seed, **overrides)


def run_arm(cfg: RunConfig, dataset: Dataset, extractor=None, out_dir: Path | None = None) -> dict:
    started = time.perf_counter()
    models = build_models(cfg, extractor)
    trainer = Trainer(cfg, dataset, models)
    trainer.train()
    report = evaluate_retrieval(models.g, cfg, dataset)
    row = {f"R@{k}": 100.0 * report.recall[k] for k in report.ks}
    row["sdp_probe"] = 100.0 * probe_sdp(models.g, cfg, dataset, seed=cfg.seed)
    row["linear_probe"] = 100.0 * probe_linear(models.g, cfg, dataset)
    if models.t is not None:
        for k, v in similarity_report(models, cfg, dataset, seed=cfg.seed).items():
            row[f"sim_{k}"] = v
    row["seconds"] = time.perf_counter() - started
    if out_dir is not None and trainer.history:
        write_metrics(out_dir / "metrics.csv", trainer.history)
    return row


def ablation_suite(base: RunConfig, seeds=(0, 1, 2), arms=CORE_ARMS, out_dir=None,
                   dataset: Dataset | None = None) -> list[dict]:
    """One row per (arm, seed). The frame extractor is pre-trained once per
    seed and shared by every transformer arm of that seed."""
    dataset = dataset or dataset_from_config(base)
    out = Path(out_dir) if out_dir is not None else None
    with T.dtype_scope(base.dtype):
        return _run_suite(base, seeds, arms, out, dataset)


def _run_suite(base, seeds, arms, out, dataset) -> list[dict]:
    rows = []
    for seed in seeds:
        extractor = None
        for arm in arms:
            cfg = arm_config(base, arm, seed)
            if cfg.enable_transformer and not cfg.random_frozen and extractor is None:
                extractor = pretrain_frame_extractor(cfg, dataset)[0]
            run_dir = None
            if out is not None:
                run_dir = out / f"{arm}_seed{seed}"
                run_dir.mkdir(parents=True, exist_ok=True)
                (run_dir / "config.txt").write_text(cfg.dumps())
            row = {"arm": arm, "seed": seed,
                   **run_arm(cfg, dataset, extractor if cfg.enable_transformer else None, run_dir)}
            log.info("%s seed %d R@1 %.1f (%.0fs)", arm, seed, row["R@1"], row["seconds"])
            rows.append(row)
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and sample standard deviation of each metric per arm, arms in
    first-seen order."""
    arms = list(dict.fromkeys(r["arm"] for r in rows))
    metrics = [k for k in rows[0] if k not in ("arm", "seed")] if rows else []
    for r in rows:
        metrics += [k for k in r if k not in metrics and k not in ("arm", "seed")]
    out = []
    for arm in arms:
        sel = [r for r in rows if r["arm"] == arm]
        summary = {"arm": arm, "runs": len(sel)}
        for m in metrics:
            vals = np.array([r[m] for r in sel if m in r], dtype=float)
            if vals.size:
                summary[f"{m}_mean"] = float(vals.mean())
                summary[f"{m}_sd"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        out.append(summary)
    return out


def write_rows(path, rows: list[dict]) -> None:
    columns = []
    for r in rows:
        columns += [k for k in r if k not in columns]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, columns, restval="", lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
