"""Command-line entry point: ``cacl <command> [options] [key=value ...]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint, med
from . import tensor as T
from .config import ConfigError, RunConfig, describe_keys
from .synth import DataError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5

log = logging.getLogger("cacl")


class UsageError(ValueError):
    """A valid config used with an incompatible command or checkpoint."""


def _error_exit(exc: BaseException) -> int:
    if isinstance(exc, (med.DegreeVerificationError, med.SamplingExhausted)):
        code = EXIT_VERIFY
    elif isinstance(exc, T.NumericFault):
        code = EXIT_NUMERIC
    elif isinstance(exc, (DataError, checkpoint.CheckpointError)):
        code = EXIT_DATA
    elif isinstance(exc, (ConfigError, UsageError)):
        code = EXIT_CONFIG
    else:
        raise exc
    message = " ".join(str(exc).split())
    print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
    return code


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_manifest(out: Path, command: str, cfg: RunConfig, args: argparse.Namespace, extra=None) -> None:
    manifest = {
        "schema_version": 1,
        "command": command,
        "config": cfg.to_dict(),
        "threads": cfg.threads,
        "inputs": {k: str(v) for k, v in sorted(vars(args).items())
                   if k in ("checkpoint", "n", "draws", "seeds", "arms") and v is not None},
        "environment": {"python": platform.python_version(), "numpy": np.__version__},
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# commands ----------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args, out: Path) -> None:
    from .train import dataset_from_config

    ds = dataset_from_config(cfg)
    ds.write_manifest(out / "dataset.json")
    ds.dump_frames(out / "frames.bin")
    counts = {(c, s.split): 0 for c in range(ds.num_classes) for s in ds.specs}
    for s in ds.specs:
        counts[(s.class_id, s.split)] += 1
    _write_csv(out / "classes.csv", ["class_id", "class_name", "train", "test"],
               [[c, ds.manifest["classes"][c], counts.get((c, "train"), 0), counts.get((c, "test"), 0)]
                for c in range(ds.num_classes)])


def cmd_pretrain_frames(cfg: RunConfig, args, out: Path) -> None:
    from .train import dataset_from_config, pretrain_frame_extractor, save_extractor

    extractor, history = pretrain_frame_extractor(cfg, dataset_from_config(cfg))
    save_extractor(extractor, out / "extractor.ckpt", cfg, history)
    _write_csv(out / "pretrain_loss.csv", ["epoch", "loss"], [[i, _fmt(v)] for i, v in enumerate(history)])


def cmd_train(cfg: RunConfig, args, out: Path) -> None:
    from .plotting import plot_training_curves
    from .train import run_training

    trainer = run_training(cfg, out)
    if trainer.history:
        plot_training_curves(trainer.history, out / "training_curves.png")


def _load(args):
    from .train import dataset_from_config, load_models

    if not args.checkpoint:
        raise UsageError("--checkpoint is required for this command")
    models, cfg, _ = load_models(args.checkpoint)
    return models, cfg, dataset_from_config(cfg)


def cmd_retrieve(cfg: RunConfig, args, out: Path) -> None:
    from .evaluate import evaluate_retrieval
    from .plotting import plot_recall

    models, ckpt_cfg, ds = _load(args)
    report = evaluate_retrieval(models.g, ckpt_cfg, ds)
    _write_csv(out / "retrieval.csv", ["k", "recall", "feature_source"],
               [[k, _fmt(report.recall[k]), "trunk_max_pool"] for k in report.ks])
    _write_csv(out / "retrieval_per_class.csv", ["class_id"] + [f"R@{k}" for k in report.ks],
               [[c] + [_fmt(report.per_class[c][k]) for k in report.ks] for c in sorted(report.per_class)])
    plot_recall(report.recall, out / "retrieval.png")


def cmd_probe(cfg: RunConfig, args, out: Path) -> None:
    from .evaluate import probe_linear, probe_sdp

    models, ckpt_cfg, ds = _load(args)
    rows = [
        ["sdp", _fmt(probe_sdp(models.g, ckpt_cfg, ds, seed=cfg.seed)), _fmt(med.chance_accuracy(ckpt_cfg.clip_len))],
        ["linear", _fmt(probe_linear(models.g, ckpt_cfg, ds)), _fmt(1.0 / ds.num_classes)],
    ]
    _write_csv(out / "probes.csv", ["probe", "accuracy", "chance"], rows)


def cmd_attention(cfg: RunConfig, args, out: Path) -> None:
    from .evaluate import extract_attention
    from .plotting import plot_attention

    models, ckpt_cfg, ds = _load(args)
    if models.t is None:
        raise UsageError(f"{args.checkpoint} has no transformer branch")
    report = extract_attention(models.t, ckpt_cfg, ds, seed=cfg.seed)
    np.savetxt(out / "attention_raw.csv", report.raw, delimiter=",", fmt="%.10g")
    np.savetxt(out / "attention_normalized.csv", report.normalized, delimiter=",", fmt="%.10g")
    _write_csv(out / "attention_stats.csv", ["statistic", "value"],
               [["num_clips", report.num_clips]] + [[k, _fmt(v)] for k, v in report.stats.items()])
    plot_attention(report.raw, out / "attention_raw.png", "first-layer attention")
    plot_attention(report.normalized, out / "attention_normalized.png", "row-max normalised")


def cmd_ablate(cfg: RunConfig, args, out: Path) -> None:
    from .ablation import ARMS, CORE_ARMS, ablation_suite, summarize, write_rows
    from .plotting import plot_ablation

    seeds = [int(s) for s in args.seeds.split(",")]
    if len(seeds) < 1:
        raise UsageError("--seeds needs at least one seed")
    arms = tuple(args.arms.split(",")) if args.arms else CORE_ARMS
    unknown = [a for a in arms if a not in ARMS]
    if unknown:
        raise UsageError(f"unknown arms {unknown}; choose from {sorted(ARMS)}")
    rows = ablation_suite(cfg, seeds, arms, out_dir=out / "runs")
    summary = summarize(rows)
    write_rows(out / "ablation_runs.csv", rows)
    write_rows(out / "ablation_summary.csv", summary)
    plot_ablation(summary, out / "ablation_r1.png")


def cmd_degrees(cfg: RunConfig, args, out: Path) -> None:
    from .plotting import plot_degree_histogram

    n, draws = args.n, args.draws
    sampler = med.ShuffleSampler(n, np.random.default_rng(cfg.seed))
    counts = {d: 0 for d in med.feasible_degrees(n)}
    for _ in range(draws):
        s = sampler.sample()
        if med.levenshtein(range(n), s.perm.order) != s.degree:
            raise med.DegreeVerificationError(f"draw {s.perm.order} failed its degree re-check")
        counts[s.degree] += 1
    expected = draws / len(counts)
    _write_csv(out / "degrees.csv", ["degree", "count", "frequency", "uniform_frequency"],
               [[d, c, _fmt(c / draws), _fmt(1 / len(counts))] for d, c in counts.items()])
    _write_csv(out / "sampler_paths.csv", ["path", "count"], sorted(sampler.stats.items()))
    worst = max(abs(c - expected) / expected for c in counts.values())
    log.info("max relative deviation from uniform: %.3f", worst)
    plot_degree_histogram(counts, out / "degrees.png", f"n={n}, {draws} draws")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic dataset and its manifest"),
    "pretrain-frames": (cmd_pretrain_frames, "pre-train the frame extractor"),
    "train": (cmd_train, "self-supervised training; writes metrics.csv and checkpoint.ckpt"),
    "retrieve": (cmd_retrieve, "nearest-neighbour retrieval from a checkpoint"),
    "probe": (cmd_probe, "shuffle-degree and linear probes from a checkpoint"),
    "ablate": (cmd_ablate, "ablation grid over arms and seeds"),
    "degrees": (cmd_degrees, "sample shuffle degrees and tabulate them"),
    "attention": (cmd_attention, "first-layer attention map from a checkpoint"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cacl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    epilog = "config keys (override with key=value):\n" + describe_keys()
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--seed", type=int, help="shorthand for seed=N")
        p.add_argument("--threads", type=int, help="BLAS threads (shorthand for threads=N)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("retrieve", "probe", "attention"):
            p.add_argument("--checkpoint", required=True, help="training checkpoint")
        if name == "degrees":
            p.add_argument("--n", type=int, default=16, help="clip length")
            p.add_argument("--draws", type=int, default=10_000)
        if name == "ablate":
            p.add_argument("--seeds", default="0,1,2")
            p.add_argument("--arms", default="", help="comma-separated arms (default: core arms)")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = list(args.overrides)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    return RunConfig.load(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, args.command, cfg, args)
        T.set_default_dtype(np.dtype(cfg.dtype))
        with threadpool_limits(limits=cfg.threads):
            COMMANDS[args.command][0](cfg, args, out)
    except (ConfigError, UsageError, DataError, checkpoint.CheckpointError, T.NumericFault,
            med.DegreeVerificationError, med.SamplingExhausted) as exc:
        return _error_exit(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
