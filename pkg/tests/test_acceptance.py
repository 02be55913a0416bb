"""Acceptance checks, one test per criterion. The terminal summary prints a
PASS/FAIL line for each. Run directly with ``python3 tests/test_acceptance.py``.

The retrieval criteria (8 to 11) share one ablation run over three seeds at
the default desk-scale configuration. Its tables and figures are written to
``acceptance_results/`` at the repository root."""

import itertools
import math
import time
from collections import Counter, deque
from pathlib import Path

import numpy as np
import pytest

from cacl import cli, med
from cacl import tensor as T
from cacl.ablation import ablation_suite, summarize, write_rows
from cacl.config import RunConfig
from cacl.loss import EmbeddingSet, MemoryQueue, nce_loss, sdp_loss
from cacl.tensor import Tensor
from conftest import tiny_config
from oracles import all_permutation_pairs, central_difference, edit_distance_by_scripts, max_relative_error

RESULTS = Path(__file__).resolve().parent.parent / "acceptance_results"
SEEDS = (0, 1, 2)
SUITE_ARMS = ("random_init", "sdp_nonuniform", "sdp", "vmoco", "sdp_vmoco", "cacl")


def criterion(number, title):
    return pytest.mark.criterion(number, title)


def unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@criterion(1, "edit distance DP equals exhaustive edit-script search")
def test_dp_matches_exhaustive_search(record_property):
    started = time.process_time()
    checked = 0
    for n in range(1, 6):
        pairs = all_permutation_pairs(n)
        expected = edit_distance_by_scripts(pairs)
        got = [med.levenshtein(a, b) for a, b in pairs]
        assert got == expected.tolist(), f"mismatch among permutations of {n}"
        checked += len(pairs)
    rng = np.random.default_rng(0)
    by_shape: dict[tuple[int, int], list] = {}
    for _ in range(1000):
        a = tuple(rng.integers(0, 5, size=int(rng.integers(0, 6))).tolist())
        b = tuple(rng.integers(0, 5, size=int(rng.integers(0, 6))).tolist())
        by_shape.setdefault((len(a), len(b)), []).append((a, b))
    for group in by_shape.values():
        expected = edit_distance_by_scripts(group)
        assert [med.levenshtein(a, b) for a, b in group] == expected.tolist()
        checked += len(group)
    seconds = time.process_time() - started
    record_property("detail", f"{checked} pairs in {seconds:.1f}s CPU")
    assert seconds < 60


@criterion(2, "no permutation has shuffle degree 1")
def test_degree_one_never_occurs(record_property):
    for n in range(2, 8):
        perms = np.array(list(itertools.permutations(range(n))))
        degrees = med.identity_distances(perms)
        assert 1 not in set(degrees.tolist()), f"degree 1 found at n={n}"
    rng = np.random.default_rng(1)
    perms = np.stack([rng.permutation(16) for _ in range(100_000)])
    degrees = med.identity_distances(perms)
    assert degrees.min() != 1 and not np.any(degrees == 1)
    assert 1 not in med.feasible_degrees(16)
    record_property("detail", f"exhaustive n<=7, 1e5 draws at n=16 span degrees {degrees.min()}..{degrees.max()}")


@criterion(3, "a verified witness exists for every degree 0,2..16")
def test_witness_per_degree(record_property):
    witnesses = med.degree_witnesses(16)
    wanted = [0, *range(2, 17)]
    assert sorted(witnesses) == wanted
    for d, order in witnesses.items():
        assert sorted(order) == list(range(16))
        assert med.levenshtein(range(16), order) == d
    assert list(med.feasible_degrees(16)) == wanted
    record_property("detail", f"{len(witnesses)} witnesses, m={med.num_classes(16)}")


@criterion(4, "uniform-degree sampler: 10k draws within 20% of uniform, all re-verified")
def test_sampler_uniform_and_verified(record_property):
    sampler = med.ShuffleSampler(16, np.random.default_rng(4))
    counts = Counter()
    verified = 0
    for _ in range(10_000):
        s = sampler.sample()
        verified += med.levenshtein(range(16), s.perm.order) == s.degree
        counts[s.degree] += 1
    expected = 10_000 / med.num_classes(16)
    worst = max(abs(counts[d] - expected) / expected for d in med.feasible_degrees(16))
    record_property("detail", f"max deviation {100 * worst:.1f}%, {verified}/10000 re-verified")
    assert set(counts) == set(med.feasible_degrees(16))
    assert verified == 10_000
    assert worst <= 0.2


@criterion(5, "gradient check of the joint objective, float64, max relative error < 1e-4")
def test_joint_objective_gradient(record_property):
    from cacl.train import Trainer, dataset_from_config

    started = time.process_time()
    cfg = tiny_config()
    ds = dataset_from_config(cfg)
    trainer = Trainer(cfg, ds)
    trainer.queue.enqueue(unit(np.random.default_rng(5), 10, cfg.embed_dim))
    batch = trainer.make_batch(ds.split_indices("train")[:2])
    params = trainer._trainable()

    trainer.optimizer.zero_grad()
    parts = trainer.compute_loss(batch)[0]
    assert parts.nce.item() > 0 and parts.cls is not None
    parts.total.backward()

    def loss():
        with T.no_grad():
            return trainer.compute_loss(batch)[0].total.item()

    worst, where = 0.0, ""
    for name, p in params:
        err = max_relative_error(p.grad, central_difference(loss, p.data, 1e-5))
        if err > worst:
            worst, where = err, name
    seconds = time.process_time() - started
    count = sum(p.data.size for _, p in params)
    record_property("detail", f"{count} parameters, max rel err {worst:.2e} ({where}), {seconds:.0f}s CPU")
    assert worst < 1e-4
    assert seconds < 300


@criterion(6, "closed-form loss values")
def test_closed_form_losses(record_property):
    rng = np.random.default_rng(6)
    e = EmbeddingSet(*(Tensor(rng.normal(size=(3, 8))) for _ in range(4)))
    assert nce_loss(e, MemoryQueue(16, 8)).item() == 0.0

    worst = 0.0
    for m in (1, 4, 17):
        v = unit(rng, 1, 8)
        same = EmbeddingSet(*(Tensor(v.copy()) for _ in range(4)))
        queue = MemoryQueue(m, 8)
        queue.enqueue(np.repeat(v, m, axis=0))
        worst = max(worst, abs(nce_loss(same, queue, tau=1.0).item() - math.log((4 + m) / 4)))
    m = med.num_classes(16)
    uniform = abs(sdp_loss(Tensor(np.full((6, m), 0.3)), np.arange(6)).item() - math.log(m))
    record_property("detail", f"identical-embedding err {worst:.1e}, uniform-logit err {uniform:.1e}")
    assert worst < 1e-9 and uniform < 1e-9


@criterion(7, "queue is exact FIFO and the key encoder update is exact")
def test_queue_and_momentum(record_property):
    from cacl.train import Trainer, dataset_from_config

    rng = np.random.default_rng(7)
    for capacity in range(1, 9):
        for _ in range(100):
            queue, ref = MemoryQueue(capacity, 3), deque(maxlen=capacity)
            for _ in range(int(rng.integers(1, 7))):
                keys = unit(rng, int(rng.integers(1, 2 * capacity + 2)), 3)
                queue.enqueue(keys)
                ref.extend(keys)
            np.testing.assert_array_equal(queue.entries(), np.array(ref))

    cfg = tiny_config()
    ds = dataset_from_config(cfg)
    trainer = Trainer(cfg, ds)
    before = {n: p.data.copy() for n, p in trainer.models.g_key.named_parameters()}
    trainer.step(ds.split_indices("train")[:4])
    online = dict(trainer.models.g.named_parameters())
    a = cfg.key_momentum
    for n, p in trainer.models.g_key.named_parameters():
        np.testing.assert_array_equal(p.data, a * before[n] + (1 - a) * online[n].data)
    record_property("detail", "800 schedules, bitwise momentum update")


# retrieval criteria -------------------------------------------------------

@pytest.fixture(scope="module")
def suite():
    from cacl.plotting import plot_ablation

    RESULTS.mkdir(exist_ok=True)
    base = RunConfig(dtype="float32")
    started = time.process_time()
    rows = ablation_suite(base, SEEDS, SUITE_ARMS, out_dir=RESULTS / "runs")
    cpu = time.process_time() - started
    summary = summarize(rows)
    write_rows(RESULTS / "ablation_runs.csv", rows)
    write_rows(RESULTS / "ablation_summary.csv", summary)
    plot_ablation(summary, RESULTS / "ablation_r1.png")
    return {"rows": rows, "summary": {s["arm"]: s for s in summary}, "cpu": cpu}


@criterion(8, "CACL R@1 >= random init + 10 and >= V-MoCo - 2 (3 seeds, <= 30 min CPU)")
def test_cacl_beats_baselines(suite, record_property):
    s = suite["summary"]
    cacl, rand, vmoco = (s[a]["R@1_mean"] for a in ("cacl", "random_init", "vmoco"))
    record_property("detail", f"R@1 cacl {cacl:.1f}, random_init {rand:.1f}, vmoco {vmoco:.1f}; "
                              f"suite CPU {suite['cpu'] / 60:.1f} min")
    assert cacl >= rand + 10
    assert cacl >= vmoco - 2
    assert suite["cpu"] <= 30 * 60


@criterion(9, "four positive pairs R@1 >= (Gq,Gk)-only - 2")
def test_four_pairs_vs_one(suite, record_property):
    s = suite["summary"]
    four, one = s["cacl"]["R@1_mean"], s["sdp_vmoco"]["R@1_mean"]
    write_rows(RESULTS / "positive_pairs.csv",
               [{"pairs": "gq_gk only", "R@1_mean": one, "R@1_sd": s["sdp_vmoco"]["R@1_sd"]},
                {"pairs": "all four", "R@1_mean": four, "R@1_sd": s["cacl"]["R@1_sd"]}])
    record_property("detail", f"four pairs {four:.1f} vs gq_gk only {one:.1f}")
    assert four >= one - 2


@criterion(10, "sim(Gq,Tk) is the smallest of the four pair similarities")
def test_gq_tk_least_similar(suite, record_property):
    rows = [r for r in suite["rows"] if r["arm"] == "cacl"]
    means = {k[4:]: float(np.mean([r[k] for r in rows])) for k in rows[0] if k.startswith("sim_")}
    record_property("detail", ", ".join(f"{k} {v:.3f}" for k, v in means.items()))
    assert set(means) == {"gq_gk", "gq_tq", "gq_tk", "tq_tk"}
    assert min(means, key=means.get) == "gq_tk"


@criterion(11, "SDP probe above 2/m and uniform SDP R@1 >= non-uniform SDP R@1")
def test_sdp_probe_and_uniformity(suite, record_property):
    s = suite["summary"]
    m = med.num_classes(16)
    probe = s["sdp"]["sdp_probe_mean"]
    uni, non = s["sdp"]["R@1_mean"], s["sdp_nonuniform"]["R@1_mean"]
    record_property("detail", f"SDP probe {probe:.1f}% (2/m = {200 / m:.1f}%), "
                              f"R@1 uniform {uni:.1f} vs non-uniform {non:.1f}")
    assert probe > 200 / m
    assert uni >= non


@criterion(12, "attention map is 33x33 with rows summing to 1")
def test_attention_map(record_property):
    from cacl.evaluate import extract_attention
    from cacl.train import build_models, dataset_from_config

    cfg = RunConfig(attention_clips=8)
    report = extract_attention(build_models(cfg).t, cfg, dataset_from_config(cfg))
    rows = report.raw.sum(axis=1)
    record_property("detail", f"shape {report.raw.shape}, max row error {np.abs(rows - 1).max():.1e}, "
                              f"clip edge {report.stats['clip_edge_mean']:.4f} "
                              f"vs middle {report.stats['clip_middle_mean']:.4f}")
    assert report.raw.shape == (33, 33)
    assert np.all(np.abs(rows - 1) <= 1e-5)
    assert {"clip_edge_mean", "clip_middle_mean"} <= set(report.stats)


@criterion(13, "identical manifests give byte-identical metrics and checkpoints")
def test_runs_are_reproducible(tmp_path, record_property):
    started = time.process_time()
    args = ["epochs=2", "pretrain_epochs=1", "num_videos=64", "dtype=float32"]
    for name in ("a", "b"):
        assert cli.main(["train", "--out", str(tmp_path / name), *args]) == 0
    seconds = time.process_time() - started
    files = ("manifest.json", "metrics.csv", "checkpoint.ckpt")
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    record_property("detail", f"{dict(zip(files, same))}, {seconds:.0f}s CPU for both runs")
    assert all(same)
    assert seconds < 600


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
