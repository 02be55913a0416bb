"""Evaluation: nearest-neighbour retrieval, SDP and linear probes, pair
similarities and first-layer attention maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import med
from . import tensor as T
from .config import RunConfig
from .encoders import Cnn3dEncoder, TransformerEncoder
from .loss import EmbeddingSet, pair_similarities
from .synth import AugmentationParams, Dataset, augment_frames, clip_at, uniform_clip_starts
from .train import Models, Trainer


def _center(frames: np.ndarray, crop: int) -> np.ndarray:
    h, w = frames.shape[-2:]
    return augment_frames(frames, AugmentationParams.center(h, w, crop))


def eval_clips(cfg: RunConfig, dataset: Dataset, video_id: int) -> np.ndarray:
    """``eval_clips`` uniformly spaced, centre-cropped clips of one video."""
    video = dataset.videos[video_id]
    starts = uniform_clip_starts(video.shape[0], cfg.clip_len, cfg.stride, cfg.eval_clips, video_id)
    return np.stack([_center(clip_at(video, s, cfg.clip_len, cfg.stride, video_id).frames, cfg.crop)
                     for s in starts])


def video_features(g: Cnn3dEncoder, cfg: RunConfig, dataset: Dataset, video_ids, chunk: int = 40) -> np.ndarray:
    """Average clip feature per video, shape (len(video_ids), feature_dim)."""
    clips = np.concatenate([eval_clips(cfg, dataset, int(v)) for v in video_ids]).astype(T.default_dtype())
    feats = []
    with T.no_grad():
        for lo in range(0, clips.shape[0], chunk):
            feats.append(g.clip_features(clips[lo:lo + chunk]).data)
    feats = np.concatenate(feats)
    return feats.reshape(len(video_ids), cfg.eval_clips, -1).mean(axis=1)


@dataclass
class RetrievalReport:
    ks: tuple[int, ...]
    recall: dict[int, float]
    per_class: dict[int, dict[int, float]]
    num_queries: int
    num_gallery: int

    def rows(self) -> list[dict]:
        out = [{"class": "all", **{f"R@{k}": self.recall[k] for k in self.ks}}]
        for c in sorted(self.per_class):
            out.append({"class": c, **{f"R@{k}": self.per_class[c][k] for k in self.ks}})
        return out


def recall_at_k(query: np.ndarray, query_labels, gallery: np.ndarray, gallery_labels,
                ks=(1, 5, 10, 20, 50)) -> RetrievalReport:
    """A query counts as a hit at ``k`` if any of its ``k`` most cosine-similar
    gallery items shares its label. ``k`` larger than the gallery is clamped."""
    query_labels = np.asarray(query_labels)
    gallery_labels = np.asarray(gallery_labels)
    if len(query) == 0 or len(gallery) == 0:
        raise ValueError("retrieval needs at least one query and one gallery item")
    qn = query / np.maximum(np.linalg.norm(query, axis=1, keepdims=True), 1e-12)
    gn = gallery / np.maximum(np.linalg.norm(gallery, axis=1, keepdims=True), 1e-12)
    sims = qn @ gn.T
    # stable ordering: ties broken by gallery index
    order = np.argsort(-sims, axis=1, kind="stable")
    match = gallery_labels[order] == query_labels[:, None]
    first_hit = np.where(match.any(axis=1), match.argmax(axis=1), len(gallery))
    recall = {k: float((first_hit < min(k, len(gallery))).mean()) for k in ks}
    per_class = {}
    for c in np.unique(query_labels):
        sel = query_labels == c
        per_class[int(c)] = {k: float((first_hit[sel] < min(k, len(gallery))).mean()) for k in ks}
    return RetrievalReport(tuple(ks), recall, per_class, len(query), len(gallery))


def evaluate_retrieval(g: Cnn3dEncoder, cfg: RunConfig, dataset: Dataset) -> RetrievalReport:
    """Test videos query the training videos."""
    test_ids = dataset.split_indices("test")
    train_ids = dataset.split_indices("train")
    labels = dataset.labels
    return recall_at_k(video_features(g, cfg, dataset, test_ids), labels[test_ids],
                       video_features(g, cfg, dataset, train_ids), labels[train_ids],
                       tuple(cfg.retrieval_ks))


# probes ------------------------------------------------------------------

def probe_sdp(g: Cnn3dEncoder, cfg: RunConfig, dataset: Dataset, seed: int = 0) -> float:
    """Accuracy of the shuffle-degree head on fresh uniform-degree shuffles of
    held-out videos."""
    if "cls_head" not in g._modules:
        raise ValueError("encoder has no shuffle-degree head")
    rng = np.random.default_rng([seed, 77])
    sampler = med.ShuffleSampler(cfg.clip_len, rng)
    xs, xss, labels = [], [], []
    for vid in dataset.split_indices("test"):
        clips = eval_clips(cfg, dataset, int(vid))
        picks = rng.choice(len(clips), size=min(cfg.sdp_probe_draws, len(clips)), replace=False)
        for i in picks:
            s = sampler.sample()
            xs.append(clips[i])
            xss.append(clips[i][s.perm.as_array()])
            labels.append(s.label)
    x = np.stack(xs).astype(T.default_dtype())
    xs_ = np.stack(xss).astype(T.default_dtype())
    preds = []
    with T.no_grad():
        for lo in range(0, len(x), 32):
            preds.append(g(x[lo:lo + 32], xs_[lo:lo + 32])[1].data.argmax(axis=1))
    return float((np.concatenate(preds) == np.array(labels)).mean())


def fit_linear_probe(features: np.ndarray, labels, num_classes: int, steps: int = 200,
                     lr: float = 0.5, l2: float = 1e-4) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Full-batch softmax regression on standardised features.

    Returns ``(W, b, mean, std)``.
    """
    labels = np.asarray(labels)
    mean = features.mean(axis=0)
    std = features.std(axis=0) + 1e-8
    x = (features - mean) / std
    onehot = np.eye(num_classes)[labels]
    W = np.zeros((x.shape[1], num_classes))
    b = np.zeros(num_classes)
    for _ in range(steps):
        z = x @ W + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        d = (p - onehot) / len(x)
        W -= lr * (x.T @ d + l2 * W)
        b -= lr * d.sum(axis=0)
    return W, b, mean, std


def linear_probe_accuracy(train_x, train_y, test_x, test_y, num_classes: int,
                          steps: int = 200, lr: float = 0.5) -> float:
    W, b, mean, std = fit_linear_probe(train_x, train_y, num_classes, steps, lr)
    pred = (((test_x - mean) / std) @ W + b).argmax(axis=1)
    return float((pred == np.asarray(test_y)).mean())


def probe_linear(g: Cnn3dEncoder, cfg: RunConfig, dataset: Dataset) -> float:
    train_ids = dataset.split_indices("train")
    test_ids = dataset.split_indices("test")
    labels = dataset.labels
    return linear_probe_accuracy(video_features(g, cfg, dataset, train_ids), labels[train_ids],
                                 video_features(g, cfg, dataset, test_ids), labels[test_ids],
                                 dataset.num_classes, cfg.probe_epochs, cfg.probe_lr)


# pair similarities -------------------------------------------------------

def similarity_report(models: Models, cfg: RunConfig, dataset: Dataset, seed: int = 0) -> dict[str, float]:
    """Mean cosine similarity of each positive pair on augmented test clips."""
    if models.t is None:
        raise ValueError("the similarity report needs the transformer branch")
    trainer = Trainer(cfg.replace(seed=seed), dataset, models)
    test_ids = dataset.split_indices("test")
    sums: dict[str, float] = {}
    with T.no_grad():
        for lo in range(0, len(test_ids), cfg.batch_size):
            b = trainer.make_batch(test_ids[lo:lo + cfg.batch_size])
            gq = models.g(b.xq, b.xq_shuffled)[0]
            gk = models.g_key(b.xk, b.xk_shuffled)[0]
            emb = EmbeddingSet(gq, gk, models.t(b.xq, b.xq_shuffled), models.t(b.xk, b.xk_shuffled))
            for k, v in pair_similarities(emb).items():
                sums[k] = sums.get(k, 0.0) + v * len(b.video_ids)
    return {k: v / len(test_ids) for k, v in sums.items()}


# attention ---------------------------------------------------------------

@dataclass
class AttentionReport:
    raw: np.ndarray  # (S, S) rows sum to 1
    normalized: np.ndarray  # each row divided by its maximum
    num_clips: int
    stats: dict[str, float] = field(default_factory=dict)


def attention_statistics(raw: np.ndarray, n: int) -> dict[str, float]:
    """Attention received by the first/last frame positions versus the middle
    ones, for the original-order segment (tokens 1..n) and the whole frame
    sequence (tokens 1..2n)."""
    received = raw.mean(axis=0)
    clip = received[1:n + 1]
    seq = received[1:2 * n + 1]
    return {
        "clip_edge_mean": float((clip[0] + clip[-1]) / 2),
        "clip_middle_mean": float(clip[1:-1].mean()),
        "sequence_edge_mean": float((seq[0] + seq[-1]) / 2),
        "sequence_middle_mean": float(seq[1:-1].mean()),
        "cls_received": float(received[0]),
    }


def extract_attention(t: TransformerEncoder, cfg: RunConfig, dataset: Dataset, seed: int = 0,
                      num_clips: int | None = None) -> AttentionReport:
    """First-layer attention averaged over heads and ``num_clips`` test clips,
    each paired with a uniform-degree shuffle."""
    num_clips = cfg.attention_clips if num_clips is None else num_clips
    rng = np.random.default_rng([seed, 91])
    sampler = med.ShuffleSampler(cfg.clip_len, rng)
    ids = dataset.split_indices("test")
    if ids.size == 0:
        ids = dataset.split_indices("train")
    xs, xss = [], []
    for i in range(num_clips):
        vid = int(ids[i % ids.size])
        clips = eval_clips(cfg, dataset, vid)
        clip = clips[(i // ids.size) % len(clips)]
        xs.append(clip)
        xss.append(clip[sampler.sample().perm.as_array()])
    x = np.stack(xs).astype(T.default_dtype())
    xs_ = np.stack(xss).astype(T.default_dtype())
    total = None
    with T.no_grad():
        for lo in range(0, num_clips, 25):
            t(x[lo:lo + 25], xs_[lo:lo + 25])
            part = t.first_layer_attention().mean(axis=1).sum(axis=0)
            total = part if total is None else total + part
    raw = total / num_clips
    normalized = raw / raw.max(axis=1, keepdims=True)
    return AttentionReport(raw, normalized, num_clips, attention_statistics(raw, cfg.clip_len))

