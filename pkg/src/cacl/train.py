"""Self-supervised training: frame-extractor pre-training and the joint
contrastive + shuffle-degree loop."""

from __future__ import annotations

import csv
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, med
from . import tensor as T
from .config import RunConfig
from .encoders import (Cnn3dEncoder, FrameExtractor, MomentumEncoder, TransformerEncoder,
                       momentum_update)
from .loss import EmbeddingSet, MemoryQueue, joint_loss, nce_loss, pair_similarities, sdp_loss
from .nn import Linear, Module
from .optim import SGD
from .synth import Dataset, augment_frames, generate_dataset, sample_augmentation, sample_clip
from .tensor import NumericFault, Tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "lr", "nce", "cls", "total", "cls_acc",
                  "sim_gq_gk", "sim_gq_tq", "sim_gq_tk", "sim_tq_tk")


def dataset_from_config(cfg: RunConfig) -> Dataset:
    return generate_dataset(
        seed=cfg.data_seed, num_videos=cfg.num_videos, num_classes=cfg.num_classes,
        length=cfg.video_length, height=cfg.frame_height, width=cfg.frame_width, crop=cfg.crop,
        test_fraction=cfg.test_fraction, clip_len=cfg.clip_len, stride=cfg.stride,
    )


@dataclass
class Models:
    g: Cnn3dEncoder
    g_key: MomentumEncoder
    t: TransformerEncoder | None = None
    extractor_pretrained: bool = False

    def state(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for prefix, module in (("g", self.g), ("g_key", self.g_key), ("t", self.t)):
            if module is None:
                continue
            for name, value in module.state_dict().items():
                state[f"{prefix}.{name}"] = value
        return state

    def load(self, tensors) -> None:
        for prefix, module in (("g", self.g), ("g_key", self.g_key), ("t", self.t)):
            if module is None:
                continue
            sub = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
            module.load_state_dict(sub)


def init_rng(cfg: RunConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stream])


def build_models(cfg: RunConfig, extractor: FrameExtractor | None = None) -> Models:
    rng = init_rng(cfg, 0)
    ecfg = cfg.encoder_config()
    g = Cnn3dEncoder(ecfg, rng)
    g_key = MomentumEncoder(g)
    t = TransformerEncoder(ecfg, rng, extractor) if cfg.enable_transformer else None
    return Models(g, g_key, t, extractor_pretrained=extractor is not None)


# frame extractor pre-training ---------------------------------------------

class _FrameModel(Module):
    def __init__(self, extractor: FrameExtractor, dim: int, rng):
        super().__init__()
        self.extractor = extractor
        self.proj = Linear(extractor.out_dim, dim, rng)

    def forward(self, frames):
        return self.proj(self.extractor(frames))


def pretraining_frames(cfg: RunConfig, dataset: Dataset) -> np.ndarray:
    """Every ``pretrain_interval``-th frame of every training video."""
    idx = dataset.split_indices("train")
    if idx.size == 0:
        raise ValueError("no training videos for frame pre-training")
    frames = np.concatenate([dataset.videos[i][::cfg.pretrain_interval] for i in idx])
    if frames.shape[0] == 0:
        raise ValueError("frame pre-training set is empty")
    return frames


def pretrain_frame_extractor(cfg: RunConfig, dataset: Dataset) -> tuple[FrameExtractor, list[float]]:
    """Image-level instance discrimination with a momentum key encoder and
    queue. Returns the frozen extractor and the per-epoch mean loss."""
    frames = pretraining_frames(cfg, dataset)
    rng = init_rng(cfg, 10)
    ecfg = cfg.encoder_config()
    online = _FrameModel(FrameExtractor(ecfg, rng), cfg.embed_dim, rng)
    key = _FrameModel(FrameExtractor(ecfg, rng), cfg.embed_dim, rng)
    key.load_state_dict(online.state_dict())
    key.freeze()
    queue = MemoryQueue(cfg.pretrain_queue, cfg.embed_dim)
    opt = SGD(online.named_trainable_parameters(), cfg.pretrain_lr, cfg.sgd_momentum,
              cfg.weight_decay, total_epochs=max(cfg.pretrain_epochs, 1))
    aug = cfg.augmentation_config()
    h, w = frames.shape[-2:]
    dtype = T.default_dtype()
    history = []
    for epoch in range(cfg.pretrain_epochs):
        opt.set_epoch(epoch)
        order = rng.permutation(frames.shape[0])
        losses = []
        for lo in range(0, len(order), cfg.pretrain_batch):
            batch = frames[order[lo:lo + cfg.pretrain_batch]]
            views = []
            for _ in range(2):
                views.append(np.stack([
                    augment_frames(f[None], sample_augmentation(rng, h, w, aug))[0] for f in batch
                ]).astype(dtype))
            q = online(Tensor(views[0]))
            with T.no_grad():
                k = T.l2_normalize(key(Tensor(views[1])))
            loss = nce_loss(EmbeddingSet(q, k), queue, cfg.tau, pairs=("gq_gk",))
            opt.zero_grad()
            loss.backward()
            opt.step()
            momentum_update(online, key, cfg.key_momentum)
            queue.enqueue(k.data)
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
        log.info("frame pre-training epoch %d loss %.4f", epoch, history[-1])
    extractor = online.extractor
    extractor.freeze()
    return extractor, history


def load_extractor(cfg: RunConfig, path) -> FrameExtractor:
    tensors, _ = checkpoint.load(path)
    extractor = FrameExtractor(cfg.encoder_config(), np.random.default_rng(0))
    extractor.load_state_dict({k: v for k, v in tensors.items()})
    extractor.freeze()
    return extractor


def save_extractor(extractor: FrameExtractor, path, cfg: RunConfig, history=()) -> None:
    checkpoint.save(path, extractor.state_dict(),
                    {"kind": "frame_extractor", "config": cfg.to_dict(), "loss_history": list(history)})


def resolve_extractor(cfg: RunConfig, dataset: Dataset) -> FrameExtractor | None:
    if not cfg.enable_transformer or cfg.random_frozen:
        return None
    if cfg.extractor_path:
        return load_extractor(cfg, cfg.extractor_path)
    return pretrain_frame_extractor(cfg, dataset)[0]


# self-supervised loop ----------------------------------------------------

@dataclass
class BatchInputs:
    video_ids: list[int]
    xq: np.ndarray
    xq_shuffled: np.ndarray
    xk: np.ndarray
    xk_shuffled: np.ndarray
    labels: np.ndarray
    degrees: np.ndarray
    perms: list[tuple[int, ...]] = field(default_factory=list)


class Trainer:
    def __init__(self, cfg: RunConfig, dataset: Dataset, models: Models | None = None):
        self.cfg = cfg
        self.dataset = dataset
        self.models = models if models is not None else build_models(cfg, resolve_extractor(cfg, dataset))
        self.rng = init_rng(cfg, 1)
        self.sampler = med.ShuffleSampler(cfg.clip_len, init_rng(cfg, 2))
        self.queue = MemoryQueue(cfg.queue_size, cfg.embed_dim, dtype=T.default_dtype())
        self.pairs = tuple(cfg.positive_pairs) if cfg.enable_nce else ()
        self.uses_t = any(p != "gq_gk" for p in self.pairs)
        if self.uses_t and self.models.t is None:
            raise ValueError("positive pairs need the transformer branch")
        self.optimizer = SGD(self._trainable(), cfg.lr, cfg.sgd_momentum, cfg.weight_decay,
                             total_epochs=max(cfg.epochs, 1))
        self.epoch = 0
        self.history: list[dict] = []

    def _trainable(self):
        g = self.models.g
        named = [(f"g.trunk.{n}", p) for n, p in g.trunk.named_parameters()]
        if self.cfg.enable_nce:
            named += [(f"g.contrast_head.{n}", p) for n, p in g.contrast_head.named_parameters()]
        if self.cfg.enable_sdp:
            named += [(f"g.cls_head.{n}", p) for n, p in g.cls_head.named_parameters()]
        if self.uses_t:
            named += [(f"t.{n}", p) for n, p in self.models.t.named_trainable_parameters()]
        return named

    def draw_shuffle(self) -> med.ShuffleSample:
        if self.cfg.uniform_sampling:
            return self.sampler.sample()
        return self.sampler.sample_uniform_permutation()

    def make_batch(self, video_ids) -> BatchInputs:
        cfg = self.cfg
        aug = cfg.augmentation_config()
        h, w = self.dataset.videos.shape[-2:]
        dtype = T.default_dtype()
        xq, xqs, xk, xks, labels, degrees, perms = [], [], [], [], [], [], []
        for vid in video_ids:
            clip = sample_clip(self.dataset.videos[vid], self.rng, cfg.clip_len, cfg.stride, vid)
            shuffle = self.draw_shuffle()
            order = shuffle.perm.as_array()
            q = augment_frames(clip.frames, sample_augmentation(self.rng, h, w, aug))
            k = augment_frames(clip.frames, sample_augmentation(self.rng, h, w, aug))
            xq.append(q)
            xqs.append(q[order])
            xk.append(k)
            xks.append(k[order])
            labels.append(shuffle.label)
            degrees.append(shuffle.degree)
            perms.append(shuffle.perm.order)
        stack = lambda xs: np.stack(xs).astype(dtype)  # noqa: E731
        return BatchInputs(list(map(int, video_ids)), stack(xq), stack(xqs), stack(xk), stack(xks),
                           np.array(labels), np.array(degrees), perms)

    def compute_loss(self, batch: BatchInputs):
        m = self.models
        gq, logits, _ = m.g(batch.xq, batch.xq_shuffled)
        nce = None
        sims = {}
        gk = None
        if self.cfg.enable_nce:
            with T.no_grad():
                gk = T.l2_normalize(m.g_key(batch.xk, batch.xk_shuffled)[0])
            tq = m.t(batch.xq, batch.xq_shuffled) if self.uses_t else None
            tk = m.t(batch.xk, batch.xk_shuffled) if self.uses_t else None
            emb = EmbeddingSet(gq, gk, tq, tk)
            nce = nce_loss(emb, self.queue, self.cfg.tau, self.pairs)
            sims = pair_similarities(emb)
        cls = sdp_loss(logits, batch.labels) if self.cfg.enable_sdp else None
        if nce is None:
            nce = Tensor(0.0)
        parts = joint_loss(nce, cls, self.cfg.sdp_weight)
        parts.pair_similarity = sims
        return parts, logits, gk

    def step(self, video_ids) -> dict:
        batch = self.make_batch(video_ids)
        try:
            parts, logits, gk = self.compute_loss(batch)
            self.optimizer.zero_grad()
            parts.total.backward()
            lr = self.optimizer.step()
        except NumericFault as exc:
            raise TrainingFault(str(exc), batch) from exc
        if self.cfg.enable_nce:
            momentum_update(self.models.g, self.models.g_key, self.cfg.key_momentum)
            self.queue.enqueue(gk.data)
        row = parts.scalars()
        row["lr"] = lr
        row["cls_acc"] = float((logits.data.argmax(axis=1) == batch.labels).mean())
        row.update({f"sim_{k}": v for k, v in parts.pair_similarity.items()})
        return row

    def run_epoch(self) -> dict:
        cfg = self.cfg
        self.optimizer.set_epoch(self.epoch)
        train_ids = self.dataset.split_indices("train")
        order = train_ids[self.rng.permutation(train_ids.size)]
        rows = [self.step(order[lo:lo + cfg.batch_size]) for lo in range(0, order.size, cfg.batch_size)]
        summary = {"epoch": self.epoch}
        for col in METRIC_COLUMNS[1:]:
            vals = [r[col] for r in rows if col in r]
            summary[col] = float(np.mean(vals)) if vals else float("nan")
        self.history.append(summary)
        self.epoch += 1
        log.info("epoch %d total %.4f nce %.4f cls %.4f", summary["epoch"], summary["total"],
                 summary["nce"], summary["cls"])
        return summary

    def train(self, epochs: int | None = None) -> list[dict]:
        for _ in range(self.cfg.epochs if epochs is None else epochs):
            self.run_epoch()
        return self.history

    def save(self, path) -> None:
        tensors = self.models.state()
        tensors["queue.ring"] = self.queue.state()["ring"]
        meta = {
            "kind": "cacl",
            "config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "queue_cursor": self.queue.cursor,
            "queue_count": self.queue.count,
            "extractor_pretrained": self.models.extractor_pretrained,
        }
        checkpoint.save(path, tensors, meta)


class TrainingFault(NumericFault):
    def __init__(self, message: str, batch: BatchInputs):
        super().__init__(message)
        self.batch = batch

    def dump(self, path) -> None:
        b = self.batch
        Path(path).write_text(json.dumps({
            "error": str(self),
            "video_ids": b.video_ids,
            "degrees": b.degrees.tolist(),
            "perms": [list(p) for p in b.perms],
            "input_finite": bool(np.isfinite(b.xq).all() and np.isfinite(b.xk).all()),
        }, indent=2))


def load_models(path, cfg: RunConfig | None = None) -> tuple[Models, RunConfig, dict]:
    tensors, manifest = checkpoint.load(path)
    meta = manifest["meta"]
    if meta.get("kind") != "cacl":
        raise checkpoint.CheckpointError(f"{path} is not a training checkpoint")
    cfg = cfg or RunConfig.from_dict(meta["config"])
    models = build_models(cfg, FrameExtractor(cfg.encoder_config(), np.random.default_rng(0))
                          if cfg.enable_transformer else None)
    models.load({k: v for k, v in tensors.items() if not k.startswith("queue.")})
    models.extractor_pretrained = bool(meta.get("extractor_pretrained"))
    if models.t is not None:
        models.t.extractor.freeze()
    return models, cfg, meta


def write_metrics(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"]] + [_fmt(row.get(c, float("nan"))) for c in METRIC_COLUMNS[1:]])


def _fmt(value: float) -> str:
    return "nan" if value != value else repr(float(value))


def run_training(cfg: RunConfig, out_dir, dataset: Dataset | None = None) -> Trainer:
    """Full ``train`` command: dataset, extractor, loop, metrics and checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset or dataset_from_config(cfg)
    trainer = Trainer(cfg, dataset)
    try:
        trainer.train()
    except TrainingFault as fault:
        fault.dump(out / "fault_dump.json")
        raise
    write_metrics(out / "metrics.csv", trainer.history)
    trainer.save(out / "checkpoint.ckpt")
    return trainer
