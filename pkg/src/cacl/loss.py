"""Cross-architecture InfoNCE with a key queue, and the shuffle-degree loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAIRS = ("gq_gk", "gq_tq", "gq_tk", "tq_tk")
PAIR_LABELS = {"gq_gk": "(Gq,Gk)", "gq_tq": "(Gq,Tq)", "gq_tk": "(Gq,Tk)", "tq_tk": "(Tq,Tk)"}
# rows of the positive-pair progression, in order
PAIR_SUBSETS = (PAIRS[:1], PAIRS[:2], PAIRS[:3], PAIRS)
DEFAULT_TAU = 1.0 / 0.07


class QueueError(ValueError):
    pass


@dataclass
class EmbeddingSet:
    """Four clip representations per video; ``gk`` is a detached key."""

    gq: Tensor
    gk: Tensor
    tq: Tensor | None = None
    tk: Tensor | None = None

    def __post_init__(self):
        if self.gk.requires_grad:
            self.gk = self.gk.detach()
        dims = {t.shape[-1] for t in (self.gq, self.gk, self.tq, self.tk) if t is not None}
        if len(dims) != 1:
            raise T.ShapeError(f"embedding dimensions differ: {sorted(dims)}")

    def get(self, name: str) -> Tensor:
        value = getattr(self, name)
        if value is None:
            raise ValueError(f"embedding {name!r} is required by the chosen positive pairs")
        return value


@dataclass
class LossBreakdown:
    nce: Tensor
    cls: Tensor | None
    total: Tensor
    weight: float
    pair_similarity: dict[str, float] = field(default_factory=dict)

    def scalars(self) -> dict[str, float]:
        return {
            "nce": float(self.nce.data),
            "cls": float(self.cls.data) if self.cls is not None else 0.0,
            "total": float(self.total.data),
        }


class MemoryQueue:
    """Fixed-capacity FIFO ring of unit-norm key vectors."""

    def __init__(self, capacity: int, dim: int, dtype=np.float64):
        if capacity < 1:
            raise QueueError("queue capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self._ring = np.zeros((capacity, dim), dtype=dtype)
        self.cursor = 0
        self.count = 0

    def __len__(self):
        return self.count

    def entries(self) -> np.ndarray:
        """Stored keys, oldest first."""
        if self.count < self.capacity:
            return self._ring[: self.count].copy()
        return np.concatenate([self._ring[self.cursor:], self._ring[: self.cursor]])

    def enqueue(self, keys, tol: float | None = None) -> None:
        keys = np.atleast_2d(np.asarray(keys.data if isinstance(keys, Tensor) else keys))
        if tol is None:
            tol = 1e-9 if keys.dtype == np.float64 else 1e-5
        if keys.shape[1] != self.dim:
            raise QueueError(f"key dimension {keys.shape[1]} != queue dimension {self.dim}")
        norms = np.linalg.norm(keys, axis=1)
        if np.any(np.abs(norms - 1.0) > tol):
            raise QueueError(f"keys must be unit-normalized (norms {norms.min():.6g}..{norms.max():.6g})")
        for key in keys:
            self._ring[self.cursor] = key
            self.cursor = (self.cursor + 1) % self.capacity
            self.count = min(self.count + 1, self.capacity)

    def state(self) -> dict:
        return {"ring": self._ring.copy(), "cursor": self.cursor, "count": self.count}

    def load_state(self, state: dict) -> None:
        self._ring = np.array(state["ring"], dtype=self._ring.dtype)
        self.cursor = int(state["cursor"])
        self.count = int(state["count"])


def cont(u, v, tau: float = DEFAULT_TAU) -> Tensor:
    """``tau * cos(u, v)`` along the last axis."""
    u, v = T.as_tensor(u), T.as_tensor(v)
    if u.shape != v.shape:
        raise T.ShapeError(f"cont: shapes {u.shape} and {v.shape} differ")
    return T.tsum(T.l2_normalize(u) * T.l2_normalize(v), axis=-1) * tau


def _pair_logits(e: EmbeddingSet, tau: float, pairs) -> Tensor:
    cols = []
    for name in pairs:
        a, b = name.split("_")
        cols.append(T.reshape(cont(e.get(a), e.get(b), tau), (-1, 1)))
    return T.concat(cols, axis=1)


def positive_score(e: EmbeddingSet, tau: float = DEFAULT_TAU, pairs=PAIRS) -> Tensor:
    """Sum of ``exp(cont)`` over the chosen positive pairs (all four by default)."""
    return T.tsum(T.exp(_pair_logits(e, tau, pairs)), axis=-1)


def nce_loss(e: EmbeddingSet, queue: MemoryQueue | np.ndarray | None, tau: float = DEFAULT_TAU,
             pairs=PAIRS) -> Tensor:
    """``-mean_i log(S_pos_i / (S_pos_i + sum_j exp(cont(gq_i, N_j))))``.

    Computed in log-space; only ``gq`` meets the queue negatives.
    """
    pos = _pair_logits(e, tau, pairs)
    negatives = queue.entries() if isinstance(queue, MemoryQueue) else queue
    if negatives is not None and len(negatives):
        gq = T.l2_normalize(e.gq)
        neg = T.matmul(gq, Tensor(np.asarray(negatives).T / np.linalg.norm(negatives, axis=1))) * tau
        logits = T.concat([pos, neg], axis=1)
    else:
        logits = pos
    return T.mean(T.logsumexp(logits) - T.logsumexp(pos))


def sdp_loss(logits: Tensor, labels) -> Tensor:
    return T.cross_entropy_with_logits(logits, labels)


def joint_loss(nce: Tensor, cls: Tensor | None, weight: float = 1.0) -> LossBreakdown:
    if weight < 0:
        raise ValueError("loss weight must be non-negative")
    total = nce if cls is None or weight == 0 else nce + cls * weight
    return LossBreakdown(nce=nce, cls=cls, total=total, weight=weight)


def pair_similarities(e: EmbeddingSet) -> dict[str, float]:
    """Mean cosine similarity of each available positive pair."""
    out = {}
    with T.no_grad():
        for name in PAIRS:
            a, b = name.split("_")
            if getattr(e, a) is None or getattr(e, b) is None:
                continue
            out[name] = float(cont(getattr(e, a), getattr(e, b), 1.0).data.mean())
    return out
