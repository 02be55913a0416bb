"""The 3D-CNN and transformer video encoders plus the momentum key encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import med
from . import tensor as T
from .nn import MLP, Conv2d, Conv3d, GroupNorm, LayerNorm, Linear, Module, parameter
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    clip_len: int = 16
    in_channels: int = 3
    crop: int = 16
    trunk_channels: tuple[int, ...] = (8, 16, 32)
    norm_groups: int = 4
    feature_dim: int = 64
    embed_dim: int = 32
    head_hidden: int = 64
    extractor_channels: tuple[int, ...] = (8, 16)
    token_dim: int = 32
    layers: int = 2
    heads: int = 2
    ffn_dim: int = 64

    @property
    def num_degree_classes(self) -> int:
        return med.num_classes(self.clip_len)

    @property
    def seq_len(self) -> int:
        return 2 * self.clip_len + 1


def _as_clip_batch(x, cfg: EncoderConfig) -> np.ndarray:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim == 4:
        data = data[None]
    expected = (cfg.clip_len, cfg.in_channels, cfg.crop, cfg.crop)
    if data.ndim != 5 or data.shape[1:] != expected:
        raise ShapeError(f"expected clips of shape (B, {', '.join(map(str, expected))}), got {data.shape}")
    return data


def _halve(size: int) -> int:
    return 2 if size % 2 == 0 and size > 1 else 1


class Cnn3dTrunk(Module):
    """conv3d+norm+relu+pool blocks, a final conv to ``feature_dim``, global
    max pool.

    The first block pools only spatially, as C3D does. Normalisation is
    per-sample group norm (``norm_groups = 0`` disables it), so clips in a
    batch never influence each other.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        chans = (cfg.in_channels,) + tuple(cfg.trunk_channels)
        self.blocks = [Conv3d(a, b, rng) for a, b in zip(chans[:-1], chans[1:])]
        if cfg.norm_groups:
            self.norms = [GroupNorm(c, math.gcd(c, cfg.norm_groups)) for c in chans[1:]]
        self.final = Conv3d(chans[-1], cfg.feature_dim, rng)

    def feature_map(self, x: Tensor) -> Tensor:
        """(B, C, T, H, W) -> last conv activations before global pooling."""
        h = x
        norms = getattr(self, "norms", None)
        for i, conv in enumerate(self.blocks):
            h = conv(h)
            if norms is not None:
                h = norms[i](h)
            h = T.relu(h)
            t, hh, ww = h.shape[2:]
            kernel = (1 if i == 0 else _halve(t), _halve(hh), _halve(ww))
            if kernel != (1, 1, 1):
                h = T.max_pool(h, kernel)
        return T.relu(self.final(h))

    def forward(self, x: Tensor) -> Tensor:
        return T.amax(self.feature_map(x), axis=(2, 3, 4))


def standardize(x: np.ndarray, axes) -> np.ndarray:
    """Zero mean, unit deviation over ``axes``; flat inputs stay finite."""
    mean = x.mean(axis=axes, keepdims=True)
    std = x.std(axis=axes, keepdims=True)
    return (x - mean) / (std + 1e-3)


def clips_to_volume(clips: np.ndarray) -> Tensor:
    """(B, n, C, H, W) frames -> (B, C, n, H, W) conv input, each clip
    standardised per channel. This removes the background colour and the
    global brightness shift so the trunk starts from contrast and motion."""
    volume = clips.transpose(0, 2, 1, 3, 4)
    return Tensor(np.ascontiguousarray(standardize(volume, (2, 3, 4))))


class Cnn3dEncoder(Module):
    """Shared trunk applied to a clip and its shuffle, then two heads on the
    concatenated features."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, with_cls_head: bool = True):
        super().__init__()
        self.cfg = cfg
        self.trunk = Cnn3dTrunk(cfg, rng)
        self.contrast_head = MLP(2 * cfg.feature_dim, cfg.head_hidden, cfg.embed_dim, rng)
        if with_cls_head:
            self.cls_head = MLP(2 * cfg.feature_dim, cfg.head_hidden, cfg.num_degree_classes, rng)

    def pair_features(self, x, x_shuffled) -> Tensor:
        a = _as_clip_batch(x, self.cfg)
        b = _as_clip_batch(x_shuffled, self.cfg)
        if a.shape != b.shape:
            raise ShapeError(f"clip {a.shape} and shuffled clip {b.shape} differ in shape")
        batch = a.shape[0]
        feats = self.trunk(clips_to_volume(np.concatenate([a, b])))
        return T.concat([feats[:batch], feats[batch:]], axis=1)

    def forward(self, x, x_shuffled):
        """Returns ``(embedding, logits, pooled)``; logits is None without a cls head."""
        pooled = self.pair_features(x, x_shuffled)
        embedding = self.contrast_head(pooled)
        logits = self.cls_head(pooled) if "cls_head" in self._modules else None
        return embedding, logits, pooled

    def clip_features(self, clips) -> Tensor:
        """Trunk feature of each clip alone (spatial then temporal max pool)."""
        fmap = self.trunk.feature_map(clips_to_volume(_as_clip_batch(clips, self.cfg)))
        spatial = T.amax(fmap, axis=(3, 4))
        return T.amax(spatial, axis=2)


class MomentumEncoder(Cnn3dEncoder):
    """Trunk and contrast head only; parameters follow the online encoder by EMA."""

    def __init__(self, online: Cnn3dEncoder):
        super().__init__(online.cfg, np.random.default_rng(0), with_cls_head=False)
        own = dict(self.named_parameters())
        for name, p in online.named_parameters():
            if name in own:
                own[name].data = p.data.copy()
        self.freeze()


def momentum_update(online: Module, target: Module, alpha: float = 0.999) -> None:
    """``theta_k <- alpha * theta_k + (1 - alpha) * theta_q`` for every target parameter."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"momentum coefficient must lie in [0, 1), got {alpha}")
    source = dict(online.named_parameters())
    for name, p in target.named_parameters():
        q = source.get(name)
        if q is None or q.shape != p.shape:
            raise ValueError(f"structure mismatch at {name!r}")
        p.data = alpha * p.data + (1.0 - alpha) * q.data


class FrameExtractor(Module):
    """Small 2D CNN mapping a frame to a coarse spatial feature vector.

    Two conv+relu+pool blocks, then a 2x2 max pool grid flattened, so the
    feature keeps rough object position.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        chans = (cfg.in_channels,) + tuple(cfg.extractor_channels)
        self.convs = [Conv2d(a, b, rng) for a, b in zip(chans[:-1], chans[1:])]
        size = cfg.crop
        for _ in self.convs:
            size //= _halve(size)
        self.grid = 2 if size % 2 == 0 else 1
        self.out_dim = chans[-1] * self.grid * self.grid
        self._pool_last = size // self.grid

    def forward(self, frames: Tensor) -> Tensor:
        h = frames
        for conv in self.convs:
            h = T.relu(conv(h))
            hh, ww = h.shape[2:]
            h = T.max_pool(h, (_halve(hh), _halve(ww)))
        if self._pool_last > 1:
            h = T.max_pool(h, (self._pool_last, self._pool_last))
        return T.reshape(h, (h.shape[0], -1))


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ValueError(f"token dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.last_attention = None

    def forward(self, x: Tensor, mode: str = "full") -> Tensor:
        b, s, d = x.shape
        dh = d // self.heads
        qkv = T.reshape(self.qkv(x), (b, s, 3, self.heads, dh))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, H, S, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        if mode == "cls_only":
            keep = np.zeros((s, s), dtype=bool)
            keep[:, 0] = True
            scores = T.where_mask(scores, keep, -1e30)
        elif mode != "full":
            raise ValueError(f"unknown attention mode {mode!r}")
        attn = T.softmax(scores)
        self.last_attention = attn.data
        out = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
        return self.proj(T.reshape(out, (b, s, d)))


class TransformerBlock(Module):
    """Pre-norm self-attention and feed-forward sublayers with residuals."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator):
        super().__init__()
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ffn = MLP(dim, ffn_dim, dim, rng)

    def forward(self, x: Tensor, mode: str = "full") -> Tensor:
        x = x + self.attn(self.ln1(x), mode)
        return x + self.ffn(self.ln2(x))


class TransformerEncoder(Module):
    """Frozen per-frame extractor, token projection, class token, learned
    positions, self-attention layers; the class-token output is the clip
    representation."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator,
                 extractor: FrameExtractor | None = None):
        super().__init__()
        self.cfg = cfg
        self.extractor = extractor if extractor is not None else FrameExtractor(cfg, rng)
        self.extractor.freeze()
        self.token_proj = Linear(self.extractor.out_dim, cfg.token_dim, rng)
        self.cls_token = parameter(rng.normal(0.0, 0.02, size=(cfg.token_dim,)))
        self.pos_embed = parameter(rng.normal(0.0, 0.02, size=(cfg.seq_len, cfg.token_dim)))
        self.layers = [TransformerBlock(cfg.token_dim, cfg.heads, cfg.ffn_dim, rng)
                       for _ in range(cfg.layers)]
        self.norm = LayerNorm(cfg.token_dim)
        self.out_proj = Linear(cfg.token_dim, cfg.embed_dim, rng)
        self.attention_mode = "full"

    def frame_features(self, x, x_shuffled) -> Tensor:
        a = _as_clip_batch(x, self.cfg)
        b = _as_clip_batch(x_shuffled, self.cfg)
        if a.shape != b.shape:
            raise ShapeError(f"clip {a.shape} and shuffled clip {b.shape} differ in shape")
        frames = np.concatenate([a, b], axis=1)  # original frames then shuffled ones
        batch, length = frames.shape[:2]
        with T.no_grad():
            feats = self.extractor(Tensor(frames.reshape(batch * length, *frames.shape[2:])))
        return Tensor(feats.data.reshape(batch, length, -1))

    def tokens(self, x, x_shuffled) -> Tensor:
        tokens = self.token_proj(self.frame_features(x, x_shuffled))
        batch, length, dim = tokens.shape
        if length + 1 != self.cfg.seq_len:
            raise ShapeError(f"token sequence length {length + 1} != {self.cfg.seq_len}")
        cls = T.add(Tensor(np.zeros((batch, 1, dim))), self.cls_token)
        return T.concat([cls, tokens], axis=1) + self.pos_embed

    def forward(self, x, x_shuffled) -> Tensor:
        h = self.tokens(x, x_shuffled)
        for layer in self.layers:
            h = layer(h, self.attention_mode)
        return self.out_proj(self.norm(h[:, 0]))

    def first_layer_attention(self) -> np.ndarray | None:
        return self.layers[0].attn.last_attention

    def extractor_gradient_mass(self) -> float:
        return float(sum(np.abs(p.grad).sum() for p in self.extractor.parameters() if p.grad is not None))
