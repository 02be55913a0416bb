"""Run configuration: a flat ``key = value`` text format.

Blank lines and ``#`` comments are ignored. Tuple-valued keys take
comma-separated values. Command-line ``key=value`` overrides are applied
on top of the file, and the resolved result is what run manifests record.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .encoders import EncoderConfig
from .loss import PAIRS
from .synth import AugmentationConfig


class ConfigError(ValueError):
    pass


def _key(default, origin: str, doc: str):
    return field(default=default, metadata={"origin": origin, "doc": doc})


@dataclass
class RunConfig:
    # dataset
    data_seed: int = _key(1, "desk scale", "seed of the synthetic dataset")
    num_videos: int = _key(200, "desk scale", "number of synthetic videos")
    num_classes: int = _key(8, "desk scale", "number of motion classes")
    video_length: int = _key(46, "desk scale", "frames per video")
    frame_height: int = _key(20, "training recipe", "generated frame height (128 at full scale)")
    frame_width: int = _key(24, "training recipe", "generated frame width (171 at full scale)")
    crop: int = _key(16, "training recipe", "training crop size (112 at full scale)")
    test_fraction: float = _key(0.2, "desk scale", "fraction of each class held out as queries")
    # clips and augmentation
    clip_len: int = _key(16, "training recipe", "frames per clip")
    stride: int = _key(2, "training recipe", "frame interval inside a clip")
    flip_prob: float = _key(0.5, "contrastive learning", "horizontal flip probability")
    brightness: float = _key(0.2, "contrastive learning", "brightness jitter half-range")
    contrast: float = _key(0.2, "contrastive learning", "contrast jitter half-range")
    blur_max: float = _key(1.0, "contrastive learning", "maximum gaussian blur sigma")
    saturation: float = _key(0.4, "contrastive learning", "saturation jitter half-range")
    hue: float = _key(0.5, "contrastive learning", "hue rotation half-range in turns (0.5 = any hue)")
    grayscale_prob: float = _key(0.2, "contrastive learning", "probability of converting a clip to grey")
    # encoders
    trunk_channels: tuple = _key((8, 16, 32), "architecture", "3D CNN block widths")
    norm_groups: int = _key(4, "architecture", "group norm groups per 3D CNN block (0 disables)")
    feature_dim: int = _key(64, "architecture", "3D CNN clip feature size")
    embed_dim: int = _key(32, "architecture", "contrastive embedding size")
    head_hidden: int = _key(64, "architecture", "hidden width of contrast and classification heads")
    extractor_channels: tuple = _key((8, 16), "architecture", "frame extractor block widths")
    token_dim: int = _key(32, "architecture", "transformer token size (768 at full scale)")
    layers: int = _key(2, "architecture", "transformer layers (6 at full scale)")
    heads: int = _key(2, "architecture", "attention heads (6 at full scale)")
    ffn_dim: int = _key(64, "architecture", "transformer feed-forward width")
    # optimisation
    seed: int = _key(0, "desk scale", "seed for initialisation and sampling")
    epochs: int = _key(30, "training recipe", "self-supervised epochs (300 at full scale)")
    batch_size: int = _key(16, "training recipe", "videos per batch (64 at full scale)")
    lr: float = _key(0.005, "training recipe", "base learning rate, cosine decayed (0.001 at full scale)")
    sgd_momentum: float = _key(0.9, "training recipe", "SGD momentum")
    weight_decay: float = _key(5e-4, "training recipe", "L2 weight decay added to the gradient")
    tau: float = _key(1.0 / 0.07, "contrastive learning", "similarity scale multiplying the cosine")
    sdp_weight: float = _key(1.0, "shuffle-degree task", "weight of the shuffle-degree loss in the total")
    key_momentum: float = _key(0.99, "contrastive learning", "EMA coefficient of the key encoder (0.999 at full scale)")
    queue_size: int = _key(256, "contrastive learning", "number of queued negative keys")
    # ablation switches
    enable_nce: bool = _key(True, "ablation", "train with the contrastive loss")
    enable_sdp: bool = _key(True, "ablation", "train with the shuffle-degree loss")
    enable_transformer: bool = _key(True, "ablation", "build the transformer branch")
    positive_pairs: tuple = _key(PAIRS, "ablation", "positive pairs in the contrastive numerator")
    uniform_sampling: bool = _key(True, "shuffle-degree task", "draw shuffle degrees uniformly")
    # frame extractor pre-training
    random_frozen: bool = _key(False, "training recipe", "skip extractor pre-training, freeze random weights")
    pretrain_epochs: int = _key(8, "training recipe", "frame extractor pre-training epochs")
    pretrain_interval: int = _key(10, "training recipe", "frame interval when collecting pre-training frames")
    pretrain_batch: int = _key(32, "training recipe", "frames per pre-training batch")
    pretrain_lr: float = _key(0.05, "training recipe", "pre-training learning rate")
    pretrain_queue: int = _key(128, "training recipe", "pre-training queue size")
    extractor_path: str = _key("", "training recipe", "pre-trained extractor checkpoint; empty = train inline")
    # evaluation
    eval_clips: int = _key(10, "retrieval protocol", "clips per video for retrieval")
    retrieval_ks: tuple = _key((1, 5, 10, 20, 50), "retrieval protocol", "top-k values")
    attention_clips: int = _key(50, "attention analysis", "clips averaged in the attention map")
    probe_epochs: int = _key(200, "desk scale", "full-batch steps of the linear probe")
    probe_lr: float = _key(0.5, "desk scale", "linear probe learning rate")
    sdp_probe_draws: int = _key(4, "desk scale", "held-out shuffles per test video in the SDP probe")
    # runtime
    dtype: str = _key("float64", "desk scale", "float64 or float32")
    threads: int = _key(1, "desk scale", "BLAS threads; recorded for reproducibility")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if f.type in ("int", "float") and value is not None and value < 0:
                raise ConfigError(f"{f.name} must be non-negative, got {value}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        bad = [p for p in self.positive_pairs if p not in PAIRS]
        if bad:
            raise ConfigError(f"unknown positive pairs {bad}; choose from {PAIRS}")
        if not self.enable_transformer and any(p != "gq_gk" for p in self.positive_pairs):
            raise ConfigError("pairs involving Tq/Tk need enable_transformer = true")
        if not (self.enable_nce or self.enable_sdp):
            raise ConfigError("at least one of enable_nce / enable_sdp must be true")
        if not 0 <= self.key_momentum < 1:
            raise ConfigError("key_momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.clip_len < 2:
            raise ConfigError("batch_size >= 1, epochs >= 0 and clip_len >= 2 are required")

    # conversions ---------------------------------------------------------
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            clip_len=self.clip_len, crop=self.crop, trunk_channels=tuple(self.trunk_channels),
            norm_groups=self.norm_groups,
            feature_dim=self.feature_dim, embed_dim=self.embed_dim, head_hidden=self.head_hidden,
            extractor_channels=tuple(self.extractor_channels), token_dim=self.token_dim,
            layers=self.layers, heads=self.heads, ffn_dim=self.ffn_dim,
        )

    def augmentation_config(self) -> AugmentationConfig:
        return AugmentationConfig(self.crop, self.flip_prob, self.brightness, self.contrast, self.blur_max,
                                  self.saturation, self.hue, self.grayscale_prob)

    def to_dict(self) -> dict:
        return {f.name: _jsonable(getattr(self, f.name)) for f in fields(self)}

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"# {f.metadata['doc']} [{f.metadata['origin']}]")
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(known[key], raw)
        return cls(**kwargs)

    @classmethod
    def load(cls, path=None, overrides: list[str] | dict | None = None) -> "RunConfig":
        values: dict = {}
        if path:
            values.update(parse_text(_read(path)))
        if isinstance(overrides, dict):
            values.update(overrides)
        elif overrides:
            values.update(parse_text("\n".join(overrides), source="overrides"))
        return cls.from_dict(values)


def _read(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def parse_text(text: str, source: str = "config") -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def _coerce(f, raw):
    if not isinstance(raw, str):
        return tuple(raw) if f.type == "tuple" else raw
    try:
        if f.type == "bool":
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if f.type == "int":
            return int(raw)
        if f.type == "float":
            return float(raw)
        if f.type == "tuple":
            items = [v.strip() for v in raw.split(",") if v.strip()]
            return tuple(int(v) if v.lstrip("-").isdigit() else v for v in items)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {f.name}: {raw!r}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _jsonable(value):
    return list(value) if isinstance(value, tuple) else value


def describe_keys() -> str:
    """One line per key: name, default and origin, for ``--help``."""
    rows = []
    for f in fields(RunConfig):
        default = _format(f.default)
        origin = f.metadata["origin"]
        rows.append(f"  {f.name} = {default}  [{origin}] {f.metadata['doc']}")
    return "\n".join(rows)
