"""Procedural motion videos, clip sampling and clip-consistent augmentation.

Every class shares one static appearance distribution (torus-wrapped
position, radius range, colours, shape); only the motion program differs,
so a single frame carries no class information. All programs are
invariant under horizontal flipping, so the flip augmentation never maps
one class onto another.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

MOTION_CLASSES = (
    "move_up",
    "move_down",
    "expand",
    "contract",
    "oscillate_horizontal",
    "oscillate_vertical",
    "pulse",
    "vibrate",
)

RADIUS_RANGE = (2.0, 5.0)
FRAME_DUMP_MAGIC = b"CACLVID1"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class VideoSpec:
    video_id: int
    class_id: int
    seed: int
    split: str
    length: int
    height: int
    width: int
    channels: int = 3


@dataclass
class Clip:
    frames: np.ndarray  # (n, C, H, W)
    video_id: int = -1
    start: int = 0
    stride: int = 2

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class AugmentationParams:
    crop_y: int
    crop_x: int
    crop_size: tuple[int, int]
    flip: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    blur_sigma: float = 0.0
    saturation: float = 1.0
    hue: float = 0.0  # rotation about the grey axis, in turns
    grayscale: bool = False

    @classmethod
    def identity(cls, height: int, width: int) -> "AugmentationParams":
        return cls(0, 0, (height, width))

    @classmethod
    def center(cls, height: int, width: int, crop: int) -> "AugmentationParams":
        return cls((height - crop) // 2, (width - crop) // 2, (crop, crop))


@dataclass(frozen=True)
class AugmentationConfig:
    crop: int = 16
    flip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    blur_max: float = 1.0
    saturation: float = 0.0
    hue: float = 0.0
    grayscale_prob: float = 0.0


def _motion_params(class_name: str, rng: np.random.Generator, length: int, height: int, width: int):
    r_lo, r_hi = RADIUS_RANGE
    p = {
        "y0": rng.uniform(0, height),
        "x0": rng.uniform(0, width),
        "radius": rng.uniform(r_lo, r_hi),
        "shape": "disc" if rng.random() < 0.5 else "square",
        "color": rng.uniform(0.55, 1.0, size=3).tolist(),
        "background": rng.uniform(0.0, 0.3, size=3).tolist(),
        "speed": rng.uniform(0.5, 0.8),
        "amplitude": rng.uniform(3.0, 5.0),
        "period": rng.uniform(12.0, 20.0),
        "phase": rng.uniform(0, 2 * np.pi),
        "radius_start": rng.uniform(r_lo, r_lo + 0.5),
        "radius_end": rng.uniform(r_hi - 0.5, r_hi),
        "pulse_amplitude": rng.uniform(0.8, 1.2),
        "vibrate_amplitude": rng.uniform(1.5, 2.5),
        "vibrate_period": rng.uniform(4.0, 6.0),
    }
    if class_name == "pulse":
        p["radius"] = rng.uniform(r_lo + 1.2, r_hi - 1.2)
    return p


def _trajectory(class_name: str, p: dict, length: int):
    t = np.arange(length, dtype=np.float64)
    y = np.full(length, p["y0"])
    x = np.full(length, p["x0"])
    r = np.full(length, p["radius"])
    wave = np.sin(2 * np.pi * t / p["period"] + p["phase"])
    if class_name == "move_up":
        y = p["y0"] - p["speed"] * t
    elif class_name == "move_down":
        y = p["y0"] + p["speed"] * t
    elif class_name in ("expand", "contract"):
        frac = t / max(length - 1, 1)
        if class_name == "contract":
            frac = 1.0 - frac
        r = p["radius_start"] + (p["radius_end"] - p["radius_start"]) * frac
    elif class_name == "oscillate_horizontal":
        x = p["x0"] + p["amplitude"] * wave
    elif class_name == "oscillate_vertical":
        y = p["y0"] + p["amplitude"] * wave
    elif class_name == "pulse":
        r = p["radius"] + p["pulse_amplitude"] * wave
    elif class_name == "vibrate":
        x = p["x0"] + p["vibrate_amplitude"] * np.sin(2 * np.pi * t / p["vibrate_period"] + p["phase"])
    else:
        raise DataError(f"unknown motion class {class_name!r}")
    return y, x, r


def render_video(spec: VideoSpec) -> np.ndarray:
    """Frames of shape (length, C, H, W), float32 in [0, 1]."""
    if spec.channels != 3:
        raise DataError("only 3-channel videos are supported")
    rng = np.random.default_rng([spec.seed, spec.class_id, spec.video_id])
    name = MOTION_CLASSES[spec.class_id]
    p = _motion_params(name, rng, spec.length, spec.height, spec.width)
    ys, xs, rs = _trajectory(name, p, spec.length)
    gy, gx = np.meshgrid(np.arange(spec.height) + 0.5, np.arange(spec.width) + 0.5, indexing="ij")
    color = np.asarray(p["color"])[:, None, None]
    background = np.asarray(p["background"])[:, None, None]
    frames = np.empty((spec.length, 3, spec.height, spec.width), dtype=np.float64)
    for t in range(spec.length):
        dy = (gy - ys[t] + spec.height / 2) % spec.height - spec.height / 2
        dx = (gx - xs[t] + spec.width / 2) % spec.width - spec.width / 2
        if p["shape"] == "disc":
            dist = np.sqrt(dy ** 2 + dx ** 2)
        else:
            dist = np.maximum(np.abs(dy), np.abs(dx))
        mask = np.clip(rs[t] - dist + 0.5, 0.0, 1.0)
        frames[t] = background * (1 - mask) + color * mask
    frames += rng.normal(0.0, 0.02, size=frames.shape)
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


@dataclass
class Dataset:
    videos: np.ndarray  # (N, L, C, H, W) float32
    specs: list[VideoSpec]
    seed: int
    num_classes: int
    manifest: dict = field(default_factory=dict)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.class_id for s in self.specs])

    def split_indices(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.specs) if s.split == split], dtype=np.int64)

    def __len__(self):
        return len(self.specs)

    def write_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def dump_frames(self, path) -> None:
        write_frame_dump(path, self.videos)


def generate_dataset(seed: int, num_videos: int, num_classes: int = 8, length: int = 46,
                     height: int = 20, width: int = 24, crop: int = 16,
                     test_fraction: float = 0.2, clip_len: int = 16, stride: int = 2) -> Dataset:
    """Class-balanced synthetic dataset; video ``i`` has class ``i % num_classes``."""
    if not 1 <= num_classes <= len(MOTION_CLASSES):
        raise DataError(f"num_classes must be in 1..{len(MOTION_CLASSES)}")
    if num_videos < num_classes:
        raise DataError(f"need at least one video per class ({num_videos} < {num_classes})")
    if crop > height or crop > width:
        raise DataError(f"frame size {height}x{width} is smaller than crop {crop}")
    span = (clip_len - 1) * stride + 1
    if length < span:
        raise DataError(f"video length {length} shorter than one clip span {span}")
    split_rng = np.random.default_rng([seed, 0xC1A5])
    class_of = [i % num_classes for i in range(num_videos)]
    test_ids: set[int] = set()
    for c in range(num_classes):
        members = [i for i in range(num_videos) if class_of[i] == c]
        n_test = int(round(len(members) * test_fraction))
        test_ids.update(int(v) for v in split_rng.permutation(members)[:n_test])
    specs = [
        VideoSpec(i, class_of[i], seed, "test" if i in test_ids else "train", length, height, width)
        for i in range(num_videos)
    ]
    videos = np.stack([render_video(s) for s in specs])
    manifest = {
        "schema_version": 1,
        "seed": seed,
        "num_videos": num_videos,
        "num_classes": num_classes,
        "classes": list(MOTION_CLASSES[:num_classes]),
        "frame_shape": [length, 3, height, width],
        "crop": crop,
        "videos": [asdict(s) for s in specs],
    }
    return Dataset(videos, specs, seed, num_classes, manifest)


def clip_span(n: int, stride: int) -> int:
    return (n - 1) * stride + 1


def sample_clip(video: np.ndarray, rng: np.random.Generator, n: int = 16, stride: int = 2,
                video_id: int = -1) -> Clip:
    max_start = video.shape[0] - clip_span(n, stride)
    if max_start < 0:
        raise DataError(f"video {video_id} has {video.shape[0]} frames, needs {clip_span(n, stride)}")
    start = int(rng.integers(0, max_start + 1))
    return clip_at(video, start, n, stride, video_id)


def clip_at(video: np.ndarray, start: int, n: int = 16, stride: int = 2, video_id: int = -1) -> Clip:
    stop = start + clip_span(n, stride)
    if start < 0 or stop > video.shape[0]:
        raise DataError(f"clip [{start}, {stop}) out of range for video {video_id}")
    return Clip(video[start:stop:stride], video_id, start, stride)


def uniform_clip_starts(length: int, n: int, stride: int, count: int = 10, video_id: int = -1) -> list[int]:
    """``count`` evenly spaced distinct clip starts covering the video."""
    max_start = length - clip_span(n, stride)
    if max_start + 1 < count:
        raise DataError(
            f"video {video_id}: only {max(max_start + 1, 0)} distinct clips available, need {count}"
        )
    return [int(round(v)) for v in np.linspace(0, max_start, count)]


def sample_augmentation(rng: np.random.Generator, height: int, width: int,
                        config: AugmentationConfig = AugmentationConfig()) -> AugmentationParams:
    return AugmentationParams(
        crop_y=int(rng.integers(0, height - config.crop + 1)),
        crop_x=int(rng.integers(0, width - config.crop + 1)),
        crop_size=(config.crop, config.crop),
        flip=bool(rng.random() < config.flip_prob),
        brightness=float(rng.uniform(1 - config.brightness, 1 + config.brightness)),
        contrast=float(rng.uniform(1 - config.contrast, 1 + config.contrast)),
        blur_sigma=float(rng.uniform(0.0, config.blur_max)),
        saturation=float(rng.uniform(1 - config.saturation, 1 + config.saturation)),
        hue=float(rng.uniform(-config.hue, config.hue)),
        grayscale=bool(rng.random() < config.grayscale_prob),
    )


def hue_rotation(turns: float) -> np.ndarray:
    """3x3 RGB matrix rotating colours about the grey diagonal."""
    angle = 2 * np.pi * turns
    axis = np.ones(3) / np.sqrt(3)
    cross = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.cos(angle) * np.eye(3) + np.sin(angle) * cross + (1 - np.cos(angle)) * np.outer(axis, axis)


def _recolor(out: np.ndarray, params: AugmentationParams) -> np.ndarray:
    if out.shape[-3] != 3:
        return out
    grey = out.mean(axis=-3, keepdims=True)
    if params.grayscale:
        return np.broadcast_to(grey, out.shape).copy()
    if params.saturation != 1.0:
        out = grey + (out - grey) * params.saturation
    if params.hue:
        out = np.einsum("ij,...jhw->...ihw", hue_rotation(params.hue).astype(out.dtype), out)
    return out


def augment_frames(frames: np.ndarray, params: AugmentationParams) -> np.ndarray:
    """Apply one spatial/colour transform identically to every frame.

    ``frames`` is (n, C, H, W); the result is (n, C, crop_h, crop_w).
    """
    ch, cw = params.crop_size
    h, w = frames.shape[-2:]
    if params.crop_y < 0 or params.crop_x < 0 or params.crop_y + ch > h or params.crop_x + cw > w:
        raise DataError(f"crop {params.crop_size} at ({params.crop_y}, {params.crop_x}) outside {h}x{w}")
    out = frames[..., params.crop_y:params.crop_y + ch, params.crop_x:params.crop_x + cw]
    if params.flip:
        out = out[..., ::-1]
    out = _recolor(np.array(out, dtype=frames.dtype), params)
    if params.brightness != 1.0:
        out *= params.brightness
    if params.contrast != 1.0:
        m = out.mean()
        out = (out - m) * params.contrast + m
    if params.blur_sigma > 0:
        out = gaussian_filter(out, sigma=(0, 0, params.blur_sigma, params.blur_sigma), mode="reflect")
    return np.clip(out, 0.0, 1.0, out=out)


def augment(clip: Clip, params: AugmentationParams) -> Clip:
    return Clip(augment_frames(clip.frames, params), clip.video_id, clip.start, clip.stride)


def apply_shuffle(clip: Clip, perm) -> Clip:
    """Output frame ``t`` is input frame ``perm[t]``."""
    order = np.asarray(getattr(perm, "order", perm), dtype=np.int64)
    if order.shape != (clip.length,) or sorted(order.tolist()) != list(range(clip.length)):
        raise DataError(f"permutation of length {order.size} does not fit a {clip.length}-frame clip")
    return Clip(clip.frames[order], clip.video_id, clip.start, clip.stride)


def strided_frames(video: np.ndarray, interval: int = 10) -> np.ndarray:
    """Every ``interval``-th frame, used to build the frame pre-training set."""
    return video[::interval]


def write_frame_dump(path, videos: np.ndarray) -> None:
    """Flat binary: magic, uint32 ndim, uint32 dims, little-endian float32 payload."""
    arr = np.ascontiguousarray(videos, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FRAME_DUMP_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_frame_dump(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(len(FRAME_DUMP_MAGIC)) != FRAME_DUMP_MAGIC:
            raise DataError(f"{path}: not a frame dump")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise DataError(f"{path}: payload has {data.size} values, header says {shape}")
    return data.reshape(shape).astype(np.float32)
