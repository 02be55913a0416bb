from dataclasses import replace

import numpy as np
import pytest

from cacl.synth import (AugmentationParams, DataError, apply_shuffle, augment_frames,
                        clip_at, generate_dataset, hue_rotation, read_frame_dump, sample_augmentation, sample_clip,
                        uniform_clip_starts, write_frame_dump)


@pytest.fixture(scope="module")
def small():
    return generate_dataset(seed=4, num_videos=16, num_classes=8, length=34)


def test_dataset_is_deterministic(small):
    again = generate_dataset(seed=4, num_videos=16, num_classes=8, length=34)
    np.testing.assert_array_equal(small.videos, again.videos)
    assert small.manifest == again.manifest
    other = generate_dataset(seed=5, num_videos=16, num_classes=8, length=34)
    assert not np.array_equal(small.videos, other.videos)


def test_dataset_layout(small):
    assert small.videos.shape == (16, 34, 3, 20, 24)
    assert small.videos.dtype == np.float32
    assert small.videos.min() >= 0 and small.videos.max() <= 1
    assert small.labels.tolist() == [i % 8 for i in range(16)]
    test = small.split_indices("test")
    train = small.split_indices("train")
    assert len(test) + len(train) == 16
    assert not set(test) & set(train)


def test_split_is_class_balanced():
    ds = generate_dataset(seed=1, num_videos=200, length=31)
    counts = np.bincount(ds.labels[ds.split_indices("test")], minlength=8)
    assert counts.tolist() == [5] * 8


def test_motion_is_temporal():
    ds = generate_dataset(seed=0, num_videos=8, length=31)
    for v in range(8):
        assert np.abs(np.diff(ds.videos[v], axis=0)).mean() > 0.0


def test_data_errors():
    with pytest.raises(DataError):
        generate_dataset(seed=0, num_videos=4, num_classes=8)
    with pytest.raises(DataError):
        generate_dataset(seed=0, num_videos=8, length=10)
    with pytest.raises(DataError):
        generate_dataset(seed=0, num_videos=8, height=10, crop=16)


def test_clip_sampling(small):
    rng = np.random.default_rng(0)
    clip = sample_clip(small.videos[0], rng, n=16, stride=2, video_id=0)
    assert clip.frames.shape == (16, 3, 20, 24)
    np.testing.assert_array_equal(clip.frames, small.videos[0][clip.start:clip.start + 31:2])
    with pytest.raises(DataError, match="video 3"):
        sample_clip(small.videos[0][:20], rng, 16, 2, video_id=3)
    with pytest.raises(DataError):
        clip_at(small.videos[0], 10, 16, 2)


def test_uniform_clip_starts():
    starts = uniform_clip_starts(46, 16, 2, 10)
    assert len(set(starts)) == 10 and starts[0] == 0 and starts[-1] == 15
    with pytest.raises(DataError, match="video 7"):
        uniform_clip_starts(34, 16, 2, 10, video_id=7)


def test_identity_augmentation_is_a_crop(small):
    frames = small.videos[0][:4]
    params = AugmentationParams.center(20, 24, 16)
    out = augment_frames(frames, params)
    np.testing.assert_array_equal(out, frames[..., 2:18, 4:20])


def test_augmentation_applies_same_transform_to_every_frame(small):
    frames = np.repeat(small.videos[1][:1], 5, axis=0)
    p = sample_augmentation(np.random.default_rng(3), 20, 24)
    out = augment_frames(frames, p)
    assert out.shape == (5, 3, 16, 16)
    for t in range(1, 5):
        np.testing.assert_array_equal(out[t], out[0])


def test_augmentation_commutes_with_shuffle(small):
    clip = clip_at(small.videos[2], 0)
    p = sample_augmentation(np.random.default_rng(4), 20, 24)
    perm = np.random.default_rng(5).permutation(16)
    a = augment_frames(apply_shuffle(clip, perm).frames, p)
    b = augment_frames(clip.frames, p)[perm]
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_apply_shuffle_validates(small):
    clip = clip_at(small.videos[0], 0)
    with pytest.raises(DataError):
        apply_shuffle(clip, [0, 1, 2])


def test_frame_dump_round_trip(tmp_path, small):
    path = tmp_path / "frames.bin"
    write_frame_dump(path, small.videos[:2])
    np.testing.assert_array_equal(read_frame_dump(path), small.videos[:2])
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(DataError):
        read_frame_dump(tmp_path / "bad.bin")


def test_hue_rotation_properties():
    grey = np.full(3, 0.4)
    for turns in (0.1, 0.25, -0.4):
        m = hue_rotation(turns)
        np.testing.assert_allclose(m @ grey, grey, atol=1e-12)
        np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(hue_rotation(1.0), np.eye(3), atol=1e-12)
    # a third of a turn cycles the primaries
    np.testing.assert_allclose(hue_rotation(1 / 3) @ np.array([1.0, 0, 0]), [0, 1.0, 0], atol=1e-12)


def test_colour_jitter_is_clip_consistent():
    rng = np.random.default_rng(3)
    frames = rng.uniform(size=(4, 3, 6, 6)).astype(np.float32)
    base = AugmentationParams.identity(6, 6)
    grey = augment_frames(frames, replace(base, grayscale=True))
    assert np.allclose(grey[:, 0], grey[:, 1]) and np.allclose(grey[:, 1], grey[:, 2])
    desat = augment_frames(frames, replace(base, saturation=0.0))
    np.testing.assert_allclose(desat, grey, atol=1e-6)
    rotated = augment_frames(frames, replace(base, hue=1 / 3))
    # per-frame transform is the same matrix for every frame
    expected = np.clip(np.einsum("ij,tjhw->tihw", hue_rotation(1 / 3), frames), 0, 1)
    np.testing.assert_allclose(rotated, expected, atol=1e-6)
