import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgvid.data import (DIRECTIONS, AugmentConfig, AugmentDecisions, LabelSymmetry, SyntheticSpec, augment,
                        concat_normal_reverse, crop_frames, generate_synthetic, hflip, read_dataset,
                        render_clip, resize_bilinear, reverse_clip, sample_clip, to_model_input,
                        write_dataset)
from tgvid.video_ops import residual_frames

NO_JITTER = AugmentConfig(base_size=16, scale_range=(1.0, 1.0), crop_size=16, horizontal_flip_prob=0.0,
                          lighting_jitter=0.0, contrast_jitter=0.0, reverse_prob=0.0, stride_choices=(1,))


def test_noise_free_clip_translates_by_velocity():
    spec = SyntheticSpec(noise_std=0.0, samples_per_class=2, seed=1)
    ds = generate_synthetic(spec)
    for clip in ds.clips:
        f = clip.frames[0]
        dy, dx = DIRECTIONS[clip.label]
        # recover the speed from the first step, then check every step
        speeds = [s for s in (1, 2) if np.array_equal(np.roll(f[0], (dy * s, dx * s), (0, 1)), f[1])]
        assert len(speeds) == 1
        for t in range(f.shape[0] - 1):
            np.testing.assert_array_equal(np.roll(f[t], (dy * speeds[0], dx * speeds[0]), (0, 1)), f[t + 1])


def test_class_histogram_and_value_range():
    ds = generate_synthetic(SyntheticSpec(samples_per_class=7, seed=2))
    assert np.bincount([c.label for c in ds.clips]).tolist() == [7, 7, 7, 7]
    assert all(c.frames.dtype == np.float32 and c.frames.min() >= 0 and c.frames.max() <= 1 for c in ds.clips)


def test_generator_rejects_bad_specs():
    with pytest.raises(ValueError, match="larger than"):
        SyntheticSpec(frame_size=8, object_size_range=(5, 9))
    with pytest.raises(ValueError):
        SyntheticSpec(samples_per_class=0)
    with pytest.raises(ValueError):
        SyntheticSpec(speed_range=(0, 1))


def test_dataset_file_roundtrip_is_bit_exact(tmp_path, small_dataset):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    write_dataset(small_dataset, a)
    write_dataset(read_dataset(a), b)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes()[:8] == b"VIDS0001"
    again = read_dataset(a)
    assert [c.id for c in again.clips] == [c.id for c in small_dataset.clips]
    assert all(x.frames.tobytes() == y.frames.tobytes() for x, y in zip(again.clips, small_dataset.clips))


def test_same_seed_same_file(tmp_path):
    spec = SyntheticSpec(samples_per_class=3, seed=11)
    write_dataset(generate_synthetic(spec), tmp_path / "a")
    write_dataset(generate_synthetic(spec), tmp_path / "b")
    digest = [hashlib.sha256((tmp_path / n).read_bytes()).hexdigest() for n in "ab"]
    assert digest[0] == digest[1]


def _fit_softmax_probe(x, y, k, steps=300, lr=0.5, l2=1e-3):
    w = np.zeros((x.shape[1], k))
    onehot = np.eye(k)[y]
    for _ in range(steps):
        z = x @ w
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        w -= lr * (x.T @ (p - onehot) / len(x) + l2 * w)
    return w


def test_single_frame_probe_is_near_chance():
    ds = generate_synthetic(SyntheticSpec(seed=5))
    train, val = ds.split()

    def feats(clips):
        x = np.stack([c.frames[:, 0].ravel() for c in clips]).astype(float)
        return (x - ds.mean.mean()) / ds.std.mean()

    w = _fit_softmax_probe(feats(train), np.array([c.label for c in train]), 4)
    acc = np.mean(np.argmax(feats(val) @ w, axis=1) == [c.label for c in val])
    assert acc <= 0.25 + 0.10


def test_sample_clip_windows():
    frames = np.arange(128.0).reshape(1, 128, 1, 1)
    (full,) = sample_clip(frames[:, :64], 64, 1, "center")
    np.testing.assert_array_equal(full, frames[:, :64])
    (w,) = sample_clip(frames, 64, 2, "random", seed=3)
    s = int(w[0, 0, 0, 0])
    np.testing.assert_array_equal(w[0, :, 0, 0], np.arange(s, s + 127, 2))
    ten = sample_clip(frames, 16, 1, "ten_random", seed=4)
    assert len(ten) == 10
    again = sample_clip(frames, 16, 1, "ten_random", seed=4)
    assert all(np.array_equal(a, b) for a, b in zip(ten, again))
    with pytest.raises(ValueError):
        sample_clip(frames, 0)


def test_short_video_loops_cyclically():
    frames = np.arange(5.0).reshape(1, 5, 1, 1)
    (w,) = sample_clip(frames, 8, 1, "center")
    np.testing.assert_array_equal(w[0, :, 0, 0], [0, 1, 2, 3, 4, 0, 1, 2])


def test_ten_consecutive_windows_follow_each_other():
    frames = np.arange(200.0).reshape(1, 200, 1, 1)
    wins = sample_clip(frames, 4, 1, "ten_consecutive", seed=1)
    starts = [int(w[0, 0, 0, 0]) for w in wins]
    assert np.all(np.diff(starts) == 4)


def test_augment_identity_and_clamp():
    clip = np.random.default_rng(0).random((3, 4, 16, 16))
    np.testing.assert_array_equal(augment(clip, NO_JITTER, decision_seed=1), clip)
    bright = AugmentDecisions(light=0.9, contrast=1.2)
    out = augment(clip, NO_JITTER, decisions=bright)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_forced_reverse_twice_is_identity():
    clip = np.random.default_rng(1).random((3, 5, 16, 16))
    rev = AugmentDecisions(reverse=True)
    np.testing.assert_array_equal(augment(augment(clip, NO_JITTER, decisions=rev), NO_JITTER, decisions=rev), clip)


def test_flip_moves_left_column_right():
    clip = np.zeros((1, 2, 6, 6))
    clip[..., 0] = 1.0
    out = augment(clip, AugmentConfig(base_size=6, scale_range=(1.0, 1.0), crop_size=6, stride_choices=(1,)),
                  decisions=AugmentDecisions(flip=True))
    np.testing.assert_array_equal(out, clip[..., ::-1])
    np.testing.assert_array_equal(hflip(clip)[..., -1], clip[..., 0])


def test_reverse_and_palindrome():
    ramp = np.arange(5.0)[None, :, None, None] * np.ones((2, 5, 2, 2))
    np.testing.assert_array_equal(reverse_clip(ramp)[:, 0], ramp[:, 4])
    np.testing.assert_array_equal(reverse_clip(ramp[:, :1]), ramp[:, :1])
    ab = np.array([1.0, 2.0]).reshape(1, 2, 1, 1)
    np.testing.assert_array_equal(concat_normal_reverse(ab).ravel(), [1, 2, 2, 1])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_augmentation_algebra(t, seed):
    clip = np.random.default_rng(seed).random((3, t, 8, 8))
    np.testing.assert_array_equal(reverse_clip(reverse_clip(clip)), clip)
    cat = concat_normal_reverse(clip)
    assert cat.shape[1] == 2 * t
    np.testing.assert_array_equal(cat[:, ::-1], cat)
    cfg = AugmentConfig(base_size=10, crop_size=8, lighting_jitter=0.5, contrast_jitter=0.5)
    a = augment(clip, cfg, decision_seed=seed)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert a.tobytes() == augment(clip, cfg, decision_seed=seed).tobytes()


def test_crop_config_invariant():
    with pytest.raises(ValueError, match="exceeds"):
        AugmentConfig(base_size=112, crop_size=112)
    AugmentConfig(base_size=140, crop_size=112)


def test_eval_mode_resize_and_center_crop():
    clip = np.random.default_rng(2).random((3, 2, 32, 32))
    cfg = AugmentConfig(base_size=40, crop_size=32)
    out = augment(clip, cfg, train=False)
    np.testing.assert_array_equal(out, crop_frames(resize_bilinear(clip, 40), 32))
    np.testing.assert_array_equal(resize_bilinear(clip, 32), clip)


def test_model_input_modes():
    clip = np.random.default_rng(3).random((3, 65, 4, 4))
    np.testing.assert_array_equal(to_model_input(clip, "rgb", np.zeros(3), np.ones(3)), clip)
    assert to_model_input(clip, "diff", np.zeros(3), np.ones(3)).shape[1] == 64
    static = np.broadcast_to(clip[:, :1], clip.shape)
    assert not to_model_input(static, "diff", np.zeros(3), np.full(3, 0.3)).any()
    std = np.array([0.2, 0.3, 0.4])
    d = to_model_input(clip, "diff", np.zeros(3), std)
    np.testing.assert_allclose(to_model_input(reverse_clip(clip), "diff", np.zeros(3), std), -d[:, ::-1])
    np.testing.assert_array_equal(residual_frames(clip)[:, 0], clip[:, 1] - clip[:, 0])


def test_motion_symmetry_tables():
    sym = LabelSymmetry.motion(4)
    # up, down, left, right
    assert sym.flip == (0, 1, 3, 2)
    assert sym.reverse == (1, 0, 3, 2)
    logits = np.array([0.0, 1.0, 2.0, 3.0])
    for flipped in (False, True):
        for rev in (False, True):
            for label in range(4):
                mapped = sym.map_label(label, flipped, rev)
                onehot = np.eye(4)[mapped]
                assert np.argmax(sym.unmap_logits(onehot, flipped, rev)) == label
    np.testing.assert_array_equal(LabelSymmetry.identity(4).unmap_logits(logits, True, True), logits)
