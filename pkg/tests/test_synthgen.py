import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vle.datamodel import ground_truth
from vle.linear import sigmoid
from vle.metrics import gap_from_scores
from vle.recordio import write_dataset
from vle.synthgen import (
    CalibrationError,
    SynthSpec,
    gen_frame_level,
    gen_video_level,
    oracle_predict,
    planted_labels,
    split_counts,
    split_dataset,
)

SMALL = dict(n_videos=300, d_rgb=6, d_audio=2, vocab_size=8, mean_labels=2.0)


def _features(examples):
    return np.stack([np.concatenate([e.mean_rgb, e.mean_audio]) for e in examples])


def test_same_spec_same_bytes(tmp_path):
    spec = SynthSpec(seed=3, min_frames=2, max_frames=5, **SMALL)
    for name in ("a", "b"):
        write_dataset(tmp_path / f"{name}.jsonl", gen_frame_level(spec).examples, vocab_size=8)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_different_seeds_differ():
    a = gen_video_level(SynthSpec(seed=1, **SMALL)).examples
    b = gen_video_level(SynthSpec(seed=2, **SMALL)).examples
    assert not np.array_equal(_features(a), _features(b))


@pytest.mark.parametrize("task", ["linear", "mixture"])
def test_labels_follow_planted_model(task):
    syn = gen_video_level(SynthSpec(task=task, parent_labels=2 if task == "mixture" else 0, **SMALL))
    assert [e.labels for e in syn.examples] == planted_labels(syn.planted, _features(syn.examples))


def test_mean_label_count_is_calibrated():
    syn = gen_video_level(SynthSpec(n_videos=5000, d_rgb=24, d_audio=8, vocab_size=16, mean_labels=3.4))
    mean = np.mean([len(e.labels) for e in syn.examples])
    assert 0.8 * 3.4 <= mean <= 1.2 * 3.4


def test_parent_labels_fire_with_any_child():
    syn = gen_video_level(SynthSpec(task="mixture", parent_labels=2, mixture_linear=1.0, **SMALL))
    children = syn.planted.children
    for e in syn.examples:
        for p in (6, 7):
            kids = set(np.flatnonzero(children[p]).tolist())
            assert (p in e.labels) == bool(kids & e.labels)


def test_noise_free_frames_equal_latent():
    syn = gen_frame_level(SynthSpec(frame_noise=0.0, min_frames=3, max_frames=6, **SMALL))
    for e, z in zip(syn.examples, syn.latents):
        frames = np.hstack([e.rgb, e.audio])
        assert np.array_equal(frames, np.broadcast_to(z, frames.shape))


def test_frame_means_stay_near_latent():
    spec = SynthSpec(frame_noise=0.5, min_frames=10, max_frames=30, **SMALL)
    syn = gen_frame_level(spec)
    far = 0
    for e, z in zip(syn.examples, syn.latents):
        f = e.rgb.shape[0]
        far += np.max(np.abs(np.hstack([e.rgb, e.audio]).mean(axis=0) - z)) > 4 * 0.5 / np.sqrt(f)
    assert far <= 0.01 * spec.n_videos


def test_frame_and_video_levels_share_labels():
    spec = SynthSpec(min_frames=2, max_frames=4, **SMALL)
    assert ground_truth(gen_frame_level(spec).examples) == ground_truth(gen_video_level(spec).examples)


def test_sequential_labels_flip_with_drift():
    spec = SynthSpec(task="sequential", frame_noise=0.0, min_frames=4, max_frames=8, **SMALL)
    syn = gen_frame_level(spec)
    flipped = planted_labels(syn.planted, -syn.latents)
    everything = frozenset(range(spec.vocab_size))
    for e, f in zip(syn.examples, flipped):
        assert f == everything - e.labels


def test_sequential_frames_drift_around_latent():
    syn = gen_frame_level(SynthSpec(task="sequential", frame_noise=0.0, min_frames=4, max_frames=8, **SMALL))
    e, d = syn.examples[0], syn.latents[0]
    frames = np.hstack([e.rgb, e.audio])
    np.testing.assert_allclose(np.diff(frames, axis=0), np.broadcast_to(d, (frames.shape[0] - 1, d.size)), atol=1e-12)


def test_sequential_is_frame_level_only():
    with pytest.raises(ValueError):
        gen_video_level(SynthSpec(task="sequential", **SMALL))


def test_oracle_on_zero_input_is_sigmoid_of_bias():
    syn = gen_video_level(SynthSpec(**SMALL))
    np.testing.assert_allclose(oracle_predict(syn.planted, np.zeros(8)), sigmoid(syn.planted.biases))


def test_oracle_nearly_perfect_without_noise():
    syn = gen_video_level(SynthSpec(n_videos=2000, **{k: v for k, v in SMALL.items() if k != "n_videos"}))
    labels = [e.labels for e in syn.examples]
    assert gap_from_scores(oracle_predict(syn.planted, syn.latents), labels, k=20) >= 0.99


def test_oracle_rejects_wrong_dimension():
    syn = gen_video_level(SynthSpec(**SMALL))
    with pytest.raises(ValueError, match="dimension"):
        oracle_predict(syn.planted, np.zeros(5))


def test_invalid_specs():
    with pytest.raises(ValueError):
        SynthSpec(task="spiral")
    with pytest.raises(ValueError):
        SynthSpec(mean_labels=20, vocab_size=16)
    with pytest.raises(ValueError):
        SynthSpec(min_frames=5, max_frames=4)


def test_uncalibratable_spec_raises():
    # per-label rates are capped at 0.9, so 7.9 of 8 labels per video is out of reach
    with pytest.raises(CalibrationError):
        gen_video_level(SynthSpec(n_videos=200, d_rgb=1, d_audio=1, vocab_size=8, mean_labels=7.9))


@given(st.integers(1, 5000))
@settings(max_examples=200)
def test_split_counts_follow_ratio(n):
    train, val, test = split_counts(n)
    assert train + val + test == n
    assert abs(train - 0.7 * n) <= 1 and abs(val - 0.2 * n) <= 1 and abs(test - 0.1 * n) <= 1


def test_split_is_contiguous():
    items = list(range(10))
    assert split_dataset(items) == (list(range(7)), [7, 8], [9])
