import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vle.datamodel import FrameExample, label_matrix
from vle.framelevel import (
    DbofParams,
    FrameSampleConfig,
    LstmParams,
    PaddedSequences,
    _layer_backward,
    _layer_forward,
    bundle_gradient_check,
    dbof_kink_margin,
    dbof_forward,
    dbof_loss_and_grad,
    dbof_predict,
    frame_logistic_infer,
    frame_logistic_train,
    lstm_cell_step,
    lstm_forward,
    lstm_loss_and_grad,
    lstm_predict,
    numeric_gradient_check,
    predict_frames,
    sample_frames,
    sample_indices,
    sequence_inputs,
    stride_indices,
    train_sequence_model,
)
from vle.linear import LogisticParams, TrainConfig, logistic_predict, logistic_train, predict_scores, sigmoid, video_arrays
from vle.metrics import gap_from_scores
from vle.synthgen import SynthSpec, gen_frame_level, split_dataset

from points import dbof_point, lstm_point


def _video(f, d_rgb=3, d_audio=2, seed=0, vid="v"):
    rng = np.random.default_rng(seed)
    return FrameExample(vid, {0}, rng.normal(size=(f, d_rgb)), rng.normal(size=(f, d_audio)))


def _perturbed(params, rng, scale=0.1):
    for arr in params.named_arrays().values():
        arr += rng.normal(0, scale, arr.shape)
    return params


# -- sampling ------------------------------------------------------------------------


def test_sample_twenty_distinct_from_three_hundred():
    idx = sample_indices(300, FrameSampleConfig(20, seed=5), "vid")
    assert len(set(idx.tolist())) == 20 and idx.min() >= 0 and idx.max() < 300


def test_short_video_returns_all_frames_in_order():
    video = _video(5)
    assert np.array_equal(sample_frames(video, FrameSampleConfig(20)), video.frames())


def test_sampling_deterministic_and_seed_sensitive():
    video = _video(100)
    a = sample_frames(video, FrameSampleConfig(20, seed=1))
    assert np.array_equal(a, sample_frames(video, FrameSampleConfig(20, seed=1)))
    assert not np.array_equal(a, sample_frames(video, FrameSampleConfig(20, seed=2)))


def test_sampling_rejects_empty_video_and_bad_n():
    with pytest.raises(ValueError):
        sample_indices(0, FrameSampleConfig())
    with pytest.raises(ValueError):
        FrameSampleConfig(0)


def test_sampling_is_roughly_uniform():
    counts = np.zeros(30)
    for s in range(2000):
        counts[sample_indices(30, FrameSampleConfig(10, seed=s), "v")] += 1
    expected = 2000 * 10 / 30
    assert np.all(np.abs(counts - expected) < 5 * np.sqrt(expected))


# -- frame logistic ------------------------------------------------------------------------


def test_frame_logistic_examples(rng):
    params = LogisticParams(rng.normal(size=(4, 5)), rng.normal(size=4))
    x = rng.normal(size=5)
    assert np.allclose(frame_logistic_infer(params, np.tile(x, (7, 1))), logistic_predict(params, x), rtol=0, atol=1e-15)
    zero = LogisticParams.zeros(4, 5)
    assert np.all(frame_logistic_infer(zero, rng.normal(size=(3, 5))) == 0.5)


def test_frame_logistic_mean_of_given_probabilities():
    # one label, per-frame logits chosen so the probabilities are 0.2, 0.4, 0.9
    probs = np.array([0.2, 0.4, 0.9])
    params = LogisticParams(np.ones((1, 1)), np.zeros(1))
    frames = np.log(probs / (1 - probs))[:, None]
    assert frame_logistic_infer(params, frames)[0] == pytest.approx(0.5, abs=1e-15)


def test_frame_logistic_rejects_empty():
    with pytest.raises(ValueError):
        frame_logistic_infer(LogisticParams.zeros(2, 3), np.zeros((0, 3)))


def test_frame_logistic_zero_epochs_and_single_frame_sampling():
    data = [_video(6, seed=i, vid=f"v{i}") for i in range(5)]
    params = frame_logistic_train(data, 3, TrainConfig(epochs=0))
    assert not params.weights.any()
    history = []
    frame_logistic_train(data, 3, TrainConfig(epochs=1, batch_size=1), FrameSampleConfig(n=1), history=history)
    assert len(history) == 5


def test_frame_logistic_on_zero_noise_frames_matches_video_logistic():
    spec = SynthSpec(n_videos=1500, d_rgb=8, d_audio=4, vocab_size=8, mean_labels=2.0, frame_noise=0.0,
                     min_frames=3, max_frames=8)
    train, _, test = split_dataset(gen_frame_level(spec).examples, (8, 0, 2))
    config = TrainConfig(batch_size=32, epochs=10, learning_rate=0.1)
    labels = [ex.labels for ex in test]
    frame = frame_logistic_train(train, 8, config)
    g_frame = gap_from_scores(predict_frames(frame, test), labels)
    x, y = video_arrays([ex.to_video() for ex in train], 8)
    xt, _ = video_arrays([ex.to_video() for ex in test], 8)
    g_video = gap_from_scores(predict_scores(logistic_train(x, y, config), xt), labels)
    assert abs(g_frame - g_video) <= 0.01


# -- DBoF ------------------------------------------------------------------------------------


def test_dbof_single_frame_is_two_layer_forward(rng):
    params = _perturbed(DbofParams.init(4, 5, width=6, seed=0), rng, 1.0)
    x = rng.normal(size=5)
    hidden = np.maximum(params.up_weights @ x + params.up_biases, 0)
    expected = sigmoid(params.cls_weights @ hidden + params.cls_biases)
    np.testing.assert_allclose(dbof_forward(params, x[None, :]), expected, rtol=1e-14)


@given(st.integers(0, 2**32 - 1))
def test_dbof_frame_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    params = _perturbed(DbofParams.init(3, 4, width=5, seed=seed % 100), rng, 1.0)
    frames = rng.normal(size=(int(rng.integers(1, 9)), 4))
    perm = rng.permutation(frames.shape[0])
    assert np.array_equal(dbof_forward(params, frames), dbof_forward(params, frames[perm]))


def test_dbof_zero_up_projection(rng):
    params = _perturbed(DbofParams.init(3, 4, width=5), rng, 1.0)
    params.up_weights[:] = 0.0
    expected = sigmoid(params.cls_weights @ np.maximum(params.up_biases, 0) + params.cls_biases)
    np.testing.assert_allclose(dbof_forward(params, rng.normal(size=(6, 4))), expected, rtol=1e-14)


def test_dbof_batch_matches_single_video_forward(rng):
    params = _perturbed(DbofParams.init(3, 4, width=5), rng, 1.0)
    seqs = [rng.normal(size=(f, 4)) for f in (1, 4, 7)]
    batched = dbof_predict(params, PaddedSequences(seqs))
    for row, s in zip(batched, seqs):
        np.testing.assert_allclose(row, dbof_forward(params, s), rtol=1e-13)


def test_dbof_rejects_empty():
    with pytest.raises(ValueError):
        dbof_forward(DbofParams.init(2, 3, width=4), np.zeros((0, 3)))


# -- LSTM cell ---------------------------------------------------------------------------------


def _zero_layer(h=4, d=3):
    return LstmParams.zeros(2, d, h).layers[0]


def test_zero_cell_outputs_zero_state():
    h, c = lstm_cell_step(_zero_layer(), np.ones(3), np.zeros(4), np.zeros(4))
    assert np.all(h == 0) and np.all(c == 0)


def test_zero_cell_halves_previous_cell():
    c_prev = np.array([1.0, -2.0, 0.5, 3.0])
    h, c = lstm_cell_step(_zero_layer(), np.ones(3), np.zeros(4), c_prev)
    np.testing.assert_allclose(c, 0.5 * c_prev, rtol=1e-15)
    np.testing.assert_allclose(h, 0.5 * np.tanh(0.5 * c_prev), rtol=1e-15)


def test_saturated_forget_gate_carries_cell(rng):
    layer = LstmParams.init(2, 3, 4, num_layers=1, seed=1).layers[0]
    layer["b"][0] = -50.0
    layer["b"][1] = 50.0
    c_prev = rng.normal(size=4)
    _, c = lstm_cell_step(layer, rng.normal(size=3), rng.normal(size=4), c_prev)
    assert np.max(np.abs(c - c_prev)) <= 1e-9


def test_output_gate_peeks_at_new_cell():
    layer = _zero_layer(h=1, d=1)
    layer["w_peep"][2] = 1.0
    layer["b"][0] = 50.0  # i = 1
    layer["b"][1] = -50.0  # f = 0
    layer["w_x"][2] = 10.0  # candidate tanh(10 x)
    h, c = lstm_cell_step(layer, np.array([1.0]), np.zeros(1), np.array([-5.0]))
    assert c[0] == pytest.approx(np.tanh(10.0), abs=1e-12)
    assert h[0] == pytest.approx(sigmoid(c[0]) * np.tanh(c[0]), abs=1e-12)


def test_cell_shape_mismatch():
    with pytest.raises(ValueError):
        lstm_cell_step(_zero_layer(), np.ones(2), np.zeros(4), np.zeros(4))


@pytest.mark.parametrize("seed", range(3))
def test_cell_gradient_of_squared_hidden_norm(seed):
    rng = np.random.default_rng(seed)
    params = _perturbed(LstmParams.init(2, 3, 4, num_layers=1, seed=seed), rng, 0.3)
    names = ["w_x", "w_h", "w_peep", "b"]
    xs = rng.normal(size=(1, 3, 3))
    mask = np.ones((1, 3))

    def unflatten(theta):
        layer, pos = {}, 0
        for n in names:
            shape = params.layers[0][n].shape
            layer[n] = theta[pos : pos + int(np.prod(shape))].reshape(shape)
            pos += int(np.prod(shape))
        return layer

    def loss_and_grad(theta):
        layer = unflatten(theta)
        h = np.zeros(4)
        c = np.zeros(4)
        for x_t in xs[0]:
            h, c = lstm_cell_step(layer, x_t, h, c)
        hs, cache = _layer_forward(layer, xs, mask)
        dhs = np.zeros_like(hs)
        dhs[:, -1] = 2 * hs[:, -1]
        _, grads = _layer_backward(layer, xs, mask, cache, dhs)
        return float(h @ h), np.concatenate([grads[n].ravel() for n in names])

    theta = np.concatenate([params.layers[0][n].ravel() for n in names])
    assert numeric_gradient_check(loss_and_grad, theta) < 1e-4


# -- LSTM sequence -----------------------------------------------------------------------------


def test_stride_indices():
    assert stride_indices(10, 60).tolist() == list(range(10))
    assert stride_indices(300, 60).tolist() == [5 * m for m in range(60)]
    assert stride_indices(7, 3).tolist() == [0, 2, 4]


def test_full_scale_configuration_is_valid():
    params = LstmParams.init(4716, 1152, 1024, num_layers=2, seed=0, scale=0.0)
    assert params.hidden == 1024 and len(params.layers) == 2
    assert params.layers[1]["w_x"].shape == (4, 1024, 1024)


def test_single_frame_zero_params_scores_half():
    params = LstmParams.zeros(5, 3, 4, num_layers=2)
    assert np.all(lstm_forward(params, np.ones((1, 3))) == 0.5)


def test_unroll_at_least_length_consumes_every_frame(rng):
    params = _perturbed(LstmParams.init(3, 2, 4, num_layers=1), rng, 0.5)
    frames = rng.normal(size=(8, 2))
    assert np.array_equal(lstm_forward(params, frames, unroll=8), lstm_forward(params, frames, unroll=100))
    assert not np.array_equal(lstm_forward(params, frames, unroll=8), lstm_forward(params, frames[:7], unroll=8))


@given(st.integers(0, 2**32 - 1))
def test_padded_batch_matches_per_video_forward(seed):
    rng = np.random.default_rng(seed)
    params = _perturbed(LstmParams.init(3, 2, 4, num_layers=2, seed=seed % 50), rng, 0.5)
    seqs = [rng.normal(size=(int(rng.integers(1, 9)), 2)) for _ in range(4)]
    batched = lstm_predict(params, PaddedSequences(seqs))
    for row, s in zip(batched, seqs):
        np.testing.assert_allclose(row, lstm_forward(params, s), rtol=1e-12, atol=1e-15)


# -- gradient checker --------------------------------------------------------------------------


def test_checker_on_quadratic():
    theta = np.random.default_rng(0).normal(size=300)
    assert numeric_gradient_check(lambda t: (0.5 * t @ t, t.copy()), theta) < 1e-9


def test_checker_on_logistic_at_zero(rng):
    x = rng.normal(size=(6, 4))
    y = label_matrix([{0}, {1}, {2}, set(), {0, 1}, {2}], 3)
    from vle.linear import logistic_loss_and_grad

    assert bundle_gradient_check(logistic_loss_and_grad, LogisticParams.zeros(3, 4), x, y) < 1e-6


def test_checker_flags_doubled_gradient():
    theta = np.random.default_rng(1).normal(size=50)
    err = numeric_gradient_check(lambda t: (0.5 * t @ t, 2.0 * t), theta)
    assert err > 0.1 and err == pytest.approx(1 / 3, abs=1e-6)


def test_checker_samples_requested_coordinates():
    calls = []

    def fn(t):
        calls.append(1)
        return 0.5 * t @ t, t.copy()

    numeric_gradient_check(fn, np.ones(1000), num_coords=200)
    assert len(calls) == 1 + 2 * 200


@pytest.mark.parametrize("point", range(5))
def test_dbof_gradients(point):
    dbof, batch, y = dbof_point(point)
    assert bundle_gradient_check(dbof_loss_and_grad, dbof, batch, y, seed=point) < 1e-4


@pytest.mark.parametrize("point", range(5))
def test_lstm_gradients(point):
    lstm, batch, y = lstm_point(point)
    assert bundle_gradient_check(lstm_loss_and_grad, lstm, batch, y, seed=point) < 1e-4


def test_lstm_point4_discrepancy_is_truncation():
    # layers.0.b[13] has gradient ~4e-5; the central-difference error shrinks as h^2
    lstm, batch, y = lstm_point(4)
    names = list(lstm.named_arrays())
    theta = lstm.flat()

    def fn(t):
        loss, g = lstm_loss_and_grad(lstm.with_flat(t), batch, y)
        return loss, np.concatenate([g[k].ravel() for k in names])

    j = 188
    analytic = fn(theta)[1][j]
    gaps = []
    for h in (2e-3, 1e-3, 5e-4):
        t = theta.copy()
        t[j] += h
        up = fn(t)[0]
        t[j] -= 2 * h
        gaps.append((up - fn(t)[0]) / (2 * h) - analytic)
    assert abs(analytic) < 1e-4
    assert gaps[0] / gaps[1] == pytest.approx(4, rel=1e-3)
    assert gaps[1] / gaps[2] == pytest.approx(4, rel=1e-3)
    assert bundle_gradient_check(lstm_loss_and_grad, lstm, batch, y, seed=4, step=1e-4) < 1e-4


def test_kink_margin_explains_finite_difference_failures():
    # a point straddling a relu switch fails at step 1e-3 but not at 1e-6
    rng = np.random.default_rng(50)
    batch = PaddedSequences([rng.normal(size=(f, 3)) for f in (2, 5, 3)])
    y = (rng.random((3, 4)) < 0.4).astype(float)
    params = _perturbed(DbofParams.init(4, 3, width=6, seed=0, lam=0.01), rng, 0.1)
    assert dbof_kink_margin(params, batch) < 1e-3
    assert bundle_gradient_check(dbof_loss_and_grad, params, batch, y) > 1e-4
    assert bundle_gradient_check(dbof_loss_and_grad, params, batch, y, step=1e-6) < 1e-4


# -- training ----------------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["dbof", "lstm"])
def test_zero_epochs_returns_init(kind):
    data = [_video(4, seed=i, vid=f"v{i}") for i in range(3)]
    config = TrainConfig(epochs=0, hidden=4, layers=1, up_width=6, seed=3)
    params = train_sequence_model(kind, data, 3, config)
    init = DbofParams.init(3, 5, 6, 3) if kind == "dbof" else LstmParams.init(3, 5, 4, 1, 3)
    for name, arr in init.named_arrays().items():
        assert np.array_equal(params.named_arrays()[name], arr), name


@pytest.mark.parametrize("kind", ["dbof", "lstm"])
def test_sequence_training_reduces_loss(kind):
    spec = SynthSpec(n_videos=300, d_rgb=4, d_audio=2, vocab_size=4, mean_labels=1.5, min_frames=2, max_frames=6)
    data = gen_frame_level(spec).examples
    history = []
    train_sequence_model(kind, data, 4, TrainConfig(batch_size=16, epochs=5, learning_rate=0.05, hidden=8, layers=1),
                         history=history)
    tenth = max(1, len(history) // 10)
    assert np.mean(history[-tenth:]) <= np.mean(history[:tenth])


def test_dbof_close_to_video_logistic_on_zero_noise_frames():
    spec = SynthSpec(n_videos=1500, d_rgb=16, d_audio=4, vocab_size=8, mean_labels=2.0, frame_noise=0.0,
                     min_frames=3, max_frames=8)
    train, _, test = split_dataset(gen_frame_level(spec).examples, (8, 0, 2))
    labels = [ex.labels for ex in test]
    dbof = train_sequence_model("dbof", train, 8, TrainConfig(batch_size=32, epochs=20, learning_rate=0.05))
    g_dbof = gap_from_scores(predict_frames(dbof, test), labels)
    x, y = video_arrays([ex.to_video() for ex in train], 8)
    xt, _ = video_arrays([ex.to_video() for ex in test], 8)
    g_video = gap_from_scores(
        predict_scores(logistic_train(x, y, TrainConfig(batch_size=32, epochs=20, learning_rate=0.1)), xt), labels
    )
    assert g_dbof >= g_video - 0.05


def test_lstm_beats_frame_logistic_on_order_sensitive_task():
    spec = SynthSpec(n_videos=1500, d_rgb=6, d_audio=2, vocab_size=4, task="sequential", min_frames=8,
                     max_frames=12, frame_noise=0.1)
    train, _, test = split_dataset(gen_frame_level(spec).examples, (8, 0, 2))
    labels = [ex.labels for ex in test]
    lstm = train_sequence_model("lstm", train, 4, TrainConfig(batch_size=32, epochs=20, learning_rate=0.05,
                                                              hidden=16, layers=1))
    frame = frame_logistic_train(train, 4, TrainConfig(batch_size=32, epochs=10, learning_rate=0.1))
    g_lstm = gap_from_scores(predict_frames(lstm, test), labels)
    g_frame = gap_from_scores(predict_frames(frame, test), labels)
    assert g_lstm >= g_frame + 0.05


def test_sequence_inputs_stride_for_lstm_only():
    data = [_video(100, vid="long")]
    assert sequence_inputs("lstm", data, unroll=10).shape[1] == 10
    assert sequence_inputs("dbof", data).shape[1] == 100
