"""Frame-level models: frame sampling, frame logistic, deep bag of frames, stacked LSTM.

Sequence models train on padded mini-batches: each batch is a (B, T, D) array
plus a (B, T) validity mask. Padding sits at the end of short sequences and
masked steps carry the recurrent state forward unchanged.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datamodel import label_matrix
from .linear import (
    LogisticParams,
    TrainConfig,
    logistic_predict,
    logistic_train,
    log_sigmoid_loss,
    minibatch_adagrad,
    sigmoid,
)
from .params import ParamBundle, register

GATES = ("i", "f", "c", "o")


@dataclass(frozen=True)
class FrameSampleConfig:
    n: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"frames per video must be >= 1, got {self.n}")


def _video_seed(seed: int, video_id: str) -> list:
    return [int(seed), zlib.crc32(video_id.encode("utf-8"))]


def sample_indices(num_frames: int, cfg: FrameSampleConfig, video_id: str = "") -> np.ndarray:
    if num_frames < 1:
        raise ValueError("cannot sample from an empty video")
    if num_frames <= cfg.n:
        return np.arange(num_frames)
    rng = np.random.default_rng(_video_seed(cfg.seed, video_id))
    return np.sort(rng.choice(num_frames, size=cfg.n, replace=False))


def sample_frames(video, cfg: FrameSampleConfig = FrameSampleConfig(), features: str = "both") -> np.ndarray:
    """Up to ``cfg.n`` distinct frames, in temporal order, drawn uniformly per video."""
    frames = video.frames(features)
    return frames[sample_indices(frames.shape[0], cfg, video.video_id)]


# -- frame-level logistic -------------------------------------------------------------


def frame_logistic_infer(params: LogisticParams, frames) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError("frame_logistic_infer needs a non-empty (F, D) frame matrix")
    total = logistic_predict(params, frames[0])
    for j in range(1, frames.shape[0]):
        total = total + logistic_predict(params, frames[j])
    return total / frames.shape[0]


def frame_logistic_train(
    examples,
    vocab_size: int,
    config: TrainConfig = TrainConfig(),
    sample: FrameSampleConfig = FrameSampleConfig(),
    features: str = "both",
    *,
    history: list | None = None,
    threads: int = 1,
) -> LogisticParams:
    """Each sampled frame becomes a training row carrying its video's labels."""
    examples = list(examples)
    if not examples:
        raise ValueError("empty dataset")
    rows, labels = [], []
    for ex in examples:
        frames = sample_frames(ex, sample, features)
        rows.append(frames)
        labels.extend([ex.labels] * frames.shape[0])
    x = np.concatenate(rows)
    y = label_matrix(labels, vocab_size)
    params = logistic_train(x, y, config, history=history, threads=threads)
    params.config.update(level="frame", features=features, sample={"n": sample.n, "seed": sample.seed})
    return params


# -- batching --------------------------------------------------------------------------


class PaddedSequences:
    """Variable-length sequences packed as (N, T, D) with a (N, T) mask."""

    def __init__(self, sequences: Sequence[np.ndarray]):
        seqs = [np.asarray(s, dtype=np.float64) for s in sequences]
        if not seqs:
            raise ValueError("empty dataset")
        if any(s.ndim != 2 or s.shape[0] == 0 for s in seqs):
            raise ValueError("every sequence needs at least one frame")
        self.lengths = np.array([s.shape[0] for s in seqs])
        t, d = self.lengths.max(), seqs[0].shape[1]
        self.data = np.zeros((len(seqs), t, d))
        self.mask = np.zeros((len(seqs), t))
        for i, s in enumerate(seqs):
            self.data[i, : s.shape[0]] = s
            self.mask[i, : s.shape[0]] = 1.0

    @classmethod
    def _from(cls, data, mask, lengths):
        obj = cls.__new__(cls)
        obj.data, obj.mask, obj.lengths = data, mask, lengths
        return obj

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return self.data.shape[0]

    def __getitem__(self, idx):
        lengths = self.lengths[idx]
        t = lengths.max()
        return PaddedSequences._from(self.data[idx, :t], self.mask[idx, :t], lengths)


# -- deep bag of frames -----------------------------------------------------------------


@register
@dataclass(eq=False)
class DbofParams(ParamBundle):
    up_weights: np.ndarray  # (U, D), shared by every frame
    up_biases: np.ndarray  # (U,)
    cls_weights: np.ndarray  # (L, U)
    cls_biases: np.ndarray  # (L,)
    lam: float = 0.0
    config: dict = field(default_factory=dict)

    kind = "dbof"

    @classmethod
    def init(cls, vocab_size, dim, width, seed=0, scale=1.0, lam=0.0):
        rng = np.random.default_rng(seed)
        return cls(
            rng.normal(0.0, scale / np.sqrt(dim), (width, dim)),
            np.zeros(width),
            rng.normal(0.0, 0.1 * scale / np.sqrt(width), (vocab_size, width)),
            np.zeros(vocab_size),
            lam,
        )

    def named_arrays(self):
        return {
            "up_weights": self.up_weights,
            "up_biases": self.up_biases,
            "cls_weights": self.cls_weights,
            "cls_biases": self.cls_biases,
        }

    @classmethod
    def from_arrays(cls, arrays, config):
        config = dict(config)
        return cls(
            arrays["up_weights"], arrays["up_biases"], arrays["cls_weights"], arrays["cls_biases"],
            float(config.get("lam", 0.0)), config,
        )

    @property
    def vocab_size(self):
        return self.cls_weights.shape[0]

    def dims(self):
        return {"input": self.up_weights.shape[1], "width": self.up_weights.shape[0]}


def _dbof_pool(params: DbofParams, batch: PaddedSequences):
    pre = batch.data @ params.up_weights.T + params.up_biases  # (B, T, U)
    act = np.maximum(pre, 0.0)
    masked = np.where(batch.mask[..., None] > 0, act, -np.inf)
    arg = masked.argmax(axis=1)  # (B, U)
    pooled = np.take_along_axis(act, arg[:, None, :], axis=1)[:, 0, :]
    return pre, pooled, arg


def dbof_forward(params: DbofParams, frames) -> np.ndarray:
    """relu(W_up x_j + b_up) per frame, max-pooled over frames, then a logistic layer."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError("dbof_forward needs a non-empty (F, D) frame matrix")
    act = np.maximum(frames @ params.up_weights.T + params.up_biases, 0.0)
    pooled = act.max(axis=0)
    return sigmoid(params.cls_weights @ pooled + params.cls_biases)


def dbof_predict(params: DbofParams, batch: PaddedSequences) -> np.ndarray:
    _, pooled, _ = _dbof_pool(params, batch)
    return sigmoid(pooled @ params.cls_weights.T + params.cls_biases)


def dbof_kink_margin(params: DbofParams, batch: PaddedSequences) -> float:
    """Distance from the nearest relu or max-pool switch, per unit parameter change.

    A central difference with step h only sees a smooth loss when this is
    larger than h: a single weight moves a pre-activation by at most
    h * max(1, |x|_inf), and a pooling gap by twice that.
    """
    pre, _, _ = _dbof_pool(params, batch)
    valid = batch.mask > 0
    scale = max(1.0, float(np.max(np.abs(batch.data))))
    margin = np.min(np.abs(pre[valid]))
    act = np.where(valid[..., None], np.maximum(pre, 0.0), -np.inf)
    if act.shape[1] > 1:
        top2 = -np.sort(-act, axis=1)[:, :2]  # (B, 2, U)
        live = np.isfinite(top2[:, 1]) & (top2[:, 0] > 0)
        if live.any():
            margin = min(margin, np.min(top2[:, 0][live] - top2[:, 1][live]) / 2.0)
    return float(margin / scale)


def dbof_loss_and_grad(params: DbofParams, batch: PaddedSequences, y):
    n = len(batch)
    pre, pooled, arg = _dbof_pool(params, batch)
    z = pooled @ params.cls_weights.T + params.cls_biases
    reg = params.lam * (np.sum(params.up_weights**2) + np.sum(params.cls_weights**2))
    loss = log_sigmoid_loss(z, y).sum() / n + reg
    dz = (sigmoid(z) - y) / n
    dpooled = dz @ params.cls_weights  # (B, U)
    pre_at = np.take_along_axis(pre, arg[:, None, :], axis=1)[:, 0, :]
    dpre_at = dpooled * (pre_at > 0)
    dpre = np.zeros_like(pre)
    np.put_along_axis(dpre, arg[:, None, :], dpre_at[:, None, :], axis=1)
    d = batch.data.shape[-1]
    grads = {
        "up_weights": dpre.reshape(-1, dpre.shape[-1]).T @ batch.data.reshape(-1, d)
        + 2.0 * params.lam * params.up_weights,
        "up_biases": dpre_at.sum(axis=0),
        "cls_weights": dz.T @ pooled + 2.0 * params.lam * params.cls_weights,
        "cls_biases": dz.sum(axis=0),
    }
    return float(loss), grads


# -- LSTM -------------------------------------------------------------------------------


@register
@dataclass(eq=False)
class LstmParams(ParamBundle):
    """Stacked peephole LSTM with a logistic classifier on the final top-layer state.

    Each layer is a dict with ``w_x`` (4, H, Din), ``w_h`` (4, H, H), ``b`` (4, H)
    in gate order i, f, c, o, and ``w_peep`` (3, H) holding the diagonal
    peephole weights for the i, f and o gates.
    """

    layers: list
    cls_weights: np.ndarray  # (L, H)
    cls_biases: np.ndarray  # (L,)
    lam: float = 0.0
    config: dict = field(default_factory=dict)

    kind = "lstm"

    @classmethod
    def init(cls, vocab_size, dim, hidden, num_layers=2, seed=0, scale=1.0, lam=0.0, forget_bias=1.0):
        rng = np.random.default_rng(seed)
        layers = []
        d_in = dim
        for _ in range(num_layers):
            std = scale / np.sqrt(d_in + hidden)
            b = np.zeros((4, hidden))
            b[1] = forget_bias
            layers.append(
                {
                    "w_x": rng.normal(0.0, std, (4, hidden, d_in)),
                    "w_h": rng.normal(0.0, std, (4, hidden, hidden)),
                    "w_peep": rng.normal(0.0, 0.1 * scale, (3, hidden)),
                    "b": b,
                }
            )
            d_in = hidden
        return cls(
            layers,
            rng.normal(0.0, scale / np.sqrt(hidden), (vocab_size, hidden)),
            np.zeros(vocab_size),
            lam,
        )

    @classmethod
    def zeros(cls, vocab_size, dim, hidden, num_layers=1):
        p = cls.init(vocab_size, dim, hidden, num_layers, forget_bias=0.0)
        for arr in p.named_arrays().values():
            arr[...] = 0.0
        return p

    def named_arrays(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name in ("w_x", "w_h", "w_peep", "b"):
                out[f"layers.{i}.{name}"] = layer[name]
        out["cls_weights"] = self.cls_weights
        out["cls_biases"] = self.cls_biases
        return out

    @classmethod
    def from_arrays(cls, arrays, config):
        config = dict(config)
        n = 1 + max(int(k.split(".")[1]) for k in arrays if k.startswith("layers."))
        layers = [
            {name: arrays[f"layers.{i}.{name}"] for name in ("w_x", "w_h", "w_peep", "b")}
            for i in range(n)
        ]
        return cls(layers, arrays["cls_weights"], arrays["cls_biases"], float(config.get("lam", 0.0)), config)

    @property
    def vocab_size(self):
        return self.cls_weights.shape[0]

    @property
    def hidden(self):
        return self.cls_weights.shape[1]

    def dims(self):
        return {
            "input": self.layers[0]["w_x"].shape[2],
            "hidden": self.hidden,
            "layers": len(self.layers),
        }


def lstm_cell_step(layer: dict, x_t, h_prev, c_prev):
    """One peephole LSTM step; note the output gate peeks at the *new* cell state."""
    w_x, w_h, w_p, b = layer["w_x"], layer["w_h"], layer["w_peep"], layer["b"]
    x_t, h_prev, c_prev = (np.asarray(a, dtype=np.float64) for a in (x_t, h_prev, c_prev))
    if x_t.shape[-1] != w_x.shape[2] or h_prev.shape[-1] != w_h.shape[1] or c_prev.shape != h_prev.shape:
        raise ValueError("lstm_cell_step: input shapes do not match the layer")
    i_t = sigmoid(w_x[0] @ x_t + w_h[0] @ h_prev + w_p[0] * c_prev + b[0])
    f_t = sigmoid(w_x[1] @ x_t + w_h[1] @ h_prev + w_p[1] * c_prev + b[1])
    c_t = f_t * c_prev + i_t * np.tanh(w_x[2] @ x_t + w_h[2] @ h_prev + b[2])
    o_t = sigmoid(w_x[3] @ x_t + w_h[3] @ h_prev + w_p[2] * c_t + b[3])
    h_t = o_t * np.tanh(c_t)
    return h_t, c_t


def stride_indices(num_frames: int, unroll: int) -> np.ndarray:
    """Frame indices floor(m F / unroll), m < unroll, when F exceeds unroll."""
    if num_frames <= unroll:
        return np.arange(num_frames)
    return (np.arange(unroll) * num_frames) // unroll


def lstm_forward(params: LstmParams, frames, unroll: int = 60) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError("lstm_forward needs a non-empty (F, D) frame matrix")
    seq = frames[stride_indices(frames.shape[0], unroll)]
    for layer in params.layers:
        h = np.zeros(layer["w_h"].shape[1])
        c = np.zeros_like(h)
        outputs = []
        for x_t in seq:
            h, c = lstm_cell_step(layer, x_t, h, c)
            outputs.append(h)
        seq = np.array(outputs)
    return sigmoid(params.cls_weights @ seq[-1] + params.cls_biases)


def _layer_forward(layer, xs, mask):
    """Batched masked forward over time. xs: (B, T, Din). Returns hidden seq and cache."""
    n, t_len, _ = xs.shape
    w_x, w_h, w_p, b = layer["w_x"], layer["w_h"], layer["w_peep"], layer["b"]
    hdim = w_h.shape[1]
    wx = w_x.reshape(4 * hdim, -1)
    wh = w_h.reshape(4 * hdim, hdim)
    ax = xs @ wx.T + b.reshape(-1)  # (B, T, 4H)
    h = np.zeros((n, hdim))
    c = np.zeros((n, hdim))
    hs = np.zeros((n, t_len, hdim))
    cache = []
    for t in range(t_len):
        a = ax[:, t] + h @ wh.T
        ai, af, ag, ao = np.split(a, 4, axis=1)
        i = sigmoid(ai + w_p[0] * c)
        f = sigmoid(af + w_p[1] * c)
        g = np.tanh(ag)
        c_new = f * c + i * g
        o = sigmoid(ao + w_p[2] * c_new)
        tc = np.tanh(c_new)
        h_new = o * tc
        m = mask[:, t, None]
        cache.append((h, c, i, f, g, o, c_new, tc))
        h = m * h_new + (1 - m) * h
        c = m * c_new + (1 - m) * c
        hs[:, t] = h
    return hs, cache


def _layer_backward(layer, xs, mask, cache, dhs):
    """BPTT for one layer given dL/dh_t from above (dhs: (B, T, H)). Returns (dxs, grads)."""
    n, t_len, _ = xs.shape
    w_x, w_h, w_p = layer["w_x"], layer["w_h"], layer["w_peep"]
    hdim = w_h.shape[1]
    wx = w_x.reshape(4 * hdim, -1)
    wh = w_h.reshape(4 * hdim, hdim)
    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    dp = np.zeros_like(w_p)
    db = np.zeros(4 * hdim)
    dxs = np.zeros_like(xs)
    dh_next = np.zeros((n, hdim))
    dc_next = np.zeros((n, hdim))
    for t in reversed(range(t_len)):
        h_prev, c_prev, i, f, g, o, c, tc = cache[t]
        m = mask[:, t, None]
        dh_tot = dh_next + dhs[:, t]
        dh = m * dh_tot
        dc_in = m * dc_next
        dao = dh * tc * o * (1 - o)
        dc = dc_in + dh * o * (1 - tc**2) + dao * w_p[2]
        dai = dc * g * i * (1 - i)
        daf = dc * c_prev * f * (1 - f)
        dag = dc * i * (1 - g**2)
        da = np.concatenate([dai, daf, dag, dao], axis=1)
        dwx += da.T @ xs[:, t]
        dwh += da.T @ h_prev
        db += da.sum(axis=0)
        dp[0] += np.sum(dai * c_prev, axis=0)
        dp[1] += np.sum(daf * c_prev, axis=0)
        dp[2] += np.sum(dao * c, axis=0)
        dxs[:, t] = da @ wx
        dh_next = da @ wh + (1 - m) * dh_tot
        dc_next = dc * f + dai * w_p[0] + daf * w_p[1] + (1 - m) * dc_next
    grads = {
        "w_x": dwx.reshape(w_x.shape),
        "w_h": dwh.reshape(w_h.shape),
        "w_peep": dp,
        "b": db.reshape(4, hdim),
    }
    return dxs, grads


def _lstm_batch_forward(params: LstmParams, batch: PaddedSequences):
    seq = batch.data
    caches, inputs = [], []
    for layer in params.layers:
        inputs.append(seq)
        seq, cache = _layer_forward(layer, seq, batch.mask)
        caches.append(cache)
    return seq[:, -1], inputs, caches


def lstm_predict(params: LstmParams, batch: PaddedSequences) -> np.ndarray:
    h_final, _, _ = _lstm_batch_forward(params, batch)
    return sigmoid(h_final @ params.cls_weights.T + params.cls_biases)


def lstm_loss_and_grad(params: LstmParams, batch: PaddedSequences, y):
    n = len(batch)
    h_final, inputs, caches = _lstm_batch_forward(params, batch)
    z = h_final @ params.cls_weights.T + params.cls_biases
    weights = [l["w_x"] for l in params.layers] + [l["w_h"] for l in params.layers]
    reg = params.lam * (sum(np.sum(w**2) for w in weights) + np.sum(params.cls_weights**2))
    loss = log_sigmoid_loss(z, y).sum() / n + reg
    dz = (sigmoid(z) - y) / n
    grads = {
        "cls_weights": dz.T @ h_final + 2.0 * params.lam * params.cls_weights,
        "cls_biases": dz.sum(axis=0),
    }
    t_len = batch.data.shape[1]
    dhs = np.zeros((n, t_len, params.hidden))
    dhs[:, -1] = dz @ params.cls_weights
    for li in reversed(range(len(params.layers))):
        layer = params.layers[li]
        dhs, g = _layer_backward(layer, inputs[li], batch.mask, caches[li], dhs)
        g["w_x"] += 2.0 * params.lam * layer["w_x"]
        g["w_h"] += 2.0 * params.lam * layer["w_h"]
        for name, val in g.items():
            grads[f"layers.{li}.{name}"] = val
    return float(loss), {k: grads[k] for k in params.named_arrays()}


# -- training ------------------------------------------------------------------------------


def sequence_inputs(kind: str, examples, features: str = "both", unroll: int = 60) -> PaddedSequences:
    seqs = []
    for ex in examples:
        frames = ex.frames(features)
        if kind == "lstm":
            frames = frames[stride_indices(frames.shape[0], unroll)]
        seqs.append(frames)
    return PaddedSequences(seqs)


def train_sequence_model(
    kind: str,
    examples,
    vocab_size: int,
    config: TrainConfig = TrainConfig(),
    features: str = "both",
    *,
    init=None,
    history: list | None = None,
):
    """Mini-batch Adagrad on summed per-label log-loss for ``kind`` in {"dbof", "lstm"}."""
    examples = list(examples)
    if not examples:
        raise ValueError("empty dataset")
    batch = sequence_inputs(kind, examples, features, config.unroll)
    y = label_matrix([ex.labels for ex in examples], vocab_size)
    dim = batch.shape[2]
    meta = {"lam": config.lam, "train": config.to_dict(), "level": "frame", "features": features}
    if kind == "dbof":
        params = init.copy() if init is not None else DbofParams.init(
            vocab_size, dim, config.up_width or 8 * dim, config.seed, config.init_scale
        )
        fn = dbof_loss_and_grad
    elif kind == "lstm":
        params = init.copy() if init is not None else LstmParams.init(
            vocab_size, dim, config.hidden, config.layers, config.seed, config.init_scale
        )
        meta["unroll"] = config.unroll
        fn = lstm_loss_and_grad
    else:
        raise ValueError(f"unknown sequence model kind {kind!r}")
    params.lam = config.lam
    params.config = {**params.config, **meta}
    return minibatch_adagrad(params, fn, batch, y, config, history)


def predict_frames(params, examples, features: str | None = None, unroll: int | None = None) -> np.ndarray:
    """Dense (N, L) scores for any frame-level model over frame examples."""
    examples = list(examples)
    features = features or params.config.get("features", "both")
    if isinstance(params, LogisticParams):
        return np.stack([frame_logistic_infer(params, ex.frames(features)) for ex in examples])
    if isinstance(params, DbofParams):
        return dbof_predict(params, sequence_inputs("dbof", examples, features))
    if isinstance(params, LstmParams):
        unroll = unroll or params.config.get("unroll", 60)
        return lstm_predict(params, sequence_inputs("lstm", examples, features, unroll))
    raise TypeError(f"not a frame-level model: {type(params).__name__}")


# -- gradient checking ------------------------------------------------------------------------


def numeric_gradient_check(
    loss_and_grad: Callable,
    theta: np.ndarray,
    step: float = 1e-3,
    num_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``loss_and_grad(theta) -> (loss, grad)`` over a flat float64 vector. Checks
    ``num_coords`` seeded coordinates (all of them if there are fewer).
    """
    theta = np.array(theta, dtype=np.float64)
    _, grad = loss_and_grad(theta)
    grad = np.asarray(grad, dtype=np.float64).ravel()
    rng = np.random.default_rng(seed)
    if theta.size <= num_coords:
        coords = np.arange(theta.size)
    else:
        coords = rng.choice(theta.size, size=num_coords, replace=False)
    worst = 0.0
    for j in coords:
        orig = theta[j]
        theta[j] = orig + step
        up = loss_and_grad(theta)[0]
        theta[j] = orig - step
        down = loss_and_grad(theta)[0]
        theta[j] = orig
        numeric = (up - down) / (2 * step)
        err = abs(grad[j] - numeric) / max(1e-8, abs(grad[j]) + abs(numeric))
        worst = max(worst, err)
    return worst


def bundle_gradient_check(loss_and_grad, params: ParamBundle, x, y, **kwargs) -> float:
    """numeric_gradient_check for a ParamBundle-level ``loss_and_grad(params, x, y)``."""
    names = list(params.named_arrays())

    def flat_fn(theta):
        p = params.with_flat(theta)
        loss, grads = loss_and_grad(p, x, y)
        return loss, np.concatenate([grads[k].ravel() for k in names])

    return numeric_gradient_check(flat_fn, params.flat(), **kwargs)
