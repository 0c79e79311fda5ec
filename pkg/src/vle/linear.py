"""Video-level one-vs-all logistic regression and mixture-of-experts, trained with Adagrad."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .datamodel import label_matrix
from .metrics import LOG_LOSS_EPS
from .params import ParamBundle, register


class TrainingDiverged(RuntimeError):
    def __init__(self, step, batch_index, loss):
        super().__init__(
            f"non-finite loss {loss} at step {step} (batch rows {list(batch_index)[:10]}...)"
        )
        self.step = step
        self.batch_index = batch_index


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 10
    learning_rate: float = 0.01
    lam: float = 1e-6
    seed: int = 0
    experts: int = 2
    adagrad_eps: float = 1e-6
    # sequence models
    hidden: int = 32
    layers: int = 2
    unroll: int = 60
    up_width: int | None = None
    init_scale: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError(f"invalid training config: {self}")
        if self.lam < 0 or self.experts < 1:
            raise ValueError(f"invalid training config: {self}")

    def to_dict(self) -> dict:
        return asdict(self)


def sigmoid(z):
    """Logistic function 1 / (1 + exp(-z)), overflow-safe."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return float(out) if out.ndim == 0 else out


def log_sigmoid_loss(z, y):
    """-y log σ(z) - (1-y) log(1-σ(z)) computed from logits."""
    return np.logaddexp(0.0, z) - y * z


# -- parameter bundles ----------------------------------------------------------


@register
@dataclass(eq=False)
class LogisticParams(ParamBundle):
    weights: np.ndarray  # (L, D)
    biases: np.ndarray  # (L,)
    lam: float = 0.0
    config: dict = field(default_factory=dict)

    kind = "logistic"

    @classmethod
    def zeros(cls, vocab_size, dim, lam=0.0, config=None):
        return cls(np.zeros((vocab_size, dim)), np.zeros(vocab_size), lam, dict(config or {}))

    def named_arrays(self):
        return {"weights": self.weights, "biases": self.biases}

    @classmethod
    def from_arrays(cls, arrays, config):
        config = dict(config)
        return cls(arrays["weights"], arrays["biases"], float(config.get("lam", 0.0)), config)

    @property
    def vocab_size(self):
        return self.weights.shape[0]

    @property
    def input_dim(self):
        return self.weights.shape[1]

    def dims(self):
        return {"input": self.input_dim}

    def copy(self):
        return LogisticParams(self.weights.copy(), self.biases.copy(), self.lam, dict(self.config))


@register
@dataclass(eq=False)
class MoeParams(ParamBundle):
    gate_weights: np.ndarray  # (L, E+1, D); the last gate is the null expert
    gate_biases: np.ndarray  # (L, E+1)
    expert_weights: np.ndarray  # (L, E, D)
    expert_biases: np.ndarray  # (L, E)
    lam: float = 0.0
    config: dict = field(default_factory=dict)

    kind = "moe"

    def __post_init__(self):
        e = self.expert_weights.shape[1]
        if e < 1 or self.gate_weights.shape[1] != e + 1:
            raise ValueError(
                f"MoE needs E >= 1 experts and E+1 gates, got {e} and {self.gate_weights.shape[1]}"
            )

    @classmethod
    def init(cls, vocab_size, dim, experts=2, seed=0, lam=0.0, config=None):
        rng = np.random.default_rng(seed)
        std = 0.01 / np.sqrt(dim)
        return cls(
            rng.normal(0.0, std, (vocab_size, experts + 1, dim)),
            np.zeros((vocab_size, experts + 1)),
            rng.normal(0.0, std, (vocab_size, experts, dim)),
            np.zeros((vocab_size, experts)),
            lam,
            dict(config or {}),
        )

    def named_arrays(self):
        return {
            "gate_weights": self.gate_weights,
            "gate_biases": self.gate_biases,
            "expert_weights": self.expert_weights,
            "expert_biases": self.expert_biases,
        }

    @classmethod
    def from_arrays(cls, arrays, config):
        config = dict(config)
        return cls(
            arrays["gate_weights"], arrays["gate_biases"],
            arrays["expert_weights"], arrays["expert_biases"],
            float(config.get("lam", 0.0)), config,
        )

    @property
    def vocab_size(self):
        return self.expert_weights.shape[0]

    @property
    def experts(self):
        return self.expert_weights.shape[1]

    @property
    def input_dim(self):
        return self.expert_weights.shape[2]

    def dims(self):
        return {"input": self.input_dim, "experts": self.experts}


# -- Adagrad ----------------------------------------------------------------------


def _arrays(obj) -> dict:
    return obj if isinstance(obj, dict) else obj.named_arrays()


@dataclass
class AdagradState:
    accumulators: dict
    learning_rate: float = 0.01
    eps: float = 1e-6

    @classmethod
    def for_params(cls, params, learning_rate=0.01, eps=1e-6):
        return cls({k: np.zeros_like(v) for k, v in _arrays(params).items()}, learning_rate, eps)


def adagrad_step(params, state: AdagradState, grads: dict):
    """In-place Adagrad update: acc += g**2; p -= lr * g / (sqrt(acc) + eps)."""
    arrays = _arrays(params)
    if arrays.keys() != grads.keys() or arrays.keys() != state.accumulators.keys():
        raise ValueError("params, grads and accumulators have different entries")
    for name, p in arrays.items():
        g = grads[name]
        acc = state.accumulators[name]
        if g.shape != p.shape or acc.shape != p.shape:
            raise ValueError(f"shape mismatch for {name!r}: {p.shape}, {g.shape}, {acc.shape}")
        acc += g * g
        p -= state.learning_rate * g / (np.sqrt(acc) + state.eps)
    return params, state


# -- features ---------------------------------------------------------------------


def video_arrays(examples, vocab_size: int, features: str = "both"):
    """Stack examples into a feature matrix X (N, D) and label matrix Y (N, L)."""
    examples = list(examples)
    if not examples:
        raise ValueError("empty dataset")
    x = np.stack([ex.features(features) for ex in examples])
    y = label_matrix([ex.labels for ex in examples], vocab_size)
    return x, y


def _xt_dot(x, e):
    """x.T @ e for dense or sparse x (result dense)."""
    out = x.T @ e
    return np.asarray(out)


def _check_dim(x, dim):
    d = x.shape[-1]
    if d != dim:
        raise ValueError(f"feature dimension {d} does not match model dimension {dim}")


# -- logistic ---------------------------------------------------------------------


def logistic_predict(params: LogisticParams, x) -> np.ndarray:
    """σ(W x + b) per label; ``x`` may be one vector or a (N, D) batch."""
    if sp.issparse(x):
        _check_dim(x, params.input_dim)
        return sigmoid(np.asarray(x @ params.weights.T) + params.biases)
    x = np.asarray(x, dtype=np.float64)
    _check_dim(x, params.input_dim)
    return sigmoid(x @ params.weights.T + params.biases)


def logistic_loss_and_grad(params: LogisticParams, x, y):
    """Batch-mean summed log-loss plus lam * ||W||^2, and its gradient."""
    n = x.shape[0]
    z = np.asarray(x @ params.weights.T) + params.biases
    loss = log_sigmoid_loss(z, y).sum() / n + params.lam * np.sum(params.weights**2)
    err = (sigmoid(z) - y) / n
    grads = {
        "weights": _xt_dot(x, err).T + 2.0 * params.lam * params.weights,
        "biases": err.sum(axis=0),
    }
    return float(loss), grads


# -- mixture of experts -----------------------------------------------------------


def _moe_forward(params: MoeParams, x):
    n = x.shape[0]
    L, E1, D = params.gate_weights.shape
    E = E1 - 1
    zg = np.asarray(x @ params.gate_weights.reshape(L * E1, D).T).reshape(n, L, E1)
    zg = zg + params.gate_biases
    zg = zg - zg.max(axis=-1, keepdims=True)
    gates = np.exp(zg)
    gates /= gates.sum(axis=-1, keepdims=True)
    ze = np.asarray(x @ params.expert_weights.reshape(L * E, D).T).reshape(n, L, E)
    experts = sigmoid(ze + params.expert_biases)
    p = np.sum(gates[..., :E] * experts, axis=-1)
    return p, gates, experts


def moe_predict(params: MoeParams, x) -> np.ndarray:
    """Per label: Σ_k softmax(gates)_k σ(expert_k · x); the extra gate predicts 0."""
    single = not sp.issparse(x) and np.ndim(x) == 1
    xb = np.atleast_2d(np.asarray(x, dtype=np.float64)) if not sp.issparse(x) else x
    _check_dim(xb, params.input_dim)
    p, _, _ = _moe_forward(params, xb)
    return p[0] if single else p


def moe_loss_and_grad(params: MoeParams, x, y, eps: float = LOG_LOSS_EPS):
    n = x.shape[0]
    L, E1, D = params.gate_weights.shape
    E = E1 - 1
    p, gates, experts = _moe_forward(params, x)
    pc = np.clip(p, eps, 1 - eps)
    reg = params.lam * (np.sum(params.gate_weights**2) + np.sum(params.expert_weights**2))
    loss = np.sum(-y * np.log(pc) - (1 - y) * np.log1p(-pc)) / n + reg
    inside = (p > eps) & (p < 1 - eps)
    dp = np.where(inside, -y / pc + (1 - y) / (1 - pc), 0.0) / n
    dze = dp[..., None] * gates[..., :E] * experts * (1 - experts)
    ext = np.concatenate([experts, np.zeros((n, L, 1))], axis=-1)
    dzg = dp[..., None] * gates * (ext - p[..., None])
    grads = {
        "gate_weights": _xt_dot(x, dzg.reshape(n, L * E1)).T.reshape(L, E1, D)
        + 2.0 * params.lam * params.gate_weights,
        "gate_biases": dzg.sum(axis=0),
        "expert_weights": _xt_dot(x, dze.reshape(n, L * E)).T.reshape(L, E, D)
        + 2.0 * params.lam * params.expert_weights,
        "expert_biases": dze.sum(axis=0),
    }
    return float(loss), grads


# -- training loop ------------------------------------------------------------------


def minibatch_adagrad(
    params,
    loss_and_grad: Callable,
    x,
    y,
    config: TrainConfig,
    history: list | None = None,
):
    """Shuffle each epoch with ``config.seed`` and apply one Adagrad step per mini-batch."""
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    state = AdagradState.for_params(params, config.learning_rate, config.adagrad_eps)
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = x[idx]
            loss, grads = loss_and_grad(params, xb, y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(step, idx, loss)
            if history is not None:
                history.append(loss)
            adagrad_step(params, state, grads)
            step += 1
    return params


def _prepare(x, y):
    if not sp.issparse(x):
        x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"{x.shape[0]} feature rows but {y.shape[0]} label rows")
    return x, y


LABEL_BLOCK = 32


def label_shards(n_labels: int, block: int = LABEL_BLOCK) -> list:
    """Fixed [lo, hi) label ranges used by logistic training."""
    return [(lo, min(lo + block, n_labels)) for lo in range(0, n_labels, block)]


def logistic_train(
    x,
    y,
    config: TrainConfig = TrainConfig(),
    *,
    init: LogisticParams | None = None,
    history: list | None = None,
    threads: int = 1,
) -> LogisticParams:
    """One-vs-all L2-regularized logistic regression with mini-batch Adagrad.

    ``x`` is a dense or scipy-sparse (N, D) matrix, ``y`` a 0/1 (N, L) matrix.
    Labels are independent, so training runs over a fixed grid of
    ``LABEL_BLOCK``-wide label shards; ``threads > 1`` trains shards
    concurrently. The grid does not depend on ``threads`` and every shard sees
    the same example order, so the result is bitwise identical either way.
    """
    x, y = _prepare(x, y)
    n_labels = y.shape[1]
    meta = {"lam": config.lam, "train": config.to_dict()}
    params = init.copy() if init is not None else LogisticParams.zeros(n_labels, x.shape[1], config.lam)
    params.lam = config.lam
    params.config = {**params.config, **meta}
    shards = label_shards(n_labels)

    def run(lo_hi):
        lo, hi = lo_hi
        shard = LogisticParams(params.weights[lo:hi].copy(), params.biases[lo:hi].copy(), params.lam)
        hist = []
        minibatch_adagrad(shard, logistic_loss_and_grad, x, y[:, lo:hi], config, hist)
        return shard, hist

    if threads <= 1 or len(shards) == 1:
        results = [run(s) for s in shards]
    else:
        with ThreadPoolExecutor(max_workers=min(threads, len(shards))) as pool:
            results = list(pool.map(run, shards))
    for (lo, hi), (shard, _) in zip(shards, results):
        params.weights[lo:hi] = shard.weights
        params.biases[lo:hi] = shard.biases
    if history is not None:
        # per-shard losses add up because the objective is a sum over labels
        history.extend(np.sum([h for _, h in results], axis=0).tolist())
    return params


def moe_train(
    x,
    y,
    config: TrainConfig = TrainConfig(),
    *,
    init: MoeParams | None = None,
    history: list | None = None,
) -> MoeParams:
    """Mixture-of-experts (E = config.experts, plus a null gate) with mini-batch Adagrad."""
    x, y = _prepare(x, y)
    if init is not None:
        params = MoeParams.from_arrays(
            {k: v.copy() for k, v in init.named_arrays().items()}, dict(init.config)
        )
    else:
        params = MoeParams.init(y.shape[1], x.shape[1], config.experts, config.seed)
    params.lam = config.lam
    params.config = {**params.config, "lam": config.lam, "train": config.to_dict()}
    return minibatch_adagrad(params, moe_loss_and_grad, x, y, config, history)


def predict_scores(params, x) -> np.ndarray:
    """Dense (N, L) scores for a video-level model on a feature matrix."""
    if isinstance(params, MoeParams):
        return moe_predict(params, x if sp.issparse(x) else np.atleast_2d(x))
    return logistic_predict(params, x)
