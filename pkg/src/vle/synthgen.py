"""Seeded synthetic datasets with a planted labelling model.

All randomness comes from numpy's PCG64 bit generator seeded with ``spec.seed``
and is consumed in a fixed order (latents, planted weights, frames), so the same
spec always yields the same bytes on disk.

Tasks:
  linear      label l is on iff σ(w_l·z + b_l) > τ
  mixture     label l is on iff σ(a_l·z + s_l(z) w_l·z + b_l) > τ, with
              s_l(z) = sign(g_l·z): two expert directions a_l ± w_l chosen by a
              gate. With a_l = 0 (``mixture_linear`` = 0) no single hyperplane
              fits the labels; ``mixture_linear`` > 0 adds a shared linear part
  sequential  frames drift linearly, x_j = z + (j - (F-1)/2) d; label l is on iff
              σ(w_l·d) > τ, so only the frame order reveals the labels

With ``parent_labels`` = P > 0 the last P labels are parents: each is on iff any
of ``parent_fanin`` randomly chosen child labels is on (its logit is the max of
theirs). One-vs-all models cannot see this structure; a stacker over all label
scores can.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .datamodel import FrameExample, VideoExample
from .linear import sigmoid
from .params import ParamBundle, register

PRNG = "numpy.random.PCG64"
TASKS = ("linear", "mixture", "sequential")


class CalibrationError(RuntimeError):
    pass


@dataclass
class SynthSpec:
    seed: int = 7
    n_videos: int = 5000
    d_rgb: int = 32
    d_audio: int = 8
    vocab_size: int = 16
    mean_labels: float = 3.4
    min_frames: int = 10
    max_frames: int = 30
    frame_noise: float = 0.5
    task: str = "linear"
    threshold: float = 0.5
    weight_scale: float = 4.0
    latent_scale: float = 0.5
    drift_scale: float = 1.0
    mixture_linear: float = 0.0
    parent_labels: int = 0
    parent_fanin: int = 3

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        positive = [self.n_videos, self.d_rgb, self.d_audio, self.vocab_size, self.min_frames]
        if min(positive) < 1 or self.max_frames < self.min_frames or self.max_frames > 300:
            raise ValueError(f"invalid synthetic spec: {self}")
        if self.frame_noise < 0 or not 0 < self.threshold < 1:
            raise ValueError(f"invalid synthetic spec: {self}")
        if self.task != "sequential" and not 0 < self.mean_labels < self.vocab_size:
            raise ValueError("mean_labels must lie in (0, vocab_size)")
        if self.parent_labels and not 1 <= self.parent_fanin <= self.vocab_size - self.parent_labels:
            raise ValueError("parent_fanin must be between 1 and the number of child labels")

    @property
    def dim(self) -> int:
        return self.d_rgb + self.d_audio

    def to_dict(self) -> dict:
        return asdict(self)


@register
@dataclass(eq=False)
class PlantedModel(ParamBundle):
    weights: np.ndarray  # (L, D)
    biases: np.ndarray  # (L,)
    gates: np.ndarray  # (L, D); all zero unless task == "mixture"
    shared: np.ndarray  # (L, D); gate-independent part of the mixture logit
    children: np.ndarray  # (L, L); row p marks the children of parent label p
    config: dict = field(default_factory=dict)

    kind = "planted"

    @property
    def threshold(self) -> float:
        return float(self.config.get("threshold", 0.5))

    @property
    def task(self) -> str:
        return self.config.get("task", "linear")

    def named_arrays(self):
        return {
            "weights": self.weights,
            "biases": self.biases,
            "gates": self.gates,
            "shared": self.shared,
            "children": self.children,
        }

    @classmethod
    def from_arrays(cls, arrays, config):
        return cls(arrays["weights"], arrays["biases"], arrays["gates"], arrays["shared"], arrays["children"], dict(config))

    @property
    def vocab_size(self):
        return self.weights.shape[0]

    def dims(self):
        return {"input": self.weights.shape[1]}


class Synthetic(NamedTuple):
    examples: list
    planted: PlantedModel
    latents: np.ndarray  # what the planted model reads: z, or the drift d for "sequential"


def planted_logits(planted: PlantedModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != planted.weights.shape[1]:
        raise ValueError(f"latent dimension {x.shape[-1]} != planted dimension {planted.weights.shape[1]}")
    z = x @ planted.weights.T
    if planted.task == "mixture":
        z = z * np.where(x @ planted.gates.T >= 0, 1.0, -1.0) + x @ planted.shared.T
    z = z + planted.biases
    for p in np.flatnonzero(planted.children.any(axis=1)):
        z[..., p] = z[..., planted.children[p] > 0].max(axis=-1)
    return z


def oracle_predict(planted: PlantedModel, x) -> np.ndarray:
    return sigmoid(planted_logits(planted, x))


def planted_labels(planted: PlantedModel, x) -> list:
    """Label sets implied by the planted model: {l : σ(logit_l) > τ}."""
    on = oracle_predict(planted, np.atleast_2d(x)) > planted.threshold
    return [frozenset(np.flatnonzero(row).tolist()) for row in on]


def _bisect(fn, target, lo, hi, rounds=64):
    """Smallest-ish x in [lo, hi] with fn(x) >= target, for nondecreasing fn."""
    for _ in range(rounds):
        mid = 0.5 * (lo + hi)
        if fn(mid) < target:
            lo = mid
        else:
            hi = mid
    return hi


def _calibrate_biases(spec: SynthSpec, planted: "PlantedModel", latents, rng) -> np.ndarray:
    """Per-label biases by bisection so label l fires on a target fraction of videos.

    With parent labels an outer bisection scales the child rates until the mean
    label count (children plus parents) reaches ``spec.mean_labels``.
    """
    n_children = spec.vocab_size - spec.parent_labels
    base_rates = np.exp(rng.normal(0.0, 0.5, n_children))
    base_rates /= base_rates.sum()
    cut = np.log(spec.threshold / (1 - spec.threshold))
    planted.biases[:] = 0.0
    raw = planted_logits(planted, latents)[:, :n_children]
    floor = 0.5 / spec.n_videos

    def fit(scale):
        rates = np.clip(base_rates * scale, floor, 0.9)
        return np.array(
            [_bisect(lambda b: np.mean(raw[:, l] + b > cut), rates[l], -100.0, 100.0) for l in range(n_children)]
        )

    def mean_labels(biases):
        planted.biases[:n_children] = biases
        return np.mean(np.sum(planted_logits(planted, latents) > cut, axis=1))

    if spec.parent_labels:
        scale = _bisect(lambda s: mean_labels(fit(s)), spec.mean_labels, 0.0, spec.mean_labels, rounds=30)
    else:
        scale = spec.mean_labels
    biases = fit(scale)
    mean = mean_labels(biases)
    if not 0.8 * spec.mean_labels <= mean <= 1.2 * spec.mean_labels:
        raise CalibrationError(
            f"mean labels/video {mean:.3f} outside [{0.8 * spec.mean_labels:.3f}, {1.2 * spec.mean_labels:.3f}]"
        )
    return planted.biases.copy()


def _generate(spec: SynthSpec):
    rng = np.random.default_rng(spec.seed)
    n, d, n_labels = spec.n_videos, spec.dim, spec.vocab_size
    if spec.task == "sequential":
        z = rng.normal(0.0, spec.latent_scale, (n, d))
        drift = rng.normal(0.0, spec.drift_scale, (n, d))
    else:
        z = rng.normal(0.0, 1.0, (n, d))
        drift = None
    weights = rng.normal(0.0, spec.weight_scale / np.sqrt(d), (n_labels, d))
    gates = np.zeros((n_labels, d))
    shared = np.zeros((n_labels, d))
    if spec.task == "mixture":
        gates = rng.normal(0.0, 1.0 / np.sqrt(d), (n_labels, d))
        shared = spec.mixture_linear * rng.normal(0.0, spec.weight_scale / np.sqrt(d), (n_labels, d))
    children = np.zeros((n_labels, n_labels))
    n_children = n_labels - spec.parent_labels
    for p in range(n_children, n_labels):
        children[p, rng.choice(n_children, size=spec.parent_fanin, replace=False)] = 1.0
    config = {"task": spec.task, "threshold": spec.threshold, "seed": spec.seed, "prng": PRNG}
    planted = PlantedModel(weights, np.zeros(n_labels), gates, shared, children, config)
    latents = drift if spec.task == "sequential" else z
    if spec.task != "sequential":
        _calibrate_biases(spec, planted, latents, rng)
    return rng, z, drift, planted, latents


def _split(vec, spec):
    return vec[..., : spec.d_rgb], vec[..., spec.d_rgb :]


def video_id(i: int) -> str:
    return f"vid{i:06d}"


def gen_video_level(spec: SynthSpec) -> Synthetic:
    if spec.task == "sequential":
        raise ValueError("the sequential task only exists at frame level")
    _, z, _, planted, latents = _generate(spec)
    labels = planted_labels(planted, latents)
    examples = [VideoExample(video_id(i), labels[i], *_split(z[i], spec)) for i in range(spec.n_videos)]
    return Synthetic(examples, planted, latents)


def gen_frame_level(spec: SynthSpec) -> Synthetic:
    """Frames scatter around the video latent (or drift along it, for "sequential")."""
    rng, z, drift, planted, latents = _generate(spec)
    labels = planted_labels(planted, latents)
    examples = []
    misses = 0
    for i in range(spec.n_videos):
        f = int(rng.integers(spec.min_frames, spec.max_frames + 1))
        frames = np.repeat(z[i][None, :], f, axis=0)
        if drift is not None:
            frames = frames + (np.arange(f) - (f - 1) / 2.0)[:, None] * drift[i]
        if spec.frame_noise > 0:
            frames = frames + rng.normal(0.0, spec.frame_noise, frames.shape)
            if np.max(np.abs(frames.mean(axis=0) - z[i])) > 4 * spec.frame_noise / np.sqrt(f):
                misses += 1
        examples.append(FrameExample(video_id(i), labels[i], *_split(frames, spec)))
    if misses > 0.01 * spec.n_videos:
        raise CalibrationError(f"{misses} videos have frame means far from their latent")
    return Synthetic(examples, planted, latents)


def split_counts(n: int, ratios=(7, 2, 1)) -> tuple:
    total = sum(ratios)
    n_train = round(n * ratios[0] / total)
    n_val = round(n * ratios[1] / total)
    return n_train, n_val, n - n_train - n_val


def split_dataset(examples, ratios=(7, 2, 1)) -> tuple:
    """Contiguous train / validate / test split in the given proportions."""
    examples = list(examples)
    n_train, n_val, _ = split_counts(len(examples), ratios)
    return examples[:n_train], examples[n_train : n_train + n_val], examples[n_train + n_val :]
