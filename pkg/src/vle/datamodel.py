"""Value types shared across the toolkit: examples, prediction lists, top-k."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_VOCAB_SIZE = 4716
DEFAULT_TOP_K = 20
MAX_FRAMES = 300


@dataclass(frozen=True)
class Vocabulary:
    size: int = DEFAULT_VOCAB_SIZE

    def __post_init__(self):
        if int(self.size) < 1:
            raise ValueError(f"vocabulary size must be >= 1, got {self.size}")

    def __contains__(self, label) -> bool:
        return 0 <= int(label) < self.size


def _as_vector(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-D feature vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class VideoExample:
    """One video with its mean-pooled rgb and audio features."""

    video_id: str
    labels: frozenset
    mean_rgb: np.ndarray
    mean_audio: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "video_id", str(self.video_id))
        object.__setattr__(self, "labels", frozenset(int(l) for l in self.labels))
        object.__setattr__(self, "mean_rgb", _as_vector(self.mean_rgb))
        object.__setattr__(self, "mean_audio", _as_vector(self.mean_audio))

    def __eq__(self, other):
        if not isinstance(other, VideoExample):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.labels == other.labels
            and np.array_equal(self.mean_rgb, other.mean_rgb)
            and np.array_equal(self.mean_audio, other.mean_audio)
        )

    __hash__ = None

    def features(self, mode: str = "both") -> np.ndarray:
        return select_features(self.mean_rgb, self.mean_audio, mode)


@dataclass(frozen=True, eq=False)
class FrameExample:
    """One video as per-second frame features. rgb and audio have shape (F, D)."""

    video_id: str
    labels: frozenset
    rgb: np.ndarray
    audio: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "video_id", str(self.video_id))
        object.__setattr__(self, "labels", frozenset(int(l) for l in self.labels))
        rgb = np.asarray(self.rgb, dtype=np.float64)
        audio = np.asarray(self.audio, dtype=np.float64)
        if rgb.ndim == 1 and rgb.size == 0:
            rgb = rgb.reshape(0, 0)
        if audio.ndim == 1 and audio.size == 0:
            audio = audio.reshape(0, 0)
        if rgb.ndim != 2 or audio.ndim != 2:
            raise ValueError("frame features must be 2-D (frames x dims)")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "audio", audio)

    def __eq__(self, other):
        if not isinstance(other, FrameExample):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.labels == other.labels
            and np.array_equal(self.rgb, other.rgb)
            and np.array_equal(self.audio, other.audio)
        )

    __hash__ = None

    @property
    def num_frames(self) -> int:
        return self.rgb.shape[0]

    def frames(self, mode: str = "both") -> np.ndarray:
        """Per-frame feature matrix (F, D) for the given feature mode."""
        return select_features(self.rgb, self.audio, mode)

    def to_video(self) -> VideoExample:
        return VideoExample(
            self.video_id, self.labels, self.rgb.mean(axis=0), self.audio.mean(axis=0)
        )


FEATURE_MODES = ("rgb", "audio", "both")


def select_features(rgb, audio, mode: str = "both") -> np.ndarray:
    # rgb first, then audio
    if mode == "rgb":
        return rgb
    if mode == "audio":
        return audio
    if mode == "both":
        return np.concatenate([rgb, audio], axis=-1)
    raise ValueError(f"unknown feature mode {mode!r}; expected one of {FEATURE_MODES}")


def canonical_pairs(pairs: Iterable) -> tuple:
    """Sort (label, confidence) pairs by confidence descending, then label ascending."""
    items = [(int(l), float(c)) for l, c in pairs]
    items.sort(key=lambda lc: (-lc[1], lc[0]))
    return tuple(items)


@dataclass(frozen=True)
class PredictionList:
    video_id: str
    pairs: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "video_id", str(self.video_id))
        pairs = tuple((int(l), float(c)) for l, c in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        labels = [l for l, _ in pairs]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate label ids in prediction for {self.video_id}")
        for l, c in pairs:
            if l < 0:
                raise ValueError(f"negative label id {l} for {self.video_id}")
            if not 0.0 <= c <= 1.0:
                raise ValueError(f"confidence {c} outside [0, 1] for {self.video_id}")
        if pairs != canonical_pairs(pairs):
            raise ValueError(f"pairs for {self.video_id} are not in canonical order")

    @classmethod
    def from_unsorted(cls, video_id, pairs) -> "PredictionList":
        return cls(video_id, canonical_pairs(pairs))

    @property
    def labels(self) -> tuple:
        return tuple(l for l, _ in self.pairs)

    def truncate(self, k: int) -> "PredictionList":
        return PredictionList(self.video_id, self.pairs[:k])

    def __len__(self):
        return len(self.pairs)


def top_k(scores: Sequence[float], k: int = DEFAULT_TOP_K) -> tuple:
    """Return the k highest (label, score) pairs in canonical order."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError(f"scores must be 1-D, got shape {scores.shape}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite values")
    # lexsort keys: last one is primary
    order = np.lexsort((np.arange(scores.size), -scores))[:k]
    return tuple((int(i), float(scores[i])) for i in order)


@dataclass(frozen=True)
class Violation:
    index: int
    message: str


def validate_dataset(examples: Iterable, vocab: Vocabulary) -> list:
    """Collect every invariant violation; an empty list means the dataset is valid."""
    violations = []
    dims = None
    for idx, ex in enumerate(examples):
        bad = [l for l in sorted(ex.labels) if l not in vocab]
        for l in bad:
            violations.append(Violation(idx, f"label id {l} outside [0, {vocab.size})"))
        if isinstance(ex, VideoExample):
            shape = (ex.mean_rgb.shape[0], ex.mean_audio.shape[0])
        else:
            n_rgb, n_audio = ex.rgb.shape[0], ex.audio.shape[0]
            if n_rgb == 0:
                violations.append(Violation(idx, "empty frame sequence"))
            elif n_rgb > MAX_FRAMES:
                violations.append(Violation(idx, f"{n_rgb} frames exceeds {MAX_FRAMES}"))
            if n_rgb != n_audio:
                violations.append(
                    Violation(idx, f"rgb has {n_rgb} frames but audio has {n_audio}")
                )
            shape = (ex.rgb.shape[1], ex.audio.shape[1])
        if dims is None:
            dims = shape
        elif shape != dims:
            violations.append(
                Violation(idx, f"feature dims (rgb, audio)={shape}, expected {dims}")
            )
    return violations


def ground_truth(examples: Iterable) -> dict:
    """Map video_id -> label set."""
    return {ex.video_id: frozenset(ex.labels) for ex in examples}


def label_matrix(label_sets: Sequence, vocab_size: int) -> np.ndarray:
    y = np.zeros((len(label_sets), vocab_size))
    for i, labels in enumerate(label_sets):
        for l in labels:
            y[i, l] = 1.0
    return y


def dense_scores(pairs: Iterable, vocab_size: int) -> np.ndarray:
    out = np.zeros(vocab_size)
    for l, c in pairs:
        out[l] = c
    return out


def as_truth(truth) -> Mapping:
    if isinstance(truth, Mapping):
        return {str(k): frozenset(v) for k, v in truth.items()}
    return ground_truth(truth)
