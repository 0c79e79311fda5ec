"""Log-loss and global average precision (GAP) over top-k predictions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .datamodel import DEFAULT_TOP_K, PredictionList

LOG_LOSS_EPS = 1e-6


def log_loss(p, g, eps: float = LOG_LOSS_EPS):
    """Binary cross-entropy -g log p - (1-g) log(1-p), with p clamped to [eps, 1-eps]."""
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("probabilities must lie in [0, 1]")
    if np.any((g != 0) & (g != 1)):
        raise ValueError("ground truth must be 0 or 1")
    p = np.clip(p, eps, 1 - eps)
    out = -g * np.log(p) - (1 - g) * np.log1p(-p)
    return float(out) if out.ndim == 0 else out


def pooled_average_precision(triples, total_positives: int) -> float:
    """Average precision over pooled (confidence, is_hit) triples.

    Ties in confidence keep input order (stable sort); callers fix that order.
    """
    if not len(triples):
        return 0.0
    conf = np.fromiter((c for c, _ in triples), dtype=np.float64, count=len(triples))
    hits = np.fromiter((bool(h) for _, h in triples), dtype=bool, count=len(triples))
    if total_positives <= 0:
        return 0.0
    order = np.argsort(-conf, kind="stable")
    hits = hits[order]
    cum = np.cumsum(hits)
    precision = cum / np.arange(1, hits.size + 1)
    return float(precision[hits].sum() / total_positives)


@dataclass
class GapAccumulator:
    """Pooled GAP state that can be filled from disjoint shards and merged."""

    k: int = DEFAULT_TOP_K
    # (video_id, label, confidence, is_hit)
    entries: list = field(default_factory=list)
    total_positives: int = 0
    videos: set = field(default_factory=set)

    def add(self, prediction, truth_labels):
        if isinstance(prediction, PredictionList):
            video_id, pairs = prediction.video_id, prediction.pairs
        else:
            video_id, pairs = prediction
        if video_id in self.videos:
            raise ValueError(f"video {video_id!r} already accumulated")
        self.videos.add(video_id)
        truth_labels = frozenset(truth_labels)
        for label, conf in pairs[: self.k]:
            self.entries.append((video_id, label, float(conf), label in truth_labels))
        self.total_positives += min(len(truth_labels), self.k)

    def merge(self, other: "GapAccumulator") -> "GapAccumulator":
        if other.k != self.k:
            raise ValueError(f"cannot merge accumulators with k={self.k} and k={other.k}")
        overlap = self.videos & other.videos
        if overlap:
            raise ValueError(f"accumulators share videos: {sorted(overlap)[:10]}")
        return GapAccumulator(
            self.k,
            self.entries + other.entries,
            self.total_positives + other.total_positives,
            self.videos | other.videos,
        )

    def gap(self) -> float:
        entries = sorted(self.entries, key=lambda e: (e[0], e[1]))
        return pooled_average_precision([(c, h) for _, _, c, h in entries], self.total_positives)


def merge(acc1: GapAccumulator, acc2: GapAccumulator) -> GapAccumulator:
    return acc1.merge(acc2)


def _canonical_pairs(pred):
    if isinstance(pred, PredictionList):
        return pred.pairs
    return tuple(sorted(((int(l), float(c)) for l, c in pred), key=lambda lc: (-lc[1], lc[0])))


def gap_at_k(predictions: Mapping, truth: Mapping, k: int = DEFAULT_TOP_K) -> float:
    """GAP of per-video top-k predictions against ground-truth label sets.

    ``predictions`` maps video_id to a PredictionList (or (label, conf) pairs);
    ``truth`` maps video_id to label sets. Positives are capped at k per video.
    """
    unknown = [v for v in predictions if v not in truth]
    if unknown:
        raise KeyError(f"predictions for videos missing from truth: {sorted(unknown)[:10]}")
    acc = GapAccumulator(k)
    for video_id in sorted(predictions):
        acc.add((video_id, _canonical_pairs(predictions[video_id])), truth[video_id])
    return acc.gap()


def gap_from_scores(scores: np.ndarray, labels, k: int = DEFAULT_TOP_K) -> float:
    """GAP straight from a dense (videos x vocab) score matrix and label sets."""
    from .datamodel import top_k

    preds = {}
    truth = {}
    for i, row in enumerate(np.asarray(scores)):
        vid = f"{i:09d}"
        preds[vid] = top_k(row, k)
        truth[vid] = labels[i]
    return gap_at_k(preds, truth, k)
