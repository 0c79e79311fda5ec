"""Blending (stacking over sparse top-k expansions) and weighted prediction averaging."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from importlib import resources
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .datamodel import DEFAULT_TOP_K, PredictionList, Vocabulary, as_truth, label_matrix, top_k
from .linear import TrainConfig, logistic_train, moe_train, predict_scores
from .recordio import FormatError, load_predictions

STRATEGY_NAMES = ("a", "b", "c", "d", "e")


def _vocab_size(vocab) -> int:
    return vocab.size if isinstance(vocab, Vocabulary) else int(vocab)


@dataclass(frozen=True)
class SparseStackFeature:
    """A vocab-sized vector stored as strictly increasing indices and their values."""

    indices: tuple
    values: tuple
    size: int

    def __post_init__(self):
        if len(self.indices) != len(self.values):
            raise ValueError("indices and values differ in length")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("indices must be strictly increasing")
        if self.indices and not 0 <= self.indices[0] <= self.indices[-1] < self.size:
            raise ValueError(f"index outside [0, {self.size})")

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.size)
        out[list(self.indices)] = self.values
        return out

    def dot(self, w) -> float:
        w = np.asarray(w)
        return float(sum(v * w[i] for i, v in zip(self.indices, self.values)))

    @property
    def nnz(self) -> int:
        return len(self.indices)


def expand_topk(pred, vocab) -> SparseStackFeature:
    """Scatter a prediction list into a vocab-sized vector; unlisted labels are 0."""
    size = _vocab_size(vocab)
    pairs = pred.pairs if isinstance(pred, PredictionList) else tuple(pred)
    for label, _ in pairs:
        if not 0 <= label < size:
            raise ValueError(f"label {label} outside vocabulary of size {size}")
    # zero confidences are implicit
    items = sorted((l, c) for l, c in pairs if c > 0)
    return SparseStackFeature(tuple(l for l, _ in items), tuple(c for _, c in items), size)


@dataclass(frozen=True, eq=False)
class StackedExample:
    video_id: str
    labels: frozenset
    blocks: tuple  # one SparseStackFeature per base model, in config order
    raw: np.ndarray | None = None

    def dense(self) -> np.ndarray:
        parts = ([self.raw] if self.raw is not None else []) + [b.to_dense() for b in self.blocks]
        return np.concatenate(parts)


def _as_rows(source) -> list:
    if isinstance(source, (str, os.PathLike)):
        return load_predictions(source)
    return list(source)


def build_stacked_dataset(
    base_predictions: Sequence,
    truth,
    vocab,
    raw_features: Mapping | None = None,
) -> list:
    """Join base-model predictions per video into stacked examples.

    ``base_predictions`` is an ordered list of prediction files (paths or lists
    of PredictionList); ``truth`` maps video_id to labels (empty sets are fine
    for unlabeled splits). ``raw_features`` optionally maps video_id to a dense
    feature vector placed before the expanded blocks.
    """
    if not base_predictions:
        raise ValueError("need at least one base prediction file")
    tables = []
    for src in base_predictions:
        rows = _as_rows(src)
        tables.append({r.video_id: r for r in rows})
    order = list(tables[0])
    ids = set(order)
    for i, table in enumerate(tables[1:], start=1):
        diff = ids.symmetric_difference(table)
        if diff:
            raise ValueError(
                f"base prediction file {i} covers different videos than file 0; "
                f"symmetric difference (first 10): {sorted(diff)[:10]}"
            )
    truth = as_truth(truth) if truth is not None else {}
    missing = [v for v in order if v not in truth]
    if truth and missing:
        raise ValueError(f"videos missing from ground truth: {sorted(missing)[:10]}")
    if raw_features is not None:
        absent = [v for v in order if v not in raw_features]
        if absent:
            raise ValueError(f"videos missing raw features: {sorted(absent)[:10]}")
    out = []
    for vid in order:
        blocks = tuple(expand_topk(t[vid], vocab) for t in tables)
        raw = None if raw_features is None else np.asarray(raw_features[vid], dtype=np.float64)
        out.append(StackedExample(vid, frozenset(truth.get(vid, ())), blocks, raw))
    return out


def stacked_matrix(examples: Sequence[StackedExample], vocab):
    """CSR feature matrix (raw features first, then blocks) and dense label matrix."""
    size = _vocab_size(vocab)
    if not examples:
        raise ValueError("empty stacked dataset")
    n_blocks = len(examples[0].blocks)
    raw_dim = 0 if examples[0].raw is None else examples[0].raw.shape[0]
    rows, cols, vals = [], [], []
    for r, ex in enumerate(examples):
        if len(ex.blocks) != n_blocks:
            raise ValueError(f"example {ex.video_id} has {len(ex.blocks)} blocks, expected {n_blocks}")
        if raw_dim:
            nz = np.flatnonzero(ex.raw)
            rows.extend([r] * nz.size)
            cols.extend(nz.tolist())
            vals.extend(ex.raw[nz].tolist())
        for b, block in enumerate(ex.blocks):
            offset = raw_dim + b * size
            rows.extend([r] * block.nnz)
            cols.extend(offset + i for i in block.indices)
            vals.extend(block.values)
    dim = raw_dim + n_blocks * size
    x = sp.csr_matrix((vals, (rows, cols)), shape=(len(examples), dim))
    x.sort_indices()
    y = label_matrix([ex.labels for ex in examples], size)
    return x, y


def blend_fit(
    stacked: Sequence[StackedExample],
    kind: str = "logistic",
    config: TrainConfig = TrainConfig(),
    *,
    vocab=None,
    block_names: Sequence[str] | None = None,
    history: list | None = None,
):
    """Train a logistic or MoE stacker on the holdout stacked dataset (sparse inputs)."""
    stacked = list(stacked)
    if not stacked:
        raise ValueError("empty stacked dataset")
    size = _vocab_size(vocab) if vocab is not None else stacked[0].blocks[0].size
    x, y = stacked_matrix(stacked, size)
    if kind == "logistic":
        params = logistic_train(x, y, config, history=history)
    elif kind == "moe":
        params = moe_train(x, y, config, history=history)
    else:
        raise ValueError(f"unknown stacker kind {kind!r}")
    n_blocks = len(stacked[0].blocks)
    raw_dim = 0 if stacked[0].raw is None else int(stacked[0].raw.shape[0])
    names = list(block_names) if block_names is not None else [f"base{i}" for i in range(n_blocks)]
    if len(names) != n_blocks:
        raise ValueError(f"{len(names)} block names for {n_blocks} blocks")
    params.config.update(level="stacked", blocks=names, raw_dim=raw_dim, stack_vocab=size)
    return params


def blend_scores(params, stacked: Sequence[StackedExample], block_names: Sequence[str] | None = None):
    cfg = params.config
    names = cfg.get("blocks")
    n_blocks = len(stacked[0].blocks)
    if names is not None:
        if n_blocks != len(names):
            raise FormatError(f"stacker expects {len(names)} blocks, got {n_blocks}")
        if block_names is not None and list(block_names) != list(names) and sorted(block_names) == sorted(names):
            raise FormatError(f"block order {list(block_names)} differs from training order {names}")
    raw_dim = 0 if stacked[0].raw is None else stacked[0].raw.shape[0]
    if raw_dim != cfg.get("raw_dim", raw_dim):
        raise FormatError(f"stacker expects {cfg['raw_dim']} raw features, got {raw_dim}")
    x, _ = stacked_matrix(stacked, cfg.get("stack_vocab", params.vocab_size))
    if x.shape[1] != params.input_dim:
        raise FormatError(f"stacked dimension {x.shape[1]} != stacker dimension {params.input_dim}")
    return predict_scores(params, x)


def blend_predict(
    params,
    stacked: Sequence[StackedExample],
    k_out: int = DEFAULT_TOP_K,
    block_names: Sequence[str] | None = None,
) -> list:
    """Score each stacked test example and keep its top ``k_out`` labels."""
    stacked = list(stacked)
    scores = blend_scores(params, stacked, block_names)
    return [PredictionList(ex.video_id, top_k(s, k_out)) for ex, s in zip(stacked, scores)]


# -- weighted averaging ------------------------------------------------------------------


@dataclass(frozen=True)
class Member:
    path: str
    weight: float = 1.0

    def __post_init__(self):
        w = float(self.weight)
        if not np.isfinite(w) or w <= 0:
            raise ValueError(f"member weight must be finite and > 0, got {self.weight}")
        object.__setattr__(self, "weight", w)


@dataclass
class EnsembleConfig:
    members: list
    k_out: int = DEFAULT_TOP_K
    name: str = ""
    description: str = ""

    def __post_init__(self):
        self.members = [m if isinstance(m, Member) else Member(*m) for m in self.members]
        if not self.members:
            raise ValueError("an ensemble needs at least one member")

    @classmethod
    def load(cls, path, members_dir=None) -> "EnsembleConfig":
        """Read a strategy file; relative member paths resolve against ``members_dir``
        (default: the config file's directory)."""
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        base = members_dir if members_dir is not None else os.path.dirname(os.path.abspath(path))
        members = [
            Member(os.path.join(base, m["path"]), m.get("weight", 1.0)) for m in doc["members"]
        ]
        return cls(members, int(doc.get("k_out", DEFAULT_TOP_K)), doc.get("name", ""), doc.get("description", ""))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "k_out": self.k_out,
            "members": [{"path": m.path, "weight": m.weight} for m in self.members],
        }


def weighted_average(config: EnsembleConfig, tables: Mapping | None = None) -> list:
    """Per (video, label): Σ w_m conf_m / Σ w_m, with unlisted pairs counting as 0.

    Members naming the same file are merged first (weights summed). The video
    universe is the union of all members, in first-appearance order.
    ``tables`` may supply already-parsed rows keyed by member path.
    """
    weights: dict = {}
    for m in config.members:
        weights[m.path] = weights.get(m.path, 0.0) + m.weight
    total = sum(weights.values())
    sums: dict = {}
    for path, w in weights.items():
        rows = tables[path] if tables is not None and path in tables else load_predictions(path)
        for row in rows:
            acc = sums.setdefault(row.video_id, {})
            for label, conf in row.pairs:
                acc[label] = acc.get(label, 0.0) + w * conf
    out = []
    for vid, acc in sums.items():
        labels = sorted(acc)
        merged = np.array([acc[l] / total for l in labels])
        if labels:
            pairs = tuple((labels[i], c) for i, c in top_k(merged, config.k_out))
        else:
            pairs = ()
        out.append(PredictionList(vid, pairs))
    return out


def strategy_path(name: str) -> str:
    key = name.lower().removeprefix("strategy_").removesuffix(".cfg")
    if key not in STRATEGY_NAMES:
        raise ValueError(f"unknown strategy {name!r}; expected one of {STRATEGY_NAMES}")
    return str(resources.files("vle").joinpath("strategies").joinpath(f"strategy_{key}.cfg"))


def load_strategy(name_or_path: str, members_dir=None) -> EnsembleConfig:
    """Shipped strategies (A-E) resolve members against ``members_dir`` (default cwd)."""
    if os.path.exists(name_or_path):
        return EnsembleConfig.load(name_or_path, members_dir)
    return EnsembleConfig.load(strategy_path(name_or_path), members_dir or os.getcwd())


def run_strategy(name_or_path: str, members_dir=None) -> list:
    config = load_strategy(name_or_path, members_dir)
    missing = [m.path for m in config.members if not os.path.exists(m.path)]
    if missing:
        raise FileNotFoundError(f"missing member prediction files: {missing}")
    return weighted_average(config)
