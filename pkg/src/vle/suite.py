"""End-to-end synthetic benchmark: base models, blending, and strategies A-E.

Every member writes a real prediction file into ``workdir`` so the strategy
configs run through exactly the same code path as the ``average`` command.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace


from . import recordio
from .datamodel import PredictionList, ground_truth, top_k
from .ensemble import STRATEGY_NAMES, EnsembleConfig, Member, blend_fit, blend_predict, build_stacked_dataset, load_strategy, weighted_average
from .framelevel import predict_frames, train_sequence_model
from .linear import TrainConfig, logistic_train, moe_train, predict_scores, video_arrays
from .metrics import gap_at_k
from .synthgen import SynthSpec, gen_frame_level, split_dataset

SUITE_SPEC = SynthSpec(
    seed=7,
    n_videos=3000,
    d_rgb=16,
    d_audio=8,
    vocab_size=16,
    mean_labels=3.4,
    min_frames=4,
    max_frames=10,
    frame_noise=0.5,
    task="mixture",
    mixture_linear=2.0,
    parent_labels=4,
)


@dataclass
class SuiteConfig:
    spec: SynthSpec = field(default_factory=lambda: replace(SUITE_SPEC))
    video: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=32, epochs=30, learning_rate=0.1))
    dbof: TrainConfig = field(
        default_factory=lambda: TrainConfig(batch_size=32, epochs=20, learning_rate=0.05, up_width=64)
    )
    dbof_tuned: TrainConfig = field(
        default_factory=lambda: TrainConfig(batch_size=32, epochs=30, learning_rate=0.05, up_width=128, seed=1)
    )
    lstm: TrainConfig = field(
        default_factory=lambda: TrainConfig(batch_size=32, epochs=15, learning_rate=0.05, lam=1e-3, hidden=32, layers=1, unroll=60)
    )
    stacker_logistic: TrainConfig = field(
        default_factory=lambda: TrainConfig(batch_size=32, epochs=100, learning_rate=0.3)
    )
    stacker_moe: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=32, epochs=80, learning_rate=0.1))
    raw_features: bool = False  # append mean rgb+audio to the stacked inputs
    k: int = 20


def _rows(video_ids, scores, k):
    return [PredictionList(v, top_k(s, k)) for v, s in zip(video_ids, scores)]


def run_suite(workdir, config: SuiteConfig | None = None, log=print) -> dict:
    """Train every member, blend, average, and return test-split GAPs keyed by file stem."""
    config = config or SuiteConfig()
    spec, k = config.spec, config.k
    os.makedirs(workdir, exist_ok=True)
    t0 = time.time()
    frames, _, _ = gen_frame_level(spec)
    train, val, test = split_dataset(frames)
    videos = {name: [ex.to_video() for ex in part] for name, part in (("train", train), ("val", val), ("test", test))}
    truth_val = ground_truth(val)
    truth_test = ground_truth(test)
    n_labels = spec.vocab_size
    ids = {"val": [ex.video_id for ex in val], "test": [ex.video_id for ex in test]}

    def write(name, rows):
        path = os.path.join(workdir, f"{name}.csv")
        recordio.write_predictions(path, rows, k)
        return path

    results = {}

    def score(name, rows):
        results[name] = gap_at_k({r.video_id: r for r in rows}, truth_test, k)
        log(f"{name:24s} {results[name]:.5f}  ({time.time() - t0:.1f}s)")

    # video-level bases: fit on train, predict validate (blending holdout) and test
    x_train, y_train = video_arrays(videos["train"], n_labels)
    x_val, _ = video_arrays(videos["val"], n_labels)
    x_test, _ = video_arrays(videos["test"], n_labels)
    bases = {
        "video_logistic": logistic_train(x_train, y_train, config.video),
        "video_moe": moe_train(x_train, y_train, config.video),
    }
    for name, params in bases.items():
        write(f"{name}_val", _rows(ids["val"], predict_scores(params, x_val), k))
        rows = _rows(ids["test"], predict_scores(params, x_test), k)
        write(name, rows)
        score(name, rows)

    # frame-level bases
    frame_models = {
        "frame_dbof_1": ("dbof", train + val, config.dbof),
        "frame_dbof_2": ("dbof", train, config.dbof),
        "frame_dbof_tuned": ("dbof", train, config.dbof_tuned),
        "frame_lstm": ("lstm", train, config.lstm),
    }
    for name, (kind, data, cfg) in frame_models.items():
        params = train_sequence_model(kind, data, n_labels, cfg)
        rows = _rows(ids["test"], predict_frames(params, test), k)
        write(name, rows)
        score(name, rows)

    # blending: stackers fit on the validate split only
    raw_val = raw_test = None
    if config.raw_features:
        raw_val = {ex.video_id: ex.features() for ex in videos["val"]}
        raw_test = {ex.video_id: ex.features() for ex in videos["test"]}
    stacker_configs = {"logistic": config.stacker_logistic, "moe": config.stacker_moe}
    inputs = {"lm": ["video_logistic", "video_moe"], "m": ["video_moe"]}
    for stacker in ("logistic", "moe"):
        for tag, names in inputs.items():
            holdout = build_stacked_dataset(
                [os.path.join(workdir, f"{n}_val.csv") for n in names], truth_val, n_labels, raw_val
            )
            params = blend_fit(holdout, stacker, stacker_configs[stacker], vocab=n_labels, block_names=names)
            stacked_test = build_stacked_dataset(
                [os.path.join(workdir, f"{n}.csv") for n in names], truth_test, n_labels, raw_test
            )
            rows = blend_predict(params, stacked_test, k)
            name = f"blend_{stacker}_{tag}"
            write(name, rows)
            score(name, rows)

    tables = {}
    for key in STRATEGY_NAMES:
        cfg = load_strategy(key, workdir)
        for m in cfg.members:
            if m.path not in tables:
                tables[m.path] = recordio.load_predictions(m.path)
        rows = weighted_average(cfg, tables)
        write(f"strategy_{key}", rows)
        score(f"strategy_{key}", rows)
    uniform = EnsembleConfig([Member(m.path, 1.0) for m in load_strategy("e", workdir).members], k)
    rows = weighted_average(uniform, tables)
    write("strategy_e_uniform", rows)
    score("strategy_e_uniform", rows)
    return results


def member_names(strategy: str) -> list:
    return [os.path.splitext(os.path.basename(m.path))[0] for m in load_strategy(strategy, "").members]
