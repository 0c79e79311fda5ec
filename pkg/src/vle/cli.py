"""``vle`` command line: gen-data, train, predict, blend, average, evaluate.

Every command writes a ``<output>.manifest.json`` next to its output recording
the resolved configuration, seeds, paths, wall-clock time and final metrics.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import __version__, recordio
from .datamodel import DEFAULT_TOP_K, PredictionList, Vocabulary, ground_truth, top_k, validate_dataset
from .ensemble import EnsembleConfig, blend_fit, blend_predict, build_stacked_dataset, load_strategy, weighted_average
from .framelevel import FrameSampleConfig, frame_logistic_train, predict_frames, train_sequence_model
from .linear import LogisticParams, MoeParams, TrainConfig, logistic_train, moe_train, predict_scores, video_arrays
from .metrics import gap_at_k
from .synthgen import SynthSpec, gen_frame_level, gen_video_level, split_dataset

MODELS = ("logistic", "moe", "frame-logistic", "dbof", "lstm")
FRAME_MODELS = ("frame-logistic", "dbof", "lstm")
SPLITS = ("train", "validate", "test")


class CliError(Exception):
    """A user-facing failure; reported on stderr with exit code 1."""


def _env_seed():
    raw = os.environ.get("VLE_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"VLE_SEED must be an integer, got {raw!r}") from None


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    return str(obj)


def write_manifest(output_path, command, config, seeds, inputs, outputs, started, metrics):
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "wall_clock_seconds": round(time.time() - started, 3),
        "metrics": metrics,
    }
    path = f"{output_path}.manifest.json"
    with recordio.atomic_open(path) as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True, default=_jsonable)
        fh.write("\n")
    return path


def _load_json(path, what):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read {what} {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} {path} is not valid JSON: {exc}") from None


def _dataclass_from(cls, doc, what):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise CliError(f"unknown {what} keys: {unknown}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad {what}: {exc}") from None


# -- gen-data -------------------------------------------------------------------------


def cmd_gen_data(args):
    started = time.time()
    doc = _load_json(args.spec, "synthetic spec") if args.spec else {}
    spec = _dataclass_from(SynthSpec, doc, "synthetic spec")
    seed = _env_seed()
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    level = args.level or ("frame" if spec.task == "sequential" else "video")
    if level != "frame" and spec.task == "sequential":
        raise CliError("the sequential task only exists at frame level")
    synth = gen_video_level(spec) if level == "video" else gen_frame_level(spec)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    meta = {"spec": spec.to_dict()}
    for name, part in zip(SPLITS, split_dataset(synth.examples)):
        files = []
        if level in ("frame", "both"):
            files.append((f"{name}_frames.jsonl", part))
        if level in ("video", "both"):
            # frame means stand in for the video-level features
            files.append((f"{name}.jsonl", part if level == "video" else [ex.to_video() for ex in part]))
        for fname, records in files:
            path = os.path.join(args.out, fname)
            recordio.write_dataset(path, records, vocab_size=spec.vocab_size, meta={**meta, "split": name})
            outputs.append(path)
    planted_path = os.path.join(args.out, "planted.json")
    recordio.save_model(planted_path, synth.planted)
    outputs.append(planted_path)
    counts = dict(zip(SPLITS, map(len, split_dataset(synth.examples))))
    write_manifest(
        os.path.join(args.out, "gen-data"), "gen-data", {"spec": spec.to_dict(), "level": level},
        {"spec": spec.seed}, [args.spec] if args.spec else [], outputs, started, {"counts": counts},
    )
    print(json.dumps(counts))


# -- train -----------------------------------------------------------------------------


def _train_config(args) -> TrainConfig:
    doc = _load_json(args.config, "training config") if args.config else {}
    overrides = {
        "batch_size": args.batch_size,
        "epochs": args.epochs,
        "learning_rate": args.learning_rate,
        "lam": args.lam,
        "seed": args.seed,
        "experts": args.experts,
        "hidden": args.hidden,
        "layers": args.layers,
        "unroll": args.unroll,
        "up_width": args.up_width,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    env = _env_seed()
    if env is not None:
        doc["seed"] = env
    return _dataclass_from(TrainConfig, doc, "training config")


def _load_many(paths, level):
    examples, vocab = [], None
    for path in paths:
        header = recordio.read_header(path)
        if header.get("vocab_size") is not None:
            vocab = max(vocab or 0, int(header["vocab_size"]))
        examples.extend(recordio.read_dataset(path, expected_level=level))
    if not examples:
        raise CliError("no training examples in " + ", ".join(paths))
    return examples, vocab


def cmd_train(args):
    started = time.time()
    config = _train_config(args)
    level = "frame" if args.model in FRAME_MODELS else "video"
    examples, header_vocab = _load_many(args.data, level)
    vocab_size = args.vocab_size or header_vocab
    if vocab_size is None:
        raise CliError("vocabulary size unknown: pass --vocab-size or use datasets with a header")
    problems = validate_dataset(examples, Vocabulary(vocab_size))
    if problems:
        shown = "; ".join(f"record {v.index}: {v.message}" for v in problems[:5])
        raise CliError(f"{len(problems)} invalid records ({shown})")
    history: list = []
    sample = None
    if args.model in ("logistic", "moe"):
        x, y = video_arrays(examples, vocab_size, args.features)
        if args.model == "logistic":
            params = logistic_train(x, y, config, history=history, threads=args.threads)
        else:
            params = moe_train(x, y, config, history=history)
        params.config.update(level="video", features=args.features)
    elif args.model == "frame-logistic":
        sample = FrameSampleConfig(args.sample_frames, config.seed)
        params = frame_logistic_train(
            examples, vocab_size, config, sample, args.features, history=history, threads=args.threads
        )
    else:
        params = train_sequence_model(args.model, examples, vocab_size, config, args.features, history=history)
    params.config["model"] = args.model
    recordio.save_model(args.out, params)
    dim = next(iter(params.dims().values()))
    final_loss = float(np.mean(history[-10:])) if history else None
    resolved = {
        "model": args.model,
        "features": args.features,
        "input_dim": dim,
        "vocab_size": vocab_size,
        "train": config.to_dict(),
        "threads": args.threads,
    }
    if sample is not None:
        resolved["sample_frames"] = dataclasses.asdict(sample)
    write_manifest(
        args.out, "train", resolved, {"train": config.seed}, args.data, [args.out], started,
        {"final_training_loss": final_loss, "steps": len(history), "examples": len(examples)},
    )
    print(f"trained {args.model} on {len(examples)} examples; final loss {final_loss:.5f}" if history else "trained")


# -- predict ---------------------------------------------------------------------------


def _model_level(params) -> str:
    return params.config.get("level", "video")


def model_scores(params, examples) -> np.ndarray:
    features = params.config.get("features", "both")
    if _model_level(params) == "frame":
        return predict_frames(params, examples, features)
    if not isinstance(params, (LogisticParams, MoeParams)):
        raise CliError(f"cannot predict with a {params.kind!r} model")
    x = np.stack([ex.features(features) for ex in examples])
    return predict_scores(params, x)


def cmd_predict(args):
    started = time.time()
    params = recordio.load_model(args.model)
    level = _model_level(params)
    if level == "stacked":
        raise CliError("stacker models are applied with the blend command")
    examples = list(recordio.read_dataset(args.data, expected_level=level))
    rows = []
    if examples:
        scores = model_scores(params, examples)
        rows = [PredictionList(ex.video_id, top_k(s, args.top_k)) for ex, s in zip(examples, scores)]
    recordio.write_predictions(args.out, rows, args.top_k)
    write_manifest(
        args.out, "predict", {"model_kind": params.kind, "model_config": params.config, "top_k": args.top_k},
        {}, [args.model, args.data], [args.out], started, {"rows": len(rows)},
    )


# -- blend -----------------------------------------------------------------------------


def _stem(path) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def cmd_blend(args):
    started = time.time()
    if len(args.bases) != len(args.test_bases):
        raise CliError(f"{len(args.bases)} holdout bases but {len(args.test_bases)} test bases")
    config = _train_config(args)
    header = recordio.read_header(args.holdout_data)
    vocab_size = args.vocab_size or header.get("vocab_size")
    if vocab_size is None:
        raise CliError("vocabulary size unknown: pass --vocab-size or use a holdout dataset with a header")
    holdout_examples = list(recordio.read_dataset(args.holdout_data))
    truth = ground_truth(holdout_examples)
    names = args.names or [_stem(p) for p in args.bases]
    if len(names) != len(args.bases):
        raise CliError(f"{len(names)} --names for {len(args.bases)} bases")
    raw_holdout = raw_test = None
    if args.raw_features:
        if not args.test_data:
            raise CliError("--raw-features needs --test-data")
        raw_holdout = {ex.video_id: _video_features(ex) for ex in holdout_examples}
        raw_test = {ex.video_id: _video_features(ex) for ex in recordio.read_dataset(args.test_data)}
    holdout = build_stacked_dataset(args.bases, truth, vocab_size, raw_holdout)
    params = blend_fit(holdout, args.stacker, config, vocab=vocab_size, block_names=names)
    holdout_rows = blend_predict(params, holdout, args.top_k, names)
    holdout_gap = gap_at_k({r.video_id: r for r in holdout_rows}, truth, args.top_k)
    test = build_stacked_dataset(args.test_bases, None, vocab_size, raw_test)
    rows = blend_predict(params, test, args.top_k, names)
    recordio.write_predictions(args.out, rows, args.top_k)
    outputs = [args.out]
    if args.save_model:
        recordio.save_model(args.save_model, params)
        outputs.append(args.save_model)
    write_manifest(
        args.out, "blend",
        {"stacker": args.stacker, "blocks": names, "vocab_size": vocab_size, "train": config.to_dict(),
         "raw_features": bool(args.raw_features), "top_k": args.top_k},
        {"train": config.seed}, [*args.bases, args.holdout_data, *args.test_bases], outputs, started,
        {"holdout_gap": holdout_gap},
    )
    print(f"holdout GAP {holdout_gap:.5f}")


def _video_features(example):
    return example.to_video().features() if hasattr(example, "to_video") else example.features()


# -- average / evaluate ---------------------------------------------------------------


def cmd_average(args):
    started = time.time()
    config = load_strategy(args.config, args.members_dir)
    missing = [m.path for m in config.members if not os.path.exists(m.path)]
    if missing:
        raise CliError(f"missing member prediction files: {missing}")
    if args.top_k is not None:
        config = EnsembleConfig(config.members, args.top_k, config.name, config.description)
    rows = weighted_average(config)
    recordio.write_predictions(args.out, rows, config.k_out)
    write_manifest(
        args.out, "average", config.to_dict(), {}, [m.path for m in config.members], [args.out], started,
        {"rows": len(rows)},
    )


def cmd_evaluate(args):
    started = time.time()
    rows = recordio.load_predictions(args.predictions)
    truth = ground_truth(recordio.read_dataset(args.truth))
    try:
        gap = gap_at_k({r.video_id: r for r in rows}, truth, args.k)
    except KeyError as exc:
        raise CliError(f"prediction for unknown video id {exc.args[0]!r}") from None
    if args.manifest:
        write_manifest(
            args.predictions, "evaluate", {"k": args.k}, {}, [args.predictions, args.truth], [], started,
            {"gap": gap},
        )
    print(f"{gap:.5f}")


# -- parser ----------------------------------------------------------------------------


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--config", help="JSON file with training config fields")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--lam", type=float, help="L2 penalty")
    g.add_argument("--seed", type=int)
    g.add_argument("--experts", type=int, help="MoE expert count")
    g.add_argument("--hidden", type=int, help="LSTM hidden size")
    g.add_argument("--layers", type=int, help="LSTM depth")
    g.add_argument("--unroll", type=int, help="LSTM frames per video")
    g.add_argument("--up-width", type=int, help="DBoF up-projection width")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vle", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--threads", type=int, default=os.cpu_count() or 1, help="worker threads (default: all cores)"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic train/validate/test dataset")
    p.add_argument("--spec", help="JSON file of synthetic spec fields (default spec if omitted)")
    p.add_argument(
        "--level", choices=("video", "frame", "both"),
        help="video: <split>.jsonl; frame: <split>_frames.jsonl; both: frame files plus their frame means",
    )
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit a model")
    p.add_argument("--model", required=True, choices=MODELS)
    p.add_argument("--features", default="both", choices=("rgb", "audio", "both"))
    p.add_argument("--data", required=True, nargs="+", help="one or more dataset files")
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--sample-frames", type=int, default=20, help="frames sampled per video (frame-logistic)")
    p.add_argument("--out", required=True, help="model file")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write top-k predictions for a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top-k", type=int, default=DEFAULT_TOP_K)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("blend", help="fit a stacker on holdout predictions and apply it to test predictions")
    p.add_argument("--bases", required=True, nargs="+", help="base predictions on the holdout split")
    p.add_argument("--holdout-data", required=True, help="holdout dataset (labels)")
    p.add_argument("--test-bases", required=True, nargs="+", help="base predictions on the test split, same order")
    p.add_argument("--stacker", default="logistic", choices=("logistic", "moe"))
    p.add_argument("--names", nargs="+", help="block names (default: file stems of --bases)")
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--raw-features", action="store_true", help="also feed mean rgb+audio to the stacker")
    p.add_argument("--test-data", help="test dataset (needed with --raw-features)")
    p.add_argument("--save-model", help="also save the stacker")
    p.add_argument("--top-k", type=int, default=DEFAULT_TOP_K)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_blend)

    p = sub.add_parser("average", help="weighted average of prediction files")
    p.add_argument("--config", required=True, help="strategy name (a-e) or config file")
    p.add_argument("--members-dir", help="directory member paths resolve against")
    p.add_argument("--top-k", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_average)

    p = sub.add_parser("evaluate", help="print GAP of a prediction file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--truth", required=True, help="labelled dataset")
    p.add_argument("--k", type=int, default=DEFAULT_TOP_K)
    p.add_argument("--manifest", action="store_true", help="write <predictions>.manifest.json")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        args.func(args)
    except (CliError, ValueError, KeyError, TypeError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"vle {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
