"""Text file formats for datasets, prediction files, stacked datasets and models.

Dataset files are newline-delimited JSON. The first line is an optional header
object carrying ``"format": "vle-dataset"``; every other line is one record::

    {"video_id": "v1", "labels": [3, 7], "mean_rgb": [...], "mean_audio": [...]}
    {"video_id": "v1", "labels": [3], "rgb": [[...], ...], "audio": [[...], ...]}

Reals are written with 9 significant digits. Prediction files are CSV with the
header ``VideoId,LabelConfidencePairs`` and 6-decimal confidences. Model files
are one JSON document whose arrays are base64-encoded little-endian float64.
"""

from __future__ import annotations

import base64
import contextlib
import json
import os
import tempfile
from typing import Iterable, Iterator

import numpy as np

from .datamodel import FrameExample, PredictionList, VideoExample, canonical_pairs

DATASET_FORMAT = "vle-dataset"
PREDICTION_HEADER = "VideoId,LabelConfidencePairs"
MODEL_FORMAT = "vle-model"


class RecordParseError(ValueError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class FormatError(ValueError):
    """File is well-formed but of the wrong level, kind or shape."""


class LevelMismatchError(FormatError):
    pass


class ModelKindError(FormatError):
    pass


@contextlib.contextmanager
def atomic_open(path, mode="w"):
    """Write to a temp file beside ``path`` and rename it into place on success."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, mode, encoding=None if "b" in mode else "utf-8", newline="") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def _num(x: float) -> str:
    x = float(x)
    if not np.isfinite(x):
        raise FormatError(f"non-finite value {x} cannot be serialized")
    if x == 0.0:
        # "-0" would parse as the integer 0 and lose the sign
        return "-0.0" if np.signbit(x) else "0"
    return format(x, ".9g")


def _vec(v) -> str:
    return "[" + ",".join(_num(x) for x in v) + "]"


def _mat(m) -> str:
    return "[" + ",".join(_vec(row) for row in m) + "]"


def _level(example) -> str:
    if isinstance(example, VideoExample):
        return "video"
    if isinstance(example, FrameExample):
        return "frame"
    raise TypeError(f"not an example: {type(example).__name__}")


def _dims(example):
    if isinstance(example, VideoExample):
        return example.mean_rgb.shape[0], example.mean_audio.shape[0]
    return example.rgb.shape[1], example.audio.shape[1]


def encode_example(example) -> str:
    head = (
        '{"video_id":' + json.dumps(example.video_id)
        + ',"labels":' + json.dumps(sorted(example.labels))
    )
    if isinstance(example, VideoExample):
        return head + ',"mean_rgb":' + _vec(example.mean_rgb) + ',"mean_audio":' + _vec(example.mean_audio) + "}"
    return head + ',"rgb":' + _mat(example.rgb) + ',"audio":' + _mat(example.audio) + "}"


def decode_example(obj: dict):
    if "mean_rgb" in obj:
        return VideoExample(obj["video_id"], obj["labels"], obj["mean_rgb"], obj["mean_audio"])
    if "rgb" in obj:
        return FrameExample(obj["video_id"], obj["labels"], obj["rgb"], obj["audio"])
    raise KeyError("record has neither mean_rgb nor rgb")


def write_dataset(path, examples: Iterable, *, vocab_size: int | None = None, meta: dict | None = None):
    examples = list(examples)
    levels = {_level(ex) for ex in examples}
    if len(levels) > 1:
        raise FormatError("dataset mixes video-level and frame-level records")
    dims = {_dims(ex) for ex in examples}
    if len(dims) > 1:
        raise FormatError(f"dataset has ragged feature dimensions: {sorted(dims)}")
    header = {"format": DATASET_FORMAT, "version": 1}
    if examples:
        header["level"] = levels.pop()
        rgb, audio = dims.pop()
        header["dims"] = {"rgb": rgb, "audio": audio}
    if vocab_size is not None:
        header["vocab_size"] = int(vocab_size)
    if meta:
        header["meta"] = meta
    with atomic_open(path) as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ex in examples:
            fh.write(encode_example(ex) + "\n")


def read_header(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if not first.strip():
        return {}
    try:
        obj = json.loads(first)
    except json.JSONDecodeError:
        return {}
    return obj if obj.get("format") == DATASET_FORMAT else {}


def read_dataset(path, expected_level: str | None = None) -> Iterator:
    """Yield examples in file order, checking level and dimensions as it goes."""
    dims = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordParseError(path, line_no, f"malformed record ({exc.msg})") from None
            if obj.get("format") == DATASET_FORMAT:
                level = obj.get("level")
                if expected_level and level and level != expected_level:
                    raise LevelMismatchError(
                        f"{path}: expected {expected_level}-level data, file is {level}-level"
                    )
                if "dims" in obj:
                    dims = (obj["dims"]["rgb"], obj["dims"]["audio"])
                continue
            try:
                ex = decode_example(obj)
            except (KeyError, TypeError, ValueError) as exc:
                raise RecordParseError(path, line_no, f"invalid record: {exc}") from None
            level = _level(ex)
            if expected_level and level != expected_level:
                raise LevelMismatchError(
                    f"{path}:{line_no}: expected {expected_level}-level record, found {level}-level"
                )
            if isinstance(ex, FrameExample) and ex.rgb.shape[0] != ex.audio.shape[0]:
                raise RecordParseError(path, line_no, "rgb and audio frame counts differ")
            if dims is None:
                dims = _dims(ex)
            elif _dims(ex) != dims:
                raise RecordParseError(
                    path, line_no, f"feature dims {_dims(ex)} differ from {dims}"
                )
            yield ex


def load_dataset(path, expected_level: str | None = None) -> list:
    return list(read_dataset(path, expected_level))


# -- prediction files -------------------------------------------------------


def format_prediction_row(row: PredictionList) -> str:
    tokens = []
    for label, conf in row.pairs:
        tokens.append(str(label))
        tokens.append(f"{conf:.6f}")
    return f"{row.video_id}," + " ".join(tokens)


def write_predictions(path, rows: Iterable, k: int = 20):
    rows = [r if isinstance(r, PredictionList) else PredictionList(*r) for r in rows]
    seen = set()
    for r in rows:
        if r.video_id in seen:
            raise FormatError(f"duplicate video id {r.video_id!r} in predictions")
        if "," in r.video_id or "\n" in r.video_id:
            raise FormatError(f"video id {r.video_id!r} cannot be written to CSV")
        seen.add(r.video_id)
    with atomic_open(path) as fh:
        fh.write(PREDICTION_HEADER + "\n")
        for r in rows:
            fh.write(format_prediction_row(r.truncate(k)) + "\n")


def parse_predictions(path) -> tuple:
    """Read a prediction file.

    Returns ``(rows, repaired)`` where ``repaired`` counts rows whose pairs were
    not in canonical order and had to be re-sorted.
    """
    rows = []
    repaired = 0
    seen = set()
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n")
        if header != PREDICTION_HEADER:
            raise RecordParseError(path, 1, f"expected header {PREDICTION_HEADER!r}, got {header!r}")
        for line_no, line in enumerate(fh, start=2):
            line = line.rstrip("\r\n")
            if not line:
                continue
            video_id, sep, field = line.partition(",")
            if not sep:
                raise RecordParseError(path, line_no, f"row {video_id!r} has no pairs field")
            tokens = field.split()
            if len(tokens) % 2:
                raise RecordParseError(
                    path, line_no, f"row {video_id!r} has an odd number of tokens ({len(tokens)})"
                )
            try:
                pairs = [(int(tokens[i]), float(tokens[i + 1])) for i in range(0, len(tokens), 2)]
            except ValueError as exc:
                raise RecordParseError(path, line_no, f"row {video_id!r}: {exc}") from None
            ordered = canonical_pairs(pairs)
            if tuple(pairs) != ordered:
                repaired += 1
            if video_id in seen:
                raise RecordParseError(path, line_no, f"duplicate video id {video_id!r}")
            seen.add(video_id)
            try:
                rows.append(PredictionList(video_id, ordered))
            except ValueError as exc:
                raise RecordParseError(path, line_no, str(exc)) from None
    return rows, repaired


def load_predictions(path) -> list:
    return parse_predictions(path)[0]


# -- stacked (blending) datasets ---------------------------------------------


def write_stacked(path, examples: Iterable, block_names, vocab_size: int):
    """Write a stacked dataset; each block is stored sparse as ``<name>_newfeature`` pairs."""
    block_names = list(block_names)
    header = {
        "format": DATASET_FORMAT,
        "version": 1,
        "level": "stacked",
        "blocks": block_names,
        "vocab_size": int(vocab_size),
    }
    with atomic_open(path) as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ex in examples:
            parts = [
                '{"video_id":' + json.dumps(ex.video_id),
                '"labels":' + json.dumps(sorted(ex.labels)),
            ]
            for name, block in zip(block_names, ex.blocks):
                pairs = ",".join(f"[{i},{_num(v)}]" for i, v in zip(block.indices, block.values))
                parts.append(json.dumps(f"{name}_newfeature") + ":[" + pairs + "]")
            if ex.raw is not None:
                parts.append('"features":' + _vec(ex.raw))
            fh.write(",".join(parts) + "}\n")


def read_stacked(path) -> tuple:
    """Return ``(examples, block_names, vocab_size)`` for a stacked dataset file."""
    from .ensemble import SparseStackFeature, StackedExample

    header = read_header(path)
    if header.get("level") != "stacked":
        raise LevelMismatchError(f"{path} is not a stacked dataset")
    names = header["blocks"]
    vocab = header["vocab_size"]
    out = []
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        for line_no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                blocks = tuple(
                    SparseStackFeature(
                        tuple(int(i) for i, _ in obj[f"{n}_newfeature"]),
                        tuple(float(v) for _, v in obj[f"{n}_newfeature"]),
                        vocab,
                    )
                    for n in names
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise RecordParseError(path, line_no, f"invalid stacked record: {exc}") from None
            raw = np.asarray(obj["features"], dtype=np.float64) if "features" in obj else None
            out.append(StackedExample(obj["video_id"], frozenset(obj["labels"]), blocks, raw))
    return out, names, vocab


# -- model files -------------------------------------------------------------


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {
        "shape": list(arr.shape),
        "dtype": "<f8",
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype=obj.get("dtype", "<f8")).astype(np.float64).reshape(obj["shape"])


def save_model(path, params):
    arrays = params.named_arrays()
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"array {name!r} contains non-finite values")
    doc = {
        "format": MODEL_FORMAT,
        "kind": params.kind,
        "vocab_size": params.vocab_size,
        "dims": params.dims(),
        "config": params.config,
        "weights": {name: _encode_array(arr) for name, arr in arrays.items()},
    }
    with atomic_open(path) as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path, expected_kind: str | None = None):
    from .params import bundle_class

    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise RecordParseError(path, exc.lineno, f"malformed model file ({exc.msg})") from None
    if doc.get("format") != MODEL_FORMAT:
        raise FormatError(f"{path} is not a model file")
    kind = doc["kind"]
    if expected_kind is not None and kind != expected_kind:
        raise ModelKindError(f"{path} holds a {kind!r} model, expected {expected_kind!r}")
    cls = bundle_class(kind)
    arrays = {name: _decode_array(obj) for name, obj in doc["weights"].items()}
    return cls.from_arrays(arrays, doc.get("config", {}))
