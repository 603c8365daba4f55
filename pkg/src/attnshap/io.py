"""Datasets, binary tensor files, reports and heatmap images.

Binary files share one container layout::

    b"ATTNSHAP" | u64 LE header length | UTF-8 JSON header | f64 LE blob

The header lists every array as ``{"name", "shape"}`` in blob order.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import io as _io
import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cav import Cav, SensitivityRecord
from .exceptions import DataError, InvalidInputError
from .shapley import AttributionResult
from .tensor import AttentionStack, GradientStack

MAGIC = b"ATTNSHAP"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
_F64 = np.dtype("<f8")


# ---------------------------------------------------------------------------
# provenance
# ---------------------------------------------------------------------------


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def config_hash(config):
    """SHA-256 of the canonical JSON form of ``config``."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def write_json(path, obj):
    """Deterministic pretty JSON (sorted keys, trailing newline)."""
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Record:
    """One dataset line: token ids or an image, with optional label/concept."""

    id: str
    token_ids: np.ndarray | None = None
    pixels: np.ndarray | None = None
    label: int | None = None
    concept: str | None = None

    def to_json(self):
        rec = {"id": self.id}
        if self.token_ids is not None:
            rec["token_ids"] = [int(t) for t in self.token_ids]
        else:
            rec["shape"] = list(self.pixels.shape)
            rec["pixels"] = base64.b64encode(self.pixels.astype(_F64).tobytes()).decode()
        if self.label is not None:
            rec["label"] = int(self.label)
        if self.concept is not None:
            rec["concept"] = self.concept
        return rec


def _parse_record(obj, lineno, vocab_size):
    where = f"line {lineno}"
    if not isinstance(obj, dict):
        raise DataError(f"{where}: record must be a JSON object")
    unknown = set(obj) - {"id", "token_ids", "pixels", "shape", "label", "concept"}
    if unknown:
        raise DataError(f"{where}: unknown fields {sorted(unknown)}")
    rid = str(obj.get("id", lineno))
    label = obj.get("label")
    if label is not None and (not isinstance(label, int) or isinstance(label, bool) or label < 0):
        raise DataError(f"{where}: label must be a non-negative integer")
    concept = obj.get("concept")
    if concept is not None and not isinstance(concept, str):
        raise DataError(f"{where}: concept must be a string")
    if ("token_ids" in obj) == ("pixels" in obj):
        raise DataError(f"{where}: exactly one of token_ids / pixels is required")
    if "token_ids" in obj:
        ids = obj["token_ids"]
        if (not isinstance(ids, list) or not ids
                or not all(isinstance(t, int) and not isinstance(t, bool) for t in ids)):
            raise DataError(f"{where}: token_ids must be a non-empty list of integers")
        arr = np.array(ids, dtype=np.int64)
        if arr.min() < 0:
            raise DataError(f"{where}: negative token id")
        if vocab_size is not None and arr.max() >= vocab_size:
            raise DataError(f"{where}: token id {int(arr.max())} >= vocab_size {vocab_size}")
        return Record(rid, token_ids=arr, label=label, concept=concept)
    try:
        shape = tuple(int(s) for s in obj["shape"])
        raw = base64.b64decode(obj["pixels"], validate=True)
        pixels = np.frombuffer(raw, dtype=_F64).reshape(shape).astype(np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{where}: bad image record ({exc})") from None
    return Record(rid, pixels=pixels, label=label, concept=concept)


def load_dataset(path, vocab_size=None):
    """Read a JSONL dataset, validating each line.

    Blank lines are skipped. Records must all be token records or all be
    image records. An empty file gives an empty list and a warning.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            rec = _parse_record(obj, lineno, vocab_size)
            if records and (rec.token_ids is None) != (records[0].token_ids is None):
                raise DataError(f"line {lineno}: mixes token and image records")
            records.append(rec)
    if not records:
        warnings.warn(f"dataset {path} is empty", stacklevel=2)
    return records


def save_dataset(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(canonical_json(rec.to_json()) + "\n")


def token_records(X, y=None, concept=None, prefix=""):
    """Wrap content-token sequences as :class:`Record` objects."""
    ys = [None] * len(X) if y is None else [int(v) for v in y]
    return [Record(f"{prefix}{i}", token_ids=np.asarray(x, dtype=np.int64), label=lab,
                   concept=concept) for i, (x, lab) in enumerate(zip(X, ys))]


# ---------------------------------------------------------------------------
# binary container
# ---------------------------------------------------------------------------


def write_tensors(path, header, arrays):
    """Write named float64 arrays plus a JSON header to ``path``."""
    names = list(arrays)
    meta = dict(header)
    meta["format_version"] = FORMAT_VERSION
    meta["arrays"] = [{"name": n, "shape": list(np.shape(arrays[n]))} for n in names]
    head = canonical_json(meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(head)))
        fh.write(head)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype=_F64).tobytes())


def read_tensors(path):
    """Inverse of :func:`write_tensors`: ``(header, {name: array})``."""
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not an ATTNSHAP tensor file")
    pos = len(MAGIC)
    if len(data) < pos + _LEN.size:
        raise DataError(f"{path}: truncated header")
    (hlen,) = _LEN.unpack_from(data, pos)
    pos += _LEN.size
    if len(data) < pos + hlen:
        raise DataError(f"{path}: truncated header")
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        specs = header["arrays"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: corrupt header ({exc})") from None
    pos += hlen
    blob = data[pos:]
    expected = sum(int(np.prod(s["shape"], dtype=np.int64)) for s in specs) * _F64.itemsize
    if len(blob) != expected:
        raise DataError(
            f"{path}: blob holds {len(blob)} bytes but the header describes {expected}"
        )
    arrays, off = {}, 0
    for s in specs:
        count = int(np.prod(s["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=_F64, count=count, offset=off).reshape(s["shape"])
        arrays[s["name"]] = arr.astype(np.float64)
        off += count * _F64.itemsize
    return header, arrays


def dump_trace(path, attention, grads=None, config_hash=None):
    """Store an attention stack (and optionally its gradient stack)."""
    L, H, N, _ = attention.shape
    header = {"L": L, "H": H, "N": N, "kind": "attention", "config_hash": config_hash}
    arrays = {"attention": attention.weights}
    if grads is not None:
        if grads.shape != attention.shape:
            raise InvalidInputError("gradient and attention stacks differ in shape")
        header["kind"] = "attention+gradient"
        header["class"] = int(grads.class_id)
        arrays["gradient"] = grads.grads
    write_tensors(path, header, arrays)


def load_trace(path):
    """Read a trace file: ``(AttentionStack, GradientStack or None)``."""
    header, arrays = read_tensors(path)
    try:
        dims = (int(header["L"]), int(header["H"]), int(header["N"]), int(header["N"]))
    except (KeyError, TypeError, ValueError):
        raise DataError(f"{path}: trace header lacks L/H/N") from None
    for name, arr in arrays.items():
        if arr.shape != dims:
            raise DataError(f"{path}: {name} has shape {arr.shape}, header says {dims}")
    if "attention" not in arrays:
        raise DataError(f"{path}: no attention array")
    attn = AttentionStack(arrays["attention"])
    grads = None
    if "gradient" in arrays:
        grads = GradientStack(arrays["gradient"], class_id=int(header.get("class", 0)))
    return attn, grads


def save_model(path, model, config_hash=None):
    """Checkpoint a fitted :class:`ToyTransformer` (hyperparameters + weights)."""
    model._check_ready()
    header = {
        "kind": "model",
        "params": model.get_params(),
        "loss_history": [float(v) for v in model.loss_history_],
        "config_hash": config_hash,
    }
    write_tensors(path, header, model.params_)


def load_model(path):
    from .transformer import ToyTransformer

    header, arrays = read_tensors(path)
    if header.get("kind") != "model":
        raise DataError(f"{path}: not a model checkpoint")
    model = ToyTransformer(**header["params"]).initialize()
    if set(arrays) != set(model.params_):
        raise DataError(f"{path}: parameter names do not match the configuration")
    for name, arr in arrays.items():
        if arr.shape != model.params_[name].shape:
            raise DataError(f"{path}: parameter {name} has shape {arr.shape}")
        model.params_[name] = arr
    model.loss_history_ = list(header.get("loss_history", []))
    return model


def save_cavs(path, cavs, config_hash=None):
    """Store CAVs: metadata in the header, directions as one ``(n, d)`` array."""
    if not cavs:
        raise InvalidInputError("no CAVs to save")
    header = {
        "kind": "cavs",
        "cavs": [{"concept": c.concept, "layer": c.layer, "accuracy": float(c.accuracy)}
                 for c in cavs],
        "config_hash": config_hash,
    }
    write_tensors(path, header, {"directions": np.stack([c.direction for c in cavs])})


def load_cavs(path):
    header, arrays = read_tensors(path)
    if header.get("kind") != "cavs":
        raise DataError(f"{path}: not a CAV file")
    dirs = arrays["directions"]
    if dirs.shape[0] != len(header["cavs"]):
        raise DataError(f"{path}: CAV count mismatch")
    return [Cav(m["concept"], int(m["layer"]), d, m["accuracy"])
            for m, d in zip(header["cavs"], dirs)]


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def write_csv(path, rows, columns):
    """CSV with ``repr``-exact floats, so identical runs give identical bytes."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(float(row[c])) if isinstance(row[c], float) else row[c]
                    for c in columns])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------

MIDPOINT = (255, 255, 255)


def heatmap_colors(values):
    """Diverging white-centred colours, scaled by ``max |value|`` of the input.

    Zero maps to white, the largest positive value to pure red and the most
    negative to pure blue.
    """
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("heatmap values must be finite")
    scale = np.abs(v).max() if v.size else 0.0
    t = v / scale if scale > 0 else np.zeros_like(v)
    fade = np.rint(255.0 * (1.0 - np.abs(t))).astype(np.int64)
    rgb = np.full(v.shape + (3,), 255, dtype=np.int64)
    pos, neg = t > 0, t < 0
    rgb[pos, 1] = fade[pos]
    rgb[pos, 2] = fade[pos]
    rgb[neg, 0] = fade[neg]
    rgb[neg, 1] = fade[neg]
    return rgb.astype(np.uint8)


def _values_of(record):
    if isinstance(record, AttributionResult):
        return record.scores
    if isinstance(record, SensitivityRecord):
        # drop the classification token so the cells are the original tokens
        return record.values[1:]
    return np.asarray(record, dtype=np.float64)


def emit_heatmap(record, path, layout=None, cell=8, config_hash=None):
    """Write a binary PPM (P6) heatmap.

    Parameters
    ----------
    record : AttributionResult, SensitivityRecord or array
        One value per original token (the classification token of a
        :class:`SensitivityRecord` is dropped).
    layout : (rows, cols), optional
        Patch grid for images; defaults to a one-row strip.
    cell : int
        Side of each square cell in pixels.
    """
    values = np.asarray(_values_of(record), dtype=np.float64).ravel()
    rows, cols = (1, values.size) if layout is None else (int(layout[0]), int(layout[1]))
    if rows * cols != values.size:
        raise InvalidInputError(f"layout {rows}x{cols} does not fit {values.size} values")
    rgb = heatmap_colors(values).reshape(rows, cols, 3)
    img = np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)
    comment = f"# config_hash={config_hash}\n" if config_hash else ""
    head = f"P6\n{comment}{cols * cell} {rows * cell}\n255\n".encode("ascii")
    Path(path).write_bytes(head + img.tobytes())


def read_ppm(path):
    """Read a P6 image written by :func:`emit_heatmap`: ``(rgb, comments)``."""
    data = Path(path).read_bytes()
    tokens, comments, pos = [], [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            end = data.index(b"\n", pos)
            comments.append(data[pos + 1:end].decode().strip())
            pos = end + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode())
        pos = end
    if tokens[0] != "P6":
        raise DataError(f"{path}: not a binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    pix = np.frombuffer(data[pos + 1:], dtype=np.uint8)
    if pix.size != w * h * 3:
        raise DataError(f"{path}: pixel data length mismatch")
    return pix.reshape(h, w, 3), comments
