"""On-disk formats: JSON model files and the labels/segments CSVs.

Model parameters are written as decimal text with 17 significant digits,
which round-trips every float64 exactly; files are canonical, so
save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .call_classifier import CallClass, CallClassifierModel
from .detector import DetectorModel
from .errors import BadVersion, Corrupt, KindError, OverlapError, ParseError, ShapeMismatch
from .features import FeatureStats, MfccConfig
from .nnet import BiLstmNet, BiLstmStack, LinearHead, LstmLayer

FORMAT_VERSION = 1
KINDS = ("detector", "call_classifier")
LABEL_HEADER = ["file", "start_sec", "end_sec", "class"]
SEGMENT_HEADER = ["file", "start_sec", "end_sec", "score", "class", "prob"]


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

def format_float(v: float) -> str:
    if not math.isfinite(v):
        raise Corrupt(f"non-finite value {v!r} cannot be serialised")
    s = "%.17g" % v
    if not any(c in s for c in ".en"):
        s += ".0"
    return s


def _array_block(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "values": _Raw(",".join(format_float(v) for v in a.ravel()))}


class _Raw:
    """Pre-rendered JSON fragment spliced into the output verbatim."""

    def __init__(self, text):
        self.text = text


def _render(obj, indent=0) -> str:
    pad = "  " * (indent + 1)
    if isinstance(obj, _Raw):
        return "[" + obj.text + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {_render(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + "  " * indent + "}"
    if isinstance(obj, float):
        return format_float(obj)
    return json.dumps(obj)


def model_document(model) -> dict:
    if isinstance(model, DetectorModel):
        kind = "detector"
    elif isinstance(model, CallClassifierModel):
        kind = "call_classifier"
    else:
        raise TypeError(f"cannot serialise {type(model).__name__}")
    net = model.net
    stack = net.stack
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "mfcc": {k: (float(v) if isinstance(v, float) else v)
                 for k, v in model.mfcc.to_dict().items()},
        "stats": {"mean": _array_block(model.stats.mean), "std": _array_block(model.stats.std)},
        "architecture": {
            "layers": stack.num_layers,
            "hidden_per_direction": stack.hidden_size,
            "directions": 2,
            "input_size": stack.input_size,
            "gate_order": "ifgo",
            "head_shape": list(net.head.weight.shape),
            "pooling": "mean" if net.pool else "none",
        },
    }
    if kind == "detector":
        doc["decision_threshold"] = float(model.decision_threshold)
    doc["parameters"] = {name: _array_block(p) for name, p in net.parameters().items()}
    return doc


def dumps_model(model) -> str:
    return _render(model_document(model)) + "\n"


def save_model(model, path) -> None:
    Path(path).write_text(dumps_model(model))


def _read_array(block, name) -> np.ndarray:
    try:
        shape = tuple(int(n) for n in block["shape"])
        values = np.asarray(block["values"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise Corrupt(f"{name}: malformed array block ({exc})") from None
    if values.ndim != 1 or values.size != int(np.prod(shape)):
        raise ShapeMismatch(f"{name}: declared shape {list(shape)} but {values.size} values")
    if not np.all(np.isfinite(values)):
        raise Corrupt(f"{name}: non-finite values")
    return values.reshape(shape)


def loads_model(text: str, kind: str | None = None):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise Corrupt(f"model file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise Corrupt("model file must hold a JSON object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise BadVersion(f"unsupported format_version {doc.get('format_version')!r}")
    file_kind = doc.get("kind")
    if file_kind not in KINDS:
        raise KindError(f"unknown model kind {file_kind!r}")
    if kind is not None and file_kind != kind:
        raise KindError(f"expected a {kind} model, file holds a {file_kind} model")
    try:
        mfcc = MfccConfig.from_dict(doc["mfcc"])
        arch = doc["architecture"]
        n_layers = int(arch["layers"])
        params = doc["parameters"]
        stats = FeatureStats(_read_array(doc["stats"]["mean"], "stats.mean"),
                             _read_array(doc["stats"]["std"], "stats.std"))
        layers = [LstmLayer(*(_read_array(params[f"lstm.{k}.{p}"], f"lstm.{k}.{p}")
                              for p in "WUb")) for k in range(n_layers)]
        head = LinearHead(_read_array(params["head.weight"], "head.weight"),
                          _read_array(params["head.bias"], "head.bias"))
        net = BiLstmNet(BiLstmStack(layers), head, pool=arch["pooling"] == "mean")
    except KeyError as exc:
        raise Corrupt(f"model file missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ShapeMismatch):
            raise
        raise Corrupt(f"malformed model file: {exc}") from None
    if net.stack.hidden_size != arch.get("hidden_per_direction") or \
            list(head.weight.shape) != arch.get("head_shape") or \
            net.stack.input_size != mfcc.n_mfcc or len(stats.mean) != mfcc.n_mfcc:
        raise ShapeMismatch("parameter shapes disagree with the architecture block")
    try:
        if file_kind == "detector":
            return DetectorModel(mfcc, stats, net, float(doc.get("decision_threshold", 0.5)))
        return CallClassifierModel(mfcc, stats, net)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None


def load_model(path, kind: str | None = None):
    return loads_model(Path(path).read_text(), kind)


# ---------------------------------------------------------------------------
# labels and segments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelRow:
    file: str
    start_sec: float
    end_sec: float
    call_class: CallClass | None = None


@dataclass(frozen=True)
class SegmentRow:
    file: str
    start_sec: float
    end_sec: float
    score: float
    call_class: CallClass | None = None
    prob: float | None = None


def _parse_class(text, line):
    text = text.strip()
    if text == "":
        return None
    try:
        return CallClass(int(text))
    except ValueError:
        raise ParseError(f"class must be 0, 1, 2 or empty, got {text!r}", line) from None


def _parse_float(text, what, line):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"bad {what} {text!r}", line) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite {what}", line)
    return v


def _read_rows(path, header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            raise ParseError("missing header", 1)
        if [h.strip() for h in first] != header:
            raise ParseError(f"expected header {','.join(header)!r}", 1)
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} columns, got {len(row)}", line)
            yield line, row


def _check_overlaps(rows_with_lines, what):
    by_file = {}
    for line, r in rows_with_lines:
        by_file.setdefault(r.file, []).append((line, r))
    out = {}
    for f, items in by_file.items():
        items.sort(key=lambda it: (it[1].start_sec, it[1].end_sec))
        for (la, a), (lb, b) in zip(items, items[1:]):
            if b.start_sec < a.end_sec:
                raise OverlapError(
                    f"{what} for {f!r} overlap: line {la} [{a.start_sec}, {a.end_sec}] "
                    f"and line {lb} [{b.start_sec}, {b.end_sec}]"
                )
        out[f] = [r for _, r in items]
    return out


def read_labels(path) -> dict[str, list[LabelRow]]:
    """Events per file id, sorted by start time."""
    rows = []
    for line, (f, start, end, cls) in _read_rows(path, LABEL_HEADER):
        f = f.strip()
        if not f:
            raise ParseError("empty file id", line)
        s = _parse_float(start, "start_sec", line)
        e = _parse_float(end, "end_sec", line)
        if not s < e:
            raise ParseError(f"start_sec {s} must be < end_sec {e}", line)
        rows.append((line, LabelRow(f, s, e, _parse_class(cls, line))))
    return _check_overlaps(rows, "labels")


def write_labels(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_HEADER)
        for r in rows:
            cls = "" if r.call_class is None else int(r.call_class)
            w.writerow([r.file, f"{r.start_sec:.6f}", f"{r.end_sec:.6f}", cls])


def write_segments(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SEGMENT_HEADER)
        for r in rows:
            w.writerow([r.file, f"{r.start_sec:.6f}", f"{r.end_sec:.6f}", f"{r.score:.6f}",
                        "" if r.call_class is None else int(r.call_class),
                        "" if r.prob is None else f"{r.prob:.6f}"])


def read_segments(path) -> dict[str, list[SegmentRow]]:
    rows = []
    for line, (f, start, end, score, cls, prob) in _read_rows(path, SEGMENT_HEADER):
        s = _parse_float(start, "start_sec", line)
        e = _parse_float(end, "end_sec", line)
        if not s < e:
            raise ParseError(f"start_sec {s} must be < end_sec {e}", line)
        p = None if not prob.strip() else _parse_float(prob, "prob", line)
        rows.append((line, SegmentRow(f.strip(), s, e, _parse_float(score, "score", line),
                                      _parse_class(cls, line), p)))
    return _check_overlaps(rows, "segments")


def write_history(path, history) -> None:
    if not history:
        Path(path).write_text("")
        return
    keys = list(history[0])
    for row in history[1:]:
        keys.extend(k for k in row if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: _cell(row.get(k)) for k in keys})


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6f}"
    return v
