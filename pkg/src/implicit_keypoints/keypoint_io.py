"""Keypoint files, annotation import and the deterministic JSON writer.

Keypoint file layout (keys always in this order)::

    {
      "format": "ikp-keypoints",
      "version": 1,
      "model_id": "shape_0000",
      "category": "synthetic",
      "radius": 0.080000000000000002,
      "label_count": 10,
      "keypoints": [
        {"xyz": [x, y, z], "semantic_id": 3},
        ...
      ]
    }

``semantic_id`` is omitted for unlabeled sets. Reals are written with 17
significant digits so values survive a round trip bit for bit; non-finite
reals are written as ``null``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import DEFAULT_RADIUS, KeypointSet

KEYPOINT_FORMAT = "ikp-keypoints"
KEYPOINT_VERSION = 1
IMPORT_LIMIT = 1.1


class ValidationError(ValueError):
    """Input that does not match a documented schema."""

    def __init__(self, message: str, problems: Optional[list] = None):
        super().__init__(message)
        self.problems = list(problems or [])


# -- deterministic JSON ------------------------------------------------------

def format_real(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    s = format(x, ".17g")
    if all(c in "-0123456789" for c in s):
        s += ".0"
    return s


def _scalar(v) -> Optional[str]:
    if v is None:
        return "null"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format_real(float(v))
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=False)
    return None


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON text with fixed real formatting; lists of scalars stay on one line."""
    s = _scalar(obj)
    if s is not None:
        return s
    pad, inner = " " * (indent * _level), " " * (indent * (_level + 1))
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        flat = [_scalar(v) for v in obj]
        if all(f is not None for f in flat):
            return "[" + ", ".join(flat) + "]"
        if all(isinstance(v, dict) and all(_scalar(x) is not None or _is_flat(x) for x in v.values())
               for v in obj):
            rows = [inner + _inline_dict(v) for v in obj]
        else:
            rows = [inner + dumps(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(rows) + "\n" + pad + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _is_flat(v) -> bool:
    return isinstance(v, (list, tuple, np.ndarray)) and all(_scalar(x) is not None for x in list(v))


def _inline_dict(d: dict) -> str:
    return "{" + ", ".join(f"{json.dumps(str(k))}: {dumps(v)}" for k, v in d.items()) + "}"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj) + "\n", encoding="utf-8")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


# -- keypoint files -----------------------------------------------------------

@dataclass(frozen=True)
class KeypointRecord:
    model_id: str
    keypoints: KeypointSet
    category: str = ""
    radius: float = DEFAULT_RADIUS

    def to_dict(self) -> dict:
        kps = self.keypoints
        rows = []
        for i, p in enumerate(kps.points):
            row = {"xyz": [float(c) for c in p]}
            if kps.labeled:
                row["semantic_id"] = int(kps.labels[i])
            rows.append(row)
        return {
            "format": KEYPOINT_FORMAT,
            "version": KEYPOINT_VERSION,
            "model_id": self.model_id,
            "category": self.category,
            "radius": float(self.radius),
            "label_count": int(kps.label_count),
            "keypoints": rows,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeypointRecord":
        if d.get("format") != KEYPOINT_FORMAT or d.get("version") != KEYPOINT_VERSION:
            raise ValidationError("not a keypoint file")
        try:
            rows = d["keypoints"]
            pts = np.array([r["xyz"] for r in rows], dtype=np.float64).reshape(-1, 3)
            has = ["semantic_id" in r for r in rows]
            labels = None
            if rows and all(has):
                labels = np.array([r["semantic_id"] for r in rows], dtype=np.int64)
            elif any(has):
                raise ValidationError("semantic_id present on some keypoints only")
            kps = KeypointSet(pts, labels, int(d.get("label_count", 0)))
            return cls(str(d["model_id"]), kps, str(d.get("category", "")), float(d["radius"]))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed keypoint file: {exc}") from exc


def write_keypoints(path, record: KeypointRecord) -> None:
    write_json(path, record.to_dict())


def read_keypoints(path) -> KeypointRecord:
    return KeypointRecord.from_dict(read_json(path))


# -- annotation import ----------------------------------------------------------

def _check_record(i: int, rec) -> tuple[list[str], Optional[tuple]]:
    """Problems with one annotation record, or the parsed fields."""
    where = f"record {i}"
    if not isinstance(rec, dict):
        return [f"{where}: not an object"], None
    model_id = rec.get("model_id")
    if not isinstance(model_id, str) or not model_id:
        return [f"{where}: model_id must be a nonempty string"], None
    where = f"record {i} ({model_id})"
    category = rec.get("category", rec.get("class_id", ""))
    if not isinstance(category, str):
        return [f"{where}: category must be a string"], None
    kps = rec.get("keypoints")
    if not isinstance(kps, list) or not kps:
        return [f"{where}: keypoints must be a nonempty list"], None
    problems, pts, ids = [], [], []
    for j, kp in enumerate(kps):
        xyz = kp.get("xyz") if isinstance(kp, dict) else None
        if (not isinstance(xyz, list) or len(xyz) != 3
                or not all(isinstance(c, (int, float)) and not isinstance(c, bool) and math.isfinite(c)
                           for c in xyz)):
            problems.append(f"{where}: keypoint {j}: xyz must be three finite numbers")
            continue
        sid = kp.get("semantic_id")
        if sid is not None and (not isinstance(sid, int) or isinstance(sid, bool) or sid < 0):
            problems.append(f"{where}: keypoint {j}: semantic_id must be a nonnegative integer")
            continue
        pts.append([float(c) for c in xyz])
        ids.append(sid)
    if problems:
        return problems, None
    if any(s is None for s in ids) and any(s is not None for s in ids):
        return [f"{where}: semantic_id present on some keypoints only"], None
    return [], (model_id, category, np.array(pts), None if ids[0] is None else np.array(ids))


def normalize_points(pts: np.ndarray, half: float) -> np.ndarray:
    """Center the bounding box at the origin and scale its largest half-extent to ``half``."""
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    ext = float((hi - lo).max()) / 2.0
    out = pts - (lo + hi) / 2.0
    return out * (half / ext) if ext > 0 else out


def import_annotations(data, normalize: bool = False, half: float = 0.85,
                       radius: float = DEFAULT_RADIUS) -> tuple[list[KeypointRecord], list[str]]:
    """Parse an annotation list; returns accepted records and a per-record report.

    The input is a list of ``{"model_id", "category" | "class_id",
    "keypoints": [{"xyz": [x, y, z], "semantic_id"?: int}, ...]}`` objects,
    or an object holding that list under ``"models"``. Extra keys are
    ignored. After optional normalization every coordinate must lie in
    ``[-1.1, 1.1]``.
    """
    if isinstance(data, dict) and "models" in data:
        data = data["models"]
    if not isinstance(data, list):
        raise ValidationError("annotation file must hold a list of records")
    parsed, report, seen = [], [], set()
    for i, rec in enumerate(data):
        problems, fields_ = _check_record(i, rec)
        if fields_ is not None:
            model_id, category, pts, ids = fields_
            if model_id in seen:
                problems = [f"record {i} ({model_id}): duplicate model_id"]
            else:
                if normalize:
                    pts = normalize_points(pts, half)
                if np.abs(pts).max() > IMPORT_LIMIT:
                    problems = [f"record {i} ({model_id}): coordinates outside [-1.1, 1.1]"]
        if problems:
            report.extend(problems)
            continue
        seen.add(model_id)
        parsed.append((model_id, category, pts, ids))
    label_counts: dict[str, int] = {}
    for _, category, _, ids in parsed:
        if ids is not None:
            label_counts[category] = max(label_counts.get(category, 0), int(ids.max()) + 1)
    records = [
        KeypointRecord(m, KeypointSet(p, ids, label_counts.get(c, 0) if ids is not None else 0), c, radius)
        for m, c, p, ids in parsed
    ]
    return records, report
