"""Skeletal motion sequences: data model, JSONL ingestion and joint angles.

A sequence is stored as a dense ``(T, J, 3)`` array of ``(x, y, confidence)``
rows; :class:`Frame` objects are materialised on demand for per-frame work.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

DEGENERATE_TOL = 1e-9


class SkeletonError(ValueError):
    """Raised for malformed skeleton input or impossible angle geometry."""


class JointId(str, Enum):
    HIP_L = "hip_l"
    HIP_R = "hip_r"
    KNEE_L = "knee_l"
    KNEE_R = "knee_r"
    ANKLE_L = "ankle_l"
    ANKLE_R = "ankle_r"
    SHOULDER_L = "shoulder_l"
    SHOULDER_R = "shoulder_r"
    ELBOW_L = "elbow_l"
    ELBOW_R = "elbow_r"
    WRIST_L = "wrist_l"
    WRIST_R = "wrist_r"
    NECK = "neck"
    PELVIS = "pelvis"
    TOE_L = "toe_l"
    TOE_R = "toe_r"
    HEEL_L = "heel_l"
    HEEL_R = "heel_r"

    @classmethod
    def parse(cls, name: str) -> "JointId":
        try:
            return cls(name)
        except ValueError:
            raise SkeletonError(f"unknown joint {name!r}") from None


JOINT_ORDER: tuple[JointId, ...] = tuple(JointId)


@dataclass(frozen=True)
class Frame:
    index: int
    keypoints: Mapping[JointId, tuple[float, float, float]]


@dataclass(frozen=True)
class AngleDefinition:
    """Interior angle at vertex ``b`` between rays ``b->a`` and ``b->c``."""

    name: str
    a: JointId
    b: JointId
    c: JointId

    def __post_init__(self):
        if len({self.a, self.b, self.c}) != 3:
            raise SkeletonError(f"angle {self.name!r}: joints must be pairwise distinct")

    @classmethod
    def from_dict(cls, d: Mapping) -> "AngleDefinition":
        try:
            return cls(str(d["name"]), JointId.parse(d["a"]), JointId.parse(d["b"]), JointId.parse(d["c"]))
        except KeyError as exc:
            raise SkeletonError(f"angle definition missing field {exc}") from None

    def to_dict(self) -> dict:
        return {"name": self.name, "a": self.a.value, "b": self.b.value, "c": self.c.value}


@dataclass(frozen=True)
class Provenance:
    """Which keypoints were filled by interpolation during parsing."""

    interpolated: tuple[tuple[int, str], ...] = ()
    first_source_index: int = 0


@dataclass(frozen=True)
class SkeletonSequence:
    joints: tuple[JointId, ...]
    data: np.ndarray  # (T, J, 3): x, y, confidence
    fps: float
    subject_id: str = ""
    provenance: Provenance = field(default_factory=Provenance)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3 or data.shape[1] != len(self.joints) or data.shape[2] != 3:
            raise SkeletonError(f"data shape {data.shape} does not match {len(self.joints)} joints")
        if not self.fps > 0:
            raise SkeletonError("fps must be positive")
        conf = data[:, :, 2]
        if np.any((conf < 0) | (conf > 1)) or not np.all(np.isfinite(data)):
            raise SkeletonError("confidence must lie in [0, 1] and coordinates must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def joint_index(self, joint: JointId) -> int:
        try:
            return self.joints.index(joint)
        except ValueError:
            raise SkeletonError(f"joint {joint.value!r} not present in sequence") from None

    def xy(self, joint: JointId) -> np.ndarray:
        return self.data[:, self.joint_index(joint), :2]

    def frame(self, t: int) -> Frame:
        row = self.data[t]
        return Frame(t, {j: (float(row[k, 0]), float(row[k, 1]), float(row[k, 2])) for k, j in enumerate(self.joints)})

    @property
    def frames(self) -> list[Frame]:
        return [self.frame(t) for t in range(len(self))]

    def slice(self, start: int, stop: int) -> "SkeletonSequence":
        return SkeletonSequence(self.joints, self.data[start:stop].copy(), self.fps, self.subject_id)


# ---------------------------------------------------------------------------
# JSONL ingestion


def _fail(lineno: int, msg: str):
    raise SkeletonError(f"line {lineno}: {msg}")


def parse_sequence(stream: IO | bytes | str, format: str = "jsonl") -> SkeletonSequence:
    """Parse a skeleton JSONL stream.

    The first non-blank line must be the ``{"meta": ...}`` header. Frames must
    have strictly increasing indices; they are re-indexed from zero. Keypoints
    that are absent, ``null`` or carry zero confidence are filled by linear
    interpolation between the nearest valid neighbours (whole missing frames
    included). Gaps at either end of the sequence are an error.
    """
    if format != "jsonl":
        raise SkeletonError(f"unsupported format {format!r}")
    if isinstance(stream, (bytes, str)):
        text = stream.decode("utf-8") if isinstance(stream, bytes) else stream
    else:
        raw = stream.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw

    meta = None
    records: list[tuple[int, int, dict]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            _fail(lineno, f"malformed JSON ({exc.msg})")
        if not isinstance(obj, dict):
            _fail(lineno, "record must be a JSON object")
        if meta is None:
            if "meta" not in obj or not isinstance(obj["meta"], dict):
                _fail(lineno, "missing meta header")
            meta = obj["meta"]
            try:
                fps = float(meta["fps"])
                subject = str(meta.get("subject", ""))
            except (KeyError, TypeError, ValueError):
                _fail(lineno, "meta header needs numeric 'fps'")
            if not (fps > 0 and math.isfinite(fps)):
                _fail(lineno, "fps must be positive")
            continue
        idx = obj.get("frame")
        joints = obj.get("joints")
        if not isinstance(idx, int) or isinstance(idx, bool) or idx < 0:
            _fail(lineno, "'frame' must be a non-negative integer")
        if not isinstance(joints, dict):
            _fail(lineno, "'joints' must be an object")
        records.append((lineno, idx, joints))

    if meta is None or not records:
        raise SkeletonError("empty stream")

    seen: dict[int, int] = {}
    prev = -1
    for lineno, idx, _ in records:
        if idx in seen:
            raise SkeletonError(f"line {lineno}: duplicate frame {idx} (first at line {seen[idx]})")
        if idx < prev:
            _fail(lineno, f"frame {idx} out of order")
        seen[idx] = lineno
        prev = idx

    names: set[JointId] = set()
    parsed: list[tuple[int, dict[JointId, tuple[float, float, float] | None]]] = []
    for lineno, idx, joints in records:
        kp: dict[JointId, tuple[float, float, float] | None] = {}
        for name, value in joints.items():
            try:
                jid = JointId(name)
            except ValueError:
                _fail(lineno, f"unknown joint {name!r}")
            names.add(jid)
            if value is None:
                kp[jid] = None
                continue
            if not isinstance(value, list) or len(value) != 3:
                _fail(lineno, f"joint {name!r} must be [x, y, conf]")
            try:
                x, y, c = (float(v) for v in value)
            except (TypeError, ValueError):
                _fail(lineno, f"joint {name!r} has non-numeric values")
            if not (math.isfinite(x) and math.isfinite(y)) or not 0.0 <= c <= 1.0:
                _fail(lineno, f"joint {name!r} out of range")
            kp[jid] = None if c == 0.0 else (x, y, c)
        parsed.append((idx, kp))

    first = parsed[0][0]
    length = parsed[-1][0] - first + 1
    order = tuple(j for j in JOINT_ORDER if j in names)
    data = np.full((length, len(order), 3), np.nan)
    for idx, kp in parsed:
        for k, jid in enumerate(order):
            v = kp.get(jid)
            if v is not None:
                data[idx - first, k] = v

    filled: list[tuple[int, str]] = []
    for k, jid in enumerate(order):
        valid = ~np.isnan(data[:, k, 0])
        if valid.all():
            continue
        pos = np.flatnonzero(valid)
        if pos.size == 0:
            raise SkeletonError(f"joint {jid.value!r} has no valid observation")
        missing = np.flatnonzero(~valid)
        if missing[0] < pos[0] or missing[-1] > pos[-1]:
            raise SkeletonError(f"joint {jid.value!r} missing at sequence boundary; no interpolation anchor")
        for ch in range(2):
            data[missing, k, ch] = np.interp(missing, pos, data[pos, k, ch])
        # interpolated confidence: the weaker of the two anchors
        right = np.searchsorted(pos, missing)
        data[missing, k, 2] = np.minimum(data[pos[right - 1], k, 2], data[pos[right], k, 2])
        filled.extend((int(t), jid.value) for t in missing)

    filled.sort()
    return SkeletonSequence(order, data, fps, subject, Provenance(tuple(filled), first))


def load_sequence(path: str | Path) -> SkeletonSequence:
    with open(path, "rb") as fh:
        return parse_sequence(fh)


def serialize_sequence(seq: SkeletonSequence, decimals: int | None = None) -> bytes:
    out = io.StringIO()
    out.write(json.dumps({"meta": {"fps": seq.fps, "subject": seq.subject_id}}) + "\n")
    data = seq.data if decimals is None else np.round(seq.data, decimals)
    names = [j.value for j in seq.joints]
    for t in range(len(seq)):
        joints = {n: [float(v) for v in data[t, k]] for k, n in enumerate(names)}
        out.write(json.dumps({"frame": t, "joints": joints}) + "\n")
    return out.getvalue().encode("utf-8")


# ---------------------------------------------------------------------------
# Angles


def _interior_angle(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    ba = a - b
    bc = c - b
    n1 = np.hypot(ba[..., 0], ba[..., 1])
    n2 = np.hypot(bc[..., 0], bc[..., 1])
    bad = (n1 < DEGENERATE_TOL) | (n2 < DEGENERATE_TOL)
    if np.any(bad):
        raise SkeletonError("degenerate angle", np.flatnonzero(np.atleast_1d(bad)))
    cross = ba[..., 0] * bc[..., 1] - ba[..., 1] * bc[..., 0]
    dot = ba[..., 0] * bc[..., 0] + ba[..., 1] * bc[..., 1]
    # atan2 form of arccos(dot / |ba||bc|), stable near 0 and pi
    return np.arctan2(np.abs(cross), dot)


def joint_angle(frame: Frame, definition: AngleDefinition) -> float:
    """Interior angle in radians, in ``[0, pi]``, at ``definition.b``."""
    pts = []
    for jid in (definition.a, definition.b, definition.c):
        kp = frame.keypoints.get(jid)
        if kp is None or kp[2] <= 0:
            raise SkeletonError(f"angle {definition.name!r}: keypoint {jid.value!r} missing in frame {frame.index}")
        pts.append(np.array(kp[:2], dtype=float))
    try:
        return float(_interior_angle(*pts))
    except SkeletonError:
        raise SkeletonError(f"degenerate angle {definition.name!r} in frame {frame.index}") from None


def angle_track(seq: SkeletonSequence, defs: Sequence[AngleDefinition]) -> np.ndarray:
    """Return the ``(T, K)`` matrix of joint angles, columns in ``defs`` order."""
    out = np.empty((len(seq), len(defs)))
    for k, d in enumerate(defs):
        try:
            out[:, k] = _interior_angle(seq.xy(d.a), seq.xy(d.b), seq.xy(d.c))
        except SkeletonError as exc:
            if len(exc.args) > 1:
                t = int(exc.args[1][0])
                raise SkeletonError(f"degenerate angle {d.name!r} in frame {t}") from None
            raise
    return out


def load_angle_definitions(source: str | Path | Iterable[Mapping] | None = None) -> list[AngleDefinition]:
    """Load angle definitions from a JSON file, a parsed list, or the bundled default set."""
    if source is None:
        items = json.loads(resources.files("motioncoach.data").joinpath("angles_default.json").read_text())
    elif isinstance(source, (str, Path)):
        items = json.loads(Path(source).read_text())
    else:
        items = list(source)
    defs = [AngleDefinition.from_dict(d) for d in items]
    names = [d.name for d in defs]
    if len(set(names)) != len(names):
        raise SkeletonError("duplicate angle names")
    return defs
