"""Knowledge-based assessment: metric values at keyframes, deviation from
target ranges, problem scoring through a mapping matrix, and diagnosis IoU.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .align import AlignmentResult
from .skeleton import AngleDefinition, JointId, SkeletonError, SkeletonSequence, joint_angle

DEFAULT_TOP_N = 6
NO_DEFICIENCIES = "no deficiencies"
UNIT_SCALE = {"rad": 1.0, "deg": 180.0 / math.pi}


class AssessmentError(ValueError):
    pass


def _data(name: str):
    return json.loads(resources.files("motioncoach.data").joinpath(name).read_text())


def _read_json(source):
    if isinstance(source, (str, Path)):
        try:
            return json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise AssessmentError(f"{source}: malformed JSON ({exc.msg})") from None
    return source


# ---------------------------------------------------------------------------
# metric definitions


def _trunk_inclination(frame, md: "MetricDefinition", angles) -> float:
    """Forward lean of pelvis->neck from image vertical (y grows downward)."""
    try:
        px, py, _ = frame.keypoints[JointId.PELVIS]
        nx, ny, _ = frame.keypoints[JointId.NECK]
    except KeyError as exc:
        raise AssessmentError(f"metric {md.id!r}: missing joint {exc}") from None
    return math.atan2(abs(nx - px), py - ny)


def _angle_difference(frame, md: "MetricDefinition", angles) -> float:
    a, b = md.angle_name, md.angle_name_2
    return joint_angle(frame, angles[a]) - joint_angle(frame, angles[b])


DERIVED: dict[str, Callable] = {
    "trunk_inclination": _trunk_inclination,
    "angle_difference": _angle_difference,
}


@dataclass(frozen=True)
class MetricDefinition:
    id: str
    kind: str  # joint_angle_at_keyframe | duration_between_keyframes | derived_scalar
    keyframe_ref: tuple[str, ...]
    angle_name: str | None = None
    units: str = "deg"
    derived: str | None = None
    angle_name_2: str | None = None
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "keyframe_ref", tuple(self.keyframe_ref))
        if self.kind == "joint_angle_at_keyframe":
            if not self.angle_name or len(self.keyframe_ref) != 1:
                raise AssessmentError(f"metric {self.id!r}: angle metric needs angle_name and one keyframe")
            if self.units not in UNIT_SCALE:
                raise AssessmentError(f"metric {self.id!r}: angle units must be 'deg' or 'rad'")
        elif self.kind == "duration_between_keyframes":
            if len(self.keyframe_ref) != 2:
                raise AssessmentError(f"metric {self.id!r}: duration needs two keyframe refs")
            if self.units != "s":
                raise AssessmentError(f"metric {self.id!r}: duration units must be 's'")
        elif self.kind == "derived_scalar":
            if self.derived not in DERIVED or len(self.keyframe_ref) != 1:
                raise AssessmentError(f"metric {self.id!r}: unknown derived scalar {self.derived!r}")
        else:
            raise AssessmentError(f"metric {self.id!r}: unknown kind {self.kind!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricDefinition":
        d = dict(d)
        ref = d.pop("keyframe_ref")
        d["keyframe_ref"] = (ref,) if isinstance(ref, str) else tuple(ref)
        try:
            return cls(**d)
        except TypeError as exc:
            raise AssessmentError(f"bad metric definition: {exc}") from None


def load_metric_definitions(source=None) -> list[MetricDefinition]:
    items = _data("demo_metrics.json") if source is None else _read_json(source)
    defs = [MetricDefinition.from_dict(d) for d in items]
    if len({d.id for d in defs}) != len(defs):
        raise AssessmentError("duplicate metric ids")
    return defs


def evaluate_metrics(
    seq: SkeletonSequence,
    result: AlignmentResult | Mapping[str, int],
    defs: Sequence[MetricDefinition],
    angle_defs: Sequence[AngleDefinition],
) -> dict[str, float]:
    """Evaluate every metric at the keyframes mapped by ``result``.

    ``result`` may also be a plain ``{keyframe name: input frame}`` mapping,
    e.g. ground-truth keyframes.
    """
    if isinstance(result, AlignmentResult):
        kmap = {m.name: m.input for m in result.keyframe_map}
    else:
        kmap = {str(k): int(v) for k, v in result.items()}
    angles = {d.name: d for d in angle_defs}
    values: dict[str, float] = {}
    for md in defs:
        missing = [k for k in md.keyframe_ref if k not in kmap]
        if missing:
            raise AssessmentError(f"metric {md.id!r}: keyframe {missing[0]!r} not mapped")
        frames = [kmap[k] for k in md.keyframe_ref]
        if any(not 0 <= f < len(seq) for f in frames):
            raise AssessmentError(f"metric {md.id!r}: keyframe outside sequence")
        try:
            if md.kind == "duration_between_keyframes":
                values[md.id] = (frames[1] - frames[0]) / seq.fps
                continue
            frame = seq.frame(frames[0])
            if md.kind == "joint_angle_at_keyframe":
                if md.angle_name not in angles:
                    raise AssessmentError(f"metric {md.id!r}: unknown angle {md.angle_name!r}")
                v = joint_angle(frame, angles[md.angle_name])
            else:
                v = DERIVED[md.derived](frame, md, angles)
        except SkeletonError as exc:
            raise AssessmentError(f"metric {md.id!r}: {exc}") from None
        values[md.id] = v * UNIT_SCALE.get(md.units, 1.0)
    return values


# ---------------------------------------------------------------------------
# target model and deviations


@dataclass(frozen=True)
class TargetModel:
    label: str
    thresholds: Mapping[str, tuple[float, float]]

    def __post_init__(self):
        th = {}
        for k, v in self.thresholds.items():
            lo, hi = float(v[0]), float(v[1])
            if not lo <= hi:
                raise AssessmentError(f"target {k!r}: t_min > t_max")
            th[k] = (lo, hi)
        object.__setattr__(self, "thresholds", th)

    @classmethod
    def load(cls, source=None) -> "TargetModel":
        d = _data("demo_target.json") if source is None else _read_json(source)
        try:
            return cls(str(d["label"]), d["thresholds"])
        except (KeyError, TypeError, IndexError) as exc:
            raise AssessmentError(f"malformed target model: {exc}") from None

    def to_dict(self) -> dict:
        return {"label": self.label, "thresholds": {k: list(v) for k, v in self.thresholds.items()}}


def deviation(value: float, t_min: float, t_max: float) -> float:
    """Distance of ``value`` outside ``[t_min, t_max]``; zero inside."""
    if value < t_min:
        return t_min - value
    if value > t_max:
        return value - t_max
    return 0.0


def deviations(values: Mapping[str, float], target: TargetModel, signed: bool = False) -> dict[str, float]:
    """Per-metric deviations. With ``signed`` every metric yields two entries,
    ``<id>:under`` and ``<id>:over``, so direction can map to different problems."""
    out: dict[str, float] = {}
    for k, v in values.items():
        if k not in target.thresholds:
            raise AssessmentError(f"no target range for metric {k!r}")
        lo, hi = target.thresholds[k]
        d = deviation(v, lo, hi)
        if signed:
            out[f"{k}:under"] = d if v < lo else 0.0
            out[f"{k}:over"] = d if v > hi else 0.0
        else:
            out[k] = d
    return out


# ---------------------------------------------------------------------------
# problem catalog and aggregation


@dataclass(frozen=True)
class ProblemCatalog:
    problems: tuple[tuple[str, str], ...]  # (id, description)
    metrics: tuple[str, ...]  # row ids of the mapping matrix
    mapping: np.ndarray  # (K metrics, M problems)

    def __post_init__(self):
        W = np.asarray(self.mapping, dtype=float)
        ids = [p[0] for p in self.problems]
        if W.shape != (len(self.metrics), len(self.problems)):
            raise AssessmentError(f"mapping shape {W.shape} != ({len(self.metrics)}, {len(self.problems)})")
        if len(set(ids)) != len(ids) or len(set(self.metrics)) != len(self.metrics):
            raise AssessmentError("duplicate problem or metric ids in catalog")
        if np.any(W < 0) or not np.all(np.isfinite(W)):
            raise AssessmentError("mapping entries must be finite and non-negative")
        dead = [ids[m] for m in range(W.shape[1]) if not np.any(W[:, m] > 0)]
        if dead:
            raise AssessmentError(f"unreachable problems (all-zero columns): {dead}")
        W.setflags(write=False)
        object.__setattr__(self, "mapping", W)

    @property
    def problem_ids(self) -> list[str]:
        return [p[0] for p in self.problems]

    def description(self, pid: str) -> str:
        for i, d in self.problems:
            if i == pid:
                return d
        raise AssessmentError(f"unknown problem id {pid!r}")

    @classmethod
    def load(cls, source=None) -> "ProblemCatalog":
        d = _data("demo_catalog.json") if source is None else _read_json(source)
        try:
            problems = tuple((str(p["id"]), str(p["description"])) for p in d["problems"])
            metrics = tuple(str(m) for m in d["metrics"])
            flat = [float(x) for x in d["mapping"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise AssessmentError(f"malformed catalog: {exc}") from None
        if len(flat) != len(metrics) * len(problems):
            raise AssessmentError("mapping must be dense row-major (metrics x problems)")
        return cls(problems, metrics, np.array(flat).reshape(len(metrics), len(problems)))

    def to_dict(self) -> dict:
        return {
            "problems": [{"id": i, "description": d} for i, d in self.problems],
            "metrics": list(self.metrics),
            "mapping": [float(x) for x in self.mapping.ravel()],
        }


@dataclass(frozen=True)
class Diagnosis:
    deviations: Mapping[str, float]
    scores: Mapping[str, float]
    probabilities: Mapping[str, float]
    top: tuple[str, ...]
    values: Mapping[str, float] = field(default_factory=dict)
    label: str = ""

    @property
    def verdict(self) -> str:
        return NO_DEFICIENCIES if not self.top else "deficiencies found"

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "verdict": self.verdict,
            "top": list(self.top),
            "scores": dict(self.scores),
            "probabilities": dict(self.probabilities),
            "deviations": dict(self.deviations),
            "values": dict(self.values),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Diagnosis":
        try:
            return cls(
                dict(d.get("deviations", {})),
                dict(d["scores"]),
                dict(d.get("probabilities", {})),
                tuple(d["top"]),
                dict(d.get("values", {})),
                str(d.get("label", "")),
            )
        except (KeyError, TypeError) as exc:
            raise AssessmentError(f"malformed diagnosis: missing {exc}") from None


def aggregate(
    devs: Mapping[str, float],
    catalog: ProblemCatalog,
    normalize_mode: str = "raw",
    target: TargetModel | None = None,
    top_n: int = DEFAULT_TOP_N,
) -> Diagnosis:
    """Score problems as ``S = W^T D`` and rank them.

    ``range_scaled`` divides each deviation by its target range width first
    (width 0 counts as 1). Only problems with a positive score are ranked;
    ties keep catalog order.
    """
    if normalize_mode not in ("raw", "range_scaled"):
        raise AssessmentError(f"unknown normalize_mode {normalize_mode!r}")
    missing = [k for k in catalog.metrics if k not in devs]
    if missing:
        raise AssessmentError(f"deviation vector lacks metric {missing[0]!r}")
    D = np.array([float(devs[k]) for k in catalog.metrics])
    if normalize_mode == "range_scaled":
        if target is None:
            raise AssessmentError("range_scaled mode needs the target model")
        widths = []
        for k in catalog.metrics:
            base = k.rsplit(":", 1)[0] if k not in target.thresholds else k
            lo, hi = target.thresholds[base]
            widths.append(hi - lo if hi > lo else 1.0)
        D = D / np.array(widths)
    S = catalog.mapping.T @ D
    ids = catalog.problem_ids
    total = float(S.sum())
    probs = S / total if total > 0 else np.zeros_like(S)
    order = sorted((i for i in range(len(ids)) if S[i] > 0), key=lambda i: (-S[i], i))
    return Diagnosis(
        deviations={k: float(devs[k]) for k in catalog.metrics},
        scores={p: float(s) for p, s in zip(ids, S)},
        probabilities={p: float(q) for p, q in zip(ids, probs)},
        top=tuple(ids[i] for i in order[:top_n]),
    )


def diagnose(
    values: Mapping[str, float],
    target: TargetModel,
    catalog: ProblemCatalog,
    normalize_mode: str = "raw",
    top_n: int = DEFAULT_TOP_N,
) -> Diagnosis:
    signed = any(":" in k for k in catalog.metrics)
    devs = deviations({k: values[k] for k in values if k in target.thresholds}, target, signed=signed)
    d = aggregate(devs, catalog, normalize_mode, target, top_n)
    return Diagnosis(d.deviations, d.scores, d.probabilities, d.top, dict(values), target.label)


def diagnosis_iou(pred: Iterable[str], truth: Iterable[str], catalog: ProblemCatalog | None = None) -> float:
    """``|pred & truth| / |pred | truth|``; two empty sets agree perfectly."""
    p, t = set(pred), set(truth)
    if catalog is not None:
        known = set(catalog.problem_ids)
        unknown = sorted((p | t) - known)
        if unknown:
            raise AssessmentError(f"unknown problem id {unknown[0]!r}")
    union = p | t
    if not union:
        return 1.0
    return len(p & t) / len(union)
