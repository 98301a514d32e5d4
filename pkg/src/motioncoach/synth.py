"""Synthetic skeleton sequences with exact ground truth.

Joint-angle trajectories are cosine-interpolated between knots, so every knot
is a stationary point of its curve and keyframes sit exactly on knots. The
angles drive a 2D stick figure (unit thigh and shank) whose keypoints are
then scaled to pixels. Time warping, distractor padding and keypoint noise are
applied after keyframe bookkeeping.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .assess import MetricDefinition, TargetModel, load_metric_definitions
from .fileio import atomic_write
from .skeleton import JOINT_ORDER, JointId, SkeletonSequence, load_angle_definitions, serialize_sequence

PX_PER_UNIT = 100.0
SEGMENTS = {"trunk": 1.5, "neck": 0.3, "thigh": 1.0, "shank": 1.0, "foot": 0.35, "heel": 0.12, "upper_arm": 0.8, "forearm": 0.7}
FAMILIES = ("hip", "knee", "ankle", "shoulder")


class SynthError(ValueError):
    pass


# ---------------------------------------------------------------------------
# motion definitions (degrees; interior joint angles, trunk lean from vertical)

JUMP_TIMES = {"start": 0, "prep": 12, "set": 30, "takeoff": 45, "tuck": 53, "touchdown": 61, "absorb": 72, "end": 89}
JUMP_VALUES = {
    "knee": (172, 168, 95, 151, 125, 160, 105, 170),
    "hip": (170, 165, 70, 160, 120, 150, 100, 168),
    "ankle": (100, 98, 72, 130, 105, 118, 78, 98),
    "shoulder": (15, 35, 60, 150, 120, 70, 40, 15),
    "lean": (5, 12, 45, 40, 30, 20, 25, 8),
}
JUMP_KEYFRAMES = ("set", "takeoff", "touchdown", "absorb")

# metric id -> how to move the generating curves
JUMP_METRIC_KNOTS = {
    "knee_angle_at_set": ("knee", "set"),
    "hip_angle_at_set": ("hip", "set"),
    "trunk_lean_at_takeoff": ("lean", "takeoff"),
    "knee_angle_at_takeoff": ("knee", "takeoff"),
    "hip_angle_at_takeoff": ("hip", "takeoff"),
    "ankle_angle_at_takeoff": ("ankle", "takeoff"),
    "knee_angle_at_touchdown": ("knee", "touchdown"),
    "knee_angle_at_absorb": ("knee", "absorb"),
}
JUMP_METRIC_DURATIONS = {"push_duration": ("set", "takeoff"), "flight_time": ("takeoff", "touchdown")}

GAIT_HALF_PERIODS = (12, 12, 11, 10, 10, 9, 9)  # accelerating strides
GAIT_KEYFRAMES = ("flex1", "flex2", "flex3")


@dataclass(frozen=True)
class Curve:
    times: np.ndarray
    values: np.ndarray

    def __call__(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        k = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
        t0, t1 = self.times[k], self.times[k + 1]
        u = np.clip((t - t0) / (t1 - t0), 0.0, 1.0)
        v0, v1 = self.values[k], self.values[k + 1]
        return v0 + (v1 - v0) * 0.5 * (1.0 - np.cos(math.pi * u))


@dataclass(frozen=True)
class SynthSpec:
    motion_kind: str = "jump"  # jump | cyclic_gait
    length: int | None = None  # source action length in frames; None keeps the canonical length
    fps: float = 30.0
    warp: tuple[tuple[float, float], ...] | None = None  # (source, output) knots; None = identity
    noise_std: float = 0.0
    embed: tuple[int, int] | None = None  # (pre_pad, post_pad) distractor frames
    violations: tuple[tuple[str, float], ...] = ()
    seed: int = 0
    subject_variation: bool = True
    scale: float | None = None  # None: drawn in [0.8, 1.2]

    def __post_init__(self):
        if self.motion_kind not in ("jump", "cyclic_gait"):
            raise SynthError(f"unknown motion_kind {self.motion_kind!r}")
        if self.warp is not None:
            w = np.asarray(self.warp, dtype=float)
            if w.ndim != 2 or w.shape[1] != 2 or w.shape[0] < 2:
                raise SynthError("warp needs at least two (source, output) knots")
            if np.any(np.diff(w[:, 0]) <= 0) or np.any(np.diff(w[:, 1]) <= 0):
                raise SynthError("invalid warp: knots must be strictly increasing")
            if w[0, 0] != 0 or w[0, 1] != 0:
                raise SynthError("invalid warp: must start at (0, 0)")
            object.__setattr__(self, "warp", tuple((float(a), float(b)) for a, b in w))
        if self.embed is not None:
            pre, post = self.embed
            if pre < 0 or post < 0:
                raise SynthError("embed padding must be non-negative")
            object.__setattr__(self, "embed", (int(pre), int(post)))
        object.__setattr__(self, "violations", tuple((str(m), float(o)) for m, o in self.violations))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["warp"] = None if self.warp is None else [list(k) for k in self.warp]
        d["embed"] = None if self.embed is None else list(self.embed)
        d["violations"] = [list(v) for v in self.violations]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if d.get("warp") is not None:
            d["warp"] = tuple(tuple(k) for k in d["warp"])
        if d.get("embed") is not None:
            d["embed"] = tuple(d["embed"])
        d["violations"] = tuple(tuple(v) for v in d.get("violations", ()))
        return cls(**d)


@dataclass(frozen=True)
class GroundTruth:
    keyframes: tuple[int, ...]
    keyframe_names: tuple[str, ...]
    interval: tuple[int, int]
    violated_metrics: tuple[str, ...] = ()
    clean_angles: np.ndarray | None = field(default=None, compare=False, repr=False)

    def keyframe_map(self) -> dict[str, int]:
        return dict(zip(self.keyframe_names, self.keyframes))

    def to_dict(self) -> dict:
        return {
            "keyframes": list(self.keyframes),
            "keyframe_names": list(self.keyframe_names),
            "interval": list(self.interval),
            "violated_metrics": list(self.violated_metrics),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(tuple(d["keyframes"]), tuple(d["keyframe_names"]), tuple(d["interval"]), tuple(d.get("violated_metrics", ())))


# ---------------------------------------------------------------------------
# warps


def warp_forward(warp, src_len: int):
    """Source -> output time map and the output action length."""
    if warp is None:
        return (lambda s: np.asarray(s, dtype=float)), src_len
    w = np.asarray(warp, dtype=float)
    last_src = src_len - 1
    if abs(w[-1, 0] - last_src) > 1e-9:
        raise SynthError(f"warp must end at source frame {last_src}, got {w[-1, 0]}")
    out_len = int(round(w[-1, 1])) + 1
    return (lambda s: np.interp(s, w[:, 0], w[:, 1])), out_len


def warp_inverse(warp, src_len: int):
    if warp is None:
        return lambda t: np.asarray(t, dtype=float)
    w = np.asarray(warp, dtype=float)
    return lambda t: np.interp(t, w[:, 1], w[:, 0])


def uniform_warp(src_len: int, factor: float) -> tuple[tuple[float, float], ...]:
    return ((0.0, 0.0), (float(src_len - 1), float(src_len - 1) * factor))


def random_warp(
    rng: np.random.Generator,
    src_len: int,
    max_knots: int = 4,
    slopes: tuple[float, float] = (0.5, 2.0),
    total: tuple[float, float] = (0.8, 1.25),
) -> tuple[tuple[float, float], ...]:
    """Piecewise-linear warp with at most ``max_knots`` interior knots, every
    segment slope in ``slopes`` and overall length ratio within ``total``."""
    last = float(src_len - 1)
    for _ in range(1000):
        k = int(rng.integers(1, max_knots + 1))
        cuts = np.sort(rng.uniform(0.15, 0.85, size=k)) * last
        xs = np.concatenate([[0.0], cuts, [last]])
        if np.any(np.diff(xs) < 4):
            continue
        logs = rng.uniform(math.log(slopes[0]), math.log(slopes[1]), size=k + 1)
        sl = np.exp(logs)
        ys = np.concatenate([[0.0], np.cumsum(np.diff(xs) * sl)])
        if total[0] <= ys[-1] / last <= total[1]:
            return tuple((float(a), float(b)) for a, b in zip(xs, ys))
    raise SynthError("could not draw a warp within the requested bounds")


# ---------------------------------------------------------------------------
# motion curves


def _jump_curves(spec: SynthSpec, rng: np.random.Generator, target: TargetModel, metrics: dict[str, MetricDefinition]):
    names = list(JUMP_TIMES)
    scale_t = 1.0 if spec.length is None else (spec.length - 1) / JUMP_TIMES["end"]
    times = {n: JUMP_TIMES[n] * scale_t for n in names}
    values = {fam: dict(zip(names, map(float, vals))) for fam, vals in JUMP_VALUES.items()}
    ranged = {v: k for k, v in JUMP_METRIC_KNOTS.items()}
    if spec.subject_variation:
        for n in ("set", "takeoff", "touchdown", "absorb"):
            times[n] += float(rng.integers(-1, 2))
        for fam in ("hip", "knee", "ankle", "lean"):
            for n in names:
                mid = ranged.get((fam, n))
                if mid is not None:
                    lo, hi = target.thresholds[mid]
                    centre = 0.5 * (lo + hi)
                    values[fam][n] = centre + rng.uniform(-0.3, 0.3) * (hi - lo)
                else:
                    values[fam][n] += rng.uniform(-4.0, 4.0)
        # arm action is subject style, unrelated to the template
        values["shoulder"] = {n: float(rng.uniform(10, 170)) for n in names}

    for metric, offset in spec.violations:
        if metric not in target.thresholds:
            raise SynthError(f"no target range for violated metric {metric!r}")
        lo, hi = target.thresholds[metric]
        goal = hi + offset if offset > 0 else lo + offset
        if metric in JUMP_METRIC_KNOTS:
            fam, knot = JUMP_METRIC_KNOTS[metric]
            if metrics[metric].kind == "joint_angle_at_keyframe" and not 1.0 <= goal <= 179.0:
                raise SynthError(f"violation {metric} {offset:+} puts the angle out of geometric range")
            values[fam][knot] = goal
        elif metric in JUMP_METRIC_DURATIONS:
            a, b = JUMP_METRIC_DURATIONS[metric]
            shift = goal * spec.fps - (times[b] - times[a])
            idx = names.index(b)
            for n in names[idx:]:
                times[n] += shift
            if times[b] - times[a] < 2:
                raise SynthError(f"violation {metric} {offset:+} leaves too short a phase")
        else:
            raise SynthError(f"metric {metric!r} cannot be injected into a jump")

    times["tuck"] = 0.5 * (times["takeoff"] + times["touchdown"])
    # integer knot frames keep the analytic extrema on frames
    t = np.array([round(times[n]) for n in names], dtype=float)
    if np.any(np.diff(t) <= 0):
        raise SynthError("knot times collapsed")
    src_len = int(t[-1]) + 1
    curves = {}
    for fam in FAMILIES:
        right = np.array([values[fam][n] for n in names])
        asym = rng.uniform(-3.0, 3.0, size=len(names)) if spec.subject_variation and fam != "shoulder" else 0.0
        left = right + asym
        if spec.subject_variation and fam == "shoulder":
            left = np.array([float(rng.uniform(10, 170)) for _ in names])
        curves[f"{fam}_r"] = Curve(t, np.radians(right))
        curves[f"{fam}_l"] = Curve(t, np.radians(left))
    curves["lean"] = Curve(t, np.radians([values["lean"][n] for n in names]))
    keyframes = {n: int(t[names.index(n)]) for n in JUMP_KEYFRAMES}
    return curves, src_len, keyframes


def _gait_curves(spec: SynthSpec, rng: np.random.Generator):
    if spec.violations:
        raise SynthError("metric violations are only defined for the jump motion")
    hp = np.array(GAIT_HALF_PERIODS, dtype=float)
    if spec.length is not None:
        hp = hp * (spec.length - 1) / hp.sum()
    t = np.round(np.concatenate([[0.0], np.cumsum(hp)]))
    n = len(t)
    jitter = (lambda lo, hi, size: rng.uniform(lo, hi, size)) if spec.subject_variation else (lambda lo, hi, size: np.zeros(size))
    ramp = np.linspace(0.0, 1.0, n)
    # right leg: extension at even knots, flexion at odd knots; amplitude grows
    ext = np.where(np.arange(n) % 2 == 0, 1.0, 0.0)
    knee_r = np.where(ext > 0, 168.0, 85.0 - 20.0 * ramp) + jitter(-4, 4, n)
    hip_r = np.where(ext > 0, 172.0, 125.0 - 20.0 * ramp) + jitter(-4, 4, n)
    ankle_r = np.where(ext > 0, 120.0, 85.0) + jitter(-4, 4, n)
    # left leg in antiphase
    knee_l = np.where(ext > 0, 85.0 - 20.0 * ramp, 168.0) + jitter(-4, 4, n)
    hip_l = np.where(ext > 0, 125.0 - 20.0 * ramp, 172.0) + jitter(-4, 4, n)
    ankle_l = np.where(ext > 0, 85.0, 120.0) + jitter(-4, 4, n)
    if spec.subject_variation:
        sh_r = rng.uniform(10, 120, n)
        sh_l = rng.uniform(10, 120, n)
    else:
        sh_r = np.where(ext > 0, 20.0, 70.0)
        sh_l = np.where(ext > 0, 70.0, 20.0)
    lean = np.full(n, 15.0) + 10.0 * (1 - ramp) + jitter(-3, 3, n)
    curves = {
        "knee_r": Curve(t, np.radians(knee_r)), "knee_l": Curve(t, np.radians(knee_l)),
        "hip_r": Curve(t, np.radians(hip_r)), "hip_l": Curve(t, np.radians(hip_l)),
        "ankle_r": Curve(t, np.radians(ankle_r)), "ankle_l": Curve(t, np.radians(ankle_l)),
        "shoulder_r": Curve(t, np.radians(sh_r)), "shoulder_l": Curve(t, np.radians(sh_l)),
        "lean": Curve(t, np.radians(lean)),
    }
    flex = [int(t[i]) for i in (1, 3, 5)]
    return curves, int(t[-1]) + 1, dict(zip(GAIT_KEYFRAMES, flex))


def _distractor(rng: np.random.Generator, length: int, anchor: dict[str, float], kind: str, at_end: bool):
    """Random idle/preparatory motion joined smoothly to the action boundary pose."""
    if length == 0:
        return {}
    n = max(2, length // 12 + 2)
    t = np.linspace(0, length, n)
    ranges = {
        "knee": (130, 176) if kind == "jump" else (120, 172),
        "hip": (125, 176) if kind == "jump" else (130, 175),
        "ankle": (85, 112),
        "shoulder": (10, 120),
        "lean": (0, 20),
    }
    out = {}
    for name, a in anchor.items():
        fam = name.split("_")[0]
        lo, hi = ranges[fam]
        vals = np.radians(rng.uniform(lo, hi, n))
        if at_end:
            vals[0] = a
            tt = t
        else:
            vals[-1] = a
            tt = t - length
        out[name] = Curve(tt, vals)
    return out


# ---------------------------------------------------------------------------
# geometry


def _rot(v: np.ndarray, a: np.ndarray) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.stack([c * v[:, 0] - s * v[:, 1], s * v[:, 0] + c * v[:, 1]], axis=1)


def _figure(angles: dict[str, np.ndarray], scale: float, origin: tuple[float, float], advance: np.ndarray, lift: np.ndarray):
    """Keypoints in image pixels (y down) for a right-facing sagittal stick figure."""
    T = len(angles["lean"])
    L = {k: v * PX_PER_UNIT * scale for k, v in SEGMENTS.items()}
    lean = angles["lean"]
    up = np.stack([np.sin(lean), np.cos(lean)], axis=1)
    pts: dict[JointId, np.ndarray] = {}
    pelvis = np.zeros((T, 2))
    legs = {}
    for side in ("l", "r"):
        thigh = _rot(up, -angles[f"hip_{side}"])
        knee = thigh * L["thigh"]
        shank = _rot(-thigh, angles[f"knee_{side}"])
        ankle = knee + shank * L["shank"]
        foot = _rot(-shank, -angles[f"ankle_{side}"])
        legs[side] = (knee, ankle, ankle + foot * L["foot"], ankle - foot * L["heel"])
    lowest = np.minimum.reduce([np.minimum(legs[s][2][:, 1], legs[s][3][:, 1]) for s in ("l", "r")])
    pelvis[:, 0] = origin[0] + advance
    pelvis[:, 1] = -lowest + lift
    shoulder = pelvis + up * L["trunk"]
    pts[JointId.PELVIS] = pelvis
    pts[JointId.NECK] = pelvis + up * (L["trunk"] + L["neck"])
    for side in ("l", "r"):
        knee, ankle, toe, heel = legs[side]
        pts[JointId(f"hip_{side}")] = pelvis
        pts[JointId(f"knee_{side}")] = pelvis + knee
        pts[JointId(f"ankle_{side}")] = pelvis + ankle
        pts[JointId(f"toe_{side}")] = pelvis + toe
        pts[JointId(f"heel_{side}")] = pelvis + heel
        arm = _rot(-up, angles[f"shoulder_{side}"])
        elbow = shoulder + arm * L["upper_arm"]
        pts[JointId(f"shoulder_{side}")] = shoulder
        pts[JointId(f"elbow_{side}")] = elbow
        pts[JointId(f"wrist_{side}")] = elbow + _rot(arm, np.full(T, math.radians(70))) * L["forearm"]
    out = np.empty((T, len(JOINT_ORDER), 2))
    for k, j in enumerate(JOINT_ORDER):
        p = pts[j]
        out[:, k, 0] = p[:, 0]
        out[:, k, 1] = origin[1] - p[:, 1]
    return out


# ---------------------------------------------------------------------------
# public API


def generate(spec: SynthSpec, target: TargetModel | None = None) -> tuple[SkeletonSequence, GroundTruth]:
    """Render one synthetic sequence and its ground truth. Fully determined by ``spec``."""
    rng = np.random.default_rng(spec.seed)
    target = target or TargetModel.load()
    metrics = {m.id: m for m in load_metric_definitions()}
    if spec.motion_kind == "jump":
        curves, src_len, kf_src = _jump_curves(spec, rng, target, metrics)
    else:
        curves, src_len, kf_src = _gait_curves(spec, rng)
    fwd, act_len = warp_forward(spec.warp, src_len)
    inv = warp_inverse(spec.warp, src_len)
    pre, post = spec.embed or (0, 0)
    T = pre + act_len + post

    names = list(curves)
    angles = {n: np.empty(T) for n in names}
    src_t = inv(np.arange(act_len, dtype=float))
    for n in names:
        angles[n][pre : pre + act_len] = curves[n](src_t)
    if pre:
        start = {n: float(curves[n](0.0)) for n in names}
        pad = _distractor(rng, pre, start, spec.motion_kind, at_end=False)
        tt = np.arange(-pre, 0, dtype=float)
        for n in names:
            angles[n][:pre] = pad[n](tt)
    if post:
        end = {n: float(curves[n](src_len - 1.0)) for n in names}
        pad = _distractor(rng, post, end, spec.motion_kind, at_end=True)
        tt = np.arange(1, post + 1, dtype=float)
        for n in names:
            angles[n][pre + act_len :] = pad[n](tt)

    scale = spec.scale if spec.scale is not None else (float(rng.uniform(0.8, 1.2)) if spec.subject_variation else 1.0)
    speed = 4.0 if spec.motion_kind == "cyclic_gait" else 0.0
    advance = speed * scale * np.arange(T)
    lift = np.zeros(T)
    if spec.motion_kind == "jump":
        a, b = kf_src["takeoff"], kf_src["touchdown"]
        s = np.full(T, -1.0)
        s[pre : pre + act_len] = src_t
        flight = (s > a) & (s < b)
        u = (s[flight] - a) / (b - a)
        lift[flight] = 4 * 40.0 * scale * u * (1 - u)
        advance = np.where(s >= a, 120.0 * scale * np.clip((s - a) / (b - a), 0, 1), 0.0)
        advance[pre + act_len :] = 120.0 * scale
    xy = _figure(angles, scale, (320.0, 680.0), advance, lift)
    if spec.noise_std > 0:
        xy = xy + rng.normal(0.0, spec.noise_std, size=xy.shape)
    conf = rng.uniform(0.6, 1.0, size=xy.shape[:2]) if spec.noise_std > 0 else np.ones(xy.shape[:2])
    data = np.concatenate([xy, conf[..., None]], axis=2)
    seq = SkeletonSequence(JOINT_ORDER, data, spec.fps, f"synth-{spec.motion_kind}-{spec.seed}")

    keyframes = tuple(pre + int(round(float(fwd(k)))) for k in kf_src.values())
    defs = load_angle_definitions()
    clean = np.stack([angles[d.name] for d in defs], axis=1)
    truth = GroundTruth(
        keyframes=keyframes,
        keyframe_names=tuple(kf_src),
        interval=(pre, pre + act_len - 1),
        violated_metrics=tuple(m for m, _ in spec.violations),
        clean_angles=clean,
    )
    return seq, truth


def canonical_spec(motion_kind: str = "jump") -> SynthSpec:
    return SynthSpec(motion_kind=motion_kind, subject_variation=False, scale=1.0)


def make_template(motion_kind: str = "jump", fcfg=None, angle_defs=None):
    """Reference template from the canonical (noise-free, unwarped) performer.

    Returns ``(template, skeleton)``.
    """
    from .pipeline import template_from_sequence

    seq, truth = generate(canonical_spec(motion_kind))
    label = "sprint_start_demo" if motion_kind == "jump" else "sprint_acceleration_demo"
    tpl = template_from_sequence(seq, truth.keyframes, truth.keyframe_names, label, fcfg, angle_defs)
    return tpl, seq


VIOLATABLE = tuple(JUMP_METRIC_KNOTS) + tuple(JUMP_METRIC_DURATIONS)


def _random_violations(rng: np.random.Generator, target: TargetModel) -> tuple[tuple[str, float], ...]:
    k = int(rng.integers(1, 4))
    chosen = rng.choice(len(VIOLATABLE), size=k, replace=False)
    out = []
    for idx in sorted(chosen):
        m = VIOLATABLE[idx]
        lo, hi = target.thresholds[m]
        if m in JUMP_METRIC_DURATIONS:
            mag = float(rng.uniform(0.08, 0.2))
        else:
            mag = float(rng.uniform(6.0, 15.0))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        if m in JUMP_METRIC_KNOTS and JUMP_METRIC_KNOTS[m][0] != "lean" and hi + mag > 178:
            sign = -1.0
        out.append((m, round(sign * mag, 3)))
    return tuple(out)


def make_corpus(
    n: int,
    base_spec: SynthSpec | None = None,
    seed: int = 0,
    target: TargetModel | None = None,
    random_violations: bool = True,
    random_warps: bool = True,
):
    """``n`` seeded variations of ``base_spec`` (warp, pads, subject, violations).

    Violations listed in ``base_spec`` are used as given; otherwise each jump
    item draws its own unless ``random_violations`` is off. Without
    ``random_warps`` items keep ``base_spec.warp`` (None is the identity).
    Returns a list of ``(spec, sequence, truth)``.
    """
    if n < 1:
        raise SynthError("corpus needs at least one item")
    base = base_spec or SynthSpec(noise_std=2.0, embed=(60, 60))
    target = target or TargetModel.load()
    rng = np.random.default_rng(seed)
    items = []
    for _ in range(n):
        item_seed = int(rng.integers(0, 2**63 - 1))
        irng = np.random.default_rng(item_seed)
        if base.violations:
            violations = base.violations
        elif random_violations and base.motion_kind == "jump":
            violations = _random_violations(irng, target)
        else:
            violations = ()
        # the source length depends on subject timing and duration violations
        probe = SynthSpec(
            motion_kind=base.motion_kind,
            length=base.length,
            fps=base.fps,
            violations=violations,
            seed=item_seed,
            subject_variation=base.subject_variation,
        )
        src_len = _source_length(probe, target)
        warp = random_warp(irng, src_len) if base.warp is None and random_warps else base.warp
        embed = None
        if base.embed is not None:
            pre_max, post_max = base.embed
            embed = (int(irng.integers(pre_max // 2, pre_max + 1)), int(irng.integers(post_max // 2, post_max + 1)))
        spec = SynthSpec(
            motion_kind=base.motion_kind,
            length=base.length,
            fps=base.fps,
            warp=warp,
            noise_std=base.noise_std,
            embed=embed,
            violations=violations,
            seed=item_seed,
            subject_variation=base.subject_variation,
            scale=base.scale,
        )
        seq, truth = generate(spec, target)
        items.append((spec, seq, truth))
    return items


def _source_length(spec: SynthSpec, target: TargetModel) -> int:
    rng = np.random.default_rng(spec.seed)
    metrics = {m.id: m for m in load_metric_definitions()}
    if spec.motion_kind == "jump":
        return _jump_curves(spec, rng, target, metrics)[1]
    return _gait_curves(spec, rng)[1]


def write_corpus(items, template_seq: SkeletonSequence, template_truth: GroundTruth, out_dir: str | Path, label: str, decimals: int = 2) -> Path:
    """Serialise a corpus as ``corpus.json`` + per-item skeleton JSONL + template."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "template.jsonl", serialize_sequence(template_seq, decimals))
    tpl = {
        "label": label,
        "skeleton": "template.jsonl",
        "keyframes": list(template_truth.keyframes),
        "keyframe_names": list(template_truth.keyframe_names),
    }
    atomic_write(out / "template.json", json.dumps(tpl, indent=1) + "\n")
    manifest = {"template": "template.json", "items": []}
    for k, (spec, seq, truth) in enumerate(items):
        name = f"item_{k:03d}.jsonl"
        atomic_write(out / name, serialize_sequence(seq, decimals))
        gt = dict(truth.to_dict(), spec=spec.to_dict())
        atomic_write(out / f"item_{k:03d}.gt.json", json.dumps(gt, indent=1) + "\n")
        manifest["items"].append({"id": f"item_{k:03d}", "skeleton": name, "spec": spec.to_dict(), "truth": truth.to_dict()})
    atomic_write(out / "corpus.json", json.dumps(manifest, indent=1) + "\n")
    return out
