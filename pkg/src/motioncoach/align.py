"""Two-stage motion alignment: exact DTW, FastDTW, subsequence search and
keyframe transfer.

All distances are the joint-weighted Euclidean metric of
:func:`motioncoach.features.weighted_distance`. Internally every sequence is
pre-scaled by ``sqrt(weights)`` so the kernels only see plain Euclidean
distances. Dynamic-programming ties are broken diagonal, then ``i``-step,
then ``j``-step, so results are deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .features import FeatureConfig, FeatureSequence

DIAG, ISTEP, JSTEP = 0, 1, 2


class AlignmentError(RuntimeError):
    pass


@dataclass(frozen=True)
class WarpingPath:
    pairs: tuple[tuple[int, int], ...]
    cost: float

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def normalized_cost(self) -> float:
        return self.cost / len(self.pairs)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)


@dataclass(frozen=True)
class ReferenceTemplate:
    features: FeatureSequence
    keyframes: tuple[int, ...]
    label: str = ""
    keyframe_names: tuple[str, ...] = ()
    # raw angle track, kept so ablations can rebuild features under other configs
    angles: np.ndarray | None = None
    fps: float = 30.0

    def __post_init__(self):
        kf = tuple(int(k) for k in self.keyframes)
        n = len(self.features)
        if any(b <= a for a, b in zip(kf, kf[1:])):
            raise AlignmentError("template keyframes must be strictly increasing")
        if kf and (kf[0] < 0 or kf[-1] > n - 1):
            raise AlignmentError(f"template keyframes must lie in [0, {n - 1}]")
        names = tuple(self.keyframe_names) or tuple(f"k{i}" for i in range(len(kf)))
        if len(names) != len(kf):
            raise AlignmentError("keyframe_names must match keyframes")
        object.__setattr__(self, "keyframes", kf)
        object.__setattr__(self, "keyframe_names", names)

    def with_features(self, features: FeatureSequence) -> "ReferenceTemplate":
        return ReferenceTemplate(features, self.keyframes, self.label, self.keyframe_names, self.angles, self.fps)


@dataclass(frozen=True)
class SearchConfig:
    radius: int = 8
    window_scales: tuple[float, ...] = (0.8, 1.0, 1.25)
    window_stride: int | None = None  # None: max(1, len(R) // 20)
    band: bool = True  # also enforce the global |i - j| <= r diagonal band
    method: str = "fastdtw"  # or "exact"
    two_stage: bool = True

    def __post_init__(self):
        if int(self.radius) != self.radius or self.radius < 1:
            raise AlignmentError("radius must be a positive integer")
        scales = tuple(float(s) for s in self.window_scales)
        if not scales or any(not (0 < s <= 4) for s in scales):
            raise AlignmentError("window_scales must be non-empty with each scale in (0, 4]")
        if self.window_stride is not None and (int(self.window_stride) != self.window_stride or self.window_stride < 1):
            raise AlignmentError("window_stride must be a positive integer")
        if self.method not in ("fastdtw", "exact"):
            raise AlignmentError(f"unknown method {self.method!r}")
        object.__setattr__(self, "window_scales", scales)

    def stride_for(self, ref_len: int) -> int:
        return self.window_stride if self.window_stride is not None else max(1, ref_len // 20)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        d = dict(d)
        if "window_scales" in d:
            d["window_scales"] = tuple(d["window_scales"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "radius": self.radius,
            "window_scales": list(self.window_scales),
            "window_stride": self.window_stride,
            "band": self.band,
            "method": self.method,
            "two_stage": self.two_stage,
        }


@dataclass(frozen=True)
class KeyframeMatch:
    name: str
    reference: int
    input: int


@dataclass(frozen=True)
class AlignmentResult:
    interval: tuple[int, int]
    path: WarpingPath  # in coordinates of the matched subsequence
    keyframe_map: tuple[KeyframeMatch, ...]
    normalized_cost: float

    @property
    def keyframe_indices(self) -> list[int]:
        return [m.input for m in self.keyframe_map]

    def keyframe(self, name: str) -> int:
        for m in self.keyframe_map:
            if m.name == name:
                return m.input
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "interval": list(self.interval),
            "normalized_cost": self.normalized_cost,
            "path_cost": self.path.cost,
            "path_length": len(self.path),
            "keyframes": [{"name": m.name, "reference": m.reference, "input": m.input} for m in self.keyframe_map],
        }


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True)
def _dist(X, Y, i, j):
    s = 0.0
    for d in range(X.shape[1]):
        diff = X[i, d] - Y[j, d]
        s += diff * diff
    return math.sqrt(s)


@numba.njit(cache=True)
def _dtw_full_kernel(X, Y):
    n, m = X.shape[0], Y.shape[0]
    acc = np.empty((n, m))
    step = np.zeros((n, m), dtype=np.int8)
    for i in range(n):
        for j in range(m):
            d = _dist(X, Y, i, j)
            if i == 0 and j == 0:
                acc[i, j] = d
                continue
            best = np.inf
            choice = 0
            if i > 0 and j > 0:
                best = acc[i - 1, j - 1]
                choice = 0
            if i > 0 and acc[i - 1, j] < best:
                best = acc[i - 1, j]
                choice = 1
            if j > 0 and acc[i, j - 1] < best:
                best = acc[i, j - 1]
                choice = 2
            acc[i, j] = d + best
            step[i, j] = choice
    return acc, step


@numba.njit(cache=True)
def _dtw_window_kernel(X, Y, lo, hi):
    n = X.shape[0]
    start = np.empty(n + 1, dtype=np.int64)
    start[0] = 0
    for i in range(n):
        start[i + 1] = start[i] + (hi[i] - lo[i] + 1)
    acc = np.full(start[n], np.inf)
    step = np.zeros(start[n], dtype=np.int8)
    for i in range(n):
        for j in range(lo[i], hi[i] + 1):
            d = _dist(X, Y, i, j)
            k = start[i] + j - lo[i]
            if i == 0 and j == 0:
                acc[k] = d
                continue
            best = np.inf
            choice = 0
            if i > 0 and j > 0 and lo[i - 1] <= j - 1 <= hi[i - 1]:
                best = acc[start[i - 1] + j - 1 - lo[i - 1]]
                choice = 0
            if i > 0 and lo[i - 1] <= j <= hi[i - 1]:
                v = acc[start[i - 1] + j - lo[i - 1]]
                if v < best:
                    best = v
                    choice = 1
            if j > lo[i]:
                v = acc[k - 1]
                if v < best:
                    best = v
                    choice = 2
            acc[k] = d + best
            step[k] = choice
    # backtrack
    i = n - 1
    j = Y.shape[0] - 1
    if not (lo[i] <= j <= hi[i]):
        return np.empty((0, 2), dtype=np.int64), np.inf
    total = acc[start[i] + j - lo[i]]
    if not np.isfinite(total):
        return np.empty((0, 2), dtype=np.int64), np.inf
    buf = np.empty((n + Y.shape[0], 2), dtype=np.int64)
    p = 0
    while True:
        buf[p, 0] = i
        buf[p, 1] = j
        p += 1
        if i == 0 and j == 0:
            break
        c = step[start[i] + j - lo[i]]
        if c == 0:
            i -= 1
            j -= 1
        elif c == 1:
            i -= 1
        else:
            j -= 1
    return buf[:p][::-1].copy(), total


def _backtrack(step: np.ndarray) -> list[tuple[int, int]]:
    i, j = step.shape[0] - 1, step.shape[1] - 1
    out = [(i, j)]
    while i or j:
        c = step[i, j]
        if c == DIAG:
            i, j = i - 1, j - 1
        elif c == ISTEP:
            i -= 1
        else:
            j -= 1
        out.append((i, j))
    return out[::-1]


# ---------------------------------------------------------------------------
# public DTW entry points


def _prepared(R: FeatureSequence, I: FeatureSequence) -> tuple[np.ndarray, np.ndarray]:
    if R.dim != I.dim:
        raise AlignmentError(f"dimension mismatch: reference D={R.dim}, input D={I.dim}")
    if not np.array_equal(R.weights, I.weights):
        raise AlignmentError("reference and input were built with different joint weights")
    if len(R) == 0 or len(I) == 0:
        raise AlignmentError("sequences must be non-empty")
    return np.ascontiguousarray(R.scaled), np.ascontiguousarray(I.scaled)


def dtw_exact(R: FeatureSequence, I: FeatureSequence, cfg: FeatureConfig | None = None) -> WarpingPath:
    """Globally optimal warping path by full ``O(N M)`` dynamic programming.

    ``cfg`` is accepted for signature symmetry; weights travel with the features.
    """
    X, Y = _prepared(R, I)
    acc, step = _dtw_full_kernel(X, Y)
    return WarpingPath(tuple(_backtrack(step)), float(acc[-1, -1]))


def coarsen(X: np.ndarray) -> np.ndarray:
    """Halve resolution by averaging adjacent rows; an odd tail row is kept as-is."""
    n = X.shape[0]
    half = n // 2
    out = 0.5 * (X[0 : 2 * half : 2] + X[1 : 2 * half : 2])
    if n % 2:
        out = np.concatenate([out, X[-1:]], axis=0)
    return out


def expand_window(coarse_path: np.ndarray, n: int, m: int, radius: int) -> tuple[np.ndarray, np.ndarray]:
    """Project a coarse path onto the ``n x m`` grid and dilate it by ``radius``.

    Returns per-row inclusive column bounds ``(lo, hi)``.
    """
    ci, cj = coarse_path[:, 0], coarse_path[:, 1]
    cn = int(ci[-1]) + 1
    cmin = np.full(cn, np.iinfo(np.int64).max)
    cmax = np.full(cn, -1)
    np.minimum.at(cmin, ci, cj)
    np.maximum.at(cmax, ci, cj)
    rows = np.arange(n)
    first = np.clip(-((radius + 1 - rows) // 2), 0, cn - 1)  # ceil((x - 1 - r) / 2)
    last = np.clip((rows + radius) // 2, 0, cn - 1)
    lo = np.maximum(0, 2 * cmin[first] - radius)
    hi = np.minimum(m - 1, 2 * cmax[last] + 1 + radius)
    return lo.astype(np.int64), hi.astype(np.int64)


def band_limits(n: int, m: int, radius: int) -> tuple[np.ndarray, np.ndarray]:
    """Column bounds of the diagonal band ``|j - i (m-1)/(n-1)| <= r``.

    The radius is widened to ``ceil(slope)`` when the length ratio demands it,
    which keeps the band connected for unequal lengths.
    """
    if n == 1 or m == 1:
        return np.zeros(n, dtype=np.int64), np.full(n, m - 1, dtype=np.int64)
    slope = (m - 1) / (n - 1)
    r = max(radius, math.ceil(slope), 1)
    centre = np.arange(n) * slope
    lo = np.clip(np.ceil(centre - r - 1e-9), 0, m - 1).astype(np.int64)
    hi = np.clip(np.floor(centre + r + 1e-9), 0, m - 1).astype(np.int64)
    return lo, hi


def _solve_window(X, Y, lo, hi) -> tuple[np.ndarray, float]:
    path, cost = _dtw_window_kernel(X, Y, lo, hi)
    if not np.isfinite(cost):
        raise AlignmentError("search window admits no warping path")
    return path, float(cost)


def _fastdtw(X: np.ndarray, Y: np.ndarray, radius: int, band: int | None) -> tuple[np.ndarray, float]:
    n, m = X.shape[0], Y.shape[0]
    if n < radius + 2 or m < radius + 2:
        lo = np.zeros(n, dtype=np.int64)
        hi = np.full(n, m - 1, dtype=np.int64)
    else:
        coarse_band = None if band is None else max(1, -(-band // 2))
        coarse_path, _ = _fastdtw(coarsen(X), coarsen(Y), radius, coarse_band)
        lo, hi = expand_window(coarse_path, n, m, radius)
    if band is not None:
        blo, bhi = band_limits(n, m, band)
        lo, hi = np.maximum(lo, blo), np.minimum(hi, bhi)
        if np.any(lo > hi):
            raise AlignmentError("band and projected window do not intersect")
    return _solve_window(X, Y, lo, hi)


def fastdtw(
    R: FeatureSequence,
    I: FeatureSequence,
    cfg: FeatureConfig | None = None,
    radius: int = 8,
    band: int | None = None,
) -> WarpingPath:
    """Multiresolution FastDTW: coarsen by two, solve, project, refine within ``radius``.

    ``band`` optionally intersects every level with a global diagonal band of
    that radius (halved, rounded up, per coarsening level).
    """
    if radius < 1:
        raise AlignmentError("radius must be >= 1")
    X, Y = _prepared(R, I)
    path, cost = _fastdtw(X, Y, int(radius), band)
    return WarpingPath(tuple((int(a), int(b)) for a, b in path), cost)


def warp(R: FeatureSequence, I: FeatureSequence, scfg: SearchConfig) -> WarpingPath:
    if scfg.method == "exact":
        return dtw_exact(R, I)
    return fastdtw(R, I, radius=scfg.radius, band=scfg.radius if scfg.band else None)


# ---------------------------------------------------------------------------
# two-stage matching


def window_lengths(ref_len: int, scfg: SearchConfig) -> list[int]:
    return sorted({max(2, int(round(s * ref_len))) for s in scfg.window_scales})


def subsequence_search(
    R: ReferenceTemplate,
    I: FeatureSequence,
    scfg: SearchConfig = SearchConfig(),
    fcfg: FeatureConfig | None = None,
) -> tuple[int, int, float]:
    """Stage 1: slide windows of every scale over ``I`` and keep the one with
    the lowest path-length-normalised warping cost.

    Ties go to the earliest start, then the shorter window. Returns
    ``(t_start, t_end, normalized_cost)`` with ``t_end`` inclusive.
    """
    n = len(R.features)
    stride = scfg.stride_for(n)
    lengths = [L for L in window_lengths(n, scfg) if L <= len(I)]
    if not lengths:
        raise AlignmentError(f"input too short: {len(I)} frames, shortest window {window_lengths(n, scfg)[0]}")
    best: tuple[float, int, int] | None = None
    for L in lengths:
        starts = list(range(0, len(I) - L + 1, stride))
        if starts[-1] != len(I) - L:
            starts.append(len(I) - L)
        for s in starts:
            cost = warp(R.features, I[s : s + L], scfg).normalized_cost
            key = (cost, s, L)
            if best is None or key < best:
                best = key
    cost, s, L = best
    return s, s + L - 1, cost


def transfer_keyframes(R: ReferenceTemplate, I: FeatureSequence, path: WarpingPath, offset: int = 0) -> tuple[KeyframeMatch, ...]:
    """Map each reference keyframe through the path; among the input frames
    paired with it, take the one nearest in feature space (earliest on ties)."""
    X = R.features.scaled
    Y = I.scaled
    pairs = path.as_array()
    out = []
    for name, k in zip(R.keyframe_names, R.keyframes):
        js = pairs[pairs[:, 0] == k, 1]
        if js.size == 0:
            raise AlignmentError(f"keyframe {k} not on warping path")
        d = np.sqrt(np.sum((Y[js] - X[k]) ** 2, axis=1))
        out.append(KeyframeMatch(name, k, int(js[int(np.argmin(d))]) + offset))
    return tuple(out)


def align_keyframes(
    R: ReferenceTemplate,
    I: FeatureSequence,
    scfg: SearchConfig = SearchConfig(),
    fcfg: FeatureConfig | None = None,
) -> AlignmentResult:
    """Stage 1 interval search followed by Stage 2 keyframe transfer.

    With ``scfg.two_stage`` off the whole input is aligned at once (the
    one-stage ablation).
    """
    if scfg.two_stage:
        t0, t1, _ = subsequence_search(R, I, scfg, fcfg)
    else:
        t0, t1 = 0, len(I) - 1
    sub = I[t0 : t1 + 1]
    path = warp(R.features, sub, scfg)
    kmap = transfer_keyframes(R, sub, path, offset=t0)
    return AlignmentResult((t0, t1), path, kmap, path.normalized_cost)


def validate_path(path: WarpingPath, n: int, m: int) -> None:
    """Raise ``AssertionError`` unless ``path`` is a valid ``n x m`` warping path."""
    p = path.as_array()
    assert p.shape[0] >= max(n, m), "path too short"
    assert tuple(p[0]) == (0, 0), f"path starts at {tuple(p[0])}"
    assert tuple(p[-1]) == (n - 1, m - 1), f"path ends at {tuple(p[-1])}"
    steps = np.diff(p, axis=0)
    ok = ((steps == (1, 1)) | (steps == (1, 0)) | (steps == (0, 1))).all(axis=1)
    assert ok.all(), f"invalid step at pair {int(np.argmin(ok))}"


def path_cost(R: FeatureSequence, I: FeatureSequence, path: WarpingPath) -> float:
    """Recompute a path's cost as the in-order sum of weighted frame distances."""
    from .features import weighted_distance

    total = 0.0
    for i, j in path.pairs:
        total += weighted_distance(R.vectors[i], I.vectors[j], R.weights)
    return total


def keyframe_errors(predicted: Sequence[int], truth: Sequence[int]) -> np.ndarray:
    p = np.asarray(predicted, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape:
        raise ValueError("predicted and true keyframe lists differ in length")
    return np.abs(p - t)
