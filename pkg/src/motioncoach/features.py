"""Multi-modal windowed feature space used as the alignment currency.

Each frame contributes a fused block ``[theta, alpha * dtheta, beta * ddtheta]``
of size ``3K``; the feature vector at ``t`` concatenates the fused blocks of
frames ``t - w .. t + w`` (edge-replicated), giving ``D = 3K(2w + 1)``.
Joint weights apply to every entry derived from their angle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class FeatureError(ValueError):
    pass


def _default_weights() -> dict[str, float]:
    text = resources.files("motioncoach.data").joinpath("feature_config_default.json").read_text()
    return dict(json.loads(text)["joint_weights"])


@dataclass(frozen=True)
class FeatureConfig:
    alpha: float = 0.39
    beta: float = 0.25
    window_half: int = 4
    joint_weights: Mapping[str, float] = field(default_factory=_default_weights)
    fps_normalize: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise FeatureError("alpha and beta must be non-negative")
        if int(self.window_half) != self.window_half or self.window_half < 0:
            raise FeatureError("window_half must be a non-negative integer")
        if not self.joint_weights:
            raise FeatureError("joint_weights must not be empty")
        if any(not (v >= 0 and math.isfinite(v)) for v in self.joint_weights.values()):
            raise FeatureError("joint weights must be finite and non-negative")
        if not any(v > 0 for v in self.joint_weights.values()):
            raise FeatureError("at least one joint weight must be positive")
        object.__setattr__(self, "joint_weights", dict(self.joint_weights))

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureConfig":
        known = {"alpha", "beta", "window_half", "joint_weights", "fps_normalize"}
        unknown = set(d) - known
        if unknown:
            raise FeatureError(f"unknown feature config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "joint_weights" in kwargs:
            kwargs["joint_weights"] = {str(k): float(v) for k, v in kwargs["joint_weights"].items()}
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "FeatureConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "window_half": self.window_half,
            "fps_normalize": self.fps_normalize,
            "joint_weights": dict(sorted(self.joint_weights.items())),
        }

    def replace(self, **changes) -> "FeatureConfig":
        d = self.to_dict()
        d.update(changes)
        return FeatureConfig.from_dict(d)

    def angle_weights(self, angle_names: Sequence[str]) -> np.ndarray:
        """Per-angle weights in ``angle_names`` order; unlisted angles weigh 0."""
        w = np.array([float(self.joint_weights.get(n, 0.0)) for n in angle_names])
        if not np.any(w > 0):
            raise FeatureError(f"no positive joint weight among angles {list(angle_names)}")
        return w


@dataclass(frozen=True)
class FeatureSequence:
    vectors: np.ndarray  # (T, D)
    angle_names: tuple[str, ...]
    window_half: int
    weights: np.ndarray  # (D,) expanded joint weights

    def __post_init__(self):
        v = np.ascontiguousarray(self.vectors, dtype=float)
        if v.ndim != 2 or v.shape[1] != self.dim:
            raise FeatureError(f"vectors shape {v.shape} inconsistent with layout (D={self.dim})")
        if not np.all(np.isfinite(v)):
            raise FeatureError("feature vectors contain NaN/Inf")
        if self.weights.shape != (self.dim,):
            raise FeatureError("weights length must equal feature dimension")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "weights", np.ascontiguousarray(self.weights, dtype=float))

    @property
    def num_angles(self) -> int:
        return len(self.angle_names)

    @property
    def block_size(self) -> int:
        return 3 * self.num_angles

    @property
    def span(self) -> int:
        return 2 * self.window_half + 1

    @property
    def dim(self) -> int:
        return self.block_size * self.span

    @property
    def source_len(self) -> int:
        return self.vectors.shape[0]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def __getitem__(self, item: slice) -> "FeatureSequence":
        if not isinstance(item, slice):
            raise TypeError("FeatureSequence supports slicing only")
        return FeatureSequence(self.vectors[item], self.angle_names, self.window_half, self.weights)

    @property
    def scaled(self) -> np.ndarray:
        """Vectors pre-multiplied by ``sqrt(weights)``: plain Euclidean distance on
        these equals the weighted distance on the originals."""
        return self.vectors * np.sqrt(self.weights)


def derivatives(theta: np.ndarray, fps: float = 1.0, fps_normalize: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """First and second time derivatives of an angle matrix.

    Central differences inside, one-sided differences at both ends; the second
    derivative differences the first. Units are per frame unless
    ``fps_normalize`` is set, in which case they are per second.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 1:
        theta = theta[:, None]
    if theta.shape[0] < 3:
        raise FeatureError("sequence too short for derivatives")
    scale = float(fps) if fps_normalize else 1.0
    d1 = np.gradient(theta, axis=0, edge_order=1) * scale
    d2 = np.gradient(d1, axis=0, edge_order=1) * scale
    return d1, d2


def expand_weights(angle_weights: np.ndarray, window_half: int) -> np.ndarray:
    return np.tile(np.asarray(angle_weights, dtype=float), 3 * (2 * window_half + 1))


def build_features(theta: np.ndarray, cfg: FeatureConfig, fps: float, angle_names: Sequence[str]) -> FeatureSequence:
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 2 or theta.shape[1] != len(angle_names):
        raise FeatureError(f"angle matrix shape {theta.shape} does not match {len(angle_names)} angle names")
    w = int(cfg.window_half)
    T = theta.shape[0]
    if T < max(3, 2 * w + 1):
        raise FeatureError(f"sequence of length {T} too short for window_half={w}")
    weights = cfg.angle_weights(angle_names)
    d1, d2 = derivatives(theta, fps, cfg.fps_normalize)
    fused = np.concatenate([theta, cfg.alpha * d1, cfg.beta * d2], axis=1)
    idx = np.clip(np.arange(T)[:, None] + np.arange(-w, w + 1)[None, :], 0, T - 1)
    vectors = fused[idx].reshape(T, -1)
    return FeatureSequence(vectors, tuple(angle_names), w, expand_weights(weights, w))


def weighted_distance(r: np.ndarray, i: np.ndarray, weights: np.ndarray) -> float:
    """``sqrt(sum_k w_k (r_k - i_k)^2)`` over expanded per-entry weights."""
    r = np.asarray(r, dtype=float)
    i = np.asarray(i, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if r.shape != i.shape or r.shape != weights.shape:
        raise FeatureError(f"dimension mismatch: {r.shape}, {i.shape}, weights {weights.shape}")
    diff = r - i
    return math.sqrt(float(np.sum(weights * diff * diff)))
