"""Glue between skeletons, features and templates, plus template file I/O."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .align import AlignmentError, ReferenceTemplate
from .features import FeatureConfig, FeatureSequence, build_features
from .skeleton import AngleDefinition, SkeletonSequence, angle_track, load_angle_definitions, load_sequence


def sequence_features(
    seq: SkeletonSequence,
    fcfg: FeatureConfig | None = None,
    angle_defs: Sequence[AngleDefinition] | None = None,
) -> tuple[FeatureSequence, np.ndarray]:
    """Angle track and feature sequence for a skeleton sequence."""
    fcfg = fcfg or FeatureConfig()
    angle_defs = list(angle_defs) if angle_defs is not None else load_angle_definitions()
    theta = angle_track(seq, angle_defs)
    return build_features(theta, fcfg, seq.fps, [d.name for d in angle_defs]), theta


def template_from_sequence(
    seq: SkeletonSequence,
    keyframes: Sequence[int],
    keyframe_names: Sequence[str] = (),
    label: str = "",
    fcfg: FeatureConfig | None = None,
    angle_defs: Sequence[AngleDefinition] | None = None,
) -> ReferenceTemplate:
    feats, theta = sequence_features(seq, fcfg, angle_defs)
    return ReferenceTemplate(feats, tuple(keyframes), label, tuple(keyframe_names), theta, seq.fps)


def rebuild(template: ReferenceTemplate, fcfg: FeatureConfig) -> ReferenceTemplate:
    """Same template under another feature configuration (needs the raw angles)."""
    if template.angles is None:
        raise AlignmentError("template carries no raw angles; cannot rebuild features")
    feats = build_features(template.angles, fcfg, template.fps, template.features.angle_names)
    return template.with_features(feats)


def load_template(
    path: str | Path,
    fcfg: FeatureConfig | None = None,
    angle_defs: Sequence[AngleDefinition] | None = None,
) -> ReferenceTemplate:
    """Read a template JSON file.

    Keys: ``label``, ``keyframes``, optional ``keyframe_names``, and either
    ``skeleton`` (JSONL path, relative to the template file) or inline
    ``features`` plus ``angle_names``. ``feature_config`` may be an inline
    object or a path; an explicit ``fcfg`` argument wins.
    """
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AlignmentError(f"{path}: malformed template JSON ({exc.msg})") from None
    if fcfg is None and "feature_config" in d:
        fc = d["feature_config"]
        fcfg = FeatureConfig.from_dict(fc) if isinstance(fc, dict) else FeatureConfig.load(path.parent / fc)
    fcfg = fcfg or FeatureConfig()
    if angle_defs is None and "angles" in d:
        a = d["angles"]
        angle_defs = load_angle_definitions(path.parent / a if isinstance(a, str) else a)
    try:
        keyframes = d["keyframes"]
    except KeyError:
        raise AlignmentError(f"{path}: template lacks 'keyframes'") from None
    names = d.get("keyframe_names", ())
    label = d.get("label", "")
    if "skeleton" in d:
        seq = load_sequence(path.parent / d["skeleton"])
        return template_from_sequence(seq, keyframes, names, label, fcfg, angle_defs)
    if "features" in d:
        vectors = np.asarray(d["features"], dtype=float)
        angle_names = tuple(d["angle_names"])
        from .features import expand_weights

        w = expand_weights(fcfg.angle_weights(angle_names), fcfg.window_half)
        feats = FeatureSequence(vectors, angle_names, fcfg.window_half, w)
        return ReferenceTemplate(feats, tuple(keyframes), label, tuple(names), None, float(d.get("fps", 30.0)))
    raise AlignmentError(f"{path}: template needs 'skeleton' or 'features'")
