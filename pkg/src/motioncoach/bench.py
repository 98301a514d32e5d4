"""Accuracy/latency harness for alignment variants and diagnosis consistency."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import assess
from .align import AlignmentError, ReferenceTemplate, SearchConfig, align_keyframes, dtw_exact, fastdtw
from .features import FeatureConfig, build_features
from .pipeline import load_template, rebuild
from .skeleton import AngleDefinition, SkeletonSequence, angle_track, load_angle_definitions, load_sequence

CSV_COLUMNS = ("variant", "item", "kf_error_frames", "latency_ms", "status")


class BenchError(ValueError):
    pass


@dataclass(frozen=True)
class Variant:
    name: str
    fcfg: FeatureConfig
    scfg: SearchConfig

    def to_dict(self) -> dict:
        return {"name": self.name, "features": self.fcfg.to_dict(), "search": self.scfg.to_dict()}


def default_variants(
    fcfg: FeatureConfig | None = None,
    scfg: SearchConfig | None = None,
    single_joint: str = "knee_r",
) -> list[Variant]:
    """The full model, its exact-DTW twin, the one-stage run and three feature ablations."""
    fcfg = fcfg or FeatureConfig()
    scfg = scfg or SearchConfig()
    unit = {k: 1.0 for k in fcfg.joint_weights}
    return [
        Variant("full", fcfg, scfg),
        Variant("exact", fcfg, _replace(scfg, method="exact")),
        Variant("one-stage", fcfg, _replace(scfg, two_stage=False)),
        Variant("no-dynamic", fcfg.replace(alpha=0.0, beta=0.0), scfg),
        Variant("no-joint-weights", fcfg.replace(joint_weights=unit), scfg),
        Variant("single-joint", fcfg.replace(joint_weights={single_joint: 1.0}), scfg),
    ]


VARIANT_NAMES = ("full", "exact", "one-stage", "no-dynamic", "no-joint-weights", "single-joint")


def _replace(scfg: SearchConfig, **changes) -> SearchConfig:
    d = scfg.to_dict()
    d.update(changes)
    return SearchConfig.from_dict(d)


@dataclass(frozen=True)
class BenchItem:
    id: str
    sequence: SkeletonSequence
    keyframes: tuple[int, ...]
    keyframe_names: tuple[str, ...] = ()
    interval: tuple[int, int] | None = None


@dataclass(frozen=True)
class Corpus:
    template: ReferenceTemplate
    items: tuple[BenchItem, ...]
    angle_defs: tuple[AngleDefinition, ...]

    def __len__(self) -> int:
        return len(self.items)


def load_corpus(path: str | Path, angle_defs: Sequence[AngleDefinition] | None = None) -> Corpus:
    """Read a ``corpus.json`` manifest (template + skeleton files + truth)."""
    path = Path(path)
    manifest = path / "corpus.json" if path.is_dir() else path
    root = manifest.parent
    try:
        d = json.loads(manifest.read_text())
    except FileNotFoundError:
        raise BenchError(f"corpus manifest not found: {manifest}") from None
    except json.JSONDecodeError as exc:
        raise BenchError(f"{manifest}: malformed JSON ({exc.msg})") from None
    defs = tuple(angle_defs) if angle_defs is not None else tuple(load_angle_definitions())
    template = load_template(root / d["template"], angle_defs=defs)
    items = []
    for entry in d.get("items", []):
        truth = entry["truth"]
        interval = truth.get("interval")
        items.append(
            BenchItem(
                entry["id"],
                load_sequence(root / entry["skeleton"]),
                tuple(truth["keyframes"]),
                tuple(truth.get("keyframe_names", ())),
                tuple(interval) if interval is not None else None,
            )
        )
    if not items:
        raise BenchError(f"{manifest}: corpus has no items")
    return Corpus(template, tuple(items), defs)


@dataclass(frozen=True)
class BenchRow:
    variant: str
    item: str
    kf_error_frames: float | None
    latency_ms: float | None
    status: str
    keyframes: tuple[int, ...] = ()


@dataclass(frozen=True)
class VariantSummary:
    variant: str
    n: int
    failures: int
    mean_error: float
    median_error: float
    mean_latency_ms: float


@dataclass
class BenchmarkReport:
    rows: list[BenchRow] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def variants(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r.variant not in seen:
                seen.append(r.variant)
        return seen

    def errors(self, variant: str) -> np.ndarray:
        return np.array([r.kf_error_frames for r in self.rows if r.variant == variant and r.status == "ok"], dtype=float)

    def summary(self) -> list[VariantSummary]:
        out = []
        for v in self.variants():
            rows = [r for r in self.rows if r.variant == v]
            ok = [r for r in rows if r.status == "ok"]
            err = np.array([r.kf_error_frames for r in ok], dtype=float)
            lat = np.array([r.latency_ms for r in ok], dtype=float)
            out.append(
                VariantSummary(
                    v,
                    len(rows),
                    len(rows) - len(ok),
                    float(err.mean()) if err.size else float("nan"),
                    float(np.median(err)) if err.size else float("nan"),
                    float(lat.mean()) if lat.size else float("nan"),
                )
            )
        return out

    def to_csv(self, latency: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            err = "" if r.kf_error_frames is None else f"{r.kf_error_frames:.6f}"
            lat = "" if r.latency_ms is None or not latency else f"{r.latency_ms:.3f}"
            w.writerow((r.variant, r.item, err, lat, r.status))
        return buf.getvalue()

    def summary_text(self) -> str:
        lines = [f"{'variant':<18}{'n':>5}{'fail':>6}{'mean_err':>10}{'median_err':>12}{'latency_ms':>12}"]
        for s in self.summary():
            lines.append(
                f"{s.variant:<18}{s.n:>5}{s.failures:>6}{s.mean_error:>10.3f}{s.median_error:>12.3f}{s.mean_latency_ms:>12.2f}"
            )
        return "\n".join(lines) + "\n"


def _item_features(corpus: Corpus, fcfg: FeatureConfig, cache: dict) -> tuple[ReferenceTemplate, list]:
    names = [d.name for d in corpus.angle_defs]
    if "theta" not in cache:
        cache["theta"] = [angle_track(it.sequence, corpus.angle_defs) for it in corpus.items]
    tpl = rebuild(corpus.template, fcfg)
    feats = []
    for it, theta in zip(corpus.items, cache["theta"]):
        try:
            feats.append(build_features(theta, fcfg, it.sequence.fps, names))
        except ValueError as exc:
            feats.append(exc)
    return tpl, feats


def benchmark_alignment(corpus: Corpus, variants: Sequence[Variant]) -> BenchmarkReport:
    """Align every item under every variant; per-item failures become rows
    with a non-``ok`` status instead of exceptions."""
    if not corpus.items:
        raise BenchError("corpus is empty")
    report = BenchmarkReport(config={"variants": [v.to_dict() for v in variants]})
    cache: dict = {}
    warmed = False
    for v in variants:
        tpl, feats = _item_features(corpus, v.fcfg, cache)
        for it, f in zip(corpus.items, feats):
            if isinstance(f, Exception):
                report.rows.append(BenchRow(v.name, it.id, None, None, f"failed: {f}"))
                continue
            if not warmed:
                # first call pays the JIT compilation
                try:
                    align_keyframes(tpl, f, v.scfg)
                except (ValueError, AlignmentError):
                    pass
                warmed = True
            t0 = time.perf_counter()
            try:
                res = align_keyframes(tpl, f, v.scfg)
            except (ValueError, AlignmentError) as exc:
                report.rows.append(BenchRow(v.name, it.id, None, None, f"failed: {exc}"))
                continue
            ms = 1000.0 * (time.perf_counter() - t0)
            pred = tuple(res.keyframe_indices)
            if len(pred) != len(it.keyframes):
                report.rows.append(BenchRow(v.name, it.id, None, ms, "failed: keyframe count mismatch", pred))
                continue
            err = float(np.mean(np.abs(np.array(pred) - np.array(it.keyframes))))
            report.rows.append(BenchRow(v.name, it.id, err, ms, "ok", pred))
    return report


def diagnosis_consistency(
    corpus: Corpus,
    report: BenchmarkReport,
    variant: str,
    target: assess.TargetModel,
    catalog: assess.ProblemCatalog,
    metrics: Sequence[assess.MetricDefinition],
    top_n: int = assess.DEFAULT_TOP_N,
) -> dict[str, float]:
    """IoU between the diagnosis from a variant's keyframes and the one from
    the true keyframes, per item. Failed alignments score 0."""
    by_item = {r.item: r for r in report.rows if r.variant == variant}
    out = {}
    for it in corpus.items:
        names = it.keyframe_names or corpus.template.keyframe_names
        truth_vals = assess.evaluate_metrics(it.sequence, dict(zip(names, it.keyframes)), metrics, corpus.angle_defs)
        truth = assess.diagnose(truth_vals, target, catalog, top_n=top_n)
        row = by_item.get(it.id)
        if row is None or row.status != "ok":
            out[it.id] = 0.0
            continue
        pred_vals = assess.evaluate_metrics(it.sequence, dict(zip(names, row.keyframes)), metrics, corpus.angle_defs)
        pred = assess.diagnose(pred_vals, target, catalog, top_n=top_n)
        out[it.id] = assess.diagnosis_iou(pred.top, truth.top, catalog)
    return out


def efficiency_benchmark(
    length: int = 1000,
    num_angles: int = 2,
    window_half: int = 4,
    radius: int = 8,
    repeats: int = 5,
    seed: int = 0,
) -> dict[str, float]:
    """Mean latency (ms) of exact DTW and FastDTW on random-walk feature sequences."""
    rng = np.random.default_rng(seed)
    names = [f"a{k}" for k in range(num_angles)]
    cfg = FeatureConfig(window_half=window_half, joint_weights={n: 1.0 for n in names})

    def walk():
        return build_features(np.cumsum(rng.normal(0, 0.05, (length, num_angles)), axis=0), cfg, 30.0, names)

    pairs = [(walk(), walk()) for _ in range(repeats)]
    dtw_exact(pairs[0][0][:16], pairs[0][1][:16])
    fastdtw(pairs[0][0][:16], pairs[0][1][:16], radius=radius)
    timings = {"exact": [], "fastdtw": []}
    for R, I in pairs:
        t0 = time.perf_counter()
        dtw_exact(R, I)
        timings["exact"].append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        fastdtw(R, I, radius=radius)
        timings["fastdtw"].append(time.perf_counter() - t0)
    return {
        "length": length,
        "dim": pairs[0][0].dim,
        "radius": radius,
        "exact_ms": 1000.0 * float(np.mean(timings["exact"])),
        "fastdtw_ms": 1000.0 * float(np.mean(timings["fastdtw"])),
    }

