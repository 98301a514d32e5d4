"""``motioncoach`` command line: keyframes, assessment, reports, evaluation, benchmarks.

Exit codes: 0 success, 2 input/config error, 3 alignment failure,
4 generation-service failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__, assess, bench, guidance, synth
from .align import AlignmentError, SearchConfig, align_keyframes
from .features import FeatureConfig
from .fileio import atomic_write
from .pipeline import load_template, sequence_features
from .skeleton import load_angle_definitions, load_sequence

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_ALIGN = 3
EXIT_SERVICE = 4

CONFIG_SECTIONS = ("features", "search", "assess", "retrieval", "prompt", "service")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    normalize_mode: str = "raw"
    top_n: int = assess.DEFAULT_TOP_N
    retrieval: guidance.RetrievalConfig = field(default_factory=guidance.RetrievalConfig)
    prompt: guidance.PromptConfig = field(default_factory=guidance.PromptConfig)
    service: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "features": self.features.to_dict(),
            "search": self.search.to_dict(),
            "assess": {"normalize_mode": self.normalize_mode, "top_n": self.top_n},
            "retrieval": self.retrieval.to_dict(),
            "prompt": self.prompt.to_dict(),
        }


def load_config(path: str | None) -> RunConfig:
    """Defaults overridden section by section from a JSON file."""
    if path is None:
        return RunConfig()
    d = _read_json(path)
    if not isinstance(d, dict):
        raise CliError(f"{path}: config must be a JSON object")
    unknown = sorted(set(d) - set(CONFIG_SECTIONS))
    if unknown:
        raise CliError(f"{path}: unknown config section {unknown[0]!r}")
    try:
        fc = FeatureConfig().to_dict()
        fc.update(d.get("features", {}))
        sc = SearchConfig().to_dict()
        sc.update(d.get("search", {}))
        a = {"normalize_mode": "raw", "top_n": assess.DEFAULT_TOP_N}
        a.update(d.get("assess", {}))
        if set(a) - {"normalize_mode", "top_n"}:
            raise CliError(f"{path}: unknown assess keys {sorted(set(a) - {'normalize_mode', 'top_n'})}")
        return RunConfig(
            FeatureConfig.from_dict(fc),
            SearchConfig.from_dict(sc),
            str(a["normalize_mode"]),
            int(a["top_n"]),
            guidance.RetrievalConfig(**d.get("retrieval", {})),
            guidance.PromptConfig(**d.get("prompt", {})),
            dict(d.get("service", {})),
        )
    except TypeError as exc:
        raise CliError(f"{path}: {exc}") from None


def _read_json(path: str | Path):
    try:
        return json.loads(Path(path).read_text("utf-8"))
    except FileNotFoundError:
        raise CliError(f"file not found: {path}") from None
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: malformed JSON ({exc.msg})") from None


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise CliError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {path}")
    return p


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n"


def _load_guarded(fn: Callable, *args, **kwargs):
    """Run a loader, turning data errors into exit-code-2 errors."""
    try:
        return fn(*args, **kwargs)
    except CliError:
        raise
    except FileNotFoundError as exc:
        raise CliError(f"file not found: {exc.filename}") from None
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands


def _search_cfg(args, cfg: RunConfig) -> SearchConfig:
    d = cfg.search.to_dict()
    if getattr(args, "one_stage", False):
        d["two_stage"] = False
    if getattr(args, "exact", False):
        d["method"] = "exact"
    if getattr(args, "radius", None) is not None:
        d["radius"] = args.radius
    return _load_guarded(SearchConfig.from_dict, d)


def _align(args, cfg: RunConfig):
    seq = _load_guarded(load_sequence, _require(args.input, "input skeleton"))
    angle_defs = _load_guarded(load_angle_definitions, args.angles)
    template = _load_guarded(load_template, _require(args.template, "template"), cfg.features, angle_defs)
    scfg = _search_cfg(args, cfg)
    feats, _ = _load_guarded(sequence_features, seq, cfg.features, angle_defs)
    try:
        result = align_keyframes(template, feats, scfg, cfg.features)
    except AlignmentError as exc:
        raise CliError(f"alignment failed: {exc}", EXIT_ALIGN) from None
    return seq, angle_defs, template, scfg, result


def cmd_extract_keyframes(args, cfg: RunConfig) -> int:
    truth = _read_json(args.truth) if args.truth else None
    seq, _, template, scfg, result = _align(args, cfg)
    out = {
        "subject": seq.subject_id,
        "template_label": template.label,
        "alignment": result.to_dict(),
        "config": {"features": cfg.features.to_dict(), "search": scfg.to_dict()},
    }
    if truth is not None:
        kf = truth.get("keyframes", truth.get("truth", {}).get("keyframes"))
        if kf is None or len(kf) != len(result.keyframe_map):
            raise CliError(f"{args.truth}: keyframes missing or of the wrong length")
        err = np.abs(np.array(result.keyframe_indices) - np.array(kf))
        out["evaluation"] = {"truth": list(kf), "abs_error": [int(e) for e in err], "mean_error": float(err.mean())}
    atomic_write(args.out, _dump(out))
    if truth is not None:
        print(f"mean keyframe error {out['evaluation']['mean_error']:.3f} frames")
    return EXIT_OK


def _keyframes_from_file(path: str) -> dict[str, int]:
    d = _read_json(path)
    if "alignment" in d:
        d = d["alignment"]
    try:
        if "keyframes" in d and d["keyframes"] and isinstance(d["keyframes"][0], dict):
            return {k["name"]: int(k["input"]) for k in d["keyframes"]}
        return {str(n): int(k) for n, k in zip(d["keyframe_names"], d["keyframes"])}
    except (KeyError, TypeError, ValueError):
        raise CliError(f"{path}: no keyframes found") from None


def cmd_assess(args, cfg: RunConfig) -> int:
    target = _load_guarded(assess.TargetModel.load, args.target)
    catalog = _load_guarded(assess.ProblemCatalog.load, args.catalog)
    metrics = _load_guarded(assess.load_metric_definitions, args.metrics)
    if args.keyframes:
        kmap = _keyframes_from_file(args.keyframes)
        seq = _load_guarded(load_sequence, _require(args.input, "input skeleton"))
        angle_defs = _load_guarded(load_angle_definitions, args.angles)
        alignment = None
    else:
        if not args.template:
            raise CliError("assess needs --keyframes or --template")
        seq, angle_defs, _, _, result = _align(args, cfg)
        kmap = {m.name: m.input for m in result.keyframe_map}
        alignment = result.to_dict()
    values = _load_guarded(assess.evaluate_metrics, seq, kmap, metrics, angle_defs)
    diag = _load_guarded(assess.diagnose, values, target, catalog, cfg.normalize_mode, cfg.top_n)
    out = diag.to_dict()
    out["subject"] = seq.subject_id
    out["keyframes"] = dict(sorted(kmap.items(), key=lambda kv: kv[1]))
    out["problems"] = {p: catalog.description(p) for p in diag.top}
    out["config"] = {"assess": {"normalize_mode": cfg.normalize_mode, "top_n": cfg.top_n}, "target": target.label}
    if alignment is not None:
        out["alignment"] = alignment
    atomic_write(args.out, _dump(out))
    print(f"{diag.verdict}: {', '.join(diag.top) if diag.top else '-'}")
    return EXIT_OK


def cmd_ingest(args, cfg: RunConfig) -> int:
    index = _load_guarded(guidance.ingest, args.corpus or None)
    index.save(args.out)
    print(f"indexed {len(index)} chunks")
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    d = _read_json(_require(args.diagnosis, "diagnosis"))
    diag = _load_guarded(assess.Diagnosis.from_dict, d)
    catalog = _load_guarded(assess.ProblemCatalog.load, args.catalog)
    index = _load_guarded(guidance.RetrievalIndex.load, args.index) if args.index else guidance.ingest()
    service = None
    if args.backend == "external_service":
        sd = dict(cfg.service)
        for key in ("endpoint", "model", "api_key_env"):
            if getattr(args, key) is not None:
                sd[key] = getattr(args, key)
        if "endpoint" not in sd or "model" not in sd:
            raise CliError("external_service backend needs an endpoint and a model (--endpoint/--model or config)")
        service = _load_guarded(guidance.ServiceConfig.from_dict, sd)
        _load_guarded(service.api_key)  # fail before any network traffic
    if diag.top:
        q = _load_guarded(guidance.transform_query, diag, catalog)
        find = guidance.retrieve_per_problem if args.retrieval == "per-problem" else guidance.retrieve
        hits = find(index, q, cfg.retrieval.top_k, cfg.retrieval)
    else:
        hits = []
    prompt = guidance.assemble_prompt(diag, hits, cfg.prompt, catalog, str(d.get("subject", "")))
    if args.prompt_out:
        atomic_write(args.prompt_out, prompt.render())
    try:
        report = guidance.generate_report(prompt, args.backend, service)
    except guidance.GenerationServiceError as exc:
        hint = f" (retry after {exc.retry_after:g} s)" if exc.retry_after is not None else ""
        raise CliError(f"generation service failed: {exc}{hint}", EXIT_SERVICE) from None
    atomic_write(args.out, report.text)
    return EXIT_OK


def _top_of(path: Path) -> list[str]:
    d = _read_json(path)
    if not isinstance(d, dict) or not isinstance(d.get("top"), list):
        raise CliError(f"{path}: diagnosis lacks a 'top' list")
    return [str(p) for p in d["top"]]


def iou_table(directory: Path) -> list[tuple[str, float]]:
    if not directory.is_dir():
        raise CliError(f"not a directory: {directory}")
    preds = {p.name[: -len(".pred.json")]: p for p in directory.glob("*.pred.json")}
    truths = {p.name[: -len(".truth.json")]: p for p in directory.glob("*.truth.json")}
    if not preds and not truths:
        raise CliError(f"no diagnosis pairs in {directory}")
    unmatched = sorted(set(preds) ^ set(truths))
    if unmatched:
        raise CliError(f"unmatched diagnosis file for item {unmatched[0]!r}")
    return [(k, assess.diagnosis_iou(_top_of(preds[k]), _top_of(truths[k]))) for k in sorted(preds)]


def distribution(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {
        "n": int(v.size),
        "mean": float(v.mean()),
        "min": float(v.min()),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(v.max()),
    }


def cmd_eval_iou(args, cfg: RunConfig) -> int:
    rows = iou_table(Path(args.dir))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("item", "iou"))
    for k, v in rows:
        w.writerow((k, f"{v:.6f}"))
    summary = distribution([v for _, v in rows])
    w.writerow(("median", f"{summary['median']:.6f}"))
    atomic_write(args.out, buf.getvalue())
    if args.summary:
        atomic_write(args.summary, _dump(summary))
    print(f"n={summary['n']} median={summary['median']:.3f} q1={summary['q1']:.3f} q3={summary['q3']:.3f}")
    return EXIT_OK


def _write_diagnoses(out_dir: Path, corpus: bench.Corpus, report: bench.BenchmarkReport, variants, cfg: RunConfig) -> None:
    target = assess.TargetModel.load()
    catalog = assess.ProblemCatalog.load()
    metrics = assess.load_metric_definitions()
    for v in variants:
        rows = {r.item: r for r in report.rows if r.variant == v.name}
        vdir = out_dir / v.name
        for it in corpus.items:
            names = it.keyframe_names or corpus.template.keyframe_names
            tv = assess.evaluate_metrics(it.sequence, dict(zip(names, it.keyframes)), metrics, corpus.angle_defs)
            truth = assess.diagnose(tv, target, catalog, cfg.normalize_mode, cfg.top_n)
            atomic_write(vdir / f"{it.id}.truth.json", _dump(truth.to_dict()))
            row = rows.get(it.id)
            if row is None or row.status != "ok":
                pred = {"top": [], "scores": {}, "status": "alignment failed"}
            else:
                pv = assess.evaluate_metrics(it.sequence, dict(zip(names, row.keyframes)), metrics, corpus.angle_defs)
                pred = assess.diagnose(pv, target, catalog, cfg.normalize_mode, cfg.top_n).to_dict()
            atomic_write(vdir / f"{it.id}.pred.json", _dump(pred))


def cmd_bench(args, cfg: RunConfig) -> int:
    out = Path(args.out_dir)
    if args.efficiency:
        eff = bench.efficiency_benchmark(args.efficiency, radius=cfg.search.radius, repeats=args.repeats, seed=args.seed)
        atomic_write(out / "efficiency.json", _dump(eff))
        print(f"{eff['length']} frames, dim {eff['dim']}: exact {eff['exact_ms']:.2f} ms, fastdtw {eff['fastdtw_ms']:.2f} ms")
        if not args.corpus and args.synth is None:
            return EXIT_OK
    if args.corpus:
        corpus = _load_guarded(bench.load_corpus, _require(args.corpus, "corpus"))
    elif args.synth is not None:
        if args.synth < 1:
            raise CliError("--synth needs a positive item count")
        items = synth.make_corpus(args.synth, seed=args.seed)
        tseq, ttruth = synth.generate(synth.canonical_spec())
        synth.write_corpus(items, tseq, ttruth, out / "corpus", "sprint_start_demo")
        corpus = bench.load_corpus(out / "corpus")
    else:
        raise CliError("bench needs --corpus, --synth or --efficiency")
    variants = bench.default_variants(cfg.features, cfg.search, args.single_joint)
    if args.variants:
        wanted = [v.strip() for v in args.variants.split(",") if v.strip()]
        bad = sorted(set(wanted) - set(bench.VARIANT_NAMES))
        if bad:
            raise CliError(f"unknown variant {bad[0]!r}; choose from {', '.join(bench.VARIANT_NAMES)}")
        variants = [v for v in variants if v.name in wanted]
    report = bench.benchmark_alignment(corpus, variants)
    atomic_write(out / "bench.csv", report.to_csv())
    text = report.summary_text()
    atomic_write(out / "summary.txt", text)
    summary = {
        "seed": args.seed,
        "items": len(corpus),
        "config": cfg.to_dict(),
        "variants": [v.to_dict() for v in variants],
        "summary": [s.__dict__ for s in report.summary()],
    }
    if args.diagnoses:
        _write_diagnoses(out / "diagnoses", corpus, report, variants, cfg)
    atomic_write(out / "summary.json", _dump(summary))
    print(text, end="")
    return EXIT_OK


def _parse_violation(text: str) -> tuple[str, float]:
    name, sep, value = text.partition("=")
    try:
        if not sep:
            raise ValueError
        return name.strip(), float(value)
    except ValueError:
        raise CliError(f"bad --violation {text!r}; expected METRIC=OFFSET") from None


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out_dir)
    violations = tuple(_parse_violation(v) for v in args.violation or ())
    base = _load_guarded(
        synth.SynthSpec,
        motion_kind=args.kind,
        noise_std=args.noise,
        embed=tuple(args.embed) if args.embed else None,
        violations=violations,
        seed=args.seed,
    )
    n = args.n or 1
    items = _load_guarded(synth.make_corpus, n, base, args.seed, None, not args.clean, not args.identity_warp)
    template_seq, template_truth = synth.generate(synth.canonical_spec(args.kind))
    label = "sprint_start_demo" if args.kind == "jump" else "gait_demo"
    synth.write_corpus(items, template_seq, template_truth, out, label)
    print(f"wrote {n} item(s) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file overriding default settings")
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice")

    p = argparse.ArgumentParser(prog="motioncoach", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def align_args(sp, required_template=True):
        sp.add_argument("--input", required=True, help="skeleton JSONL")
        sp.add_argument("--template", required=required_template, help="template JSON")
        sp.add_argument("--angles", help="angle definition JSON (default: bundled)")
        sp.add_argument("--one-stage", action="store_true", help="skip the interval search")
        sp.add_argument("--exact", action="store_true", help="use exact DTW instead of FastDTW")
        sp.add_argument("--radius", type=int, help="FastDTW radius")

    sp = sub.add_parser("extract-keyframes", parents=[common], help="align an input to a template")
    align_args(sp)
    sp.add_argument("--truth", help="ground-truth JSON; adds keyframe errors to the output")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_extract_keyframes)

    sp = sub.add_parser("assess", parents=[common], help="diagnose an input")
    align_args(sp, required_template=False)
    sp.add_argument("--keyframes", help="keyframe JSON from extract-keyframes (skips alignment)")
    sp.add_argument("--target", help="target model JSON (default: bundled demo)")
    sp.add_argument("--catalog", help="problem catalog JSON (default: bundled demo)")
    sp.add_argument("--metrics", help="metric definition JSON (default: bundled demo)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_assess)

    sp = sub.add_parser("report", parents=[common], help="write a guidance report for a diagnosis")
    sp.add_argument("--diagnosis", required=True)
    sp.add_argument("--index", help="index file from ingest (default: bundled toy corpus)")
    sp.add_argument("--catalog", help="problem catalog JSON (default: bundled demo)")
    sp.add_argument("--backend", choices=("template", "external_service"), default="template")
    sp.add_argument("--retrieval", choices=("per-problem", "global"), default="per-problem")
    sp.add_argument("--endpoint", help="OpenAI-compatible base URL")
    sp.add_argument("--model")
    sp.add_argument("--api-key-env", dest="api_key_env", help=f"env var holding the key (default {guidance.DEFAULT_API_KEY_ENV})")
    sp.add_argument("--prompt-out", help="also write the assembled prompt")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("ingest", parents=[common], help="build a retrieval index")
    sp.add_argument("--corpus", nargs="*", help="JSONL corpus files (default: bundled toy corpus)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("eval-iou", parents=[common], help="diagnosis IoU over <item>.pred.json/<item>.truth.json pairs")
    sp.add_argument("--dir", required=True)
    sp.add_argument("--out", required=True, help="per-item CSV")
    sp.add_argument("--summary", help="distribution summary JSON")
    sp.set_defaults(func=cmd_eval_iou)

    sp = sub.add_parser("bench", parents=[common], help="accuracy and latency of alignment variants")
    sp.add_argument("--corpus", help="corpus directory or corpus.json")
    sp.add_argument("--synth", type=int, help="generate a corpus of this many items instead")
    sp.add_argument("--variants", help=f"comma list from {','.join(bench.VARIANT_NAMES)}")
    sp.add_argument("--single-joint", default="knee_r")
    sp.add_argument("--diagnoses", action="store_true", help="also write pred/truth diagnoses per variant")
    sp.add_argument("--efficiency", type=int, metavar="FRAMES", help="time exact DTW vs FastDTW on random inputs")
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("synth", parents=[common], help="generate synthetic inputs with ground truth")
    sp.add_argument("--kind", choices=("jump", "cyclic_gait"), default="jump")
    sp.add_argument("--n", type=int, help="number of items (default 1)")
    sp.add_argument("--noise", type=float, default=2.0, help="keypoint noise std in pixels")
    sp.add_argument("--embed", type=int, nargs=2, metavar=("PRE", "POST"), help="maximum distractor padding")
    sp.add_argument("--violation", action="append", metavar="METRIC=OFFSET")
    sp.add_argument("--clean", action="store_true", help="no random violations")
    sp.add_argument("--identity-warp", action="store_true")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except CliError as exc:
        print(f"motioncoach {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except AlignmentError as exc:
        print(f"motioncoach {args.command}: alignment failed: {exc}", file=sys.stderr)
        return EXIT_ALIGN
    except (OSError, ValueError) as exc:
        print(f"motioncoach {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
