"""Knowledge retrieval and report generation from a diagnosis.

A small JSONL knowledge corpus is indexed for BM25; the diagnosis' top
problems become weighted text queries; retrieved chunks and the diagnosis are
packed into a prompt that either goes to an OpenAI-compatible chat endpoint or
is rendered by a deterministic template.
"""

from __future__ import annotations

import json
import math
import os
import re
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from .assess import Diagnosis, ProblemCatalog
from .fileio import atomic_write

TIERS = ("textbook", "expert_qa", "historical_report")
INDEX_FORMAT = "motioncoach-bm25-index"
INDEX_VERSION = 1
NO_CONTEXT = "(no retrieved context)"
TEMPLATE_MARK = "template-generated"
DEFAULT_API_KEY_ENV = "MOTIONCOACH_API_KEY"

_TOKEN = re.compile(r"\w+")


class GuidanceError(ValueError):
    pass


class GenerationServiceError(RuntimeError):
    """The external generation service failed; ``retry_after`` is in seconds when known."""

    def __init__(self, message: str, status: int | None = None, retry_after: float | None = None):
        super().__init__(message)
        self.status = status
        self.retry_after = retry_after


def tokenize(text: str) -> list[str]:
    """Lowercased Unicode word tokens, no stemming."""
    return _TOKEN.findall(text.lower())


# ---------------------------------------------------------------------------
# corpus and index


@dataclass(frozen=True)
class KnowledgeChunk:
    id: str
    tier: str
    text: str
    tags: tuple[str, ...] = ()
    source: str = ""

    def __post_init__(self):
        if not self.id:
            raise GuidanceError("chunk id must be non-empty")
        if self.tier not in TIERS:
            raise GuidanceError(f"chunk {self.id!r}: unknown tier {self.tier!r}")
        if not self.text.strip():
            raise GuidanceError(f"chunk {self.id!r}: empty text")
        object.__setattr__(self, "tags", tuple(self.tags))

    def to_dict(self) -> dict:
        return {"id": self.id, "tier": self.tier, "text": self.text, "tags": list(self.tags), "source": self.source}


def read_corpus(paths: str | Path | Iterable[str | Path] | None = None) -> list[KnowledgeChunk]:
    """Parse JSONL corpus files (default: the bundled toy corpus)."""
    if paths is None:
        sources = [("toy_corpus.jsonl", resources.files("motioncoach.data").joinpath("toy_corpus.jsonl").read_text("utf-8"))]
    else:
        if isinstance(paths, (str, Path)):
            paths = [paths]
        sources = []
        for p in paths:
            try:
                sources.append((str(p), Path(p).read_text("utf-8")))
            except OSError as exc:
                raise GuidanceError(f"cannot read corpus file {p}: {exc.strerror}") from None
    chunks = []
    for name, text in sources:
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                chunks.append(
                    KnowledgeChunk(str(d["id"]), d["tier"], d["text"], tuple(d.get("tags", ())), d.get("source", ""))
                )
            except json.JSONDecodeError as exc:
                raise GuidanceError(f"{name}:{lineno}: malformed JSON ({exc.msg})") from None
            except KeyError as exc:
                raise GuidanceError(f"{name}:{lineno}: missing field {exc}") from None
            except GuidanceError as exc:
                raise GuidanceError(f"{name}:{lineno}: {exc}") from None
    return chunks


@dataclass(frozen=True)
class RetrievalIndex:
    chunks: tuple[KnowledgeChunk, ...]
    term_counts: tuple[Mapping[str, int], ...]
    lengths: np.ndarray
    df: Mapping[str, int]
    avgdl: float

    @classmethod
    def build(cls, chunks: Sequence[KnowledgeChunk]) -> "RetrievalIndex":
        if not chunks:
            raise GuidanceError("empty corpus")
        seen: set[str] = set()
        for c in chunks:
            if c.id in seen:
                raise GuidanceError(f"duplicate chunk id {c.id!r}")
            seen.add(c.id)
        ordered = tuple(sorted(chunks, key=lambda c: c.id))
        counts = []
        df: dict[str, int] = {}
        for c in ordered:
            tf: dict[str, int] = {}
            for tok in tokenize(c.text):
                tf[tok] = tf.get(tok, 0) + 1
            counts.append(dict(sorted(tf.items())))
            for tok in tf:
                df[tok] = df.get(tok, 0) + 1
        lengths = np.array([sum(tf.values()) for tf in counts], dtype=float)
        return cls(ordered, tuple(counts), lengths, dict(sorted(df.items())), float(lengths.mean()))

    def __len__(self) -> int:
        return len(self.chunks)

    def chunk(self, chunk_id: str) -> KnowledgeChunk:
        for c in self.chunks:
            if c.id == chunk_id:
                return c
        raise KeyError(chunk_id)

    def to_bytes(self) -> bytes:
        doc = {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "num_docs": len(self.chunks),
            "avgdl": self.avgdl,
            "df": self.df,
            "chunks": [
                dict(c.to_dict(), length=int(n), tf=tf) for c, n, tf in zip(self.chunks, self.lengths, self.term_counts)
            ],
        }
        return (json.dumps(doc, sort_keys=True, ensure_ascii=False, separators=(",", ":")) + "\n").encode("utf-8")

    @classmethod
    def from_bytes(cls, data: bytes) -> "RetrievalIndex":
        try:
            doc = json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise GuidanceError("index file is not valid UTF-8 JSON") from None
        if doc.get("format") != INDEX_FORMAT:
            raise GuidanceError("not a retrieval index file")
        if doc.get("version") != INDEX_VERSION:
            raise GuidanceError(f"unsupported index version {doc.get('version')!r}")
        chunks = [KnowledgeChunk(c["id"], c["tier"], c["text"], tuple(c["tags"]), c["source"]) for c in doc["chunks"]]
        index = cls.build(chunks)
        # stored statistics must agree with the chunk texts
        if index.to_bytes() != data:
            raise GuidanceError("index statistics inconsistent with chunk contents")
        return index

    def save(self, path: str | Path) -> Path:
        return atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "RetrievalIndex":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise GuidanceError(f"cannot read index {path}: {exc.strerror}") from None
        return cls.from_bytes(data)


def ingest(paths: str | Path | Iterable[str | Path] | None = None) -> RetrievalIndex:
    return RetrievalIndex.build(read_corpus(paths))


# ---------------------------------------------------------------------------
# queries and scoring


@dataclass(frozen=True)
class GuidanceQuery:
    labels: tuple[tuple[str, float], ...]
    motion_label: str = ""
    problem_ids: tuple[str, ...] = ()


def transform_query(d: Diagnosis, catalog: ProblemCatalog) -> GuidanceQuery:
    """One weighted label per top problem: its catalog description and probability."""
    if not d.top:
        raise GuidanceError("nothing to retrieve: the diagnosis has no top problems")
    labels = tuple((catalog.description(p), float(d.probabilities.get(p, 0.0))) for p in d.top)
    return GuidanceQuery(labels, d.label, tuple(d.top))


@dataclass(frozen=True)
class RetrievalConfig:
    k1: float = 1.2
    b: float = 0.75
    tag_boost: float = 1.5
    top_k: int = 6

    def __post_init__(self):
        if self.k1 < 0 or not 0 <= self.b <= 1:
            raise GuidanceError("BM25 needs k1 >= 0 and 0 <= b <= 1")
        if self.tag_boost <= 0:
            raise GuidanceError("tag_boost must be positive")
        if int(self.top_k) != self.top_k or self.top_k < 1:
            raise GuidanceError("top_k must be a positive integer")

    def to_dict(self) -> dict:
        return {"k1": self.k1, "b": self.b, "tag_boost": self.tag_boost, "top_k": self.top_k}


class Scorer(Protocol):
    def __call__(self, index: RetrievalIndex, terms: Sequence[str], cfg: RetrievalConfig) -> np.ndarray: ...


def idf(index: RetrievalIndex, term: str) -> float:
    n = index.df.get(term, 0)
    N = len(index)
    return math.log(1.0 + (N - n + 0.5) / (n + 0.5))


def bm25(index: RetrievalIndex, terms: Sequence[str], cfg: RetrievalConfig = RetrievalConfig()) -> np.ndarray:
    """BM25 score of every chunk for a bag of distinct query terms."""
    norm = cfg.k1 * (1.0 - cfg.b + cfg.b * index.lengths / index.avgdl)
    scores = np.zeros(len(index))
    for term in dict.fromkeys(terms):
        if term not in index.df:
            continue
        f = np.array([tf.get(term, 0) for tf in index.term_counts], dtype=float)
        scores += idf(index, term) * f * (cfg.k1 + 1.0) / (f + norm)
    return scores


@dataclass(frozen=True)
class Hit:
    chunk: KnowledgeChunk
    score: float


def _label_scores(index: RetrievalIndex, q: GuidanceQuery, cfg: RetrievalConfig, scorer: Scorer) -> list[np.ndarray]:
    return [weight * scorer(index, tokenize(text), cfg) for text, weight in q.labels]


def _boost(index: RetrievalIndex, problem_ids: Iterable[str], cfg: RetrievalConfig) -> np.ndarray:
    ids = set(problem_ids)
    return np.array([cfg.tag_boost if ids.intersection(c.tags) else 1.0 for c in index.chunks])


def _ranked(index: RetrievalIndex, scores: np.ndarray) -> list[int]:
    return sorted(range(len(index)), key=lambda i: (-scores[i], index.chunks[i].id))


def retrieve(
    index: RetrievalIndex,
    q: GuidanceQuery,
    top_k: int | None = None,
    cfg: RetrievalConfig = RetrievalConfig(),
    scorer: Scorer = bm25,
) -> list[Hit]:
    """Top chunks by summed weighted label scores, tag-boosted; ties by chunk id."""
    top_k = cfg.top_k if top_k is None else top_k
    if top_k < 1:
        raise GuidanceError("top_k must be at least 1")
    if len(index) == 0:
        raise GuidanceError("empty index")
    scores = np.sum(_label_scores(index, q, cfg, scorer), axis=0) if q.labels else np.zeros(len(index))
    scores = scores * _boost(index, q.problem_ids, cfg)
    return [Hit(index.chunks[i], float(scores[i])) for i in _ranked(index, scores)[:top_k]]


def retrieve_per_problem(
    index: RetrievalIndex,
    q: GuidanceQuery,
    top_k: int | None = None,
    cfg: RetrievalConfig = RetrievalConfig(),
    scorer: Scorer = bm25,
) -> list[Hit]:
    """One context slot per query label, then the remaining slots by overall score.

    Slot ``m`` takes the best not-yet-chosen chunk for label ``m`` alone
    (boosted by its own problem id). Every hit carries its overall score, so
    hits stay comparable for budget truncation. Zero-score chunks are skipped.
    """
    top_k = cfg.top_k if top_k is None else top_k
    if top_k < 1:
        raise GuidanceError("top_k must be at least 1")
    overall = {h.chunk.id: h.score for h in retrieve(index, q, len(index), cfg, scorer)}
    per_label = _label_scores(index, q, cfg, scorer)
    chosen: list[int] = []
    for m, s in enumerate(per_label):
        if len(chosen) == top_k:
            break
        pid = q.problem_ids[m:m + 1]
        s = s * _boost(index, pid, cfg)
        for i in _ranked(index, s):
            if s[i] <= 0:
                break
            if i not in chosen:
                chosen.append(i)
                break
    for h in retrieve(index, q, len(index), cfg, scorer):
        if len(chosen) == top_k or h.score <= 0:
            break
        i = index.chunks.index(h.chunk)
        if i not in chosen:
            chosen.append(i)
    return [Hit(index.chunks[i], overall[index.chunks[i].id]) for i in chosen]


# ---------------------------------------------------------------------------
# prompt assembly


PREAMBLE = (
    "You are a sports biomechanics coach. Base every statement on the diagnosis "
    "and the numbered knowledge excerpts below, and cite excerpts by their id."
)
INSTRUCTION = (
    "Write a scored evaluation of the movement (0-100 overall, with one line per detected problem), "
    "then prescribe corrective drills with sets and repetitions for each problem, citing the supporting excerpt ids."
)


@dataclass(frozen=True)
class PromptConfig:
    char_budget: int = 12000
    preamble: str = PREAMBLE
    instruction: str = INSTRUCTION

    def __post_init__(self):
        if int(self.char_budget) != self.char_budget or self.char_budget < 1:
            raise GuidanceError("char_budget must be a positive integer")

    def to_dict(self) -> dict:
        return {"char_budget": self.char_budget}


@dataclass(frozen=True)
class ContextEntry:
    id: str
    text: str
    score: float
    source: str = ""
    tags: tuple[str, ...] = ()


@dataclass(frozen=True)
class AugmentedPrompt:
    preamble: str
    diagnosis: str  # canonical JSON
    context: tuple[ContextEntry, ...]
    instruction: str
    subject: str = ""
    dropped: tuple[str, ...] = ()

    def user_text(self) -> str:
        parts = ["## Diagnosis", self.diagnosis, "", "## Retrieved context"]
        if not self.context:
            parts.append(NO_CONTEXT)
        for k, c in enumerate(self.context, 1):
            parts.append(f"[{k}] id={c.id} source={c.source} score={c.score:.4f}")
            parts.append(c.text)
        parts += ["", "## Instruction", self.instruction]
        return "\n".join(parts) + "\n"

    def render(self) -> str:
        return self.preamble + "\n\n" + self.user_text()

    def messages(self) -> list[dict]:
        return [{"role": "system", "content": self.preamble}, {"role": "user", "content": self.user_text()}]

    def diagnosis_data(self) -> dict:
        return json.loads(self.diagnosis)


def _r(x: float) -> float:
    return round(float(x), 6)


def diagnosis_payload(d: Diagnosis, catalog: ProblemCatalog | None = None) -> dict:
    problems = []
    for p in d.top:
        problems.append(
            {
                "id": p,
                "description": catalog.description(p) if catalog is not None else "",
                "probability": _r(d.probabilities.get(p, 0.0)),
                "score": _r(d.scores.get(p, 0.0)),
            }
        )
    return {
        "label": d.label,
        "verdict": d.verdict,
        "top": problems,
        "deviations": {k: _r(v) for k, v in sorted(d.deviations.items())},
        "values": {k: _r(v) for k, v in sorted(d.values.items())},
    }


def assemble_prompt(
    d: Diagnosis,
    hits: Sequence[Hit],
    cfg: PromptConfig = PromptConfig(),
    catalog: ProblemCatalog | None = None,
    subject: str = "",
) -> AugmentedPrompt:
    """Deterministic prompt; whole lowest-scored chunks are dropped until it fits the budget."""
    diag = json.dumps(diagnosis_payload(d, catalog), sort_keys=True, indent=1, ensure_ascii=False)
    entries = [ContextEntry(h.chunk.id, h.chunk.text, float(h.score), h.chunk.source, h.chunk.tags) for h in hits]
    dropped: list[str] = []
    while True:
        prompt = AugmentedPrompt(cfg.preamble, diag, tuple(entries), cfg.instruction, subject, tuple(dropped))
        if len(prompt.render()) <= cfg.char_budget or not entries:
            return prompt
        # lowest score goes first; among equal scores the later-ranked one
        worst = min(range(len(entries)), key=lambda i: (entries[i].score, -i))
        dropped.append(entries.pop(worst).id)


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class ServiceConfig:
    endpoint: str
    model: str
    api_key_env: str = DEFAULT_API_KEY_ENV
    timeout: float = 60.0
    temperature: float = 0.0

    @classmethod
    def from_dict(cls, d: Mapping) -> "ServiceConfig":
        try:
            return cls(**dict(d))
        except TypeError as exc:
            raise GuidanceError(f"bad service config: {exc}") from None

    def url(self) -> str:
        u = self.endpoint.rstrip("/")
        return u if u.endswith("/chat/completions") else u + "/chat/completions"

    def api_key(self) -> str:
        key = os.environ.get(self.api_key_env)
        if not key:
            raise GuidanceError(f"environment variable {self.api_key_env} with the service API key is not set")
        return key

    def to_dict(self) -> dict:
        # the key itself is never echoed
        return {"endpoint": self.endpoint, "model": self.model, "api_key_env": self.api_key_env, "timeout": self.timeout}


@dataclass(frozen=True)
class Report:
    text: str
    backend: str
    metadata: Mapping[str, object] = field(default_factory=dict)


def _yaml_value(v) -> str:
    # JSON scalars and flow sequences are valid YAML
    return json.dumps(v, ensure_ascii=False)


def front_matter(fields: Mapping[str, object]) -> str:
    lines = ["---"] + [f"{k}: {_yaml_value(v)}" for k, v in fields.items()] + ["---", ""]
    return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def render_template_report(prompt: AugmentedPrompt) -> str:
    d = prompt.diagnosis_data()
    label = d.get("label", "")
    citations = [c.id for c in prompt.context]
    out = [
        front_matter(
            {
                "subject": prompt.subject,
                "motion_label": label,
                "backend": "template",
                "generator": TEMPLATE_MARK,
                "citations": citations,
            }
        ).rstrip("\n"),
        "",
        f"# Motion assessment: {label or 'unlabelled motion'}",
        "",
        f"_This report is {TEMPLATE_MARK}: it restates the diagnosis and quotes retrieved knowledge without a language model._",
        "",
        "## Verdict",
        "",
    ]
    devs = d.get("deviations", {})
    outside = sum(1 for v in devs.values() if v > 0)
    out.append(f"{d.get('verdict', '')}: {outside} of {len(devs)} metrics outside the target range.")
    out += ["", "## Metrics", "", "| metric | value | deviation |", "|---|---:|---:|"]
    values = d.get("values", {})
    for k in sorted(set(values) | set(devs)):
        v = values.get(k)
        out.append(f"| {k} | {'' if v is None else _fmt(v)} | {_fmt(devs.get(k, 0.0))} |")
    out += ["", "## Problems and drills", ""]
    if not d.get("top"):
        out.append("No deficiencies detected; keep the current technique and training plan.")
    for rank, p in enumerate(d.get("top", []), 1):
        out.append(f"### {rank}. {p['id']}: {p['description']} (probability {p['probability']:.3f})")
        out.append("")
        tagged = [c for c in prompt.context if p["id"] in c.tags]
        if not tagged:
            out.append("- no matching knowledge excerpt was retrieved")
        for c in tagged:
            out.append(f"- [{c.id}] {c.text}")
        out.append("")
    out += ["## Sources", ""]
    if not prompt.context:
        out.append(NO_CONTEXT)
    for c in prompt.context:
        out.append(f"- [{c.id}] {c.source}")
    return "\n".join(out).rstrip("\n") + "\n"


def _retry_after(resp: httpx.Response) -> float | None:
    v = resp.headers.get("retry-after")
    if v is None:
        return None
    try:
        return max(0.0, float(v))
    except ValueError:
        return None


def call_service(prompt: AugmentedPrompt, service: ServiceConfig, client: httpx.Client | None = None) -> tuple[str, dict]:
    """POST the prompt to an OpenAI-compatible chat-completions endpoint."""
    key = service.api_key()
    body = {"model": service.model, "messages": prompt.messages(), "temperature": service.temperature}
    headers = {"Authorization": f"Bearer {key}"}
    own = client is None
    client = client or httpx.Client(timeout=service.timeout)
    t0 = time.perf_counter()
    try:
        resp = client.post(service.url(), json=body, headers=headers)
    except httpx.TimeoutException:
        raise GenerationServiceError(f"generation service timed out: {service.url()}") from None
    except httpx.HTTPError as exc:
        raise GenerationServiceError(f"cannot reach generation service {service.url()}: {exc}") from None
    finally:
        if own:
            client.close()
    latency = 1000.0 * (time.perf_counter() - t0)
    if resp.status_code >= 400:
        raise GenerationServiceError(
            f"generation service returned HTTP {resp.status_code}", resp.status_code, _retry_after(resp)
        )
    try:
        data = resp.json()
        text = data["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError):
        raise GenerationServiceError("generation service returned an unexpected response body", resp.status_code) from None
    if not isinstance(text, str):
        raise GenerationServiceError("generation service returned non-text content", resp.status_code)
    return text, {"model": data.get("model", service.model), "latency_ms": round(latency, 1)}


def generate_report(
    prompt: AugmentedPrompt,
    backend: str = "template",
    service: ServiceConfig | None = None,
    client: httpx.Client | None = None,
) -> Report:
    """Render a report with the chosen backend. Failures of the external
    service raise :class:`GenerationServiceError`; there is no fallback."""
    if backend == "template":
        return Report(render_template_report(prompt), "template", {"generator": TEMPLATE_MARK})
    if backend != "external_service":
        raise GuidanceError(f"unknown backend {backend!r}")
    if service is None:
        raise GuidanceError("external_service backend needs a service configuration")
    text, meta = call_service(prompt, service, client)
    d = prompt.diagnosis_data()
    head = front_matter(
        {
            "subject": prompt.subject,
            "motion_label": d.get("label", ""),
            "backend": "external_service",
            "model": meta["model"],
            "latency_ms": meta["latency_ms"],
            "citations": [c.id for c in prompt.context],
        }
    )
    return Report(head + text.rstrip("\n") + "\n", "external_service", meta)
