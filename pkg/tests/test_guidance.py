import json
import math
from pathlib import Path

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from motioncoach import guidance as g
from motioncoach import synth
from motioncoach.assess import (
    Diagnosis,
    ProblemCatalog,
    TargetModel,
    aggregate,
    diagnose,
    evaluate_metrics,
    load_metric_definitions,
)
from motioncoach.skeleton import load_angle_definitions

from .oracles import hand_bm25

FIX = Path(__file__).parent / "fixtures"
FIVE = FIX / "bm25_five.jsonl"
GOLDEN = FIX / "golden" / "report_template.md"

# hand-counted token lists of the five fixture chunks (lengths 5, 11, 4, 5, 6)
FIVE_TOKENS = {
    "k1": "hip extension drives the takeoff".split(),
    "k2": "knee extension and hip extension at takeoff need full hip drive".split(),
    "k3": "ankle stiffness at landing".split(),
    "k4": "takeoff timing and takeoff angle".split(),
    "k5": "trunk lean in the set position".split(),
}
# frozen from the oracle; k4/"takeoff" checked by hand: ln(1 + 2.5/3.5) * 2 * 2.2 / (2 + 1.2 * (0.25 + 0.75 * 5 / 6.2))
FROZEN = {
    "hip extension takeoff": {"k1": 2.4868391261949236, "k2": 2.38640115232887, "k4": 0.7837859562893233},
    "takeoff": {"k1": 0.5853433335982368, "k2": 0.4093492355230431, "k4": 0.7837859562893233},
    "set position hip": {"k1": 0.9507478962983436, "k2": 0.9885259584029136, "k5": 2.8096664317496742},
}


def chunk(cid, text, tags=(), tier="textbook"):
    return g.KnowledgeChunk(cid, tier, text, tuple(tags), f"src {cid}")


def query(text, pids=()):
    return g.GuidanceQuery(((text, 1.0),), "", tuple(pids))


def fixture_diagnosis():
    spec = synth.SynthSpec(subject_variation=False, scale=1.0, violations=(("knee_angle_at_takeoff", 12.0), ("flight_time", 0.15)))
    seq, truth = synth.generate(spec)
    vals = evaluate_metrics(seq, truth.keyframe_map(), load_metric_definitions(), load_angle_definitions())
    return diagnose(vals, TargetModel.load(), ProblemCatalog.load())


def fixture_report():
    cat = ProblemCatalog.load()
    d = fixture_diagnosis()
    hits = g.retrieve_per_problem(g.ingest(), g.transform_query(d, cat))
    prompt = g.assemble_prompt(d, hits, catalog=cat, subject="fixture-athlete")
    return g.generate_report(prompt).text


# ---------------------------------------------------------------------------
# ingestion


def test_three_chunk_index_counts():
    idx = g.RetrievalIndex.build([chunk("a", "hip drive"), chunk("b", "hip hip knee"), chunk("c", "ankle")])
    assert len(idx) == 3
    assert idx.df == {"ankle": 1, "drive": 1, "hip": 2, "knee": 1}
    assert idx.avgdl == 2.0


def test_ingest_twice_byte_identical(tmp_path):
    a = g.ingest(FIVE).save(tmp_path / "a.idx")
    b = g.ingest(FIVE).save(tmp_path / "b.idx")
    assert a.read_bytes() == b.read_bytes()
    again = g.RetrievalIndex.load(a)
    assert again.to_bytes() == a.read_bytes()


def test_index_order_independent_of_input_order():
    chunks = g.read_corpus(FIVE)
    assert g.RetrievalIndex.build(chunks).to_bytes() == g.RetrievalIndex.build(chunks[::-1]).to_bytes()


def test_duplicate_id_named():
    with pytest.raises(g.GuidanceError, match="'k1'"):
        g.RetrievalIndex.build(g.read_corpus([FIVE, FIVE]))


def test_malformed_corpus_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(FIVE.read_text() + '{"id": "x", "tier": "nope", "text": "t"}\n')
    with pytest.raises(g.GuidanceError, match=":6: .*unknown tier"):
        g.read_corpus(p)


def test_tampered_index_rejected(tmp_path):
    p = g.ingest(FIVE).save(tmp_path / "i.idx")
    p.write_bytes(p.read_bytes().replace(b'"avgdl":6.2', b'"avgdl":7.2'))
    with pytest.raises(g.GuidanceError, match="inconsistent"):
        g.RetrievalIndex.load(p)


def test_bundled_corpus_covers_tiers_and_problems():
    chunks = g.read_corpus()
    assert 50 <= len(chunks) <= 70
    assert {c.tier for c in chunks} == set(g.TIERS)
    tags = {t for c in chunks for t in c.tags}
    assert tags == set(ProblemCatalog.load().problem_ids)


# ---------------------------------------------------------------------------
# query transformation


def test_transform_single_problem():
    cat = ProblemCatalog.load()
    d = Diagnosis({}, {"P6": 3.0}, {"P6": 1.0}, ("P6",))
    q = g.transform_query(d, cat)
    assert q.labels == (("insufficient hip extension at takeoff", 1.0),)


def test_transform_weights_follow_probabilities():
    cat = ProblemCatalog.load()
    d = Diagnosis({}, {"P1": 3.0, "P2": 1.0}, {"P1": 0.75, "P2": 0.25}, ("P1", "P2"))
    assert [w for _, w in g.transform_query(d, cat).labels] == [0.75, 0.25]


def test_transform_empty_diagnosis():
    with pytest.raises(g.GuidanceError, match="nothing to retrieve"):
        g.transform_query(Diagnosis({}, {}, {}, ()), ProblemCatalog.load())


# ---------------------------------------------------------------------------
# retrieval


def test_containing_chunk_ranks_first():
    idx = g.RetrievalIndex.build([chunk("a", "weak ankle push"), chunk("b", "trunk lean"), chunk("c", "arm swing")])
    hits = g.retrieve(idx, query("weak ankle push"))
    assert hits[0].chunk.id == "a" and hits[0].score > 0
    assert all(h.score == 0 for h in hits[1:])


def test_top_k_larger_than_corpus():
    idx = g.ingest(FIVE)
    assert len(g.retrieve(idx, query("hip"), top_k=50)) == 5


@pytest.mark.parametrize("text", list(FROZEN))
def test_five_chunk_scores_match_hand_computation(text):
    idx = g.ingest(FIVE)
    hits = g.retrieve(idx, query(text), top_k=5)
    got = {h.chunk.id: h.score for h in hits}
    oracle = hand_bm25(text.split(), FIVE_TOKENS)
    expected = {k: FROZEN[text].get(k, 0.0) for k in FIVE_TOKENS}
    assert got == pytest.approx(oracle, abs=1e-12)
    assert got == pytest.approx(expected, abs=1e-12)
    # ranking: descending score, ties by id
    assert [h.chunk.id for h in hits] == sorted(expected, key=lambda k: (-expected[k], k))


def test_tag_boost_and_id_tie_break():
    idx = g.RetrievalIndex.build([chunk("b", "hip drive", ["P6"]), chunk("a", "hip drive"), chunk("c", "other words")])
    hits = g.retrieve(idx, query("hip drive", ["P6"]))
    assert [h.chunk.id for h in hits] == ["b", "a", "c"]
    assert hits[0].score == pytest.approx(1.5 * hits[1].score)
    plain = g.retrieve(idx, query("hip drive"))
    assert [h.chunk.id for h in plain] == ["a", "b", "c"]


def test_per_problem_gives_each_label_a_slot():
    idx = g.RetrievalIndex.build(
        [chunk("a1", "knee knee knee bend"), chunk("a2", "knee knee bend"), chunk("a3", "knee bend"), chunk("b1", "ankle push")]
    )
    q = g.GuidanceQuery((("knee bend", 0.9), ("ankle push", 0.1)), "", ("P1", "P2"))
    ids = [h.chunk.id for h in g.retrieve_per_problem(idx, q, top_k=2)]
    overall = [h.chunk.id for h in g.retrieve(idx, q, top_k=2)]
    assert "b1" not in overall
    assert ids == [overall[0], "b1"]


words = st.lists(st.sampled_from(["hip", "knee", "ankle", "push", "drive", "set"]), min_size=1, max_size=8)


@given(st.lists(words, min_size=1, max_size=6), words)
def test_scores_non_negative(docs, q):
    idx = g.RetrievalIndex.build([chunk(f"c{i}", " ".join(d)) for i, d in enumerate(docs)])
    assert all(h.score >= 0 for h in g.retrieve(idx, query(" ".join(q)), top_k=len(docs)))


@given(st.lists(words, min_size=1, max_size=6), words, st.integers(1, 12))
def test_irrelevant_chunk_scores_zero_and_keeps_positive_set(docs, q, n):
    chunks = [chunk(f"c{i}", " ".join(d)) for i, d in enumerate(docs)]
    junk = chunk("zz", " ".join(["unrelated"] * n))
    before = g.retrieve(g.RetrievalIndex.build(chunks), query(" ".join(q)), top_k=len(chunks))
    after = g.retrieve(g.RetrievalIndex.build(chunks + [junk]), query(" ".join(q)), top_k=len(chunks) + 1)
    assert next(h.score for h in after if h.chunk.id == "zz") == 0.0
    pos_before = [h.chunk.id for h in before if h.score > 0]
    pos_after = [h.chunk.id for h in after if h.score > 0]
    assert set(pos_before) == set(pos_after)
    # the junk chunk never outranks a chunk that matches the query
    assert [h.chunk.id for h in after][: len(pos_after)] == pos_after


@given(st.lists(words, min_size=1, max_size=6), st.sampled_from(["hip", "knee", "ankle"]), st.integers(1, 12))
def test_irrelevant_chunk_keeps_order_single_term_no_length_norm(docs, term, n):
    cfg = g.RetrievalConfig(b=0.0)
    chunks = [chunk(f"c{i}", " ".join(d)) for i, d in enumerate(docs)]
    junk = chunk("zz", " ".join(["unrelated"] * n))
    before = [h.chunk.id for h in g.retrieve(g.RetrievalIndex.build(chunks), query(term), len(chunks), cfg) if h.score > 0]
    after = [h.chunk.id for h in g.retrieve(g.RetrievalIndex.build(chunks + [junk]), query(term), len(chunks) + 1, cfg) if h.score > 0]
    assert before == after


def test_irrelevant_chunk_can_reorder_multi_label_query():
    # adding a non-matching chunk shifts avgdl and idf, which can swap two
    # existing results when several weighted labels are summed
    chunks = [chunk("c0", "hip ankle"), chunk("c1", "hip hip push")]
    q = g.GuidanceQuery((("hip knee", 1.0), ("push ankle", 0.5)), "", ())
    before = [h.chunk.id for h in g.retrieve(g.RetrievalIndex.build(chunks), q)]
    after = [h.chunk.id for h in g.retrieve(g.RetrievalIndex.build(chunks + [chunk("zz", "x")]), q) if h.chunk.id != "zz"]
    assert before == ["c0", "c1"]
    assert after == ["c1", "c0"]


def test_retrieval_config_validation():
    with pytest.raises(g.GuidanceError):
        g.RetrievalConfig(b=1.5)
    with pytest.raises(g.GuidanceError):
        g.RetrievalConfig(top_k=0)


# ---------------------------------------------------------------------------
# prompt assembly


def test_no_hits_marks_missing_context():
    d = fixture_diagnosis()
    p = g.assemble_prompt(d, [], catalog=ProblemCatalog.load())
    text = p.render()
    assert g.NO_CONTEXT in text
    assert '"knee_angle_at_takeoff"' in text


def test_budget_drops_lowest_score_first():
    d = Diagnosis({}, {"P1": 1.0}, {"P1": 1.0}, ("P1",))
    hits = [g.Hit(chunk("a", "x" * 200), 3.0), g.Hit(chunk("b", "y" * 200), 1.0), g.Hit(chunk("c", "z" * 200), 2.0)]
    full = g.assemble_prompt(d, hits)
    budget = len(full.render()) - 100
    p = g.assemble_prompt(d, hits, g.PromptConfig(char_budget=budget))
    assert [c.id for c in p.context] == ["a", "c"]
    assert p.dropped == ("b",)
    assert len(p.render()) <= budget


def test_budget_ties_drop_later_entry():
    d = Diagnosis({}, {"P1": 1.0}, {"P1": 1.0}, ("P1",))
    hits = [g.Hit(chunk("a", "x" * 200), 1.0), g.Hit(chunk("b", "y" * 200), 1.0)]
    budget = len(g.assemble_prompt(d, hits).render()) - 100
    assert g.assemble_prompt(d, hits, g.PromptConfig(char_budget=budget)).dropped == ("b",)


def test_prompt_deterministic():
    cat = ProblemCatalog.load()
    d = fixture_diagnosis()
    hits = g.retrieve(g.ingest(), g.transform_query(d, cat))
    a = g.assemble_prompt(d, hits, catalog=cat).render()
    b = g.assemble_prompt(fixture_diagnosis(), list(hits), catalog=cat).render()
    assert a == b


# ---------------------------------------------------------------------------
# generation


def test_template_report_matches_golden_file():
    assert fixture_report() == GOLDEN.read_text("utf-8")


def test_template_report_byte_deterministic():
    assert fixture_report().encode() == fixture_report().encode()


def test_template_report_cites_every_top_problem():
    cat = ProblemCatalog.load()
    idx = g.ingest()
    for seed in range(40):
        rng = np.random.default_rng(seed)
        D = {k: float(x) for k, x in zip(cat.metrics, rng.uniform(0, 10, 10) * (rng.random(10) < 0.4))}
        d = aggregate(D, cat)
        if not d.top:
            continue
        hits = g.retrieve_per_problem(idx, g.transform_query(d, cat))
        text = g.generate_report(g.assemble_prompt(d, hits, catalog=cat)).text
        for p in d.top:
            section = text.split(f". {p}: ", 1)[1].split("\n### ", 1)[0].split("\n## ", 1)[0]
            assert cat.description(p) in section
            assert "\n- [" in section


def test_front_matter_fields():
    text = fixture_report()
    head = text.split("---\n")[1]
    fields = dict(line.split(": ", 1) for line in head.strip().splitlines())
    assert json.loads(fields["backend"]) == "template"
    assert json.loads(fields["subject"]) == "fixture-athlete"
    assert len(json.loads(fields["citations"])) == 6


SERVICE = g.ServiceConfig("http://coach.invalid/v1", "demo-model", api_key_env="MC_TEST_KEY")


def _prompt():
    return g.assemble_prompt(Diagnosis({}, {"P1": 1.0}, {"P1": 1.0}, ("P1",)), [g.Hit(chunk("a", "knee"), 1.0)])


def test_external_success(monkeypatch):
    monkeypatch.setenv("MC_TEST_KEY", "secret")
    seen = {}

    def handler(request):
        seen["auth"] = request.headers["authorization"]
        seen["url"] = str(request.url)
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"model": "demo-model", "choices": [{"message": {"content": "Do squats."}}]})

    rep = g.generate_report(_prompt(), "external_service", SERVICE, httpx.Client(transport=httpx.MockTransport(handler)))
    assert seen["auth"] == "Bearer secret"
    assert seen["url"] == "http://coach.invalid/v1/chat/completions"
    assert [m["role"] for m in seen["body"]["messages"]] == ["system", "user"]
    assert rep.text.endswith("Do squats.\n")
    assert '"external_service"' in rep.text


def test_external_http_error_carries_retry_after(monkeypatch):
    monkeypatch.setenv("MC_TEST_KEY", "secret")
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(503, headers={"Retry-After": "7"})))
    with pytest.raises(g.GenerationServiceError) as exc:
        g.generate_report(_prompt(), "external_service", SERVICE, client)
    assert exc.value.status == 503 and exc.value.retry_after == 7.0


def test_external_unreachable(monkeypatch):
    monkeypatch.setenv("MC_TEST_KEY", "secret")

    def refuse(request):
        raise httpx.ConnectError("connection refused", request=request)

    with pytest.raises(g.GenerationServiceError, match="cannot reach"):
        g.generate_report(_prompt(), "external_service", SERVICE, httpx.Client(transport=httpx.MockTransport(refuse)))


def test_external_timeout(monkeypatch):
    monkeypatch.setenv("MC_TEST_KEY", "secret")

    def slow(request):
        raise httpx.ReadTimeout("slow", request=request)

    with pytest.raises(g.GenerationServiceError, match="timed out"):
        g.generate_report(_prompt(), "external_service", SERVICE, httpx.Client(transport=httpx.MockTransport(slow)))


def test_external_malformed_body(monkeypatch):
    monkeypatch.setenv("MC_TEST_KEY", "secret")
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(200, json={"choices": []})))
    with pytest.raises(g.GenerationServiceError, match="unexpected response"):
        g.generate_report(_prompt(), "external_service", SERVICE, client)


def test_external_without_key_fails_before_network(monkeypatch):
    monkeypatch.delenv("MC_TEST_KEY", raising=False)

    def boom(request):
        raise AssertionError("network touched")

    with pytest.raises(g.GuidanceError, match="MC_TEST_KEY"):
        g.generate_report(_prompt(), "external_service", SERVICE, httpx.Client(transport=httpx.MockTransport(boom)))


def test_idf_formula():
    idx = g.ingest(FIVE)
    assert g.idf(idx, "hip") == pytest.approx(math.log(1 + 3.5 / 2.5))
    assert g.idf(idx, "absent") == pytest.approx(math.log(1 + 5.5 / 0.5))
