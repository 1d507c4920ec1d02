import json
import threading
from datetime import date

import pytest
from hypothesis import given, strategies as st

from hypoforge.core import (
    AgentRole,
    EvidenceBundle,
    Hypothesis,
    LiteratureRecord,
    MetricScores,
    PipelineConfig,
    StepRecord,
    TraceStore,
    append_trace,
    overall_score,
    parse_date,
    token_totals,
)
from hypoforge.errors import InputError, SequencingError, TraceStateError
from hypoforge.kg import Edge, EntityNode, Subgraph

scores = st.integers(0, 5)


@given(scores, scores, scores, scores)
def test_overall_is_the_sum(n, r, s, v):
    m = MetricScores(n, r, s, v)
    assert overall_score(m) == m.overall == n + r + s + v
    assert 0 <= m.overall <= 20


def test_case_study_initial_scores():
    assert MetricScores(4, 5, 4, 4).overall == 17
    assert MetricScores(5, 5, 5, 5).overall == 20


@pytest.mark.parametrize("bad", [-1, 6])
def test_metric_range(bad):
    with pytest.raises(ValueError):
        MetricScores(bad, 0, 0, 0)


def test_metric_rejects_non_integers():
    with pytest.raises(TypeError):
        MetricScores(4.0, 5, 4, 4)
    with pytest.raises(TypeError):
        MetricScores(True, 5, 4, 4)


def test_hypothesis_lineage_rules():
    h = Hypothesis("H1", "GPR153 drives X")
    assert h.generation == 0 and h.parent_id is None
    Hypothesis("H1.1", "GPR153 drives X via Y", 1, "H1")
    with pytest.raises(ValueError):
        Hypothesis("H1.1", "text", 1)
    with pytest.raises(ValueError):
        Hypothesis("H1", "text", 0, "H0")
    with pytest.raises(ValueError):
        Hypothesis("H1", "   ")


def test_parse_date_forms():
    assert parse_date("2025") == date(2025, 1, 1)
    assert parse_date("2025/06") == date(2025, 6, 1)
    assert parse_date("2025-06-30") == date(2025, 6, 30)
    with pytest.raises(InputError):
        parse_date("June 2025")


def _record(pmid, day="2024-01-01"):
    return LiteratureRecord(pmid, f"title {pmid}", "abstract", day)


def test_literature_record_roundtrip():
    r = LiteratureRecord("1", "t", "a", "2024-03-05", ("Mesh",))
    assert LiteratureRecord.from_dict(r.to_dict()) == r


def test_evidence_merge_dedupes_and_replaces_background():
    a = EvidenceBundle((_record("1"), _record("2")), None, "old")
    b = EvidenceBundle((_record("2"), _record("3")), None, "new")
    merged = a.merge(b)
    assert [r.pmid for r in merged.literature] == ["1", "2", "3"]
    assert merged.background == "new"
    assert a.merge(EvidenceBundle()).background == "old"


def test_evidence_merge_unions_subgraphs():
    n = [EntityNode(x, x, "gene/protein") for x in "ABC"]
    s1 = Subgraph(tuple(n[:2]), (Edge("A", "r", "B"),), (), frozenset({"A"}))
    s2 = Subgraph(tuple(n[1:]), (Edge("B", "r", "C"), Edge("A", "r", "B")), (), frozenset({"C"}))
    merged = EvidenceBundle(subgraph=s1).merge(EvidenceBundle(subgraph=s2))
    assert merged.subgraph.edge_keys() == {("r", "A", "B"), ("r", "B", "C")}
    assert merged.subgraph.seeds == {"A", "C"}


def _step(run, i, text="x", tin=1, tout=2):
    return StepRecord(run, i, AgentRole.CRITIC, "d" * 8, text, tin, tout)


def test_trace_sequencing_and_idempotence(tmp_path):
    store = TraceStore(tmp_path / "t.jsonl")
    store.open_run("r")
    assert append_trace(store, _step("r", 0))
    assert not append_trace(store, _step("r", 0))
    with pytest.raises(SequencingError):
        store.append(_step("r", 0, "different"))
    with pytest.raises(SequencingError):
        store.append(_step("r", 2))
    store.append(_step("r", 1))
    store.close_run("r")
    with pytest.raises(TraceStateError):
        store.append(_step("r", 2))
    loaded = TraceStore.load(tmp_path / "t.jsonl")
    assert [r.step_index for r in loaded] == [0, 1]
    assert loaded[0].same_content(_step("r", 0))


def test_trace_requires_open_run():
    with pytest.raises(TraceStateError):
        TraceStore().append(_step("nope", 0))


def test_trace_jsonl_fields(tmp_path):
    store = TraceStore(tmp_path / "t.jsonl")
    store.open_run("r")
    store.append(_step("r", 0))
    row = json.loads((tmp_path / "t.jsonl").read_text().splitlines()[0])
    assert set(row) == {"run_id", "step_index", "agent_role", "input_digest", "output_text",
                        "tokens_in", "tokens_out", "timestamp"}
    assert row["timestamp"].endswith("Z")


def test_trace_concurrent_appends_stay_dense():
    store = TraceStore()
    store.open_run("r")
    lock = threading.Lock()

    def worker():
        for _ in range(50):
            with lock:
                i = store.next_index("r")
                store.append(_step("r", i))

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert [r.step_index for r in store.records("r")] == list(range(200))


def test_token_totals():
    assert token_totals([_step("r", 0, tin=3, tout=4), _step("r", 1, tin=5, tout=6)]) == (8, 10)


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(max_cycles=0)
    with pytest.raises(ValueError):
        PipelineConfig(emit_floor=19, accept_threshold=18)
    with pytest.raises(InputError):
        PipelineConfig.from_dict({"max_cycle": 3})
    cfg = PipelineConfig(temporal_cutoff="2025-06-30", relations=["a"])
    assert cfg.temporal_cutoff == date(2025, 6, 30)
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
