"""Exit criteria. Each test times its body, checks the runtime budget and
records one PASS/FAIL line, printed at the end of the session."""

import functools
import json
import time
from datetime import date

import numpy as np
import pytest
from scipy.stats import kendalltau, pearsonr

from hypoforge.cli import data_path, main
from hypoforge.core import METRICS, AgentRole, TraceStore, token_totals
from hypoforge.kg import Edge, EntityNode, Graph, RetrievalLimits, retrieve_subgraph
from hypoforge.literature import InMemoryCorpus
from hypoforge.llm import Gateway, Rule, RuleBackend, load_backend
from hypoforge.protocol import parse_critic, parse_pairwise, parse_relation, parse_reviewer
from hypoforge.stats import (
    RaschData,
    classification_metrics,
    classify_relations,
    fit_bradley_terry,
    fit_davidson,
    fit_rasch_map,
    quasi_variances,
    read_comparisons,
    simulate_comparisons,
)
from hypoforge.stats import _kernels
from hypoforge.stats.rasch import RaschModel

import parser_fixtures as pf
from conftest import CASE, DATA, TOPIC, case_config, run_case
from oracles import (
    brute_force_subgraph,
    bt_grid_oracle,
    ordered_probit_oracle,
    quasi_variance_cd,
    random_graph,
)
from test_metrics import PRED, TOY, TRUE as TRUE_LABELS
from test_orchestrator import H1_FINAL, _critic_replies
from test_rasch import simulate_ratings

pytestmark = pytest.mark.acceptance

RESULTS: dict[int, str] = {}


def criterion(number, title, budget):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            status, detail = "FAIL", ""
            try:
                fn(*args, **kwargs)
                elapsed = time.perf_counter() - start
                if elapsed >= budget:
                    detail = f" over budget {budget:g} s"
                    raise AssertionError(f"criterion {number} took {elapsed:.2f} s (budget {budget:g} s)")
                status = "PASS"
            finally:
                elapsed = time.perf_counter() - start
                RESULTS[number] = f"criterion {number:2d} {status} {title} ({elapsed:.2f} s){detail}"
                print(RESULTS[number])
        return run
    return wrap


@pytest.fixture(scope="module", autouse=True)
def warm_jit():
    _kernels.warm_up()


@pytest.fixture
def clean_env(monkeypatch):
    for var in ("HYPOFORGE_MAX_CYCLES", "HYPOFORGE_ACCEPT_THRESHOLD", "HYPOFORGE_EMIT_FLOOR",
                "HYPOFORGE_CUTOFF", "HYPOFORGE_SEED"):
        monkeypatch.delenv(var, raising=False)


@criterion(1, "case-study replay", 5)
def _case_study(tmp_path):
    assert main(["generate", "--topic", TOPIC, "--scripted", "case-study", "--out", str(tmp_path)]) == 0
    [result_path] = tmp_path.glob("*.json")
    result = json.loads(result_path.read_text())
    records = TraceStore.load(next(tmp_path.glob("*.trace.jsonl")))
    h1 = _critic_replies(records, "H1")
    initial = parse_critic(h1[0].output_text)[0]
    assert initial.as_dict() == {"novelty": 4, "relevance": 5, "significance": 4, "verifiability": 4}
    assert initial.overall == 17
    assert parse_critic(h1[1].output_text)[0].overall == 19
    best = result["outputs"][0]
    assert best["hypothesis"]["id"] == "H1.3"
    assert best["scores"] == {"novelty": 5, "relevance": 5, "significance": 5, "verifiability": 4}
    assert best["overall"] == 19
    assert best["hypothesis"]["text"].encode() == H1_FINAL.encode()


def test_criterion_01_case_study_replay(tmp_path, clean_env):
    _case_study(tmp_path)


@criterion(2, "Bradley-Terry recovery", 2)
def _bt_recovery():
    truth = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
    records = simulate_comparisons(truth, alpha=0.4, n=2000, tie_rate=0.1, seed=7)
    fit = fit_bradley_terry(records)
    est = np.array([fit.beta[f"S{i + 1}"] for i in range(5)])
    est -= est.mean()
    assert kendalltau(est, truth).statistic == pytest.approx(1.0, abs=1e-12)
    assert list(np.argsort(est)) == [0, 1, 2, 3, 4]
    assert np.max(np.abs(est - truth)) <= 0.15
    assert abs(fit.alpha - 0.4) <= 0.1


def test_criterion_02_bt_recovery():
    _bt_recovery()


@criterion(3, "BT oracle equivalence", 5)
def _bt_oracle():
    fixtures = sorted(DATA.glob("bt_*.csv"))
    assert fixtures
    for path in fixtures:
        records = read_comparisons(path)
        assert len({r.first for r in records} | {r.second for r in records}) <= 3
        for order in (True, False):
            fit = fit_bradley_terry(records, include_order_effect=order)
            betas, alpha = bt_grid_oracle(records, include_order_effect=order)
            for s, b in betas.items():
                assert abs(fit.beta[s] - b) <= 1e-3, (path.name, s)
            if order:
                assert abs(fit.alpha - alpha) <= 1e-3, path.name


def test_criterion_03_bt_oracle():
    _bt_oracle()


@criterion(4, "quasi-variance exactness", 1)
def _quasi():
    for q, c in (([0.1, 0.2, 0.3], [0, 0, 0]), ([0.05, 0.4, 0.01, 0.2], [0.3, -0.1, 0.2, 0.0]),
                 ([1, 2, 3, 4, 5, 6], [0.5] * 6)):
        q, c = np.asarray(q, float), np.asarray(c, float)
        qv = quasi_variances(np.diag(q) + c[:, None] + c[None, :])
        assert max(abs(e) for e in qv.relative_errors.values()) <= 1e-10
    rng = np.random.default_rng(2024)
    X = rng.normal(size=(9, 6))
    S = X.T @ X / 9 + 0.05 * np.eye(6)
    got = np.array(list(quasi_variances(S).q.values()))
    assert np.max(np.abs(got - quasi_variance_cd(S))) <= 1e-6


def test_criterion_04_quasi_variances():
    _quasi()


@criterion(5, "Davidson vs half-win BT", 2)
def _davidson():
    records = read_comparisons(data_path("tournament.csv"))
    groups = {"all": records}
    for r in records:
        groups.setdefault(r.metric, []).append(r)
    for name, rows in groups.items():
        bt, dv = fit_bradley_terry(rows), fit_davidson(rows)
        r = pearsonr([bt.beta[s] for s in bt.systems], [dv.beta[s] for s in bt.systems]).statistic
        assert r >= 0.99, (name, r)


def test_criterion_05_davidson():
    _davidson()


@criterion(6, "Rasch correctness", 10)
def _rasch():
    h = 1e-5
    for seed in range(10):
        model = RaschModel(simulate_ratings(seed), sigma_u=0.8, sigma_v=1.2)
        theta = model.start() + np.random.default_rng(50 + seed).normal(0, 0.3, model.size)
        _, g = model.value_and_grad(theta)
        fd = np.array([(model.logpost(theta + h * e) - model.logpost(theta - h * e)) / (2 * h)
                       for e in np.eye(model.size)])
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-6, seed
    data = simulate_ratings(3, raters=1, hypotheses=30, K=4, metrics=METRICS[:3])
    fit = fit_rasch_map(data, sigma_u=1.0, sigma_v=0.0)
    index = {m: i for i, m in enumerate(METRICS[:3])}
    tau, shifts = ordered_probit_oracle([r[3] for r in data.ratings], [index[r[2]] for r in data.ratings], data.K)
    assert np.max(np.abs(fit.tau - tau)) <= 1e-4
    assert np.max(np.abs(np.array([fit.beta_m[m] for m in METRICS[:3]]) - shifts)) <= 1e-4
    fits = [fit] + [fit_rasch_map(simulate_ratings(s, reps=2)) for s in range(4)]
    fits.append(fit_rasch_map(RaschData(tuple((f"R{i % 2}", f"H{i % 3}", "novelty", 2 + i % 2)
                                              for i in range(12)), 5)))
    for f in fits:
        assert np.all(np.diff(f.tau) > 0)


def test_criterion_06_rasch():
    _rasch()


class CapturingBackend:
    def __init__(self, inner):
        self.inner = inner
        self.prompts = []

    def chat(self, request):
        self.prompts.append(request.system_prompt + "\n" + request.user_prompt)
        return self.inner.chat(request)


@criterion(7, "temporal soundness", 5)
def _temporal():
    cfg = case_config()
    corpus = InMemoryCorpus.from_json(CASE / "corpus.json")
    late = [r for r in corpus.records.values() if r.pub_date > cfg.temporal_cutoff]
    assert len(late) == 3 and not corpus.honor_dates
    backend = CapturingBackend(load_backend(CASE))
    result, services = run_case(backend=backend, corpus=corpus)
    text = "\n".join(backend.prompts)
    text += "\n".join(r.output_text for r in services.trace.records(result.run_id))
    for r in late:
        assert r.pmid not in text and r.title not in text
    bundles = [o.evidence for o in result.outputs]
    for ev in bundles:
        assert all(rec.pub_date <= cfg.temporal_cutoff for rec in ev.literature)
        assert not {rec.pmid for rec in ev.literature} & {r.pmid for r in late}
    assert any(ev.literature for ev in bundles)


def test_criterion_07_temporal():
    _temporal()


@criterion(8, "parser suite", 1)
def _parsers():
    for name in ("critic_inline", "critic_template", "critic_fields"):
        scores, _, stated = parse_critic(getattr(pf, name.upper()))
        values, overall = pf.EXPECTED[name]
        assert tuple(scores.as_dict().values()) == values and stated == overall
    d = parse_reviewer(pf.DIRECTIVE)
    assert (d.actions, d.depth_override, d.rels_override) == pf.EXPECTED["directive"]
    v = parse_pairwise(pf.PAIRWISE)
    assert tuple(v.winners[m] for m in METRICS) == pf.EXPECTED["pairwise"]
    for text, label in pf.RELATIONS.items():
        assert parse_relation(text) is label
    parsers = {"critic": parse_critic, "critic_inline": parse_critic, "directive": parse_reviewer,
               "pairwise": parse_pairwise}
    mutants = 0
    for name, text in pf.MUTANT_FIXTURES.items():
        parser = parse_relation if name.startswith("relation") else parsers[name]
        for _, mutant in pf.single_line_deletions(text):
            with pytest.raises(Exception) as info:
                parser(mutant)
            assert type(info.value).__name__ in {"ParseError", "ConsistencyError", "RangeError"}
            mutants += 1
    assert mutants >= 15


def test_criterion_08_parsers():
    _parsers()


@criterion(9, "subgraph oracle", 10)
def _subgraph():
    for seed in range(100):
        nodes, edges, seeds = random_graph(seed, max_nodes=12)
        assert len(nodes) <= 12
        g = Graph([EntityNode(n, n, "x") for n in nodes], [Edge(*e) for e in edges])
        for depth in (1, 2, 3):
            sg = retrieve_subgraph(g, seeds, depth, None, RetrievalLimits(10**6, 10**6))
            direct, paths = brute_force_subgraph(nodes, edges, seeds, depth)
            assert {(e.src, e.relation, e.dst) for e in sg.direct_edges} == direct, (seed, depth)
            assert {(p.nodes, tuple((e.src, e.relation, e.dst) for e in p.edges))
                    for p in sg.multihop_paths} == paths, (seed, depth)


def test_criterion_09_subgraph_oracle():
    _subgraph()


@criterion(10, "pipeline determinism and bounds", 5)
def _determinism():
    a, sa = run_case()
    b, sb = run_case()
    assert a.canonical() == b.canonical()
    ra, rb = sa.trace.records(a.run_id), sb.trace.records(b.run_id)
    assert len(ra) == len(rb) and all(x.same_content(y) for x, y in zip(ra, rb))
    cfg = case_config()
    for out in a.outputs:
        assert out.hypothesis.generation <= cfg.max_cycles
    for h in a.discarded:
        assert h.generation <= cfg.max_cycles
    for tag in ("H1", "H2", "H3"):
        # one initial critique plus one per refinement
        assert len(_critic_replies(ra, tag)) <= cfg.max_cycles + 1
    refinements = [r for r in ra if r.agent_role is AgentRole.REFINER]
    assert len(refinements) <= cfg.n_initial_hypotheses * cfg.max_cycles
    assert token_totals(ra) == (sa.gateway.usage.tokens_in, sa.gateway.usage.tokens_out)


def test_criterion_10_determinism():
    _determinism()


@criterion(11, "classification metrics", 1)
def _metrics():
    rep = classification_metrics(PRED, TRUE_LABELS)
    assert rep.confusion == {("Positive", "Positive"): 4, ("Positive", "Negative"): 2,
                             ("Negative", "Positive"): 1, ("Negative", "Negative"): 3}
    assert rep.accuracy == 0.7
    rules = [Rule(AgentRole.CLASSIFIER, "Relation: " + ("stimulate" if lab == "Positive" else "inhibit"), (hyp,))
             for hyp, _, lab in TOY]
    labels = classify_relations([(h, e) for h, e, _ in TOY], Gateway(RuleBackend(rules)))
    assert classification_metrics(labels, [lab for *_, lab in TOY]).accuracy == 1.0


def test_criterion_11_metrics():
    _metrics()


def test_cutoff_is_set_for_the_case_study():
    assert case_config().temporal_cutoff == date(2025, 6, 30)
