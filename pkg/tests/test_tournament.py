import re

import pytest

from hypoforge.core import METRICS
from hypoforge.llm import ChatResponse, Gateway
from hypoforge.stats import Outcome, fit_bradley_terry, run_pairwise_tournament
from hypoforge.stats.tournament import presentation_schedule

STRENGTH = {"strong": 2, "medium": 1, "weak": 0}


class RankJudge:
    """Prefers the hypothesis whose marker word ranks higher; ties on novelty."""

    def __init__(self):
        self.calls = 0

    def chat(self, request):
        self.calls += 1
        if "garbled" in request.user_prompt:
            return ChatResponse("no verdict here")
        a, b = re.findall(r"\b(strong|medium|weak)\b", request.user_prompt)[-2:]
        sa, sb = STRENGTH[a], STRENGTH[b]
        win = "A" if sa > sb else "B" if sb > sa else "0"
        return ChatResponse("\n".join(f"{m.capitalize()}: {'0' if m == 'novelty' else win} - reason" for m in METRICS))


def _systems(topics=("t1", "t2", "t3")):
    return {name: {t: f"A {name} hypothesis about {t}" for t in topics} for name in STRENGTH}


def test_schedule_is_seeded_and_covers_every_pair():
    a = presentation_schedule(["x", "y", "z"], ["t"], seed=5)
    assert a == presentation_schedule(["x", "y", "z"], ["t"], seed=5)
    assert sorted(tuple(sorted(p[1:])) for p in a) == [("x", "y"), ("x", "z"), ("y", "z")]


@pytest.mark.parametrize("workers", [None, 4])
def test_tournament_records_and_ranking(workers):
    judge = RankJudge()
    records = run_pairwise_tournament(_systems(), Gateway(judge), seed=3, max_workers=workers)
    assert judge.calls == 9 and len(records) == 9 * len(METRICS)
    assert all(r.outcome is Outcome.TIE for r in records if r.metric == "novelty")
    sig = [r for r in records if r.metric == "significance"]
    for r in sig:
        expected = Outcome.FIRST_WINS if STRENGTH[r.first] > STRENGTH[r.second] else Outcome.SECOND_WINS
        assert r.outcome is expected
    fit = fit_bradley_terry(sig, include_order_effect=False)
    assert fit.beta["strong"] > fit.beta["medium"] > fit.beta["weak"]


def test_unparseable_verdicts_are_dropped_and_partial_topics_skipped():
    systems = _systems()
    systems["weak"]["t1"] = "garbled weak text"
    systems["strong"]["t4"] = "only one system answered"
    records = run_pairwise_tournament(systems, Gateway(RankJudge()), seed=0)
    assert len(records) == 7 * len(METRICS)
    assert {r.topic for r in records} == {"t1", "t2", "t3"}
    with pytest.raises(ValueError):
        run_pairwise_tournament({"a": {}}, Gateway(RankJudge()))
