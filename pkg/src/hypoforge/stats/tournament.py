"""Judge-driven harnesses: pairwise tournaments and relation classification."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from ..core import METRICS, AgentRole
from ..errors import ParseError
from ..prompts import PromptContext, PromptKind, render_prompt
from ..protocol import Relation, Winner, parse_pairwise, parse_relation
from .bradley_terry import ComparisonRecord, Outcome

if TYPE_CHECKING:
    from ..llm import Gateway

log = logging.getLogger(__name__)

_OUTCOME = {Winner.FIRST: Outcome.FIRST_WINS, Winner.SECOND: Outcome.SECOND_WINS, Winner.TIE: Outcome.TIE}


def presentation_schedule(
    systems: Sequence[str], topics: Sequence[str], seed: int
) -> list[tuple[str, str, str]]:
    """(topic, first, second) for each topic and unordered system pair, order drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    out = []
    for topic in topics:
        for a, b in itertools.combinations(systems, 2):
            out.append((topic, b, a) if rng.random() < 0.5 else (topic, a, b))
    return out


def run_pairwise_tournament(
    hypotheses_by_system: Mapping[str, Mapping[str, str]],
    gateway: "Gateway",
    seed: int = 0,
    *,
    max_workers: int | None = None,
) -> list[ComparisonRecord]:
    """One judged comparison per topic and system pair, expanded to one record per metric.

    Only topics every system answered are used. A judge reply that fails
    to parse drops that comparison with a logged warning.
    """
    systems = sorted(hypotheses_by_system)
    if len(systems) < 2:
        raise ValueError("need at least two systems")
    topics = sorted(set.intersection(*(set(hypotheses_by_system[s]) for s in systems)))
    schedule = presentation_schedule(systems, topics, seed)

    def judge(item):
        topic, first, second = item
        pair = (hypotheses_by_system[first][topic], hypotheses_by_system[second][topic])
        prompt = render_prompt(PromptContext(PromptKind.PAIRWISE_JUDGE, topic=topic, pair=pair))
        _, resp = gateway.ask(AgentRole.JUDGE, prompt)
        try:
            verdict = parse_pairwise(resp.text)
        except ParseError as exc:
            log.warning("skipping %s vs %s on %r: %s", first, second, topic, exc)
            return []
        return [ComparisonRecord(first, second, m, _OUTCOME[verdict.winners[m]], topic) for m in METRICS]

    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            batches = list(pool.map(judge, schedule))
    else:
        batches = [judge(item) for item in schedule]
    return [r for batch in batches for r in batch]


def classify_relations(
    items: Sequence[tuple[str, tuple[str, str]]], gateway: "Gateway"
) -> list[Relation]:
    """Label each (hypothesis, (source entity, target entity)) as Positive or Negative."""
    out = []
    for hypothesis, entities in items:
        prompt = render_prompt(PromptContext(PromptKind.CLASSIFIER, hypothesis=hypothesis, entities=tuple(entities)))
        _, resp = gateway.ask(AgentRole.CLASSIFIER, prompt)
        out.append(parse_relation(resp.text))
    return out
