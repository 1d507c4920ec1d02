"""Pipeline state machine: background, exploration, generation and per-branch refinement."""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .core import (
    AgentRole,
    EvidenceBundle,
    Hypothesis,
    MetricScores,
    PipelineConfig,
    StepRecord,
    TraceStore,
    digest,
)
from .errors import (
    BudgetExceeded,
    DirectiveError,
    HypoforgeError,
    InputError,
    ParseError,
)
from .kg import (
    Embedder,
    Graph,
    HashingEmbedder,
    RetrievalLimits,
    Subgraph,
    extract_entities,
    flatten_candidates,
    link_keywords,
    retrieve_subgraph,
    select_nodes,
    serialize_subgraph,
)
from .literature import (
    LiteratureClient,
    SearchMode,
    format_records,
    plan_queries,
    search_with_relaxation,
    summarize_background,
)
from .llm import Gateway
from .prompts import PromptContext, PromptKind, render_prompt
from .protocol import (
    Action,
    RefinementDirective,
    format_directive,
    parse_critic,
    parse_hypotheses,
    parse_plan,
    parse_refiner,
    parse_reviewer,
)

log = logging.getLogger(__name__)


class Decision(str, enum.Enum):
    ACCEPT = "Accept"
    REFINE = "Refine"
    DISCARD = "Discard"
    EXHAUST = "Exhaust"


class Status(str, enum.Enum):
    ACTIVE = "Active"
    ACCEPTED = "Accepted"
    DISCARDED = "Discarded"
    EXHAUSTED = "Exhausted"


def decide(scores: MetricScores, cycle: int, config: PipelineConfig) -> Decision:
    """Accept at the threshold; otherwise refine while cycles remain, then keep or drop by the floor.

    ``cycle`` counts completed refinements.
    """
    if not 0 <= cycle <= config.max_cycles:
        raise ValueError(f"cycle {cycle} outside 0..{config.max_cycles}")
    overall = scores.overall
    if overall >= config.accept_threshold:
        return Decision.ACCEPT
    if config.early_discard_below is not None and cycle >= 1 and overall < config.early_discard_below:
        return Decision.DISCARD
    if cycle < config.max_cycles:
        return Decision.REFINE
    return Decision.EXHAUST if overall >= config.emit_floor else Decision.DISCARD


@dataclass
class BranchState:
    hypothesis: Hypothesis
    evidence: EvidenceBundle
    cycle: int = 0
    status: Status = Status.ACTIVE
    feedback: str = ""


@dataclass(frozen=True)
class RankedOutput:
    hypothesis: Hypothesis
    scores: MetricScores
    evidence: EvidenceBundle
    status: Status
    branch: int

    def to_dict(self) -> dict:
        return {
            "branch": self.branch,
            "status": self.status.value,
            "hypothesis": self.hypothesis.to_dict(),
            "scores": self.scores.as_dict(),
            "overall": self.scores.overall,
            "evidence": self.evidence.to_dict(),
        }


@dataclass(frozen=True)
class RunResult:
    run_id: str
    topic: str
    keywords: tuple[str, ...]
    config: PipelineConfig
    outputs: tuple[RankedOutput, ...]
    discarded: tuple[Hypothesis, ...]
    trace_path: str | None = None
    plan: str | None = None

    def canonical(self) -> dict:
        """Everything except the trace location, for run-to-run comparison."""
        return {
            "run_id": self.run_id,
            "topic": self.topic,
            "keywords": list(self.keywords),
            "config": self.config.to_dict(),
            "plan": self.plan,
            "outputs": [o.to_dict() for o in self.outputs],
            "discarded": [h.to_dict() for h in self.discarded],
        }

    def to_dict(self) -> dict:
        return {**self.canonical(), "trace_path": self.trace_path}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False, sort_keys=True)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path


@dataclass
class Services:
    gateway: Gateway
    graph: Graph
    literature: LiteratureClient
    embedder: Embedder = field(default_factory=HashingEmbedder)
    trace: TraceStore | None = None


# -- tracing --------------------------------------------------------------------

class StepBuffer:
    """Steps recorded by one branch, appended to the store later in branch order."""

    def __init__(self):
        self.entries: list[tuple[AgentRole, str, str, int, int]] = []

    def add(self, role: AgentRole, input_digest: str, text: str, tokens_in: int = 0, tokens_out: int = 0):
        self.entries.append((role, input_digest, text, tokens_in, tokens_out))

    def note(self, role: AgentRole, tag: str, text: str, *inputs: str):
        self.add(role, digest(tag, *inputs), f"[{tag}] {text}")


class TracedGateway:
    """Gateway wrapper that records every call into a StepBuffer."""

    def __init__(self, gateway: Gateway, buffer: StepBuffer):
        self.gateway = gateway
        self.buffer = buffer

    def ask(self, role: AgentRole, prompt: str, **overrides):
        request, response = self.gateway.ask(role, prompt, **overrides)
        self.buffer.add(role, request.digest, response.text, response.tokens_in, response.tokens_out)
        return request, response


class _Trace:
    def __init__(self, store: TraceStore, run_id: str):
        self.store = store
        self.run_id = run_id
        self._lock = threading.Lock()

    def flush(self, buffer: StepBuffer) -> None:
        with self._lock:
            for role, dig, text, tin, tout in buffer.entries:
                self.store.append(
                    StepRecord(self.run_id, self.store.next_index(self.run_id), role, dig, text, tin, tout)
                )
            buffer.entries.clear()


# -- steps ------------------------------------------------------------------------

_STOPWORDS = frozenset(
    "a an and as at between by for from in into its of on or role roles the their to with within "
    "effect effects impact".split()
)


def extract_keywords(topic: str) -> list[str]:
    """Split a topic into keyword phrases at stopwords.

    "Role of GPR153 in vascular injury and disease" gives
    ["GPR153", "vascular injury", "disease"].
    """
    if not topic or not topic.strip():
        raise InputError("topic must be nonempty")
    phrases, current = [], []
    for tok in re.findall(r"[A-Za-z0-9][A-Za-z0-9\-/]*", topic):
        if tok.lower() in _STOPWORDS:
            if current:
                phrases.append(" ".join(current))
            current = []
        else:
            current.append(tok)
    if current:
        phrases.append(" ".join(current))
    out = []
    for p in phrases:
        if p not in out:
            out.append(p)
    if not out:
        raise InputError(f"no keywords found in topic {topic!r}")
    return out


def emit_plan(topic: str, gateway, buffer: StepBuffer | None = None) -> str | None:
    """Ask the Planner for a numbered plan; a malformed plan is tolerated."""
    if not topic or not topic.strip():
        raise InputError("topic must be nonempty")
    _, resp = gateway.ask(AgentRole.PLANNER, render_prompt(PromptContext(PromptKind.PLANNER, topic=topic)))
    try:
        parse_plan(resp.text)
    except ParseError as exc:
        log.warning("research plan rejected: %s", exc)
        if buffer is not None:
            buffer.note(AgentRole.PLANNER, "warning", f"research plan rejected: {exc}", topic)
        return None
    return resp.text


def _literature_text(evidence: EvidenceBundle) -> str | None:
    return format_records(evidence.literature) if evidence.literature else None


def _critic(gateway, hyp: Hypothesis, evidence: EvidenceBundle, topic: str) -> tuple[MetricScores, str, dict]:
    ctx = PromptContext(
        PromptKind.CRITIC,
        topic=topic,
        hypothesis=hyp.text,
        background=evidence.background,
        subgraph_text=evidence.subgraph_text,
        literature=_literature_text(evidence),
    )
    _, resp = gateway.ask(AgentRole.CRITIC, render_prompt(ctx))
    scores, rationales, _ = parse_critic(resp.text)
    return scores, resp.text.strip(), rationales


def _resolve_seeds(graph: Graph, names: Sequence[str]) -> list[str]:
    out = []
    for name in names:
        for node in graph.find(name):
            if node.node_id not in out:
                out.append(node.node_id)
    return out


def _search(keywords, mode, gateway, config: PipelineConfig, client, topic, **context):
    strategy = plan_queries(
        keywords, mode, gateway, topic=topic, cutoff=config.temporal_cutoff, retmax=config.retmax, **context
    )
    records, _ = search_with_relaxation(strategy, client, config.min_literature_hits)
    return records


def apply_directive(
    directive: RefinementDirective,
    state: BranchState,
    services: Services,
    *,
    topic: str,
    keywords: Sequence[str],
    config: PipelineConfig,
    gateway=None,
    buffer: StepBuffer | None = None,
) -> EvidenceBundle:
    """Run each requested retrieval and return only the evidence not already held.

    Individual action failures are logged and traced; if every action fails
    a DirectiveError is raised.
    """
    gateway = gateway or services.gateway
    buffer = buffer or StepBuffer()
    held_pmids = {r.pmid for r in state.evidence.literature}
    held_edges = state.evidence.subgraph.edge_keys() if state.evidence.subgraph else set()
    literature: tuple = ()
    subgraph: Subgraph | None = None
    background: str | None = None
    failures = []
    for action in (Action.KG, Action.LITERATURE, Action.BACKGROUND):
        if action not in directive.actions:
            continue
        try:
            if action is Action.KG:
                names = extract_entities(state.hypothesis.text)
                seeds = _resolve_seeds(services.graph, names)
                if not seeds and state.evidence.subgraph is not None:
                    seeds = sorted(state.evidence.subgraph.seeds)
                if not seeds:
                    raise InputError("no hypothesis entity found in the graph")
                depth = directive.depth_override or config.kg_depth
                rels = directive.rels_override or config.relations
                sg = retrieve_subgraph(
                    services.graph, seeds, depth, rels, RetrievalLimits(config.max_edges, config.max_paths)
                )
                fresh = [e for e in sg.direct_edges if e.key() not in held_edges]
                subgraph = sg
                buffer.note(
                    AgentRole.EXPLORER, "evidence",
                    f"subgraph depth={depth} seeds={','.join(seeds)} new_edges={len(fresh)}: {serialize_subgraph(sg)}",
                    state.hypothesis.text,
                )
            elif action is Action.LITERATURE:
                records = _search(
                    keywords, SearchMode.REVISION, gateway, config, services.literature, topic,
                    hypothesis=state.hypothesis.text, feedback=state.feedback,
                )
                literature = tuple(r for r in records if r.pmid not in held_pmids)
                buffer.note(
                    AgentRole.BACKGROUND, "evidence",
                    f"literature retrieved={len(records)} new={len(literature)} pmids="
                    + ",".join(r.pmid for r in literature),
                    state.hypothesis.text,
                )
            else:
                records = _search(keywords, SearchMode.BACKGROUND, gateway, config, services.literature, topic)
                if not records:
                    raise InputError("background search returned no records")
                background = summarize_background(records, gateway, keywords=keywords, topic=topic)
                if state.evidence.background:
                    buffer.note(AgentRole.BACKGROUND, "evidence", "previous background: " + state.evidence.background,
                                state.hypothesis.text)
        except BudgetExceeded:
            raise
        except HypoforgeError as exc:
            log.warning("%s action failed: %s", action.value, exc)
            buffer.note(AgentRole.REVIEWER, "warning", f"{action.value} action failed: {exc}", state.hypothesis.text)
            failures.append(action)
    if len(failures) == len(directive.actions):
        raise DirectiveError("every directive action failed: " + ",".join(a.value for a in failures))
    return EvidenceBundle(literature, subgraph, background)


def _new_information(delta: EvidenceBundle) -> str:
    parts = []
    if delta.subgraph is not None:
        parts.append("Knowledge graph: " + serialize_subgraph(delta.subgraph))
    if delta.literature:
        parts.append("Literature:\n" + format_records(delta.literature))
    if delta.background:
        parts.append("Background: " + delta.background)
    return "\n\n".join(parts) or "(no new information)"


@dataclass
class _BranchResult:
    index: int
    best: Hypothesis
    best_scores: MetricScores
    best_evidence: EvidenceBundle
    status: Status
    critic_calls: int


def _run_branch(index: int, text: str, base: EvidenceBundle, services: Services, buffer: StepBuffer,
                topic: str, keywords: Sequence[str], config: PipelineConfig) -> _BranchResult:
    gw = TracedGateway(services.gateway, buffer)
    tag = f"H{index + 1}"
    hyp = Hypothesis(tag, text)
    evidence = base
    try:
        records = _search(keywords, SearchMode.EVALUATION, gw, config, services.literature, topic, hypothesis=text)
        evidence = evidence.merge(EvidenceBundle(tuple(records)))
        buffer.note(AgentRole.BACKGROUND, "evidence",
                    f"{tag} evaluation literature pmids=" + ",".join(r.pmid for r in records), text)
    except BudgetExceeded:
        raise
    except HypoforgeError as exc:
        buffer.note(AgentRole.BACKGROUND, "warning", f"{tag} evaluation search failed: {exc}", text)

    scores, feedback, rationale = _critic(gw, hyp, evidence, topic)
    calls = 1
    hyp = dataclasses.replace(hyp, scores=scores, rationale=rationale)
    state = BranchState(hyp, evidence, 0, Status.ACTIVE, feedback)
    best, best_evidence = hyp, evidence
    while True:
        decision = decide(best.scores, state.cycle, config)
        buffer.note(AgentRole.CRITIC, "decision",
                    f"{tag} cycle={state.cycle} best={best.id} overall={best.scores.overall} -> {decision.value}",
                    best.id)
        if decision is Decision.ACCEPT:
            state.status = Status.ACCEPTED
            break
        if decision is Decision.EXHAUST:
            state.status = Status.EXHAUSTED
            break
        if decision is Decision.DISCARD:
            state.status = Status.DISCARDED
            break

        ctx = PromptContext(
            PromptKind.REVIEWER, topic=topic, hypothesis=state.hypothesis.text, critic_feedback=state.feedback,
            background=state.evidence.background, subgraph_text=state.evidence.subgraph_text,
        )
        _, resp = gw.ask(AgentRole.REVIEWER, render_prompt(ctx))
        try:
            directive = parse_reviewer(resp.text)
        except ParseError as exc:
            directive = RefinementDirective(frozenset({Action.KG, Action.LITERATURE}))
            buffer.note(AgentRole.REVIEWER, "warning",
                        f"{tag} unusable directive ({exc}); using {format_directive(directive)!r}", resp.text)
        try:
            delta = apply_directive(directive, state, services, topic=topic, keywords=keywords, config=config,
                                    gateway=gw, buffer=buffer)
        except DirectiveError as exc:
            buffer.note(AgentRole.REVIEWER, "warning", f"{tag} {exc}; continuing with held evidence", resp.text)
            delta = EvidenceBundle()
        state.evidence = state.evidence.merge(delta)

        ctx = PromptContext(
            PromptKind.REFINER, topic=topic, hypothesis=state.hypothesis.text, critic_feedback=state.feedback,
            new_information=_new_information(delta), background=state.evidence.background,
        )
        _, resp = gw.ask(AgentRole.REFINER, render_prompt(ctx))
        _, new_text = parse_refiner(resp.text)
        state.cycle += 1
        new_hyp = Hypothesis(f"{tag}.{state.cycle}", new_text, state.cycle, state.hypothesis.id)
        scores, feedback, rationale = _critic(gw, new_hyp, state.evidence, topic)
        calls += 1
        new_hyp = dataclasses.replace(new_hyp, scores=scores, rationale=rationale)
        state.hypothesis, state.feedback = new_hyp, feedback
        # ties go to the newer version
        if scores.overall >= best.scores.overall:
            best, best_evidence = new_hyp, state.evidence
    return _BranchResult(index, best, best.scores, best_evidence, state.status, calls)


def default_run_id(topic: str, config: PipelineConfig) -> str:
    return digest(topic, json.dumps(config.to_dict(), sort_keys=True))[:16]


def run_pipeline(
    topic: str,
    config: PipelineConfig,
    services: Services,
    *,
    keywords: Sequence[str] | None = None,
    run_id: str | None = None,
) -> RunResult:
    """Generate, critique and refine hypotheses for ``topic``.

    Branches run concurrently. Their trace steps are buffered and written
    in branch order so the trace is reproducible. On an unrecoverable error
    every buffered step is written before the error propagates.
    """
    if not topic or not topic.strip():
        raise InputError("topic must be nonempty")
    keywords = list(keywords) if keywords else extract_keywords(topic)
    run_id = run_id or default_run_id(topic, config)
    store = services.trace if services.trace is not None else TraceStore()
    store.open_run(run_id)
    trace = _Trace(store, run_id)
    buffer = StepBuffer()
    gw = TracedGateway(services.gateway, buffer)
    plan = None
    try:
        buffer.note(AgentRole.PLANNER, "input", f"topic={topic!r} keywords={keywords}", topic)
        if config.emit_plan:
            try:
                plan = emit_plan(topic, gw, buffer)
            except BudgetExceeded:
                raise
            except HypoforgeError as exc:
                buffer.note(AgentRole.PLANNER, "warning", f"planner failed: {exc}", topic)

        records = _search(keywords, SearchMode.BACKGROUND, gw, config, services.literature, topic)
        buffer.note(AgentRole.BACKGROUND, "evidence", "background pmids=" + ",".join(r.pmid for r in records), topic)
        if records:
            background = summarize_background(records, gw, keywords=keywords, topic=topic)
        else:
            background = f"No literature was found for: {topic}"
            buffer.note(AgentRole.BACKGROUND, "warning", "no background literature found", topic)

        subgraph = None
        try:
            linked = link_keywords(services.graph, keywords, services.embedder, config.link_k,
                                   min_similarity=config.min_similarity)
            candidates = flatten_candidates(linked)
            chosen = select_nodes(candidates, background, gw, topic=topic)
            subgraph = retrieve_subgraph(
                services.graph, [n.node_id for n in chosen], config.kg_depth, config.relations,
                RetrievalLimits(config.max_edges, config.max_paths),
            )
            buffer.note(AgentRole.EXPLORER, "evidence", serialize_subgraph(subgraph), background)
        except BudgetExceeded:
            raise
        except HypoforgeError as exc:
            buffer.note(AgentRole.EXPLORER, "warning", f"knowledge graph step failed: {exc}", background)
        base = EvidenceBundle(tuple(records), subgraph, background)

        ctx = PromptContext(
            PromptKind.SCIENTIST, topic=topic, background=background,
            subgraph_text=serialize_subgraph(subgraph or Subgraph()),
        )
        _, resp = gw.ask(AgentRole.SCIENTIST, render_prompt(ctx))
        texts = parse_hypotheses(resp.text)[: config.n_initial_hypotheses]
        if len(texts) < config.n_initial_hypotheses:
            buffer.note(AgentRole.SCIENTIST, "warning",
                        f"{len(texts)} hypotheses returned, {config.n_initial_hypotheses} requested", resp.text)
        trace.flush(buffer)

        buffers = [StepBuffer() for _ in texts]
        workers = config.max_workers or len(texts)
        results: list[_BranchResult | None] = [None] * len(texts)
        error: BaseException | None = None
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            futures = [
                pool.submit(_run_branch, i, t, base, services, buffers[i], topic, keywords, config)
                for i, t in enumerate(texts)
            ]
            for i, fut in enumerate(futures):
                try:
                    results[i] = fut.result()
                except BaseException as exc:  # noqa: BLE001 - re-raised after the trace is written
                    error = error or exc
        for b in buffers:
            trace.flush(b)
        if error is not None:
            raise error
    finally:
        trace.flush(buffer)

    kept = [r for r in results if r.status in (Status.ACCEPTED, Status.EXHAUSTED)]
    kept.sort(key=lambda r: (-r.best_scores.overall, r.best.generation, r.best.id))
    outputs = tuple(RankedOutput(r.best, r.best_scores, r.best_evidence, r.status, r.index) for r in kept)
    discarded = tuple(r.best for r in results if r.status is Status.DISCARDED)
    store.close_run(run_id)
    return RunResult(
        run_id=run_id,
        topic=topic,
        keywords=tuple(keywords),
        config=config,
        outputs=outputs,
        discarded=discarded,
        trace_path=str(store.path) if store.path else None,
        plan=plan,
    )
