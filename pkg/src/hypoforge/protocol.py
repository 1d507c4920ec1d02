"""Strict parsers for agent and evaluator outputs."""

from __future__ import annotations

import enum
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Mapping

from .core import MAX_METRIC, MAX_OVERALL, METRICS, MetricScores
from .errors import ConsistencyError, ParseError, ProtocolError, RangeError

log = logging.getLogger(__name__)

MAX_HYPOTHESES = 3
MAX_REASONING_STEPS = 4


class Action(str, enum.Enum):
    KG = "neo4j"
    LITERATURE = "pubmed"
    BACKGROUND = "background"


ACTION_ORDER = (Action.KG, Action.LITERATURE, Action.BACKGROUND)


@dataclass(frozen=True)
class RefinementDirective:
    actions: frozenset[Action]
    depth_override: int | None = None
    rels_override: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "actions", frozenset(Action(a) for a in self.actions))
        if not self.actions:
            raise ProtocolError("a directive needs at least one action")
        if self.depth_override is not None and self.depth_override < 1:
            raise ParseError(f"DEPTH_OVERRIDE must be >= 1, got {self.depth_override}")
        if self.rels_override is not None:
            rels = tuple(self.rels_override)
            object.__setattr__(self, "rels_override", rels or None)


class Winner(str, enum.Enum):
    FIRST = "First"
    SECOND = "Second"
    TIE = "Tie"


_WINNER_TOKENS = {"A": Winner.FIRST, "B": Winner.SECOND, "0": Winner.TIE}


@dataclass(frozen=True)
class PairwiseVerdict:
    winners: Mapping[str, Winner]
    reasons: Mapping[str, str] = field(default_factory=dict)


class Relation(str, enum.Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"


_METRIC_RE = "|".join(METRICS)
_SCORE_RE = re.compile(
    rf"\b({_METRIC_RE})\b\**\s*[:=]\s*\**\s*(?:score\s*[:=]?\s*)?(-?\d+(?:\.\d+)?)(?:\s*/\s*\d+)?",
    re.IGNORECASE,
)
_OVERALL_RE = re.compile(r"overall\s+score\s*:?\s*(-?\d+)\s*/\s*20", re.IGNORECASE)


def _require_text(text: str) -> None:
    if text is None or not text.strip():
        raise ParseError("empty output")


def _scan_scores(text: str) -> dict[str, tuple[int, re.Match]]:
    found: dict[str, tuple[int, re.Match]] = {}
    for m in _SCORE_RE.finditer(text):
        name = m.group(1).lower()
        raw = m.group(2)
        if "." in raw:
            raise ParseError(f"{name} score {raw} is not an integer")
        value = int(raw)
        if name in found and found[name][0] != value:
            raise ParseError(f"conflicting scores for {name}")
        found.setdefault(name, (value, m))
    return found


def parse_critic(text: str) -> tuple[MetricScores, dict[str, str], int]:
    """Parse a Critic block into (scores, rationales, stated overall).

    Metrics are matched by name in any order. The stated overall must equal
    the sum of the four scores.
    """
    _require_text(text)
    found = _scan_scores(text)
    for name in METRICS:
        if name not in found:
            raise ParseError(f"missing metric: {name}")
    for name in METRICS:
        value = found[name][0]
        if not 0 <= value <= MAX_METRIC:
            raise RangeError(f"{name} score {value} outside 0..{MAX_METRIC}")
    overall = _OVERALL_RE.search(text)
    if overall is None:
        raise ParseError("missing line: Overall Score: <value>/20")
    stated = int(overall.group(1))
    scores = MetricScores(**{name: found[name][0] for name in METRICS})
    if stated != scores.overall:
        raise ConsistencyError(f"stated overall {stated}/20 but metrics sum to {scores.overall}")

    # rationale for a metric is the text up to the next metric or the overall line
    boundaries = sorted([m.start() for _, m in found.values()] + [overall.start(), len(text)])
    rationales = {}
    for name in METRICS:
        m = found[name][1]
        end = min(b for b in boundaries if b > m.start())
        chunk = text[m.end():end]
        rationales[name] = " ".join(chunk.strip(" \t\r\n;,.:-").split())
    return scores, rationales, stated


def format_critic(scores: MetricScores, rationales: Mapping[str, str] | None = None) -> str:
    rationales = rationales or {}
    lines = []
    for name in METRICS:
        line = f"{name.capitalize()}: Score {getattr(scores, name)}"
        if rationales.get(name):
            line += f" {rationales[name]}"
        lines.append(line)
    lines.append(f"Overall Score: {scores.overall}/{MAX_OVERALL}")
    return "\n".join(lines)


_DIRECTIVE_KEYS = ("ACTIONS", "DEPTH_OVERRIDE", "RELS_OVERRIDE")


def parse_reviewer(text: str) -> RefinementDirective:
    """Parse the three-line ACTIONS / DEPTH_OVERRIDE / RELS_OVERRIDE reply."""
    _require_text(text)
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) != 3:
        raise ParseError(f"expected exactly 3 lines, got {len(lines)}")
    values = []
    for key, line in zip(_DIRECTIVE_KEYS, lines):
        head, sep, rest = line.partition(":")
        if not sep or head.strip().upper() != key:
            raise ParseError(f"expected line starting with {key}:, got {line!r}")
        values.append(rest.strip())
    tokens = [t.strip().lower() for t in values[0].split(",") if t.strip()]
    if not tokens:
        raise ProtocolError("ACTIONS lists no action")
    actions = set()
    for tok in tokens:
        try:
            actions.add(Action(tok))
        except ValueError:
            raise ParseError(f"unknown action token {tok!r}") from None
    depth = None
    if values[1]:
        if not re.fullmatch(r"[+-]?\d+", values[1]):
            raise ParseError(f"DEPTH_OVERRIDE is not an integer: {values[1]!r}")
        depth = int(values[1])
        if depth < 1:
            raise ParseError(f"DEPTH_OVERRIDE must be >= 1, got {depth}")
    rels = tuple(r.strip() for r in values[2].split(",") if r.strip()) or None
    return RefinementDirective(frozenset(actions), depth, rels)


def format_directive(d: RefinementDirective) -> str:
    actions = ",".join(a.value for a in ACTION_ORDER if a in d.actions)
    depth = "" if d.depth_override is None else str(d.depth_override)
    rels = ",".join(d.rels_override or ())
    return f"ACTIONS:{actions}\nDEPTH_OVERRIDE:{depth}\nRELS_OVERRIDE:{rels}"


def parse_hypotheses(text: str) -> list[str]:
    _require_text(text)
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError("no hypothesis lines")
    if len(lines) > MAX_HYPOTHESES:
        log.warning("Scientist returned %d hypotheses; keeping the first %d", len(lines), MAX_HYPOTHESES)
        lines = lines[:MAX_HYPOTHESES]
    return lines


def parse_refiner(text: str) -> tuple[list[str], str]:
    """Split Refiner output into reasoning steps and the final hypothesis line."""
    _require_text(text)
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2:
        raise ParseError("Refiner output needs reasoning steps before the hypothesis")
    steps, hypothesis = lines[:-1], lines[-1]
    if len(steps) > MAX_REASONING_STEPS:
        log.warning("Refiner gave %d reasoning steps (expected at most %d)", len(steps), MAX_REASONING_STEPS)
    return steps, hypothesis


_PAIR_LINE = re.compile(
    rf"^\W*({_METRIC_RE})\W*?\s*[:=\-]\s*[\"'“”]?([^\s\"'“”,.;:()\-]+)[\"'“”]?(.*)$",
    re.IGNORECASE,
)


def parse_pairwise(text: str) -> PairwiseVerdict:
    """Map each metric's A / B / 0 token to First / Second / Tie."""
    _require_text(text)
    winners: dict[str, Winner] = {}
    reasons: dict[str, str] = {}
    for line in text.splitlines():
        m = _PAIR_LINE.match(line.strip())
        if not m:
            continue
        name = m.group(1).lower()
        if name in winners:
            continue
        token = m.group(2).upper()
        if token not in _WINNER_TOKENS:
            raise ParseError(f"{name}: winner token {m.group(2)!r} is not A, B or 0")
        winners[name] = _WINNER_TOKENS[token]
        reasons[name] = m.group(3).strip(" \t;,.:-")
    for name in METRICS:
        if name not in winners:
            raise ParseError(f"missing metric: {name}")
    return PairwiseVerdict({n: winners[n] for n in METRICS}, {n: reasons[n] for n in METRICS})


def format_pairwise(verdict: PairwiseVerdict) -> str:
    inverse = {v: k for k, v in _WINNER_TOKENS.items()}
    lines = []
    for name in METRICS:
        line = f"{name.capitalize()}: {inverse[verdict.winners[name]]}"
        reason = verdict.reasons.get(name)
        if reason:
            line += f" - {reason}"
        lines.append(line)
    return "\n".join(lines)


def parse_direct(text: str, scale_max: int = 3) -> dict[str, int]:
    if scale_max not in (3, 5):
        raise ValueError("scale_max must be 3 or 5")
    _require_text(text)
    found = _scan_scores(text)
    for name in METRICS:
        if name not in found:
            raise ParseError(f"missing metric: {name}")
    out = {}
    for name in METRICS:
        value = found[name][0]
        if not 0 <= value <= scale_max:
            raise RangeError(f"{name} score {value} outside 0..{scale_max}")
        out[name] = value
    return out


_POSITIVE = re.compile(r"\b(positive|stimulat\w*)\b", re.IGNORECASE)
_NEGATIVE = re.compile(r"\b(negative|inhibit\w*)\b", re.IGNORECASE)
_RELATION_LINE = re.compile(r"relation\s*:\s*(.+)", re.IGNORECASE)


def parse_relation(text: str) -> Relation:
    _require_text(text)
    m = _RELATION_LINE.search(text)
    scope = m.group(1) if m else text
    pos = bool(_POSITIVE.search(scope))
    neg = bool(_NEGATIVE.search(scope))
    if pos == neg:
        what = "ambiguous" if pos else "no recognizable"
        raise ParseError(f"{what} relation label in {text.strip()!r}")
    return Relation.POSITIVE if pos else Relation.NEGATIVE


def parse_node_selection(text: str) -> list[str]:
    """Parse the Explorer's JSON array of node names."""
    _require_text(text)
    try:
        value = json.loads(text.strip())
    except json.JSONDecodeError as exc:
        raise ParseError(f"Explorer reply is not JSON: {exc}") from None
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ParseError("Explorer reply must be a JSON array of strings")
    return value


_PLAN_STEP = re.compile(r"^\s*(\d+)[.)]\s+(.+)$")


def parse_plan(text: str) -> list[str]:
    _require_text(text)
    steps = [m.group(2).strip() for m in map(_PLAN_STEP.match, text.splitlines()) if m]
    if not steps:
        raise ProtocolError("research plan has no numbered steps")
    return steps
