"""Domain types, score arithmetic and the append-only run trace."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import threading
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Mapping

from .errors import InputError, SequencingError, TraceStateError

if TYPE_CHECKING:
    from .kg import Subgraph

METRICS = ("novelty", "relevance", "significance", "verifiability")
MAX_METRIC = 5
MAX_OVERALL = MAX_METRIC * len(METRICS)


class AgentRole(str, enum.Enum):
    PLANNER = "Planner"
    BACKGROUND = "Background"
    EXPLORER = "Explorer"
    SCIENTIST = "Scientist"
    CRITIC = "Critic"
    REVIEWER = "Reviewer"
    REFINER = "Refiner"
    CLASSIFIER = "Classifier"
    JUDGE = "Judge"


@dataclass(frozen=True)
class MetricScores:
    novelty: int
    relevance: int
    significance: int
    verifiability: int

    def __post_init__(self):
        for name in METRICS:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeError(f"{name} must be an integer, got {value!r}")
            if not 0 <= value <= MAX_METRIC:
                raise ValueError(f"{name}={value} outside 0..{MAX_METRIC}")

    @property
    def overall(self) -> int:
        return overall_score(self)

    def as_dict(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in METRICS}

    @classmethod
    def from_mapping(cls, values: Mapping[str, int]) -> "MetricScores":
        return cls(**{name: int(values[name]) for name in METRICS})


def overall_score(scores: MetricScores) -> int:
    """Sum of the four metric scores, on the 0-20 scale."""
    return scores.novelty + scores.relevance + scores.significance + scores.verifiability


@dataclass(frozen=True)
class Hypothesis:
    id: str
    text: str
    generation: int = 0
    parent_id: str | None = None
    scores: MetricScores | None = None
    rationale: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("hypothesis text must be nonempty")
        if self.generation < 0:
            raise ValueError("generation must be >= 0")
        if (self.generation == 0) != (self.parent_id is None):
            raise ValueError("parent_id must be set exactly when generation > 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "text": self.text,
            "generation": self.generation,
            "parent_id": self.parent_id,
            "scores": self.scores.as_dict() if self.scores else None,
            "overall": self.scores.overall if self.scores else None,
            "rationale": dict(self.rationale),
        }


@dataclass(frozen=True)
class LiteratureRecord:
    pmid: str
    title: str
    abstract: str
    pub_date: date
    mesh_terms: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.pmid:
            raise ValueError("pmid must be nonempty")
        if isinstance(self.pub_date, str):
            object.__setattr__(self, "pub_date", parse_date(self.pub_date))

    def to_dict(self) -> dict[str, Any]:
        return {
            "pmid": self.pmid,
            "title": self.title,
            "abstract": self.abstract,
            "pub_date": self.pub_date.isoformat(),
            "mesh_terms": list(self.mesh_terms),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LiteratureRecord":
        return cls(
            pmid=str(data["pmid"]),
            title=data.get("title", ""),
            abstract=data.get("abstract", ""),
            pub_date=parse_date(data["pub_date"]),
            mesh_terms=tuple(data.get("mesh_terms", ())),
        )


def parse_date(value: str | date) -> date:
    if isinstance(value, datetime):
        return value.date()
    if isinstance(value, date):
        return value
    text = value.strip().replace("/", "-")
    parts = text.split("-")
    try:
        if len(parts) == 1:
            return date(int(parts[0]), 1, 1)
        if len(parts) == 2:
            return date(int(parts[0]), int(parts[1]), 1)
        return date.fromisoformat(text)
    except ValueError as exc:
        raise InputError(f"unparseable date {value!r}") from exc


@dataclass(frozen=True)
class EvidenceBundle:
    literature: tuple[LiteratureRecord, ...] = ()
    subgraph: "Subgraph | None" = None
    background: str | None = None

    @property
    def subgraph_text(self) -> str | None:
        if self.subgraph is None:
            return None
        from .kg import serialize_subgraph

        return serialize_subgraph(self.subgraph)

    def is_empty(self) -> bool:
        return not self.literature and self.subgraph is None and not self.background

    def merge(self, other: "EvidenceBundle") -> "EvidenceBundle":
        """Union of two bundles; literature by pmid, subgraphs by edge identity.

        A background in ``other`` replaces the current one.
        """
        held = {r.pmid for r in self.literature}
        literature = self.literature + tuple(r for r in other.literature if r.pmid not in held)
        if self.subgraph is None:
            subgraph = other.subgraph
        elif other.subgraph is None:
            subgraph = self.subgraph
        else:
            subgraph = self.subgraph.union(other.subgraph)
        background = other.background if other.background else self.background
        return EvidenceBundle(literature, subgraph, background)

    def to_dict(self) -> dict[str, Any]:
        return {
            "literature": [r.pmid for r in self.literature],
            "subgraph_text": self.subgraph_text,
            "background": self.background,
        }


@dataclass(frozen=True)
class StepRecord:
    run_id: str
    step_index: int
    agent_role: AgentRole
    input_digest: str
    output_text: str
    tokens_in: int = 0
    tokens_out: int = 0
    timestamp: datetime = field(default_factory=lambda: datetime.now(timezone.utc))

    def __post_init__(self):
        if self.step_index < 0:
            raise ValueError("step_index must be >= 0")
        if self.tokens_in < 0 or self.tokens_out < 0:
            raise ValueError("token counts must be >= 0")
        if not isinstance(self.agent_role, AgentRole):
            object.__setattr__(self, "agent_role", AgentRole(self.agent_role))

    def to_json(self) -> str:
        payload = {
            "run_id": self.run_id,
            "step_index": self.step_index,
            "agent_role": self.agent_role.value,
            "input_digest": self.input_digest,
            "output_text": self.output_text,
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
            "timestamp": self.timestamp.astimezone(timezone.utc).isoformat().replace("+00:00", "Z"),
        }
        return json.dumps(payload, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "StepRecord":
        data = json.loads(line)
        ts = data["timestamp"]
        if ts.endswith("Z"):
            ts = ts[:-1] + "+00:00"
        return cls(
            run_id=data["run_id"],
            step_index=int(data["step_index"]),
            agent_role=AgentRole(data["agent_role"]),
            input_digest=data["input_digest"],
            output_text=data["output_text"],
            tokens_in=int(data["tokens_in"]),
            tokens_out=int(data["tokens_out"]),
            timestamp=datetime.fromisoformat(ts),
        )

    def same_content(self, other: "StepRecord") -> bool:
        mine = dataclasses.replace(self, timestamp=other.timestamp)
        return mine == other


def digest(*parts: str) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


class TraceStore:
    """Append-only store of StepRecords, optionally mirrored to a JSON Lines file.

    Appends are serialized by a lock. Within a run, step indices start at 0
    and must increase by exactly one; re-appending an identical record is a
    no-op.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._runs: dict[str, list[StepRecord]] = {}
        self._closed: set[str] = set()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.touch()

    def open_run(self, run_id: str) -> None:
        with self._lock:
            if run_id in self._closed:
                raise TraceStateError(f"run {run_id} is closed")
            self._runs.setdefault(run_id, [])

    def close_run(self, run_id: str) -> None:
        with self._lock:
            if run_id not in self._runs:
                raise TraceStateError(f"run {run_id} was never opened")
            self._closed.add(run_id)

    def next_index(self, run_id: str) -> int:
        with self._lock:
            return len(self._runs.get(run_id, ()))

    def append(self, record: StepRecord) -> bool:
        """Store ``record``; returns False when it was already present."""
        with self._lock:
            if record.run_id in self._closed:
                raise TraceStateError(f"run {record.run_id} is closed")
            if record.run_id not in self._runs:
                raise TraceStateError(f"run {record.run_id} is not open")
            held = self._runs[record.run_id]
            if record.step_index < len(held):
                if held[record.step_index].same_content(record):
                    return False
                raise SequencingError(
                    f"step {record.step_index} of run {record.run_id} already holds a different record"
                )
            if record.step_index != len(held):
                raise SequencingError(
                    f"expected step {len(held)} for run {record.run_id}, got {record.step_index}"
                )
            held.append(record)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(record.to_json() + "\n")
                    fh.flush()
            return True

    def records(self, run_id: str) -> list[StepRecord]:
        with self._lock:
            return list(self._runs.get(run_id, ()))

    @staticmethod
    def load(path: str | Path) -> list[StepRecord]:
        with Path(path).open(encoding="utf-8") as fh:
            return [StepRecord.from_json(line) for line in fh if line.strip()]


def append_trace(store: TraceStore, record: StepRecord) -> bool:
    return store.append(record)


def token_totals(records: Iterable[StepRecord]) -> tuple[int, int]:
    tin = tout = 0
    for r in records:
        tin += r.tokens_in
        tout += r.tokens_out
    return tin, tout


@dataclass(frozen=True)
class PipelineConfig:
    max_cycles: int = 3
    n_initial_hypotheses: int = 3
    accept_threshold: int = 18
    emit_floor: int = 15
    temporal_cutoff: date | None = None
    temperature: float = 0.3
    seed: int = 42
    # optional early discard after the first refinement; None disables
    early_discard_below: int | None = None
    role_temperatures: Mapping[str, float] = field(default_factory=dict)
    emit_plan: bool = True
    link_k: int = 5
    min_similarity: float = 0.0
    kg_depth: int = 2
    max_edges: int = 20
    max_paths: int = 10
    relations: tuple[str, ...] | None = None
    retmax: int = 20
    min_literature_hits: int = 3
    token_budget: int | None = None
    max_workers: int | None = None

    def __post_init__(self):
        if self.max_cycles < 1:
            raise ValueError("max_cycles must be >= 1")
        if self.n_initial_hypotheses < 1:
            raise ValueError("n_initial_hypotheses must be >= 1")
        if not 0 < self.emit_floor <= self.accept_threshold <= MAX_OVERALL:
            raise ValueError("require 0 < emit_floor <= accept_threshold <= 20")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")
        if isinstance(self.temporal_cutoff, str):
            object.__setattr__(self, "temporal_cutoff", parse_date(self.temporal_cutoff))
        if self.relations is not None and not isinstance(self.relations, tuple):
            object.__setattr__(self, "relations", tuple(self.relations))

    def temperature_for(self, role: AgentRole) -> float:
        return float(self.role_temperatures.get(role.value, self.temperature))

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["temporal_cutoff"] = self.temporal_cutoff.isoformat() if self.temporal_cutoff else None
        out["role_temperatures"] = dict(self.role_temperatures)
        out["relations"] = list(self.relations) if self.relations is not None else None
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(data))

    def replace(self, **changes: Any) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)
