"""Multi-agent hypothesis generation grounded in literature and a knowledge graph."""

from .core import (
    AgentRole,
    EvidenceBundle,
    Hypothesis,
    LiteratureRecord,
    MetricScores,
    PipelineConfig,
    StepRecord,
    TraceStore,
)
from .orchestrator import Decision, RunResult, Services, decide, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "AgentRole",
    "Decision",
    "EvidenceBundle",
    "Hypothesis",
    "LiteratureRecord",
    "MetricScores",
    "PipelineConfig",
    "RunResult",
    "Services",
    "StepRecord",
    "TraceStore",
    "decide",
    "run_pipeline",
]
