import json
from pathlib import Path

import pytest

from hypoforge.cli import data_path
from hypoforge.core import PipelineConfig, TraceStore
from hypoforge.kg import load_graph
from hypoforge.literature import InMemoryCorpus
from hypoforge.llm import Gateway, load_backend
from hypoforge.orchestrator import Services, run_pipeline

TOPIC = "Role of GPR153 in vascular injury and disease"
DATA = Path(__file__).parent / "data"
CASE = data_path("case_study")


def case_config(**changes) -> PipelineConfig:
    cfg = PipelineConfig.from_dict(json.loads((CASE / "pipeline.json").read_text()))
    return cfg.replace(**changes) if changes else cfg


def case_services(trace: TraceStore | None = None, backend=None, corpus=None) -> Services:
    cfg = case_config()
    gw = Gateway(backend or load_backend(CASE), seed=cfg.seed, temperature=cfg.temperature)
    return Services(
        gw,
        load_graph(CASE / "graph.tsv"),
        corpus or InMemoryCorpus.from_json(CASE / "corpus.json"),
        trace=trace if trace is not None else TraceStore(),
    )


def run_case(config: PipelineConfig | None = None, **kwargs):
    services = case_services(**kwargs)
    result = run_pipeline(TOPIC, config or case_config(), services)
    return result, services


@pytest.fixture
def case_run():
    return run_case()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
