import pytest

from hypoforge.core import AgentRole
from hypoforge.errors import ContextError
from hypoforge.prompts import REQUIRED, PromptContext, PromptKind, render_prompt

FULL = dict(
    topic="Role of GPR153 in vascular injury",
    keywords=("GPR153", "vascular injury"),
    background="GPR153 is expressed in smooth muscle.",
    subgraph_text="Nodes: GPR153 (gene/protein)",
    hypothesis="GPR153 activates YAP1.",
    critic_feedback="Novelty: Score 3",
    new_information="Literature: none",
    pair=("H one", "H two"),
    literature="PMID: 1",
    candidates=("GPR153", "YAP1"),
    mode="Revision",
    entities=("GPR153", "YAP1"),
)


@pytest.mark.parametrize("kind", list(PromptKind))
def test_every_kind_renders_with_full_context(kind):
    text = render_prompt(PromptContext(kind, **FULL))
    assert text.strip()
    assert text == render_prompt(PromptContext(kind, **FULL))


@pytest.mark.parametrize("kind", list(PromptKind))
def test_each_required_field_is_enforced(kind):
    for name in REQUIRED[kind]:
        ctx = PromptContext(kind, **{**FULL, name: None if not isinstance(FULL[name], tuple) else ()})
        with pytest.raises(ContextError, match=name):
            render_prompt(ctx)


def test_scientist_prompt_asks_for_one_per_line():
    text = render_prompt(PromptContext(PromptKind.SCIENTIST, background="bg", subgraph_text="sg"))
    assert "one hypothesis per line" in text
    assert "Knowledge graph context:\nsg" in text


def test_background_word_limit_is_stated():
    text = render_prompt(PromptContext(PromptKind.BACKGROUND, keywords=("GPR153",), literature="PMID: 1"))
    assert "less than 150 words" in text


def test_refiner_needs_critic_feedback():
    with pytest.raises(ContextError, match="critic_feedback"):
        render_prompt(PromptContext(PromptKind.REFINER, hypothesis="h", new_information="n"))


def test_pairwise_places_both_hypotheses():
    text = render_prompt(PromptContext(PromptKind.PAIRWISE_JUDGE, topic="t", pair=("first text", "second text")))
    assert "H_A: first text" in text and "H_B: second text" in text
    assert '"0" if they are equal' in text


def test_refiner_example_keeps_unicode_beta():
    text = render_prompt(PromptContext(PromptKind.REFINER, hypothesis="h", critic_feedback="c", new_information="n"))
    assert "TGF-β" in text and "$" not in text


def test_query_planner_mode_rules():
    base = dict(keywords=("GPR153",))
    render_prompt(PromptContext(PromptKind.QUERY_PLANNER, mode="Background", **base))
    with pytest.raises(ContextError, match="hypothesis"):
        render_prompt(PromptContext(PromptKind.QUERY_PLANNER, mode="Evaluation", **base))
    with pytest.raises(ContextError, match="critic_feedback"):
        render_prompt(PromptContext(PromptKind.QUERY_PLANNER, mode="Revision", hypothesis="h", **base))


def test_roles():
    assert PromptContext(PromptKind.QUERY_PLANNER).role is AgentRole.PLANNER
    assert PromptContext(PromptKind.PAIRWISE_JUDGE).role is AgentRole.JUDGE
