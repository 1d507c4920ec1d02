"""Agent and evaluator prompt templates and their rendering.

Each template is a fixed instruction body. Rendering appends the context
sections a role needs in a fixed order, so identical contexts always give
identical bytes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .core import AgentRole
from .errors import ContextError


class PromptKind(str, enum.Enum):
    PLANNER = "planner"
    QUERY_PLANNER = "query_planner"
    BACKGROUND = "background"
    EXPLORER = "explorer"
    SCIENTIST = "scientist"
    CRITIC = "critic"
    REVIEWER = "reviewer"
    REFINER = "refiner"
    CLASSIFIER = "classifier"
    DIRECT_JUDGE = "direct_judge"
    PAIRWISE_JUDGE = "pairwise_judge"


ROLE_OF = {
    PromptKind.PLANNER: AgentRole.PLANNER,
    PromptKind.QUERY_PLANNER: AgentRole.PLANNER,
    PromptKind.BACKGROUND: AgentRole.BACKGROUND,
    PromptKind.EXPLORER: AgentRole.EXPLORER,
    PromptKind.SCIENTIST: AgentRole.SCIENTIST,
    PromptKind.CRITIC: AgentRole.CRITIC,
    PromptKind.REVIEWER: AgentRole.REVIEWER,
    PromptKind.REFINER: AgentRole.REFINER,
    PromptKind.CLASSIFIER: AgentRole.CLASSIFIER,
    PromptKind.DIRECT_JUDGE: AgentRole.JUDGE,
    PromptKind.PAIRWISE_JUDGE: AgentRole.JUDGE,
}

SYSTEM_PROMPTS = {
    AgentRole.PLANNER: "You are the Planner agent coordinating a biomedical hypothesis discovery workflow.",
    AgentRole.BACKGROUND: "You are the Background agent. You summarize biomedical literature.",
    AgentRole.EXPLORER: "You are the Explorer agent. You select knowledge-graph nodes.",
    AgentRole.SCIENTIST: "You are a biomedical researcher proposing hypotheses.",
    AgentRole.CRITIC: "You are the Critic agent. You score biomedical hypotheses.",
    AgentRole.REVIEWER: "You are the Reviewer agent. You choose evidence retrieval actions.",
    AgentRole.REFINER: "You are the Refiner agent. You revise biomedical hypotheses.",
    AgentRole.CLASSIFIER: "You are a relation classifier for biomedical hypotheses.",
    AgentRole.JUDGE: "You are a senior biomedical reviewer.",
}

PLANNER = """\
Develop a clear, stepwise research workflow based on the provided background text.
Your plan should outline:
1. Domain selection;
2. Knowledge graph retrieval steps;
3. Hypothesis generation;
4. Iterative refinement using literature and graph evidence;
5. Final decision-making.
Respond with numbered steps."""

BACKGROUND = """\
You are given a list of PubMed article metadata blocks about a specific disease and a set of core genes or biological entities. Write a concise, well-structured background paragraph (less than 150 words) that summarizes key mechanistic insights and highlights the relationships between the core genes and disease-relevant biological processes (such as EMT, inflammation, senescence, signaling, etc.).
Requirements:
1. Clearly explain how the core genes are linked to disease mechanisms, pathways, or phenotypes based on the literature.
2. Emphasize causal or regulatory connections when possible, rather than just listing associations.
3. Do not copy sentences verbatim from abstracts. Always synthesize and paraphrase information in your own words.
4. Use clear, logical, and scientifically precise language.
5. Avoid including superfluous or generic information; focus on mechanistic insights most relevant to the disease and core genes."""

EXPLORER = """\
Given a background text and a list of candidate KG node, Based on the background information, select the most relevant nodes (5-10) to use for subgraph construction.
1. Only choose from the provided candidates.
2. Output only a JSON array of the selected.
3. Do not output any extra text, explanations, or formatting."""

SCIENTIST = """\
Generate up to 3 concise, testable biomedical hypotheses. Each hypothesis must be grounded in both the background and KG context, but extend current knowledge with a novel mechanistic, causal, regulatory, or predictive insight.
Guidelines:
1. Integrate both background and KG context.
2. Propose new biological mechanisms or interactions, not summaries or rephrasings of input.
3. Use precise scientific language, including mechanistic verbs such as: activates, inhibits, modulates, represses, etc.
4. Each hypothesis must be a single, plausible, testable sentence (<= 30 words) with clear entities and measurable outcomes.
5. Output only the hypotheses, no numbering, bullets, explanations, citations, or evidence fields.
Examples (good):
Activation of TGF-β in smooth muscle cells promotes vascular remodeling in hypertension.
Loss of gene X enhances inflammatory response to toxin Y in liver tissue.
Examples (bad, avoid):
CVD is associated with Wnt signaling and fibrosis.
Output:
Each line should be a standalone hypothesis. Return exactly one hypothesis per line, and nothing else."""

CRITIC = """\
Assess the hypothesis using four metrics:
Novelty: Does it introduce ideas not present in the background?
Relevance: How well does it align with the background and supporting evidence?
Significance: What is its potential to advance biological understanding or clinical practice?
Verifiability: Can it be reliably tested with current scientific methods?
Rate each metric on a 0-5 scale:
0 = no merit, 1 = very slight, 2 = slight, 3 = moderate, 4 = strong, 5 = exceptional.
Be conservative: award a 5 only if the hypothesis fully meets the criterion with no reservations. Provide one sentence of rationale per metric.
Output:
<Metric>: Score <X>
<One-sentence rationale>
(repeat for all 4 metrics)
At the end, write on a separate line:
Overall Score: <value>/20"""

REVIEWER = """\
Given the CriticAgent's markdown critique (scores 0-5 with rationales), the current hypothesis, and background text, recommend follow-up actions and query adjustments.
Steps:
1. Identify all metrics scoring <= 3. If none, select a 4-point metric using this priority: Novelty > Significance > Relevance > Verifiability.
2. Recommend all relevant actions from ['neo4j', 'pubmed', 'background']:
   - For low novelty or mechanistic gaps: use 'neo4j'; add 'pubmed' if literature may help.
   - For low verifiability: use 'pubmed'; add 'neo4j' if KG includes measurable pathways.
   - For low relevance: use 'background'.
   - If multiple metrics are low, recommend all relevant actions
3. Output exactly 3 lines:
    ACTIONS:action1,action2
    DEPTH_OVERRIDE:<integer>
    RELS_OVERRIDE:rel1,rel2,...
Rules:
Always recommend at least one action.
Include all actions relevant to low-scoring metrics.
Output must strictly follow the format above with no extra explanation.
Example:
If Novelty=2 and Verifiability=3
ACTIONS:neo4j,pubmed"""

REFINER = """\
Improve the current hypothesis based on the provided critic feedback, and new information (from Neo4j, PubMed, or background). Only make content-level changes that directly address the weaknesses.

Rules:
1. For each identified weakness, briefly state what is missing or imprecise in the hypothesis (one sentence per metric).
2. Review all new information:
    If high-quality, relevant content addresses a weakness, explain how it helps and revise the hypothesis accordingly.
    If no new information directly addresses the weaknesses, use relevant new information and scientific reasoning and the provided background to make a real, meaningful improvement, but only if this improvement is justified by the context.
    If nothing useful is found, or only stylistic edits are possible, clearly state this and leave the hypothesis unchanged.
3. Do not rephrase or reword unless it results in a real improvement. Do not invent content unsupported by evidence.

Example 1 (with helpful new info):
Step 1: The hypothesis lacks a mechanism linking Wnt inhibition to reduced fibrosis.
Step 2: New PubMed evidence suggests TGF-β mediates this process.
Step 3: Adding TGF-β clarifies the pathway.
Inhibition of Wnt signaling reduces cardiac fibrosis via downregulation of TGF-β activity.
Example 2 (no helpful info):
Step 1: The hypothesis lacks a mechanistic link.
Step 2: No new information improves this.
Step 3: No justified revision possible.
Overexpression of SOD2 reduces neurodegeneration by mitigating oxidative stress in dopaminergic neurons.
Output:
    1-4 short reasoning steps (one per line)
    Final refined hypothesis as the last line (no numbering, no extra text)
Instructions:
    Use only provided context (background + new info).
    Each reasoning step must be a complete, self-contained sentence.
    Do not include explanations, citations, or bullet points."""

DIRECT_JUDGE = """\
You are a senior biomedical reviewer.

Task:
Evaluate the following hypothesis by assigning a score for each metric (Novelty, Relevance, Significance, Verifiability) and providing a concise reason.
Metric definitions:
Novelty: Evaluate the novelty of the generated scientific hypothesis. The score range should be 0 to 3. 0 means there's no novelty, which indicates that the hypothesis is a paraphrase of the input. 1 means there's slight novelty. 2 means there's moderate novelty. 3 means the hypothesis has strong novelty, which gives new insights beyond the background. Output is an integer.
Relevance: Evaluate the relevance of the generated scientific hypothesis. The score range should be 0 to 3. 0 means there's no relevance. 1 means there's slight relevance. 2 means there's moderate relevance. 3 means they are strongly related. Output is an integer.
Significance: Evaluate the significance of the generated scientific hypothesis. The score range should be 0 to 3. 0 means there's no significance, which indicates that the hypothesis is just a common knowledge. 1 means there's slight significance. 2 means there's moderate significance. 3 means the hypothesis has strong significance, which gives significant insights beyond the background. Output is an integer.
Verifiability: Evaluate the verifiability of the generated scientific hypothesis. The score range should be 0 to 3. 0 means there's no verifiability, which indicates that the hypothesis is not possible to be verified in future work. 1 means there's slight verifiability. 2 means there's moderate verifiability. 3 means the hypothesis has strong verifiability, which means the hypothesis is very likely to be verified in future work. Output is an integer.
User Input: {user_input}
Hypothesis: {hypothesis}"""

PAIRWISE_JUDGE = """\
You are a senior biomedical reviewer. Compare two hypotheses A and B on four metrics: Novelty, Relevance, Significance, Verifiability.
Instructions:
For each metric, judge and select a winner:
    - "A" if A is clearly superior,
    - "B" if B is clearly superior,
    - "0" if they are equal or difference is unclear.
For each, give a concise reason.
Each metric is judged strictly independently.
Novelty: Evaluate the novelty of two scientific hypotheses (A and B) given the user input. For each, assign a novelty score from 0 to 3. 0 means there's no novelty, which indicates that the hypothesis is a paraphrase of the background. 1 means there's slight novelty. 2 means there's moderate novelty. 3 means the hypothesis has strong novelty, which gives new insights beyond the background. Score two hypotheses and compare which one is more novel("A", "B", or "0" if equal or difference is unclear)
Relevance: Evaluate the relevance of two scientific hypotheses (A and B) given the user input. For each, assign a relevance score from 0 to 3. 0 means there's no relevance. 1 means there's slight relevance. 2 means there's moderate relevance. 3 means the hypothesis is strongly related to the background. Score both hypotheses and compare which one is more relevant ("A", "B", or "0" if equal or difference is unclear)
Significance: Evaluate the significance of two scientific hypotheses (H_A and H_B) given the user input. For each, assign a significance score from 0 to 3. 0 means there's no significance, which indicates that the hypothesis is just common knowledge. 1 means there's slight significance. 2 means there's moderate significance. 3 means the hypothesis has strong significance, providing significant insights beyond the background. Score both hypotheses and compare which one is more significant ("A", "B", or "0" if equal or difference is unclear)
Verifiability: Evaluate the verifiability of two scientific hypotheses (H_A and H_B) given the user input. For each, assign a verifiability score from 0 to 3. 0 means there's no verifiability, which indicates that the hypothesis is not possible to be verified in future work. 1 means there's slight verifiability. 2 means there's moderate verifiability. 3 means the hypothesis has strong verifiability, which means it is very likely to be verified in future work. Score both hypotheses and compare which one is more verifiable ("A", "B", or "0" if equal or difference is unclear)
User Input: {user_input}
H_A: {hypothesis_a}
H_B: {hypothesis_b}"""

QUERY_PLANNER = """\
Plan a structured PubMed search for the inputs below.
Group the search terms by semantic similarity. Terms inside a group are combined with OR; groups are combined with AND.
For each group choose a field: MESH for controlled-vocabulary concepts, TIAB for free-text title/abstract phrases, ANY when unsure.
Tag each group with its source: keywords, hypothesis or feedback.
Output only a JSON object of the form:
{"groups": [{"terms": ["..."], "field": "MESH|TIAB|ANY", "source": "keywords|hypothesis|feedback"}], "min_date": "YYYY-MM-DD or null", "max_date": "YYYY-MM-DD or null", "retmax": <integer>}"""

CLASSIFIER = """\
Read the hypothesis and decide which relation it implies from the first entity to the second entity.
Answer positive if the first entity increases, activates or stimulates the second; answer negative if it decreases, represses or inhibits it.
Output exactly one line:
Relation: positive
or
Relation: negative"""


TEMPLATES = {
    PromptKind.PLANNER: PLANNER,
    PromptKind.QUERY_PLANNER: QUERY_PLANNER,
    PromptKind.BACKGROUND: BACKGROUND,
    PromptKind.EXPLORER: EXPLORER,
    PromptKind.SCIENTIST: SCIENTIST,
    PromptKind.CRITIC: CRITIC,
    PromptKind.REVIEWER: REVIEWER,
    PromptKind.REFINER: REFINER,
    PromptKind.CLASSIFIER: CLASSIFIER,
    PromptKind.DIRECT_JUDGE: DIRECT_JUDGE,
    PromptKind.PAIRWISE_JUDGE: PAIRWISE_JUDGE,
}

REQUIRED = {
    PromptKind.PLANNER: ("topic",),
    PromptKind.QUERY_PLANNER: ("keywords", "mode"),
    PromptKind.BACKGROUND: ("keywords", "literature"),
    PromptKind.EXPLORER: ("background", "candidates"),
    PromptKind.SCIENTIST: ("background", "subgraph_text"),
    PromptKind.CRITIC: ("hypothesis", "background"),
    PromptKind.REVIEWER: ("hypothesis", "critic_feedback", "background"),
    PromptKind.REFINER: ("hypothesis", "critic_feedback", "new_information"),
    PromptKind.CLASSIFIER: ("hypothesis", "entities"),
    PromptKind.DIRECT_JUDGE: ("topic", "hypothesis"),
    PromptKind.PAIRWISE_JUDGE: ("topic", "pair"),
}


@dataclass(frozen=True)
class PromptContext:
    kind: PromptKind
    topic: str | None = None
    keywords: tuple[str, ...] = ()
    background: str | None = None
    subgraph_text: str | None = None
    hypothesis: str | None = None
    critic_feedback: str | None = None
    new_information: str | None = None
    pair: tuple[str, str] | None = None
    literature: str | None = None
    candidates: tuple[str, ...] = ()
    mode: str | None = None
    entities: tuple[str, str] | None = None
    extras: tuple[tuple[str, str], ...] = field(default=())

    @property
    def role(self) -> AgentRole:
        return ROLE_OF[self.kind]


def _missing(ctx: PromptContext) -> list[str]:
    out = []
    for name in REQUIRED[ctx.kind]:
        value = getattr(ctx, name)
        if value is None or (isinstance(value, (str, tuple)) and len(value) == 0):
            out.append(name)
        elif isinstance(value, str) and not value.strip():
            out.append(name)
    if ctx.kind is PromptKind.QUERY_PLANNER and not out:
        if ctx.mode in ("Evaluation", "Revision") and not ctx.hypothesis:
            out.append("hypothesis")
        if ctx.mode == "Revision" and not ctx.critic_feedback:
            out.append("critic_feedback")
    return out


def render_prompt(ctx: PromptContext) -> str:
    """Render the full prompt text for ``ctx``.

    Raises ContextError naming every missing field.
    """
    missing = _missing(ctx)
    if missing:
        raise ContextError(f"{ctx.kind.value} prompt missing: {', '.join(missing)}")
    template = TEMPLATES[ctx.kind]
    if ctx.kind is PromptKind.DIRECT_JUDGE:
        return template.format(user_input=ctx.topic, hypothesis=ctx.hypothesis)
    if ctx.kind is PromptKind.PAIRWISE_JUDGE:
        a, b = ctx.pair
        return template.format(user_input=ctx.topic, hypothesis_a=a, hypothesis_b=b)

    sections: list[tuple[str, str]] = []
    if ctx.kind is PromptKind.QUERY_PLANNER:
        sections.append(("Mode", ctx.mode))
    if ctx.topic and ctx.kind is not PromptKind.PLANNER:
        sections.append(("Research topic", ctx.topic))
    if ctx.kind is PromptKind.PLANNER:
        sections.append(("Background text", ctx.background or ctx.topic))
    if ctx.keywords:
        sections.append(("Keywords", ", ".join(ctx.keywords)))
    if ctx.entities:
        sections.append(("Entity pair", f"{ctx.entities[0]} -> {ctx.entities[1]}"))
    if ctx.background and ctx.kind is not PromptKind.PLANNER:
        sections.append(("Background", ctx.background))
    if ctx.candidates:
        sections.append(("Candidate nodes", "\n".join(ctx.candidates)))
    if ctx.subgraph_text:
        sections.append(("Knowledge graph context", ctx.subgraph_text))
    if ctx.literature:
        label = "Articles" if ctx.kind is PromptKind.BACKGROUND else "Supporting literature"
        sections.append((label, ctx.literature))
    if ctx.hypothesis:
        label = "Current hypothesis" if ctx.kind in (PromptKind.REVIEWER, PromptKind.REFINER) else "Hypothesis"
        sections.append((label, ctx.hypothesis))
    if ctx.critic_feedback:
        sections.append(("Critic feedback", ctx.critic_feedback))
    if ctx.new_information:
        sections.append(("New information", ctx.new_information))
    sections.extend(ctx.extras)
    body = "\n\n".join(f"{name}:\n{text}" for name, text in sections)
    return f"{template}\n\n{body}"
