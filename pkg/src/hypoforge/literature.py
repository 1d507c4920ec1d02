"""Literature evidence: query planning, PubMed E-utilities search, relaxation."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import os
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Protocol, Sequence

import httpx

from .core import AgentRole, LiteratureRecord, parse_date
from .errors import (
    ExhaustedError,
    InputError,
    ProtocolError,
    TransportError,
)
from .llm import RateLimiter
from .prompts import PromptContext, PromptKind, render_prompt

if TYPE_CHECKING:
    from .llm import Gateway

log = logging.getLogger(__name__)

EUTILS_BASE = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils"
ENV_NCBI_KEY = "HYPOFORGE_NCBI_KEY"
BACKGROUND_WORD_LIMIT = 150
EARLIEST = date(1800, 1, 1)


class Field(str, enum.Enum):
    MESH = "MESH"
    TIAB = "TIAB"
    ANY = "ANY"


_QUALIFIER = {Field.MESH: "[MeSH Terms]", Field.TIAB: "[Title/Abstract]", Field.ANY: "[All Fields]"}


class SearchMode(str, enum.Enum):
    BACKGROUND = "Background"
    EVALUATION = "Evaluation"
    REVISION = "Revision"


_SOURCES_ALLOWED = {
    SearchMode.BACKGROUND: {"keywords"},
    SearchMode.EVALUATION: {"keywords", "hypothesis"},
    SearchMode.REVISION: {"keywords", "hypothesis", "feedback"},
}


@dataclass(frozen=True)
class TermGroup:
    terms: tuple[str, ...]
    field: Field = Field.ANY
    source: str = "keywords"

    def __post_init__(self):
        terms = tuple(t.strip() for t in self.terms if t and t.strip())
        if not terms:
            raise InputError("a term group needs at least one term")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "field", Field(self.field))


@dataclass(frozen=True)
class QueryStrategy:
    """Groups are ANDed together; terms inside a group are ORed."""

    groups: tuple[TermGroup, ...]
    min_date: date | None = None
    max_date: date | None = None
    retmax: int = 20

    def __post_init__(self):
        if not self.groups:
            raise InputError("a strategy needs at least one group")
        if self.min_date and self.max_date and self.min_date > self.max_date:
            raise InputError("min_date is after max_date")
        if self.retmax < 1:
            raise InputError("retmax must be >= 1")

    def render(self) -> str:
        """Boolean query string with PubMed field qualifiers."""
        parts = []
        for g in self.groups:
            q = _QUALIFIER[g.field]
            parts.append("(" + " OR ".join(f'"{t}"{q}' for t in g.terms) + ")")
        return " AND ".join(parts)

    def date_params(self) -> dict[str, str]:
        if self.min_date is None and self.max_date is None:
            return {}
        lo = self.min_date or EARLIEST
        hi = self.max_date or date.today()
        return {"datetype": "pdat", "mindate": lo.strftime("%Y/%m/%d"), "maxdate": hi.strftime("%Y/%m/%d")}


def _optional_date(value) -> date | None:
    if value in (None, "", "null"):
        return None
    return parse_date(str(value))


def parse_query_plan(text: str, default_retmax: int = 20) -> QueryStrategy:
    raw = (text or "").strip()
    start, end = raw.find("{"), raw.rfind("}")
    if start < 0 or end < start:
        raise ProtocolError("query plan is not a JSON object")
    try:
        data = json.loads(raw[start:end + 1])
        groups = tuple(
            TermGroup(tuple(g["terms"]), Field(str(g.get("field", "ANY")).upper()), str(g.get("source", "keywords")))
            for g in data["groups"]
        )
        return QueryStrategy(
            groups,
            _optional_date(data.get("min_date")),
            _optional_date(data.get("max_date")),
            int(data.get("retmax") or default_retmax),
        )
    except (ValueError, KeyError, TypeError, InputError) as exc:
        raise ProtocolError(f"unusable query plan: {exc}") from None


def clamp_to_cutoff(strategy: QueryStrategy, cutoff: date | None) -> QueryStrategy:
    if cutoff is None:
        return strategy
    hi = min(strategy.max_date or cutoff, cutoff)
    lo = strategy.min_date
    if lo is not None and lo > hi:
        lo = hi
    return dataclasses.replace(strategy, min_date=lo, max_date=hi)


def plan_queries(
    keywords: Sequence[str],
    mode: SearchMode,
    gateway: "Gateway",
    *,
    hypothesis: str | None = None,
    feedback: str | None = None,
    topic: str | None = None,
    cutoff: date | None = None,
    retmax: int = 20,
) -> QueryStrategy:
    """Ask the planner for a structured strategy and apply mode and cutoff rules.

    Groups drawn from a source the mode does not supply (for instance
    hypothesis terms in Background mode) are removed.
    """
    if not keywords:
        raise InputError("keywords must be nonempty")
    mode = SearchMode(mode)
    if mode is not SearchMode.BACKGROUND and not hypothesis:
        raise InputError(f"{mode.value} mode requires a hypothesis")
    if mode is SearchMode.REVISION and not feedback:
        raise InputError("Revision mode requires critic feedback")
    ctx = PromptContext(
        PromptKind.QUERY_PLANNER,
        topic=topic,
        keywords=tuple(keywords),
        mode=mode.value,
        hypothesis=hypothesis if mode is not SearchMode.BACKGROUND else None,
        critic_feedback=feedback if mode is SearchMode.REVISION else None,
    )
    _, resp = gateway.ask(AgentRole.PLANNER, render_prompt(ctx))
    strategy = parse_query_plan(resp.text, retmax)
    groups = tuple(g for g in strategy.groups if g.source in _SOURCES_ALLOWED[mode])
    if len(groups) < len(strategy.groups):
        log.warning("dropped %d planner groups not allowed in %s mode", len(strategy.groups) - len(groups), mode.value)
    if not groups:
        groups = (TermGroup(tuple(keywords), Field.ANY, "keywords"),)
    strategy = dataclasses.replace(strategy, groups=groups)
    return clamp_to_cutoff(strategy, cutoff)


# -- relaxation -----------------------------------------------------------------

LADDER_STAGES = 3


def _least_populous(groups: Sequence[TermGroup], n: int) -> list[int]:
    ranked = sorted(range(len(groups)), key=lambda i: (len(groups[i].terms), i))
    return sorted(ranked[:n])


def relax(strategy: QueryStrategy, stage: int) -> QueryStrategy:
    """Apply relaxation stages 1..``stage`` cumulatively.

    1. every field widened to ANY;
    2. the two groups with fewest terms merged into one OR group;
    3. the group with fewest terms dropped, if more than one remains.

    Dates are never relaxed.
    """
    if stage < 1:
        raise InputError("stage must be >= 1")
    if stage > LADDER_STAGES:
        raise ExhaustedError(f"relaxation ladder has {LADDER_STAGES} stages")
    groups = [dataclasses.replace(g, field=Field.ANY) for g in strategy.groups]
    if stage >= 2 and len(groups) >= 2:
        i, j = _least_populous(groups, 2)
        merged_terms = tuple(dict.fromkeys(groups[i].terms + groups[j].terms))
        merged = TermGroup(merged_terms, Field.ANY, groups[i].source)
        groups = [g for k, g in enumerate(groups) if k not in (i, j)]
        groups.insert(i, merged)
    if stage >= 3 and len(groups) >= 2:
        (i,) = _least_populous(groups, 1)
        del groups[i]
    return dataclasses.replace(strategy, groups=tuple(groups))


# -- clients --------------------------------------------------------------------

class LiteratureClient(Protocol):
    def search_ids(self, strategy: QueryStrategy) -> list[str]: ...

    def fetch(self, pmids: Sequence[str]) -> list[LiteratureRecord]: ...


def record_matches(record: LiteratureRecord, strategy: QueryStrategy, *, honor_dates: bool = True) -> bool:
    if honor_dates:
        if strategy.min_date and record.pub_date < strategy.min_date:
            return False
        if strategy.max_date and record.pub_date > strategy.max_date:
            return False
    text = f"{record.title} {record.abstract}".casefold()
    mesh = {m.casefold() for m in record.mesh_terms}
    for g in strategy.groups:
        hit = False
        for term in g.terms:
            t = term.casefold()
            in_mesh = t in mesh
            in_text = t in text
            if (g.field is Field.MESH and in_mesh) or (g.field is Field.TIAB and in_text) or (
                g.field is Field.ANY and (in_mesh or in_text)
            ):
                hit = True
                break
        if not hit:
            return False
    return True


class InMemoryCorpus:
    """A local record set searched with the same Boolean semantics as the live client.

    MESH terms match MeSH headings exactly (case-insensitive), TIAB terms
    match title/abstract substrings, ANY matches either. With
    ``honor_dates=False`` the date range is ignored, mimicking a source that
    leaks post-cutoff records.
    """

    def __init__(self, records: Iterable[LiteratureRecord], *, honor_dates: bool = True):
        self.records = {r.pmid: r for r in records}
        self.honor_dates = honor_dates

    @classmethod
    def from_json(cls, path: str | Path, honor_dates: bool | None = None) -> "InMemoryCorpus":
        """Load ``{"records": [...], "honor_dates": bool}`` or a bare record list."""
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        items = data["records"] if isinstance(data, dict) else data
        if honor_dates is None:
            honor_dates = bool(data.get("honor_dates", True)) if isinstance(data, dict) else True
        return cls((LiteratureRecord.from_dict(d) for d in items), honor_dates=honor_dates)

    def search_ids(self, strategy: QueryStrategy) -> list[str]:
        hits = [r for r in self.records.values() if record_matches(r, strategy, honor_dates=self.honor_dates)]
        hits.sort(key=lambda r: (-r.pub_date.toordinal(), r.pmid))
        return [r.pmid for r in hits[: strategy.retmax]]

    def fetch(self, pmids: Sequence[str]) -> list[LiteratureRecord]:
        return [self.records[p] for p in pmids if p in self.records]


_MONTHS = {m: i for i, m in enumerate(
    ["jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec"], start=1)}


def _month(text: str | None) -> int:
    if not text:
        return 1
    text = text.strip()
    if text.isdigit():
        return int(text)
    return _MONTHS.get(text[:3].lower(), 1)


def _pub_date(article: ET.Element) -> date | None:
    node = article.find(".//Article/Journal/JournalIssue/PubDate")
    if node is None:
        node = article.find(".//PubDate")
    if node is None:
        return None
    year = node.findtext("Year")
    if year:
        day = node.findtext("Day")
        return date(int(year), _month(node.findtext("Month")), int(day) if day and day.isdigit() else 1)
    medline = node.findtext("MedlineDate")
    if medline:
        m = re.match(r"(\d{4})(?:\s+([A-Za-z]{3}))?", medline)
        if m:
            return date(int(m.group(1)), _month(m.group(2)), 1)
    return None


def parse_efetch_xml(xml_text: str) -> list[LiteratureRecord]:
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise ProtocolError(f"malformed efetch XML: {exc}") from None
    records = []
    for art in root.iter("PubmedArticle"):
        pmid = art.findtext(".//MedlineCitation/PMID") or art.findtext(".//PMID")
        if not pmid:
            raise ProtocolError("PubmedArticle without PMID")
        title = "".join(art.find(".//ArticleTitle").itertext()) if art.find(".//ArticleTitle") is not None else ""
        abstract = " ".join("".join(a.itertext()).strip() for a in art.iterfind(".//Abstract/AbstractText"))
        pub = _pub_date(art)
        if pub is None:
            log.warning("PMID %s has no usable publication date; skipped", pmid)
            continue
        mesh = tuple(d.text.strip() for d in art.iterfind(".//MeshHeading/DescriptorName") if d.text)
        records.append(LiteratureRecord(pmid.strip(), title.strip(), abstract, pub, mesh))
    return records


class PubMedClient:
    """E-utilities esearch/efetch client with a shared request-rate limiter."""

    def __init__(
        self,
        client: httpx.Client | None = None,
        *,
        api_key: str | None = None,
        base_url: str = EUTILS_BASE,
        limiter: RateLimiter | None = None,
        max_attempts: int = 3,
        backoff: float = 0.5,
        sleep=None,
    ):
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_NCBI_KEY)
        self.client = client or httpx.Client(timeout=30.0)
        self.base_url = base_url.rstrip("/")
        self.limiter = limiter or RateLimiter(10.0 if self.api_key else 3.0)
        self.max_attempts = max_attempts
        self.backoff = backoff
        import time

        self.sleep = sleep or time.sleep

    def _get(self, endpoint: str, params: dict[str, str]) -> httpx.Response:
        if self.api_key:
            params = {**params, "api_key": self.api_key}
        url = f"{self.base_url}/{endpoint}"
        last = ""
        for attempt in range(self.max_attempts):
            self.limiter.acquire()
            try:
                resp = self.client.get(url, params=params)
            except httpx.TransportError as exc:
                last = str(exc)
            else:
                if resp.status_code == 200:
                    return resp
                if resp.status_code not in (429, 500, 502, 503, 504):
                    raise TransportError(f"{endpoint}: HTTP {resp.status_code}")
                last = f"HTTP {resp.status_code}"
            if attempt + 1 < self.max_attempts:
                self.sleep(self.backoff * 2**attempt)
        raise TransportError(f"{endpoint} failed after {self.max_attempts} attempts: {last}")

    def search_ids(self, strategy: QueryStrategy) -> list[str]:
        params = {"db": "pubmed", "term": strategy.render(), "retmax": str(strategy.retmax), "retmode": "json"}
        params.update(strategy.date_params())
        resp = self._get("esearch.fcgi", params)
        try:
            return [str(i) for i in resp.json()["esearchresult"]["idlist"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed esearch reply: {exc!r}") from None

    def fetch(self, pmids: Sequence[str]) -> list[LiteratureRecord]:
        if not pmids:
            return []
        resp = self._get("efetch.fcgi", {"db": "pubmed", "id": ",".join(pmids), "retmode": "xml"})
        return parse_efetch_xml(resp.text)


class FixtureTransport(httpx.BaseTransport):
    """Record/replay transport keyed by endpoint and sorted query parameters.

    The ``api_key`` parameter never enters the key. Without ``inner`` a
    missing fixture is a transport error.
    """

    def __init__(self, fixture_dir: str | Path, inner: httpx.BaseTransport | None = None):
        self.dir = Path(fixture_dir)
        self.inner = inner

    @staticmethod
    def key(request: httpx.Request) -> str:
        params = sorted((k, v) for k, v in request.url.params.multi_items() if k != "api_key")
        raw = json.dumps([request.url.path.rsplit("/", 1)[-1], params])
        return hashlib.sha256(raw.encode()).hexdigest()[:24]

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        path = self.dir / f"{self.key(request)}.json"
        if path.exists():
            entry = json.loads(path.read_text(encoding="utf-8"))
            return httpx.Response(entry["status"], text=entry["body"], request=request)
        if self.inner is None:
            raise httpx.ConnectError(f"no fixture for {request.url}", request=request)
        resp = self.inner.handle_request(request)
        resp.read()
        self.dir.mkdir(parents=True, exist_ok=True)
        entry = {"url": str(request.url.copy_remove_param("api_key")), "status": resp.status_code, "body": resp.text}
        path.write_text(json.dumps(entry, indent=1), encoding="utf-8")
        return resp


def execute_search(strategy: QueryStrategy, client: LiteratureClient) -> list[LiteratureRecord]:
    """Run ``strategy`` and re-check its date range on every returned record."""
    ids = client.search_ids(strategy)
    records = client.fetch(ids[: strategy.retmax])
    kept = []
    for r in records:
        if strategy.max_date and r.pub_date > strategy.max_date:
            log.info("dropping PMID %s dated %s after %s", r.pmid, r.pub_date, strategy.max_date)
            continue
        if strategy.min_date and r.pub_date < strategy.min_date:
            continue
        kept.append(r)
    return kept[: strategy.retmax]


def search_with_relaxation(
    strategy: QueryStrategy, client: LiteratureClient, min_hits: int = 3
) -> tuple[list[LiteratureRecord], int]:
    """Search, relaxing stage by stage while fewer than ``min_hits`` records come back.

    Returns the records and the stage that produced them (0 = unrelaxed).
    """
    records = execute_search(strategy, client)
    stage = 0
    while len(records) < min_hits and stage < LADDER_STAGES:
        stage += 1
        records = execute_search(relax(strategy, stage), client)
    return records, stage


def format_records(records: Sequence[LiteratureRecord], abstract_chars: int | None = None) -> str:
    blocks = []
    for r in records:
        abstract = r.abstract if abstract_chars is None else r.abstract[:abstract_chars]
        blocks.append(f"PMID: {r.pmid}\nTitle: {r.title}\nDate: {r.pub_date.isoformat()}\nAbstract: {abstract}")
    return "\n\n".join(blocks)


def summarize_background(
    records: Sequence[LiteratureRecord],
    gateway: "Gateway",
    *,
    keywords: Sequence[str] = (),
    topic: str | None = None,
) -> str:
    if not records:
        raise InputError("background summary needs at least one record")
    ctx = PromptContext(
        PromptKind.BACKGROUND,
        topic=topic,
        keywords=tuple(keywords) or ((topic,) if topic else ()),
        literature=format_records(records),
    )
    _, resp = gateway.ask(AgentRole.BACKGROUND, render_prompt(ctx))
    text = resp.text.strip()
    if not text:
        raise ProtocolError("Background agent returned an empty summary")
    words = len(text.split())
    if words > BACKGROUND_WORD_LIMIT:
        log.warning("background summary has %d words (limit %d)", words, BACKGROUND_WORD_LIMIT)
    return text
