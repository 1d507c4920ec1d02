"""Knowledge-graph evidence: loading, keyword linking, subgraph retrieval."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .core import AgentRole
from .errors import GraphLoadError, InputError, ParseError, SelectionError
from .prompts import PromptContext, PromptKind, render_prompt
from .protocol import parse_node_selection

if TYPE_CHECKING:
    from .llm import Gateway

log = logging.getLogger(__name__)

TSV_HEADER = ("src_id", "src_name", "src_category", "relation", "dst_id", "dst_name", "dst_category")
PRIMEKG_COLUMNS = ("x_id", "x_type", "x_name", "relation", "y_id", "y_type", "y_name")
ARROW = " → "


@dataclass(frozen=True, order=True)
class EntityNode:
    node_id: str
    name: str
    category: str


@dataclass(frozen=True, order=True)
class Edge:
    src: str
    relation: str
    dst: str

    def key(self) -> tuple[str, str, str]:
        return (self.relation, self.src, self.dst)


@dataclass(frozen=True)
class GraphPath:
    """A walk through the graph; ``nodes`` has one more entry than ``edges``."""

    nodes: tuple[str, ...]
    edges: tuple[Edge, ...]

    def __len__(self) -> int:
        return len(self.edges)

    def key(self):
        return (len(self.edges), self.nodes, tuple(e.relation for e in self.edges), self.edges)


class Graph:
    """Immutable in-memory graph with node and adjacency indexes.

    Traversal ignores edge direction; edges keep their stored direction for
    rendering.
    """

    def __init__(self, nodes: Iterable[EntityNode], edges: Iterable[Edge]):
        self._nodes = {n.node_id: n for n in nodes}
        seen = set()
        unique = []
        for e in edges:
            if e in seen:
                continue
            if e.src not in self._nodes or e.dst not in self._nodes:
                raise GraphLoadError(f"edge {e} has an unknown endpoint")
            seen.add(e)
            unique.append(e)
        self._edges = tuple(unique)
        adj: dict[str, list[tuple[Edge, str]]] = {nid: [] for nid in self._nodes}
        for e in self._edges:
            adj[e.src].append((e, e.dst))
            if e.dst != e.src:
                adj[e.dst].append((e, e.src))
        for nid in adj:
            adj[nid].sort(key=lambda item: (item[0].key(), item[1]))
        self._adj = {k: tuple(v) for k, v in adj.items()}
        self._by_name: dict[str, list[str]] = {}
        for n in self._nodes.values():
            self._by_name.setdefault(n.name.casefold(), []).append(n.node_id)

    @property
    def nodes(self) -> Mapping[str, EntityNode]:
        return self._nodes

    @property
    def edges(self) -> tuple[Edge, ...]:
        return self._edges

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._nodes

    def node(self, node_id: str) -> EntityNode:
        return self._nodes[node_id]

    def incident(self, node_id: str) -> tuple[tuple[Edge, str], ...]:
        """(edge, neighbor) pairs touching ``node_id``."""
        return self._adj.get(node_id, ())

    def find(self, name: str) -> list[EntityNode]:
        return [self._nodes[i] for i in sorted(self._by_name.get(name.casefold(), ()))]

    def __repr__(self) -> str:
        return f"Graph({len(self._nodes)} nodes, {len(self._edges)} edges)"


class GraphStore(Protocol):
    """What retrieval needs from a graph; a database adapter can provide it."""

    def __contains__(self, node_id: str) -> bool: ...

    def node(self, node_id: str) -> EntityNode: ...

    def incident(self, node_id: str) -> Sequence[tuple[Edge, str]]: ...


def _read_text(source: str | Path | io.TextIOBase) -> str:
    if hasattr(source, "read"):
        return source.read()
    return Path(source).read_text(encoding="utf-8")


def load_graph(source: str | Path | io.TextIOBase) -> Graph:
    """Load the canonical seven-column TSV (header optional).

    An endpoint may be given by id alone (blank name and category) when the
    node is defined on some other line.
    """
    text = _read_text(source)
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.rstrip("\r\n").split("\t")
        if tuple(c.strip() for c in cols) == TSV_HEADER:
            continue
        if len(cols) != 7:
            raise GraphLoadError(f"expected 7 tab-separated columns, got {len(cols)}", lineno)
        rows.append((lineno, [c.strip() for c in cols]))
    return _build(
        ((ln, (c[0], c[1], c[2]), c[3], (c[4], c[5], c[6])) for ln, c in rows)
    )


def _build(rows) -> Graph:
    rows = list(rows)
    nodes: dict[str, EntityNode] = {}
    for lineno, src, _, dst in rows:
        for node_id, name, category in (src, dst):
            if not node_id:
                raise GraphLoadError("empty node id", lineno)
            if not name and not category:
                continue
            node = EntityNode(node_id, name, category)
            held = nodes.get(node_id)
            if held is not None and held != node:
                raise GraphLoadError(
                    f"node {node_id} redefined as {name!r} ({category}); first seen as {held.name!r} ({held.category})",
                    lineno,
                )
            nodes[node_id] = node
    edges = []
    for lineno, src, relation, dst in rows:
        for node_id, _, _ in (src, dst):
            if node_id not in nodes:
                raise GraphLoadError(f"dangling endpoint {node_id!r}", lineno)
        if not relation:
            raise GraphLoadError("empty relation", lineno)
        edges.append(Edge(src[0], relation, dst[0]))
    return Graph(nodes.values(), edges)


def import_primekg(source: str | Path | io.TextIOBase, *, collapse_reverse: bool = True) -> Graph:
    """Map a PrimeKG-style CSV (x_id, x_type, x_name, relation, y_id, y_type, y_name).

    PrimeKG lists undirected relations in both directions; with
    ``collapse_reverse`` the second direction is dropped.
    """
    reader = csv.DictReader(io.StringIO(_read_text(source)))
    missing = set(PRIMEKG_COLUMNS) - set(reader.fieldnames or ())
    if missing:
        raise GraphLoadError(f"missing columns: {sorted(missing)}", 1)
    rows = []
    seen = set()
    for lineno, row in enumerate(reader, start=2):
        src = (row["x_id"].strip(), row["x_name"].strip(), row["x_type"].strip())
        dst = (row["y_id"].strip(), row["y_name"].strip(), row["y_type"].strip())
        relation = row["relation"].strip()
        if collapse_reverse:
            key = (relation,) + tuple(sorted((src[0], dst[0])))
            if key in seen:
                continue
            seen.add(key)
        rows.append((lineno, src, relation, dst))
    return _build(rows)


def write_tsv(graph: Graph, dest: str | Path | io.TextIOBase) -> None:
    lines = ["\t".join(TSV_HEADER)]
    for e in graph.edges:
        s, d = graph.node(e.src), graph.node(e.dst)
        lines.append("\t".join((s.node_id, s.name, s.category, e.relation, d.node_id, d.name, d.category)))
    text = "\n".join(lines) + "\n"
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        Path(dest).write_text(text, encoding="utf-8")


# -- keyword linking ---------------------------------------------------------

class Embedder(Protocol):
    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


_TOKEN = re.compile(r"[a-z0-9]+")


class HashingEmbedder:
    """Deterministic bag-of-tokens embedder for offline use.

    Tokens are lowercase alphanumeric runs hashed into ``dim`` buckets with
    nonnegative counts, so cosine similarities are never negative.
    """

    def __init__(self, dim: int = 512):
        self.dim = dim

    def _bucket(self, token: str) -> int:
        h = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(h, "little") % self.dim

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for i, text in enumerate(texts):
            for tok in _TOKEN.findall(text.lower()):
                out[i, self._bucket(tok)] += 1.0
        return out


@dataclass(frozen=True)
class LinkCandidate:
    keyword: str
    node: EntityNode
    similarity: float


# similarities are rounded before ranking so ties do not depend on BLAS summation order
_SIM_DECIMALS = 12


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    return np.divide(mat, norms, out=np.zeros_like(mat), where=norms > 0)


def link_keywords(
    graph: Graph,
    keywords: Sequence[str],
    embedder: Embedder,
    k: int = 5,
    *,
    min_similarity: float = 0.0,
) -> dict[str, list[LinkCandidate]]:
    """Top-``k`` nodes per keyword by cosine similarity of embedded names.

    Ties break by node_id ascending.
    """
    if k < 1:
        raise InputError("k must be >= 1")
    for kw in keywords:
        if not kw or not kw.strip():
            raise InputError("empty keyword")
    ids = sorted(graph.nodes)
    if not ids:
        return {kw: [] for kw in keywords}
    names = [graph.node(i).name for i in ids]
    node_vecs = _unit_rows(np.asarray(embedder.embed(names), dtype=float))
    kw_vecs = _unit_rows(np.asarray(embedder.embed(list(keywords)), dtype=float))
    sims = np.round(kw_vecs @ node_vecs.T, _SIM_DECIMALS)
    out = {}
    for row, kw in enumerate(keywords):
        # ids are sorted, so a stable sort on -sim keeps node_id order within ties
        order = np.argsort(-sims[row], kind="stable")
        picked = []
        for j in order:
            s = float(sims[row, j])
            if s < min_similarity:
                continue
            picked.append(LinkCandidate(kw, graph.node(ids[j]), s))
            if len(picked) == k:
                break
        out[kw] = picked
    return out


def flatten_candidates(linked: Mapping[str, Sequence[LinkCandidate]]) -> list[EntityNode]:
    """Unique candidate nodes in keyword order, then rank order."""
    seen = set()
    out = []
    for cands in linked.values():
        for c in cands:
            if c.node.node_id not in seen:
                seen.add(c.node.node_id)
                out.append(c.node)
    return out


def select_nodes(
    candidates: Sequence[EntityNode],
    background: str,
    gateway: "Gateway",
    *,
    topic: str | None = None,
) -> list[EntityNode]:
    """Ask the Explorer to choose 5-10 nodes among ``candidates``."""
    if not candidates:
        raise InputError("candidate list is empty")
    names = []
    for c in candidates:
        if c.name not in names:
            names.append(c.name)
    prompt = render_prompt(
        PromptContext(PromptKind.EXPLORER, topic=topic, background=background, candidates=tuple(names))
    )
    _, resp = gateway.ask(AgentRole.EXPLORER, prompt)
    try:
        chosen = parse_node_selection(resp.text)
    except ParseError as exc:
        raise SelectionError(str(exc)) from None
    by_name: dict[str, EntityNode] = {}
    for c in candidates:
        by_name.setdefault(c.name, c)
        by_name.setdefault(c.name.casefold(), c)
    picked: list[EntityNode] = []
    for name in chosen:
        node = by_name.get(name) or by_name.get(name.casefold())
        if node is None:
            log.warning("Explorer chose %r which is not a candidate; dropped", name)
            continue
        if node not in picked:
            picked.append(node)
    if not picked:
        raise SelectionError("no valid node selected")
    if len(picked) < 5:
        log.warning("Explorer selected %d nodes (fewer than 5)", len(picked))
    if len(picked) > 10:
        log.warning("Explorer selected %d nodes; keeping the first 10", len(picked))
        picked = picked[:10]
    return picked


# -- retrieval ----------------------------------------------------------------

@dataclass(frozen=True)
class RetrievalLimits:
    max_edges: int = 20
    max_paths: int = 10


@dataclass(frozen=True)
class Subgraph:
    nodes: tuple[EntityNode, ...] = ()
    direct_edges: tuple[Edge, ...] = ()
    multihop_paths: tuple[GraphPath, ...] = ()
    seeds: frozenset[str] = field(default_factory=frozenset)

    def is_empty(self) -> bool:
        return not self.nodes and not self.direct_edges and not self.multihop_paths

    def union(self, other: "Subgraph") -> "Subgraph":
        nodes = {n.node_id: n for n in self.nodes}
        for n in other.nodes:
            nodes.setdefault(n.node_id, n)
        edges = sorted(set(self.direct_edges) | set(other.direct_edges), key=Edge.key)
        paths = sorted(set(self.multihop_paths) | set(other.multihop_paths), key=GraphPath.key)
        seeds = self.seeds | other.seeds
        return Subgraph(_order_nodes(nodes.values(), seeds, edges, paths), tuple(edges), tuple(paths), seeds)

    def edge_keys(self) -> set[tuple[str, str, str]]:
        return {e.key() for e in self.direct_edges}


def _order_nodes(nodes, seeds, edges, paths) -> tuple[EntityNode, ...]:
    # seeds first; within each group by subgraph degree descending, then name
    degree: dict[str, int] = {}
    for e in list(edges) + [e for p in paths for e in p.edges]:
        degree[e.src] = degree.get(e.src, 0) + 1
        degree[e.dst] = degree.get(e.dst, 0) + 1
    return tuple(
        sorted(nodes, key=lambda n: (n.node_id not in seeds, -degree.get(n.node_id, 0), n.name, n.node_id))
    )


def retrieve_subgraph(
    graph: GraphStore,
    seeds: Iterable[str],
    depth: int = 2,
    relation_filter: Iterable[str] | None = None,
    limits: RetrievalLimits = RetrievalLimits(),
) -> Subgraph:
    """Direct edges around ``seeds`` plus simple multi-hop paths between seed pairs.

    Direct edges are those of the subgraph induced by the seeds and their
    one-hop neighbors. Multi-hop paths have 2..``depth`` edges and run from
    the lower to the higher seed id. Both lists are capped after a
    deterministic sort.
    """
    seed_ids = sorted(set(seeds))
    if not seed_ids:
        raise InputError("at least one seed is required")
    if depth < 1:
        raise InputError("depth must be >= 1")
    for s in seed_ids:
        if s not in graph:
            raise InputError(f"unknown seed {s!r}")
    allowed = None if relation_filter is None else frozenset(relation_filter)

    def ok(edge: Edge) -> bool:
        return allowed is None or edge.relation in allowed

    hood = set(seed_ids)
    for s in seed_ids:
        hood.update(nb for e, nb in graph.incident(s) if ok(e))
    direct = set()
    for n in hood:
        for e, nb in graph.incident(n):
            if nb in hood and ok(e):
                direct.add(e)
    direct_edges = sorted(direct, key=Edge.key)[: limits.max_edges]

    paths: list[GraphPath] = []
    seed_set = set(seed_ids)
    for length in range(2, depth + 1):
        for i, a in enumerate(seed_ids):
            targets = set(seed_ids[i + 1:])
            if targets:
                paths.extend(_paths_of_length(graph, a, targets, length, ok))
        if len(paths) >= limits.max_paths:
            break
    paths = sorted(set(paths), key=GraphPath.key)[: limits.max_paths]

    used = {e.src for e in direct_edges} | {e.dst for e in direct_edges}
    for p in paths:
        used.update(p.nodes)
    nodes = [graph.node(n) for n in used]
    return Subgraph(
        _order_nodes(nodes, seed_set, direct_edges, paths),
        tuple(direct_edges),
        tuple(paths),
        frozenset(seed_set & used),
    )


def _paths_of_length(graph, start, targets, length, ok) -> list[GraphPath]:
    out = []
    nodes = [start]
    edges: list[Edge] = []

    def walk(current):
        if len(edges) == length:
            if current in targets:
                out.append(GraphPath(tuple(nodes), tuple(edges)))
            return
        for e, nb in graph.incident(current):
            if not ok(e) or nb in nodes:
                continue
            nodes.append(nb)
            edges.append(e)
            walk(nb)
            nodes.pop()
            edges.pop()

    walk(start)
    return out


def serialize_subgraph(sg: Subgraph) -> str:
    """Plaintext form: ``Nodes: ... Direct Edges: ... MultiHop Paths: ...``."""
    names = {n.node_id: n.name for n in sg.nodes}

    def name(node_id: str) -> str:
        return names.get(node_id, node_id)

    nodes = ", ".join(f"{n.name} ({n.category})" for n in sg.nodes) or "(none)"
    edges = "; ".join(ARROW.join((name(e.src), e.relation, name(e.dst))) for e in sg.direct_edges) or "(none)"
    rendered_paths = []
    for p in sg.multihop_paths:
        parts = [name(p.nodes[0])]
        for e, nxt in zip(p.edges, p.nodes[1:]):
            parts.extend((e.relation, name(nxt)))
        rendered_paths.append(ARROW.join(parts))
    paths = "; ".join(rendered_paths) or "(none)"
    return f"Nodes: {nodes} Direct Edges: {edges} MultiHop Paths: {paths}"


_ENTITY = re.compile(r"\b[A-Z][A-Za-z0-9]*[A-Z0-9][A-Za-z0-9]*\b")


def extract_entities(text: str) -> list[str]:
    """Symbol-like tokens (e.g. GPR153, YAP1, TNF) in order of appearance."""
    out = []
    for part in re.split(r"[/,;()]", text):
        for m in _ENTITY.finditer(part):
            tok = m.group(0)
            if tok.isupper() or any(ch.isdigit() for ch in tok):
                if tok not in out:
                    out.append(tok)
    return out
