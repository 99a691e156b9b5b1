"""Heterogeneous article knowledge graphs.

Each article yields one graph with five node types: a single Document root,
Section nodes labelled ``{article_id}_Abs`` / ``{article_id}_Sec{i}``,
Metadata nodes (titles, keywords, publication date) labelled with their
content, Concept nodes labelled with their lexicon id, and SemType nodes.
Structural relations are ``contains``, ``was_published_in``, ``has_title``,
and ``has_keyword``; semantic relations between SemType nodes come from the
lexicon's relation triples.
"""
from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .concepts import SectionConceptMap
from .corpus import Article, Lexicon, semantic_relation_registry, token_surfaces
from .errors import GraphError

NODE_TYPES = ("Document", "Section", "Metadata", "Concept", "SemType")
CUSTOM_RELATIONS = frozenset({"contains", "was_published_in", "has_title", "has_keyword"})


@dataclass(frozen=True)
class Node:
    id: str
    type: str


@dataclass(frozen=True)
class ArticleGraph:
    nodes: tuple[Node, ...]
    edges: tuple[tuple[str, str, str], ...]

    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def nodes_of_type(self, node_type: str) -> list[Node]:
        return [n for n in self.nodes if n.type == node_type]


def _canonical(nodes: Iterable[Node], edges: Iterable[tuple[str, str, str]]) -> ArticleGraph:
    uniq_nodes = sorted(set(nodes), key=lambda n: (n.type, n.id))
    uniq_edges = sorted(set(edges))
    return ArticleGraph(nodes=tuple(uniq_nodes), edges=tuple(uniq_edges))


# ---------------------------------------------------------------------------
# Construction


def build_graph(article: Article, section_concept_map: SectionConceptMap, lexicon: Lexicon) -> ArticleGraph:
    """Assemble the article graph and validate all structural invariants."""
    nodes: list[Node] = []
    edges: list[tuple[str, str, str]] = []

    doc_id = article.id
    nodes.append(Node(doc_id, "Document"))

    def metadata(content: str) -> str | None:
        if not content:
            return None
        nodes.append(Node(content, "Metadata"))
        return content

    title_node = metadata(article.title)
    if title_node:
        edges.append((doc_id, "has_title", title_node))
    for kw in article.keywords:
        kw_node = metadata(kw)
        if kw_node:
            edges.append((doc_id, "has_keyword", kw_node))
    date_node = metadata(article.pub_date)
    if date_node:
        edges.append((doc_id, "was_published_in", date_node))

    section_labels: dict[int, str] = {-1: f"{doc_id}_Abs"}
    for i in range(len(article.sections)):
        section_labels[i] = f"{doc_id}_Sec{i}"
    indexed_sections = [(-1, article.abstract)] + list(enumerate(article.sections))
    for idx, section in indexed_sections:
        label = section_labels[idx]
        nodes.append(Node(label, "Section"))
        edges.append((doc_id, "contains", label))
        sec_title_node = metadata(section.title)
        if sec_title_node:
            edges.append((label, "has_title", sec_title_node))

    used_semtypes: set[str] = set()
    for idx, concept_ids in section_concept_map.concepts.items():
        if idx not in section_labels:
            raise GraphError(f"concept map refers to unknown section index {idx}")
        label = section_labels[idx]
        for cid in sorted(concept_ids):
            concept = lexicon.concepts.get(cid)
            if concept is None:
                raise GraphError(f"dangling concept id {cid!r}")
            if not concept.semtypes:
                raise GraphError(f"concept {cid!r} has no semantic types")
            nodes.append(Node(cid, "Concept"))
            edges.append((label, "contains", cid))
            for tid in concept.semtypes:
                if tid not in lexicon.semtypes:
                    raise GraphError(f"concept {cid!r}: unresolvable semtype {tid!r}")
                nodes.append(Node(tid, "SemType"))
                edges.append((cid, "is_a", tid))
                used_semtypes.add(tid)

    for t1, rel, t2 in lexicon.relations:
        if t1 in used_semtypes and t2 in used_semtypes:
            edges.append((t1, rel, t2))

    graph = _canonical(nodes, edges)
    validate_graph(graph)
    return graph


def validate_graph(graph: ArticleGraph) -> None:
    """Check structural invariants; raises GraphError on the first violation."""
    ids = {}
    for node in graph.nodes:
        if node.type not in NODE_TYPES:
            raise GraphError(f"unknown node type {node.type!r}")
        if node.id in ids:
            raise GraphError(f"duplicate node id {node.id!r}")
        ids[node.id] = node.type

    docs = [n for n in graph.nodes if n.type == "Document"]
    if len(docs) != 1:
        raise GraphError(f"expected exactly one Document node, found {len(docs)}")
    doc_id = docs[0].id

    registry = semantic_relation_registry()
    valid_relations = registry | CUSTOM_RELATIONS
    adjacency: dict[str, set[str]] = defaultdict(set)
    concepts_with_isa: set[str] = set()
    for src, rel, dst in graph.edges:
        if src not in ids or dst not in ids:
            raise GraphError(f"edge endpoint missing: ({src!r}, {rel!r}, {dst!r})")
        if rel not in valid_relations:
            raise GraphError(f"unknown relation name {rel!r}")
        adjacency[src].add(dst)
        adjacency[dst].add(src)
        if rel == "is_a" and ids[src] == "Concept" and ids[dst] == "SemType":
            concepts_with_isa.add(src)

    for node in graph.nodes:
        if node.type == "Concept" and node.id not in concepts_with_isa:
            raise GraphError(f"concept node {node.id!r} has no is_a edge to a SemType")

    # Section label scheme: one _Abs plus contiguous zero-based _Sec{i}.
    sec_ids = {n.id for n in graph.nodes if n.type == "Section"}
    expected = {f"{doc_id}_Abs"} | {f"{doc_id}_Sec{i}" for i in range(len(sec_ids) - 1)}
    if sec_ids != expected:
        raise GraphError(f"section labels {sorted(sec_ids)} do not follow the _Abs/_Sec{{i}} scheme")

    # Reachability from the Document node treating edges as undirected.
    seen = {doc_id}
    frontier = [doc_id]
    while frontier:
        nxt = frontier.pop()
        for nb in adjacency[nxt]:
            if nb not in seen:
                seen.add(nb)
                frontier.append(nb)
    unreachable = set(ids) - seen
    if unreachable:
        raise GraphError(f"nodes unreachable from Document node: {sorted(unreachable)[:5]}")


# ---------------------------------------------------------------------------
# Random-walk positional encodings


def rwpe(graph: ArticleGraph, K: int) -> np.ndarray:
    """N x K matrix whose k-th column is diag(RW^(k+1)) with RW = A D^-1 over
    the symmetrized, self-loop-free adjacency.  Zero-degree rows stay 0."""
    if K < 1:
        raise GraphError("K must be >= 1")
    index = {n.id: i for i, n in enumerate(graph.nodes)}
    n = len(graph.nodes)
    A = np.zeros((n, n), dtype=np.float64)
    for src, _, dst in graph.edges:
        i, j = index[src], index[dst]
        if i == j:
            continue
        A[i, j] = 1.0
        A[j, i] = 1.0
    deg = A.sum(axis=0)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    rw = A * inv[np.newaxis, :]
    out = np.zeros((n, K), dtype=np.float64)
    M = np.eye(n)
    for k in range(K):
        M = M @ rw
        out[:, k] = np.diag(M)
    return out


# ---------------------------------------------------------------------------
# Node featurization


def hashed_bow(text: str, d_text: int) -> np.ndarray:
    """Deterministic signed feature-hashing embedding of a text, L2-normalized.

    Each lowercased token is hashed with blake2b (8-byte digest, big-endian
    integer v); it adds +-1 at index v % d_text, with sign taken from v's top
    bit.  The zero vector is returned for empty text.
    """
    vec = np.zeros(d_text, dtype=np.float64)
    for surface in token_surfaces(text):
        digest = hashlib.blake2b(surface.lower().encode("utf-8"), digest_size=8).digest()
        v = int.from_bytes(digest, "big")
        sign = 1.0 if v < (1 << 63) else -1.0
        vec[v % d_text] += sign
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def gat_input_graph(graph: ArticleGraph) -> ArticleGraph:
    """The graph actually consumed by the encoder: title Metadata nodes (the
    targets of has_title edges) are dropped along with their edges."""
    title_nodes = {dst for _, rel, dst in graph.edges if rel == "has_title"}
    nodes = [n for n in graph.nodes if n.id not in title_nodes]
    kept = {n.id for n in nodes}
    edges = [e for e in graph.edges if e[0] in kept and e[2] in kept]
    return _canonical(nodes, edges)


@dataclass(frozen=True)
class GraphFeatures:
    """Encoder-ready view of a graph: node ids, feature rows, directed edges
    as index pairs into ``node_ids``."""

    node_ids: tuple[str, ...]
    node_types: tuple[str, ...]
    features: np.ndarray  # N x (d_text + 5 + K)
    edges: tuple[tuple[int, int], ...]


def _node_text(node: Node, article: Article, lexicon: Lexicon) -> str:
    if node.type == "Document":
        return article.title
    if node.type == "Section":
        if node.id.endswith("_Abs"):
            return article.abstract.title
        i = int(node.id.rsplit("_Sec", 1)[1])
        return article.sections[i].title
    if node.type == "Concept":
        return lexicon.concepts[node.id].definition
    if node.type == "SemType":
        return lexicon.semtypes[node.id].definition
    return node.id  # Metadata: keywords and dates carry their own content


def init_node_features(
    graph: ArticleGraph,
    article: Article,
    lexicon: Lexicon,
    d_text: int = 64,
    K: int = 8,
) -> GraphFeatures:
    """Per-node features for the GAT input graph.

    Row layout: hashed text embedding (d_text, L2-normalized), node-type
    one-hot (5), random-walk positional encoding (K).  Text source by type:
    Concept/SemType definitions, Document/Section titles, remaining Metadata
    nodes their own content.
    """
    if d_text < 8:
        raise GraphError("d_text must be >= 8")
    sub = gat_input_graph(graph)
    pe = rwpe(sub, K)
    rows = []
    for i, node in enumerate(sub.nodes):
        text_vec = hashed_bow(_node_text(node, article, lexicon), d_text)
        one_hot = np.zeros(len(NODE_TYPES), dtype=np.float64)
        one_hot[NODE_TYPES.index(node.type)] = 1.0
        rows.append(np.concatenate([text_vec, one_hot, pe[i]]))
    index = {n.id: i for i, n in enumerate(sub.nodes)}
    edges = tuple((index[s], index[d]) for s, _, d in sub.edges)
    return GraphFeatures(
        node_ids=tuple(n.id for n in sub.nodes),
        node_types=tuple(n.type for n in sub.nodes),
        features=np.vstack(rows) if rows else np.zeros((0, d_text + 5 + K)),
        edges=edges,
    )


# ---------------------------------------------------------------------------
# Statistics


@dataclass(frozen=True)
class StatsReport:
    n_graphs: int
    node_type_means: dict[str, float]
    relation_means: dict[str, float]

    def to_markdown(self) -> str:
        lines = [
            f"Graphs: {self.n_graphs}",
            "",
            "| Node type | Average count |",
            "|---|---|",
        ]
        for t in NODE_TYPES:
            lines.append(f"| {t} | {self.node_type_means.get(t, 0.0):.2f} |")
        lines += ["", "| Relation type | Average count |", "|---|---|"]
        for rel in sorted(self.relation_means):
            lines.append(f"| {rel} | {self.relation_means[rel]:.2f} |")
        return "\n".join(lines) + "\n"


def graph_stats(graphs: Sequence[ArticleGraph]) -> StatsReport:
    if not graphs:
        raise GraphError("graph_stats requires at least one graph")
    type_totals: dict[str, int] = defaultdict(int)
    rel_totals: dict[str, int] = defaultdict(int)
    for g in graphs:
        for node in g.nodes:
            type_totals[node.type] += 1
        for _, rel, _ in g.edges:
            rel_totals[rel] += 1
    n = len(graphs)
    return StatsReport(
        n_graphs=n,
        node_type_means={t: type_totals[t] / n for t in type_totals},
        relation_means={r: rel_totals[r] / n for r in rel_totals},
    )


# ---------------------------------------------------------------------------
# Serialization


def serialize_graph(graph: ArticleGraph) -> bytes:
    """Canonical JSON bytes: nodes sorted by (type, id), edges lexicographic."""
    canon = _canonical(graph.nodes, graph.edges)
    obj = {
        "nodes": [{"id": n.id, "type": n.type} for n in canon.nodes],
        "edges": [list(e) for e in canon.edges],
    }
    return (json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n").encode("utf-8")


def parse_graph(data: bytes | str) -> ArticleGraph:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as e:
        raise GraphError(f"malformed graph file: {e}") from None
    if not isinstance(obj, dict) or "nodes" not in obj or "edges" not in obj:
        raise GraphError("graph file must contain 'nodes' and 'edges'")
    nodes = []
    for entry in obj["nodes"]:
        node_type = entry.get("type")
        if node_type not in NODE_TYPES:
            raise GraphError(f"unknown node type {node_type!r}")
        nodes.append(Node(entry["id"], node_type))
    edges = []
    for e in obj["edges"]:
        if not (isinstance(e, list) and len(e) == 3):
            raise GraphError(f"edge must be a [src, rel, dst] triple: {e!r}")
        edges.append((e[0], e[1], e[2]))
    return _canonical(nodes, edges)
