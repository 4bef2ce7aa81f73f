"""Phrase/passage knowledge graph with personalized PageRank retrieval.

The index holds two node kinds: normalized phrases from extracted triples and
passages (chunks). Edges are undirected and weighted: subject-object edges
accumulate weight 1 per co-occurring triple, phrase-passage containment edges
carry weight 1, and synonym edges link phrase pairs whose embedding cosine
clears a threshold (weight = similarity). Retrieval matches the query to
phrase nodes by embedding cosine, teleports personalized PageRank mass onto
the matches, and ranks passage nodes by steady-state score.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

GRAPH_FORMAT_VERSION = 1

# node keys are (kind, name) so phrase and passage namespaces cannot collide
Node = Tuple[str, str]
PHRASE = "phrase"
PASSAGE = "passage"


class GraphError(Exception):
    pass


class UnknownNodeError(GraphError):
    def __init__(self, node: Node):
        super().__init__(f"node not in graph: {node}")
        self.node = node


def normalize_phrase(text: str) -> str:
    return " ".join(text.lower().split())


@dataclass(frozen=True)
class Triple:
    subject: str
    relation: str
    object: str
    source_chunk: str


@dataclass
class TripleExtraction:
    triples: List[Triple] = field(default_factory=list)
    dropped: int = 0  # unparseable output lines


_TRIPLE_LINE_RE = re.compile(r"^\s*\(([^;()]+);([^;()]+);([^;()]+)\)\s*$")


def extract_triples(chunk, extractor) -> TripleExtraction:
    """Extract triples from a chunk via a chat-completion function.

    ``extractor`` takes a prompt string and returns the model reply. Lines
    that do not parse as ``(subject; relation; object)`` are dropped and
    counted. Subjects and objects are normalized (lowercase, trimmed,
    whitespace-collapsed).
    """
    from . import prompts

    reply = extractor(prompts.TRIPLE_EXTRACTION.format(chunk_text=chunk.text))
    result = TripleExtraction()
    for line in reply.splitlines():
        if not line.strip():
            continue
        m = _TRIPLE_LINE_RE.match(line)
        if m is None:
            result.dropped += 1
            continue
        subject = normalize_phrase(m.group(1))
        relation = normalize_phrase(m.group(2))
        obj = normalize_phrase(m.group(3))
        if not (subject and relation and obj):
            result.dropped += 1
            continue
        result.triples.append(
            Triple(subject=subject, relation=relation, object=obj,
                   source_chunk=chunk.chunk_id)
        )
    if result.dropped:
        logger.info("dropped %d unparseable triple lines for %s",
                    result.dropped, chunk.chunk_id)
    return result


@dataclass
class KnowledgeGraph:
    phrase_nodes: List[str] = field(default_factory=list)  # sorted, normalized
    passage_nodes: List[str] = field(default_factory=list)  # sorted chunk_ids
    passage_texts: Dict[str, str] = field(default_factory=dict)
    edges: Dict[Tuple[Node, Node], float] = field(default_factory=dict)
    phrase_embeddings: Dict[str, np.ndarray] = field(default_factory=dict)

    def nodes(self) -> List[Node]:
        return [(PHRASE, p) for p in self.phrase_nodes] + [
            (PASSAGE, c) for c in self.passage_nodes
        ]

    def has_node(self, node: Node) -> bool:
        kind, name = node
        if kind == PHRASE:
            return name in set(self.phrase_nodes)
        return name in set(self.passage_nodes)

    def add_edge(self, u: Node, v: Node, weight: float) -> None:
        if u == v or weight <= 0:
            return
        key = (u, v) if u <= v else (v, u)
        self.edges[key] = self.edges.get(key, 0.0) + weight


def build_graph(
    chunks: Sequence,
    triples: Sequence[Triple],
    embedder,
    synonym_threshold: float = 0.8,
) -> KnowledgeGraph:
    """Construct the phrase/passage graph from chunks and extracted triples.

    Deterministic given inputs: nodes are sorted, edge weights accumulate in
    a fixed order, and synonym edges use the embedder's vectors as-is.
    """
    chunk_ids = {c.chunk_id for c in chunks}
    for t in triples:
        if t.source_chunk not in chunk_ids:
            raise GraphError(f"triple references unknown chunk: {t.source_chunk}")

    graph = KnowledgeGraph()
    graph.passage_nodes = sorted(chunk_ids)
    graph.passage_texts = {c.chunk_id: c.text for c in chunks}

    phrases = sorted(
        {normalize_phrase(t.subject) for t in triples}
        | {normalize_phrase(t.object) for t in triples}
    )
    graph.phrase_nodes = phrases

    for t in triples:
        s = normalize_phrase(t.subject)
        o = normalize_phrase(t.object)
        graph.add_edge((PHRASE, s), (PHRASE, o), 1.0)
        # containment: each phrase links to its source passage once per triple
        graph.add_edge((PHRASE, s), (PASSAGE, t.source_chunk), 1.0)
        graph.add_edge((PHRASE, o), (PASSAGE, t.source_chunk), 1.0)

    if phrases:
        vecs = np.asarray(embedder(phrases), dtype=float)
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        vecs = vecs / np.where(norms == 0, 1.0, norms)
        graph.phrase_embeddings = {p: vecs[i] for i, p in enumerate(phrases)}
        sims = vecs @ vecs.T
        n = len(phrases)
        for i in range(n):
            for j in range(i + 1, n):
                if sims[i, j] >= synonym_threshold:
                    graph.add_edge(
                        (PHRASE, phrases[i]), (PHRASE, phrases[j]),
                        float(sims[i, j]),
                    )
    return graph


def personalized_pagerank(
    graph: KnowledgeGraph,
    seeds: Dict[Node, float],
    damping: float = 0.85,
    epsilon: float = 1e-8,
    max_iters: int = 100,
) -> Dict[Node, float]:
    """Personalized PageRank over the undirected weighted graph.

    The walk matrix is the degree-normalized adjacency; mass on isolated
    nodes teleports back to the seed distribution, so scores always sum to 1.
    Iteration stops when the L1 change drops below epsilon. The result does
    not depend on node insertion order (nodes are processed sorted).
    """
    if not seeds:
        raise GraphError("seeds must be non-empty")
    if not 0.0 < damping < 1.0:
        raise GraphError("damping must be in (0, 1)")
    nodes = sorted(graph.nodes())
    index = {node: i for i, node in enumerate(nodes)}
    for node in seeds:
        if node not in index:
            raise UnknownNodeError(node)
    n = len(nodes)

    teleport = np.zeros(n)
    for node, mass in seeds.items():
        if mass < 0:
            raise GraphError("teleport masses must be non-negative")
        teleport[index[node]] = mass
    total = teleport.sum()
    if total <= 0:
        raise GraphError("teleport masses must have positive sum")
    teleport /= total

    rows, cols, data = [], [], []
    degree = np.zeros(n)
    for (u, v), w in graph.edges.items():
        iu, iv = index[u], index[v]
        rows.extend([iu, iv])
        cols.extend([iv, iu])
        data.extend([w, w])
        degree[iu] += w
        degree[iv] += w
    adj = sparse.csr_matrix((data, (rows, cols)), shape=(n, n))
    inv_deg = np.where(degree > 0, 1.0 / np.where(degree > 0, degree, 1.0), 0.0)
    dangling = degree == 0

    x = teleport.copy()
    for _ in range(max_iters):
        walked = adj @ (x * inv_deg)
        dangling_mass = x[dangling].sum()
        new_x = (1.0 - damping) * teleport + damping * (walked + dangling_mass * teleport)
        if np.abs(new_x - x).sum() < epsilon:
            x = new_x
            break
        x = new_x
    return {node: float(x[i]) for node, i in index.items()}


@dataclass
class RetrievalQuery:
    key: str
    top_k: int = 3

    def __post_init__(self):
        if not self.key.strip():
            raise ValueError("query key must be non-empty")
        if self.top_k < 1:
            raise ValueError("top_k must be positive")


@dataclass
class RetrievalResult:
    ranked: List[Tuple[str, float]] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)


@dataclass
class RetrievalConfig:
    damping: float = 0.85
    epsilon: float = 1e-8
    max_iters: int = 100
    match_top_m: int = 5  # phrase-node matches forming the teleport set
    match_floor: float = 0.5  # minimum query-phrase cosine to count as a match


def retrieve(
    graph: KnowledgeGraph,
    query: RetrievalQuery,
    embedder,
    cfg: Optional[RetrievalConfig] = None,
) -> RetrievalResult:
    """Rank passages for a query key (alarm name, topic, or question text).

    Teleport mass is split over the top-m matched phrase nodes weighted by
    match similarity. With no phrase match above the floor, falls back to
    direct query-to-passage embedding cosine ranking. Ties break by chunk_id.
    """
    cfg = cfg or RetrievalConfig()
    if not graph.passage_nodes:
        return RetrievalResult(warnings=["empty graph"])

    qvec = _unit_rows(np.asarray(embedder([query.key]), dtype=float))[0]

    seeds: Dict[Node, float] = {}
    if graph.phrase_embeddings:
        phrases = graph.phrase_nodes
        mat = np.stack([graph.phrase_embeddings[p] for p in phrases])
        sims = mat @ qvec
        order = sorted(range(len(phrases)), key=lambda i: (-sims[i], phrases[i]))
        for i in order[: cfg.match_top_m]:
            if sims[i] >= cfg.match_floor:
                seeds[(PHRASE, phrases[i])] = float(sims[i])

    if seeds:
        scores = personalized_pagerank(
            graph, seeds, damping=cfg.damping, epsilon=cfg.epsilon,
            max_iters=cfg.max_iters,
        )
        ranked = [
            (cid, scores[(PASSAGE, cid)])
            for cid in graph.passage_nodes
        ]
        warnings = []
    else:
        texts = [graph.passage_texts[cid] for cid in graph.passage_nodes]
        pvecs = _unit_rows(np.asarray(embedder(texts), dtype=float))
        ranked = [
            (cid, float(pvecs[i] @ qvec))
            for i, cid in enumerate(graph.passage_nodes)
        ]
        warnings = ["no phrase match above floor; embedding fallback"]

    ranked.sort(key=lambda item: (-item[1], item[0]))
    return RetrievalResult(ranked=ranked[: query.top_k], warnings=warnings)


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    return mat / np.where(norms == 0, 1.0, norms)


def save_graph(graph: KnowledgeGraph, path: str | Path) -> None:
    """Persist the index as one JSON document (versioned; lossless round-trip)."""
    payload = {
        "format": "qaforge-graph",
        "version": GRAPH_FORMAT_VERSION,
        "phrase_nodes": graph.phrase_nodes,
        "passage_nodes": graph.passage_nodes,
        "passage_texts": graph.passage_texts,
        "edges": [
            [list(u), list(v), w] for (u, v), w in sorted(graph.edges.items())
        ],
        "embedding_dim": (
            len(next(iter(graph.phrase_embeddings.values())))
            if graph.phrase_embeddings
            else 0
        ),
        "phrase_embeddings": {
            p: [float(x) for x in vec] for p, vec in graph.phrase_embeddings.items()
        },
    }
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, ensure_ascii=False), encoding="utf-8"
    )


def load_graph(path: str | Path) -> KnowledgeGraph:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != "qaforge-graph":
        raise GraphError(f"not a graph index file: {path}")
    if payload.get("version") != GRAPH_FORMAT_VERSION:
        raise GraphError(f"unsupported graph index version: {payload.get('version')}")
    graph = KnowledgeGraph(
        phrase_nodes=list(payload["phrase_nodes"]),
        passage_nodes=list(payload["passage_nodes"]),
        passage_texts=dict(payload["passage_texts"]),
        edges={
            (tuple(u), tuple(v)): float(w) for u, v, w in payload["edges"]
        },
        phrase_embeddings={
            p: np.asarray(vec, dtype=float)
            for p, vec in payload["phrase_embeddings"].items()
        },
    )
    return graph
