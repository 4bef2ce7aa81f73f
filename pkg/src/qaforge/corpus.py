"""Corpus loading and chunking.

Documents are loaded from JSONL or a directory of plaintext files and split
into grounding chunks under one of three strategies: none (whole document),
uniform (fixed-size sliding token windows), or semantic (sentence merging
until an embedding-distance breakpoint fires).

Token counting is whitespace word-splitting throughout; it is deterministic
and model-agnostic.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, List, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# embedder: batch of texts -> one unit vector per text (rows)
Embedder = Callable[[Sequence[str]], np.ndarray]


class ChunkStrategy(str, Enum):
    NONE = "none"
    SEMANTIC = "semantic"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    body: str
    topic_tags: Tuple[str, ...] = ()


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    text: str
    token_count: int
    span: Tuple[int, int]  # character offsets into the parent body
    strategy: ChunkStrategy

    def to_record(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "doc_id": self.doc_id,
            "text": self.text,
            "span": list(self.span),
            "strategy": self.strategy.value,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Chunk":
        return cls(
            chunk_id=rec["chunk_id"],
            doc_id=rec["doc_id"],
            text=rec["text"],
            token_count=len(rec["text"].split()),
            span=(rec["span"][0], rec["span"][1]),
            strategy=ChunkStrategy(rec["strategy"]),
        )


@dataclass
class ChunkingConfig:
    strategy: ChunkStrategy = ChunkStrategy.NONE
    uniform_size: int = 256
    uniform_overlap: int = 32
    semantic_breakpoint: float = 0.35

    def validate(self) -> None:
        if self.uniform_size <= 0:
            raise ValueError("uniform_size must be positive")
        if not 0 <= self.uniform_overlap < self.uniform_size:
            raise ValueError("uniform_overlap must satisfy 0 <= overlap < size")
        if not 0.0 <= self.semantic_breakpoint <= 1.0:
            raise ValueError("semantic_breakpoint must be in [0, 1]")


@dataclass
class CorpusLoadResult:
    documents: List[Document] = field(default_factory=list)
    skipped: List[Tuple[str, str]] = field(default_factory=list)  # (where, reason)


class CorpusError(Exception):
    pass


def load_corpus(path: str | Path, fmt: str = "jsonl") -> CorpusLoadResult:
    """Load a corpus from a JSONL file or a directory of .txt files.

    Malformed records are skipped, counted, and reported with their location;
    loading continues. Documents are returned sorted by doc_id.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus path does not exist: {path}")
    result = CorpusLoadResult()
    if fmt == "jsonl":
        _load_jsonl(path, result)
    elif fmt == "plaintext-dir":
        _load_plaintext_dir(path, result)
    else:
        raise CorpusError(f"unknown corpus format: {fmt!r}")
    result.documents.sort(key=lambda d: d.doc_id)
    seen = set()
    for doc in result.documents:
        if doc.doc_id in seen:
            raise CorpusError(f"duplicate doc_id: {doc.doc_id}")
        seen.add(doc.doc_id)
    return result


def _load_jsonl(path: Path, result: CorpusLoadResult) -> None:
    if not path.is_file():
        raise CorpusError(f"expected a JSONL file: {path}")
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                logger.warning("skipping malformed record at %s: %s", where, exc)
                result.skipped.append((where, f"invalid JSON: {exc}"))
                continue
            doc = _record_to_document(rec)
            if doc is None:
                logger.warning("skipping malformed record at %s: missing fields", where)
                result.skipped.append((where, "missing id/body fields"))
                continue
            result.documents.append(doc)


def _record_to_document(rec) -> Document | None:
    if not isinstance(rec, dict):
        return None
    doc_id = rec.get("id")
    body = rec.get("body")
    if not isinstance(doc_id, str) or not isinstance(body, str) or not body.strip():
        return None
    return Document(
        doc_id=doc_id,
        title=rec.get("title", "") or "",
        body=body.strip(),
        topic_tags=tuple(rec.get("topics", []) or []),
    )


def _load_plaintext_dir(path: Path, result: CorpusLoadResult) -> None:
    if not path.is_dir():
        raise CorpusError(f"expected a directory: {path}")
    for file in sorted(path.glob("*.txt")):
        body = file.read_text(encoding="utf-8").strip()
        if not body:
            result.skipped.append((str(file), "empty file"))
            continue
        title = body.splitlines()[0].strip()
        result.documents.append(
            Document(doc_id=file.stem, title=title, body=body)
        )


_TOKEN_RE = re.compile(r"\S+")
# sentence boundary: run of .?! followed by whitespace, or a newline
_SENT_END_RE = re.compile(r"[.?!]+(?=\s)|\n")


def token_spans(body: str) -> List[Tuple[int, int]]:
    return [m.span() for m in _TOKEN_RE.finditer(body)]


def sentence_spans(body: str) -> List[Tuple[int, int]]:
    """Sentence segmentation on .?! + newline boundaries, offsets preserved."""
    spans = []
    start = 0
    for m in _SENT_END_RE.finditer(body):
        end = m.end()
        if body[start:end].strip():
            spans.append(_trim_span(body, start, end))
        start = end
    if body[start:].strip():
        spans.append(_trim_span(body, start, len(body)))
    return spans


def _trim_span(body: str, start: int, end: int) -> Tuple[int, int]:
    while start < end and body[start].isspace():
        start += 1
    while end > start and body[end - 1].isspace():
        end -= 1
    return (start, end)


def chunk_document(
    doc: Document,
    cfg: ChunkingConfig,
    embedder: Embedder | None = None,
) -> List[Chunk]:
    """Split a document into chunks under the configured strategy.

    The embedder is required only for the semantic strategy. Chunk ordinals
    increase with span start; re-running on the same inputs is byte-identical.
    """
    cfg.validate()
    if cfg.strategy is ChunkStrategy.NONE:
        spans = [(0, len(doc.body))]
    elif cfg.strategy is ChunkStrategy.UNIFORM:
        spans = _uniform_spans(doc.body, cfg.uniform_size, cfg.uniform_overlap)
    elif cfg.strategy is ChunkStrategy.SEMANTIC:
        if embedder is None:
            raise ValueError("semantic chunking requires an embedder")
        spans = _semantic_spans(doc.body, cfg.semantic_breakpoint, embedder)
    else:  # pragma: no cover
        raise ValueError(f"unknown strategy: {cfg.strategy}")
    chunks = []
    for ordinal, (start, end) in enumerate(spans):
        text = doc.body[start:end]
        chunks.append(
            Chunk(
                chunk_id=f"{doc.doc_id}:{ordinal:04d}",
                doc_id=doc.doc_id,
                text=text,
                token_count=len(text.split()),
                span=(start, end),
                strategy=cfg.strategy,
            )
        )
    return chunks


def _uniform_spans(body: str, size: int, overlap: int) -> List[Tuple[int, int]]:
    toks = token_spans(body)
    if not toks:
        return []
    step = size - overlap
    spans = []
    start = 0
    while True:
        window = toks[start : start + size]
        spans.append((window[0][0], window[-1][1]))
        if start + size >= len(toks):
            break
        start += step
    return spans


def _semantic_spans(
    body: str, breakpoint_dist: float, embedder: Embedder
) -> List[Tuple[int, int]]:
    sents = sentence_spans(body)
    if not sents:
        return []
    if len(sents) == 1:
        return sents
    vecs = np.asarray(embedder([body[s:e] for s, e in sents]), dtype=float)
    # adjacent cosine distance; split where it exceeds the breakpoint
    sims = np.sum(vecs[:-1] * vecs[1:], axis=1)
    spans = []
    group_start = sents[0][0]
    group_end = sents[0][1]
    for i in range(1, len(sents)):
        if 1.0 - sims[i - 1] > breakpoint_dist:
            spans.append((group_start, group_end))
            group_start = sents[i][0]
        group_end = sents[i][1]
    spans.append((group_start, group_end))
    return spans


def write_chunks(chunks: Sequence[Chunk], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for ch in chunks:
            fh.write(json.dumps(ch.to_record(), sort_keys=True, ensure_ascii=False) + "\n")


def read_chunks(path: str | Path) -> List[Chunk]:
    chunks = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                chunks.append(Chunk.from_record(json.loads(line)))
    return chunks
