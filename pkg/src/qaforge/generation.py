"""Candidate QA production: few-shot sampling, base drafting, refinement.

Drafting uses the (non-instruct) base generator with few-shot seed examples
and topic-retrieved context; refinement re-retrieves the top-3 passages using
the generated question as the key and rewrites the answer grounded in them.
Pairs move strictly forward through Drafted -> Refined -> Scored ->
{Retained, Rejected}; rejection always carries at least one reason.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from . import prompts

logger = logging.getLogger(__name__)


class GenerationError(Exception):
    pass


@dataclass(frozen=True)
class SeedExample:
    question: str
    answer: str
    context_chunks: Tuple[str, str, str]
    topic: str = ""

    def __post_init__(self):
        if not self.question.strip() or not self.answer.strip():
            raise ValueError("seed question/answer must be non-empty")
        if len(self.context_chunks) != 3 or not all(
            c.strip() for c in self.context_chunks
        ):
            raise ValueError("seed must carry exactly 3 non-empty context chunks")


@dataclass(frozen=True)
class TopicSpec:
    topic: str
    per_topic_count: int = 10

    def __post_init__(self):
        if not self.topic.strip():
            raise ValueError("topic must be non-empty")
        if self.per_topic_count < 1:
            raise ValueError("per_topic_count must be positive")


class Stage(str, Enum):
    DRAFTED = "drafted"
    REFINED = "refined"
    SCORED = "scored"
    RETAINED = "retained"
    REJECTED = "rejected"


_STAGE_ORDER = {
    Stage.DRAFTED: 0,
    Stage.REFINED: 1,
    Stage.SCORED: 2,
    Stage.RETAINED: 3,
    Stage.REJECTED: 3,
}


class StageTransitionError(GenerationError):
    pass


@dataclass
class QAPair:
    pair_id: str
    topic: str
    question: str
    raw_answer: str
    refined_answer: str = ""
    grounding: List[str] = field(default_factory=list)
    stage: Stage = Stage.DRAFTED
    provenance: Dict = field(default_factory=dict)
    reject_reasons: List[str] = field(default_factory=list)

    def advance(self, stage: Stage, reasons: Optional[Sequence[str]] = None) -> None:
        """Move the pair forward; backward transitions raise."""
        if _STAGE_ORDER[stage] <= _STAGE_ORDER[self.stage]:
            raise StageTransitionError(
                f"cannot move {self.pair_id} from {self.stage.value} to {stage.value}"
            )
        if stage is Stage.REJECTED:
            if not reasons:
                raise StageTransitionError("rejection requires at least one reason")
            self.reject_reasons = list(reasons)
        self.stage = stage

    def to_record(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "topic": self.topic,
            "question": self.question,
            "raw_answer": self.raw_answer,
            "refined_answer": self.refined_answer,
            "grounding": list(self.grounding),
            "stage": self.stage.value,
            "provenance": self.provenance,
            "reject_reasons": list(self.reject_reasons),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "QAPair":
        return cls(
            pair_id=rec["pair_id"],
            topic=rec["topic"],
            question=rec["question"],
            raw_answer=rec["raw_answer"],
            refined_answer=rec.get("refined_answer", ""),
            grounding=list(rec.get("grounding", [])),
            stage=Stage(rec["stage"]),
            provenance=dict(rec.get("provenance", {})),
            reject_reasons=list(rec.get("reject_reasons", [])),
        )


def sample_few_shot(
    seeds: Sequence[SeedExample], k: int, rng_seed: int
) -> List[SeedExample]:
    """Sample k distinct seeds without replacement, reproducibly."""
    if not seeds:
        raise GenerationError("seed set is empty")
    if k > len(seeds):
        raise GenerationError(f"k={k} exceeds seed count {len(seeds)}")
    rng = random.Random(rng_seed)
    return rng.sample(list(seeds), k)


_BLOCK_RE = re.compile(r"^Q:\s*(?P<q>.+?)\n\s*A:\s*(?P<a>.+)$", re.DOTALL)


def parse_qa_blocks(text: str) -> Tuple[List[Tuple[str, str]], int]:
    """Parse Q:/A: blocks separated by ### lines; returns (pairs, dropped)."""
    pairs = []
    dropped = 0
    for block in re.split(r"^\s*###\s*$", text, flags=re.MULTILINE):
        block = block.strip()
        if not block:
            continue
        m = _BLOCK_RE.match(block)
        if m is None:
            dropped += 1
            continue
        question = " ".join(m.group("q").split())
        answer = m.group("a").strip()
        if not question or not answer:
            dropped += 1
            continue
        pairs.append((question, answer))
    return pairs, dropped


@dataclass
class DraftResult:
    pairs: List[QAPair] = field(default_factory=list)
    dropped: int = 0
    attempts: int = 0
    flagged: bool = False  # zero parseable pairs after all attempts


def draft_qa(
    topic: TopicSpec,
    few_shot: Sequence[SeedExample],
    context_texts: Sequence[str],
    chat: Callable[[str], str],
    few_shot_indices: Optional[Sequence[int]] = None,
    model_name: str = "",
    max_extra_prompts: int = 2,
) -> DraftResult:
    """Draft up to per_topic_count pairs; reprompts at most twice on shortfall."""
    if not context_texts:
        raise GenerationError("draft context must be non-empty")
    few_shot_block = "\n".join(
        prompts.FEW_SHOT_EXAMPLE.format(
            question=s.question,
            answer=s.answer,
            contexts="\n".join(f"- {c}" for c in s.context_chunks),
        )
        for s in few_shot
    )
    context_block = "\n\n".join(context_texts)
    result = DraftResult()
    seen_questions = set()
    for attempt in range(1 + max_extra_prompts):
        remaining = topic.per_topic_count - len(result.pairs)
        if remaining <= 0:
            break
        prompt = prompts.DRAFT_QA.format(
            topic=topic.topic,
            few_shot_block=few_shot_block,
            context_block=context_block,
            count=remaining,
        ) + ("" if attempt == 0 else f"\n(reprompt {attempt})\n")
        result.attempts = attempt + 1
        reply = chat(prompt)
        parsed, dropped = parse_qa_blocks(reply)
        result.dropped += dropped
        for question, answer in parsed:
            if len(result.pairs) >= topic.per_topic_count:
                break
            if question in seen_questions:
                continue
            seen_questions.add(question)
            ordinal = len(result.pairs)
            result.pairs.append(
                QAPair(
                    pair_id=f"{_slug(topic.topic)}-{ordinal:03d}",
                    topic=topic.topic,
                    question=question,
                    raw_answer=answer,
                    provenance={
                        "draft_model": model_name,
                        "draft_prompt_hash": prompts.prompt_hash(prompts.DRAFT_QA),
                        "few_shot_indices": list(few_shot_indices or []),
                        "ordinal": ordinal,
                    },
                )
            )
        if len(result.pairs) >= topic.per_topic_count:
            break
    if not result.pairs:
        result.flagged = True
        logger.warning("topic %r produced no parseable pairs", topic.topic)
    return result


def _slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-") or "topic"


def refine_answer(
    pair: QAPair,
    retriever: Callable[[str, int], Sequence[Tuple[str, float]]],
    chunk_texts: Dict[str, str],
    chat: Callable[[str], str],
    model_name: str = "",
) -> QAPair:
    """Refine a drafted answer grounded in the question's own top-3 passages.

    ``retriever(key, top_k)`` returns ranked (chunk_id, score) pairs. With
    fewer than 3 grounding passages the pair is rejected; a refiner failure
    (after gateway retries) also rejects rather than halting the run.
    """
    from .gateway import GatewayError

    if pair.stage is not Stage.DRAFTED:
        raise StageTransitionError(f"refine requires a drafted pair, got {pair.stage.value}")
    ranked = list(retriever(pair.question, 3))
    if len(ranked) < 3:
        pair.advance(Stage.REJECTED, reasons=["no grounding"])
        return pair
    chunk_ids = [cid for cid, _score in ranked]
    context_block = "\n\n".join(chunk_texts[cid] for cid in chunk_ids)
    prompt = prompts.REFINE_ANSWER.format(
        question=pair.question,
        raw_answer=pair.raw_answer,
        context_block=context_block,
    )
    try:
        refined = chat(prompt).strip()
    except GatewayError:
        pair.advance(Stage.REJECTED, reasons=["refine failed"])
        return pair
    if not refined:
        pair.advance(Stage.REJECTED, reasons=["refine failed"])
        return pair
    pair.refined_answer = refined
    pair.grounding = chunk_ids
    pair.provenance.update(
        {
            "refine_model": model_name,
            "refine_prompt_hash": prompts.prompt_hash(prompts.REFINE_ANSWER),
        }
    )
    pair.advance(Stage.REFINED)
    return pair


def read_seeds(path: str | Path) -> List[SeedExample]:
    """Load the seed store (JSONL: question, answer, contexts[3], topic)."""
    seeds = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            contexts = rec.get("contexts", [])
            if len(contexts) != 3:
                raise GenerationError(
                    f"{path}:{lineno}: seed must have exactly 3 contexts"
                )
            seeds.append(
                SeedExample(
                    question=rec["question"],
                    answer=rec["answer"],
                    context_chunks=tuple(contexts),
                    topic=rec.get("topic", ""),
                )
            )
    return seeds


def write_pairs(pairs: Sequence[QAPair], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(
                json.dumps(pair.to_record(), sort_keys=True, ensure_ascii=False) + "\n"
            )


def read_pairs(path: str | Path) -> List[QAPair]:
    pairs = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                pairs.append(QAPair.from_record(json.loads(line)))
    return pairs
