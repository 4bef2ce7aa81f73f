"""Judge-based quality scoring and threshold filtering of refined QA pairs.

Four metrics per pair: answer relevancy (mean cosine between the original
question and judge-generated alternative questions), groundedness (three-level
rubric), domain-term specificity (question- and response-side binary rubrics,
averaged), and answerability (binary). The filter retains a pair only when
every metric clears its threshold; all thresholds on discrete metrics are
strict inequalities, so e.g. groundedness must be exactly 1 to clear 0.75.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import prompts
from .generation import QAPair

logger = logging.getLogger(__name__)


class EvaluationError(Exception):
    pass


class UnscorableError(EvaluationError):
    """Judge reply carried no score token, even after one reprompt."""


@dataclass
class MetricScores:
    relevancy: float
    groundedness: float  # {0, 0.5, 1}
    question_specificity: float  # {0, 1}
    response_specificity: float  # {0, 1}
    aspect_critic: int  # {0, 1}

    @property
    def tele_specificity(self) -> float:
        return (self.question_specificity + self.response_specificity) / 2.0

    def to_record(self) -> dict:
        return {
            "relevancy": self.relevancy,
            "groundedness": self.groundedness,
            "tele_specificity": self.tele_specificity,
            "question_specificity": self.question_specificity,
            "response_specificity": self.response_specificity,
            "aspect_critic": self.aspect_critic,
        }


@dataclass(frozen=True)
class FilterThresholds:
    groundedness_min_exclusive: float = 0.75
    aspect_required: int = 1
    specificity_min_exclusive: float = 0.75
    relevancy_min_exclusive: float = 0.5


@dataclass
class FilterDecision:
    retained: bool
    reasons: List[str] = field(default_factory=list)  # every failed criterion


def apply_filter(
    scores: MetricScores, thresholds: FilterThresholds = FilterThresholds()
) -> FilterDecision:
    """Pure threshold check; reports every failed criterion, not just the first."""
    reasons = []
    if not scores.groundedness > thresholds.groundedness_min_exclusive:
        reasons.append("groundedness")
    if scores.aspect_critic != thresholds.aspect_required:
        reasons.append("aspect_critic")
    if not scores.tele_specificity > thresholds.specificity_min_exclusive:
        reasons.append("tele_specificity")
    if not scores.relevancy > thresholds.relevancy_min_exclusive:
        reasons.append("relevancy")
    return FilterDecision(retained=not reasons, reasons=reasons)


# first standalone 0, 0.5, or 1 in the reply (longest-first so 0.5 wins over 0)
_SCORE_RE = re.compile(r"(?<![\d.])(0\.5|1(?:\.0)?|0(?:\.0)?)(?![\d.])")


def parse_score_token(reply: str, allowed: Sequence[float]) -> Optional[float]:
    for m in _SCORE_RE.finditer(reply):
        value = float(m.group(1))
        if value in allowed:
            return value
    return None


def _judge_score(
    chat: Callable[[str], str], prompt: str, allowed: Sequence[float]
) -> float:
    """One judge call plus one reprompt; raises UnscorableError otherwise."""
    for attempt in range(2):
        suffix = "" if attempt == 0 else "\nReply with the score only."
        score = parse_score_token(chat(prompt + suffix), allowed)
        if score is not None:
            return score
    raise UnscorableError("no score token in judge reply")


def response_relevancy(
    pair: QAPair,
    chat: Callable[[str], str],
    embed: Callable[[Sequence[str]], np.ndarray],
    n: int = 3,
) -> float:
    """Mean cosine between the question and n judge-written alternatives.

    Negative cosines clamp to 0 so the score stays in [0, 1]. If the judge
    yields fewer than n parseable questions, whatever parsed (at least one)
    is used; zero parseable questions score 0.
    """
    if not pair.refined_answer.strip():
        raise EvaluationError("relevancy requires a non-empty refined answer")
    reply = chat(
        prompts.ALTERNATIVE_QUESTIONS.format(n=n, answer=pair.refined_answer)
    )
    alternatives = [line.strip() for line in reply.splitlines() if line.strip()]
    alternatives = [re.sub(r"^\d+[.)]\s*", "", q) for q in alternatives][:n]
    if not alternatives:
        logger.warning("relevancy: no alternative questions parsed for %s", pair.pair_id)
        return 0.0
    if len(alternatives) < n:
        logger.info(
            "relevancy: %d/%d alternatives parsed for %s",
            len(alternatives), n, pair.pair_id,
        )
    vecs = np.asarray(embed([pair.question] + alternatives), dtype=float)
    cosines = vecs[1:] @ vecs[0]
    return float(np.mean(np.clip(cosines, 0.0, None)))


def response_groundedness(
    pair: QAPair, chunk_texts: Sequence[str], chat: Callable[[str], str]
) -> float:
    prompt = prompts.GROUNDEDNESS_JUDGE.format(
        context_block="\n\n".join(chunk_texts), answer=pair.refined_answer
    )
    return _judge_score(chat, prompt, allowed=(0.0, 0.5, 1.0))


def tele_specificity(
    pair: QAPair, chunk_texts: Sequence[str], chat: Callable[[str], str]
) -> Tuple[float, float]:
    """(question_specificity, response_specificity), each judged in {0, 1}."""
    context_block = "\n\n".join(chunk_texts)
    q_score = _judge_score(
        chat,
        prompts.QUESTION_SPECIFICITY_JUDGE.format(
            context_block=context_block, question=pair.question
        ),
        allowed=(0.0, 1.0),
    )
    r_score = _judge_score(
        chat,
        prompts.RESPONSE_SPECIFICITY_JUDGE.format(
            context_block=context_block, answer=pair.refined_answer
        ),
        allowed=(0.0, 1.0),
    )
    return q_score, r_score


def aspect_critic(
    pair: QAPair, chunk_texts: Sequence[str], chat: Callable[[str], str]
) -> int:
    prompt = prompts.ASPECT_CRITIC_JUDGE.format(
        context_block="\n\n".join(chunk_texts), question=pair.question
    )
    return int(
        _judge_score(chat, prompt, allowed=(0.0, 1.0))
    )


def score_pair(
    pair: QAPair,
    chunk_texts: Sequence[str],
    chat: Callable[[str], str],
    embed: Callable[[Sequence[str]], np.ndarray],
    relevancy_n: int = 3,
) -> Optional[MetricScores]:
    """All four metrics for one refined pair; None marks an unscorable pair."""
    try:
        relevancy = response_relevancy(pair, chat, embed, n=relevancy_n)
        groundedness = response_groundedness(pair, chunk_texts, chat)
        q_spec, r_spec = tele_specificity(pair, chunk_texts, chat)
        aspect = aspect_critic(pair, chunk_texts, chat)
    except UnscorableError:
        return None
    return MetricScores(
        relevancy=relevancy,
        groundedness=groundedness,
        question_specificity=q_spec,
        response_specificity=r_spec,
        aspect_critic=aspect,
    )


def score_histogram(values: Sequence[float], bins: int = 20) -> Dict[str, list]:
    """Fixed-width histogram over [0, 1]; used for metric distribution reports."""
    counts, edges = np.histogram(
        np.clip(np.asarray(values, dtype=float), 0.0, 1.0), bins=bins, range=(0.0, 1.0)
    )
    return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}
