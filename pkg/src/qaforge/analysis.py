"""Dataset-level quality statistics.

Three report kinds: question diversity (all pairwise embedding cosine
similarities, mean + 20-bin histogram over [0, 1]), indistinguishability rate
(a discriminator tries to pick the synthetic entry hidden among three real
seed entries), and generation ratio (retained / generated). Reports are plain
JSON documents that round-trip losslessly.
"""

from __future__ import annotations

import json
import logging
import random
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import prompts
from .generation import QAPair, SeedExample

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
DEFAULT_BINS = 20


class AnalysisError(Exception):
    pass


@dataclass
class DiversityReport:
    pair_count: int
    mean_similarity: float
    bins: int
    histogram: List[int]  # counts over fixed-width bins spanning [0, 1]

    def to_record(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "kind": "diversity",
            "pair_count": self.pair_count,
            "mean_similarity": self.mean_similarity,
            "bins": self.bins,
            "histogram": list(self.histogram),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DiversityReport":
        return cls(
            pair_count=rec["pair_count"],
            mean_similarity=rec["mean_similarity"],
            bins=rec["bins"],
            histogram=list(rec["histogram"]),
        )


@dataclass
class IRReport:
    trials: int
    discriminator_correct: int
    anomalies: int = 0  # trials with no parseable option even after reprompt

    @property
    def ir(self) -> float:
        return 1.0 - self.discriminator_correct / self.trials

    def to_record(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "kind": "indistinguishability",
            "trials": self.trials,
            "discriminator_correct": self.discriminator_correct,
            "anomalies": self.anomalies,
            "ir": self.ir,
        }


@dataclass
class RatioReport:
    generated_total: int
    retained_total: int

    def __post_init__(self):
        if self.generated_total <= 0:
            raise AnalysisError("generated_total must be positive")
        if self.retained_total > self.generated_total:
            raise AnalysisError("retained cannot exceed generated")

    @property
    def ratio(self) -> float:
        return self.retained_total / self.generated_total

    def to_record(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "kind": "generation_ratio",
            "generated_total": self.generated_total,
            "retained_total": self.retained_total,
            "ratio": self.ratio,
            # percentage rounded half-away-from-zero to one decimal place
            "ratio_percent": round_percent(self.ratio),
        }


def round_percent(ratio: float) -> float:
    """Percentage with one decimal, rounding half away from zero."""
    return float(np.floor(ratio * 1000.0 + 0.5) / 10.0)


def pairwise_diversity(
    questions: Sequence[str],
    embedder: Callable[[Sequence[str]], np.ndarray],
    bins: int = DEFAULT_BINS,
) -> DiversityReport:
    """Mean and histogram of all C(n,2) pairwise question cosine similarities.

    Embeddings are unit vectors, so similarities live in [-1, 1]; negatives
    are clamped into the first histogram bin. Lower mean = more diverse.
    """
    if len(questions) < 2:
        raise AnalysisError("diversity needs at least 2 questions")
    vecs = np.asarray(embedder(list(questions)), dtype=float)
    sims = vecs @ vecs.T
    iu = np.triu_indices(len(questions), k=1)
    values = sims[iu]
    counts, _edges = np.histogram(
        np.clip(values, 0.0, 1.0), bins=bins, range=(0.0, 1.0)
    )
    return DiversityReport(
        pair_count=len(values),
        mean_similarity=float(values.mean()),
        bins=bins,
        histogram=[int(c) for c in counts],
    )


_OPTION_LETTERS = list(string.ascii_uppercase)


def indistinguishability_rate(
    synthetic: Sequence[QAPair],
    real_seeds: Sequence[SeedExample],
    chat: Callable[[str], str],
    rng_seed: int,
    trials_per_item: int = 1,
) -> IRReport:
    """IR over seeded discriminator trials.

    Each trial hides one synthetic (question, answer) among 3 distinct real
    seed entries at a seeded random position; the discriminator names the
    synthetic option. Contexts are never shown. A reply with no parseable
    option (after one reprompt) counts as failed-to-distinguish and is
    flagged as an anomaly. Per-trial seeding makes results independent of
    execution order.
    """
    if len(real_seeds) < 3:
        raise AnalysisError("IR needs at least 3 real seed entries")
    if trials_per_item < 1:
        raise AnalysisError("trials_per_item must be positive")
    if not synthetic:
        raise AnalysisError("no synthetic items to evaluate")
    trials = 0
    correct = 0
    anomalies = 0
    for item_idx, pair in enumerate(synthetic):
        for trial in range(trials_per_item):
            rng = random.Random(f"{rng_seed}:ir:{item_idx}:{trial}")
            picks = rng.sample(list(real_seeds), 3)
            position = rng.randrange(4)
            entries: List[Tuple[str, str]] = [(s.question, s.answer) for s in picks]
            entries.insert(position, (pair.question, pair.refined_answer or pair.raw_answer))
            options_block = "\n\n".join(
                f"{_OPTION_LETTERS[i]}.\nQuestion: {q}\nAnswer: {a}"
                for i, (q, a) in enumerate(entries)
            )
            prompt = prompts.DISCRIMINATOR.format(options_block=options_block)
            choice = None
            for attempt in range(2):
                reply = chat(prompt if attempt == 0 else prompt + "\nReply with a single letter.")
                choice = _parse_option(reply, n_options=4)
                if choice is not None:
                    break
            trials += 1
            if choice is None:
                anomalies += 1
                logger.warning(
                    "discriminator reply unparseable (item %d trial %d); "
                    "counted as failed to distinguish",
                    item_idx, trial,
                )
            elif choice == position:
                correct += 1
    return IRReport(trials=trials, discriminator_correct=correct, anomalies=anomalies)


def _parse_option(reply: str, n_options: int) -> Optional[int]:
    allowed = _OPTION_LETTERS[:n_options]
    m = re.search(r"\b([A-Z])\b", reply.upper())
    if m and m.group(1) in allowed:
        return allowed.index(m.group(1))
    return None


def generation_ratio(generated_total: int, retained_total: int) -> RatioReport:
    return RatioReport(generated_total=generated_total, retained_total=retained_total)


def generation_ratio_from_stores(
    candidates_path: str | Path, retained_path: str | Path
) -> RatioReport:
    return generation_ratio(
        generated_total=_count_jsonl(candidates_path),
        retained_total=_count_jsonl(retained_path),
    )


def _count_jsonl(path: str | Path) -> int:
    with Path(path).open(encoding="utf-8") as fh:
        return sum(1 for line in fh if line.strip())


@dataclass
class DatasetComparison:
    bin_deltas: List[int]
    mean_delta: float
    left_shifted: bool  # first dataset sits at lower similarity than second

    def to_record(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "kind": "comparison",
            "bin_deltas": list(self.bin_deltas),
            "mean_delta": self.mean_delta,
            "left_shifted": self.left_shifted,
        }


def compare_datasets(a: DiversityReport, b: DiversityReport) -> DatasetComparison:
    """Per-bin count deltas (a - b) plus a left-shift indicator."""
    if a.bins != b.bins:
        raise AnalysisError(f"mismatched binning: {a.bins} vs {b.bins}")
    return DatasetComparison(
        bin_deltas=[ca - cb for ca, cb in zip(a.histogram, b.histogram)],
        mean_delta=a.mean_similarity - b.mean_similarity,
        left_shifted=a.mean_similarity < b.mean_similarity,
    )


def write_report(record: dict, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(record, sort_keys=True, ensure_ascii=False, indent=2) + "\n",
        encoding="utf-8",
    )


def read_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
