"""Default mock-backend script for offline demo and fixture runs.

Each entry matches one pipeline prompt by a distinctive instruction substring
and synthesizes a well-formed reply deterministically from the prompt text
itself, so a full pipeline run works end-to-end against the mock backend and
is byte-identical across runs.
"""

from __future__ import annotations

import hashlib
import re
from typing import List, Tuple


def _after(prompt: str, marker: str) -> str:
    idx = prompt.find(marker)
    return prompt[idx + len(marker):].strip() if idx >= 0 else prompt


def _content_words(text: str, limit: int = 12) -> List[str]:
    words = []
    for w in re.findall(r"[A-Za-z][A-Za-z0-9_-]{3,}", text):
        lw = w.lower()
        if lw not in words:
            words.append(lw)
        if len(words) >= limit:
            break
    return words


def _digest(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:4], "big")


def _extract_triples_reply(prompt: str) -> str:
    passage = _after(prompt, "Passage:")
    words = _content_words(passage)
    lines = []
    for i in range(0, min(len(words) - 1, 6), 2):
        lines.append(f"({words[i]}; relates to; {words[i + 1]})")
    return "\n".join(lines)


def _draft_reply(prompt: str) -> str:
    m = re.search(r'Generate up to (\d+) question-answer pairs about "([^"]+)"', prompt)
    count = int(m.group(1)) if m else 3
    topic = m.group(2) if m else "the topic"
    context = _after(prompt, "Reference material:")
    words = _content_words(context, limit=24) or ["system"]
    blocks = []
    for i in range(count):
        w1 = words[(_digest(f"{topic}:{i}:q") + i) % len(words)]
        w2 = words[(_digest(f"{topic}:{i}:a") + i) % len(words)]
        blocks.append(
            f"Q: How does {w1} affect {topic} (case {i + 1})?\n"
            f"A: When {w1} degrades, inspect {w2} first, then verify the "
            f"{topic} procedure completes."
        )
    return "\n###\n".join(blocks)


def _refine_reply(prompt: str) -> str:
    draft = _after(prompt, "Draft answer:")
    draft = draft.split("Supporting passages:")[0].strip()
    return (
        "Step 1: Confirm the reported condition against the supporting passages.\n"
        f"Step 2: {draft}\n"
        "Step 3: Verify the condition clears and record the outcome."
    )


def _alternative_questions_reply(prompt: str) -> str:
    m = re.search(r"write (\d+) different questions", prompt)
    n = int(m.group(1)) if m else 3
    answer = _after(prompt, "Answer:")
    # answers drafted by this script carry "When <w1> degrades ... the <topic>
    # procedure"; reconstruct question-like rephrasings from those slots
    w = re.search(r"When (\S+) degrades", answer)
    t = re.search(r"the (.+?) procedure", answer)
    w1 = w.group(1) if w else (_content_words(answer) or ["issue"])[0]
    topic = t.group(1) if t else "this"
    return "\n".join(
        f"How does {w1} affect {topic} (variant {i + 1})?" for i in range(n)
    )


def demo_chat_script() -> List[Tuple[str, object]]:
    return [
        ("Extract factual knowledge triples", _extract_triples_reply),
        ("question-answer pairs about", _draft_reply),
        ("Rewrite the draft answer", _refine_reply),
        ("different questions that this answer", _alternative_questions_reply),
        ("grading how well a response is supported", "1"),
        ("whether a question uses domain terminology", "1"),
        ("whether a response uses domain terminology", "1"),
        ("can be answered from the retrieved", "1"),
        ("Identify the synthetic entry", "A"),
    ]
