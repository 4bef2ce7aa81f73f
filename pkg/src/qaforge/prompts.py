"""Prompt catalog.

All prompts used by the pipeline live here as versioned text assets. Each
template's SHA-256 hash is recorded into QA-pair provenance so generation and
scoring behavior is auditable after the fact.

Output grammars:
  - triple extraction: one triple per line as ``(subject; relation; object)``
  - QA drafting: ``Q:`` / ``A:`` sentinel lines, pairs separated by a line
    containing only ``###``
  - judges: a bare score token (0, 0.5, or 1) anywhere in the reply
"""

from __future__ import annotations

import hashlib

TRIPLE_EXTRACTION = """\
Extract factual knowledge triples from the passage below.
Output one triple per line, formatted exactly as (subject; relation; object).
Use short noun phrases for subject and object. Output nothing else.

Passage:
{chunk_text}
"""

DRAFT_QA = """\
You are generating question-answer pairs for the topic "{topic}" using the
reference material below. Write questions an engineer would actually ask and
answers grounded in the reference material.

Here are example pairs in the expected style:

{few_shot_block}

Reference material:

{context_block}

Generate up to {count} question-answer pairs about "{topic}".
Format each pair exactly as:
Q: <question>
A: <answer>
Separate pairs with a line containing only ###.
"""

FEW_SHOT_EXAMPLE = """\
Q: {question}
A: {answer}
Context used:
{contexts}
"""

REFINE_ANSWER = """\
Rewrite the draft answer below into a clear, well-structured response that is
fully supported by the supporting passages. Present the reasoning as ordered
steps where the content is procedural. Keep every technical term consistent
with the passages. Output only the rewritten answer.

Question:
{question}

Draft answer:
{raw_answer}

Supporting passages:

{context_block}
"""

ALTERNATIVE_QUESTIONS = """\
Read the answer below and write {n} different questions that this answer
would directly and completely respond to. Output one question per line,
nothing else.

Answer:
{answer}
"""

GROUNDEDNESS_JUDGE = """\
You are grading how well a response is supported by the retrieved context.
Assign exactly one of these scores:
- 0 if the response is unsupported by the context or irrelevant to it
- 0.5 if the response is partially supported by the context but incomplete
- 1 if the response is fully supported by the provided context

Context:
{context_block}

Response:
{answer}

Reply with the score only.
"""

QUESTION_SPECIFICITY_JUDGE = """\
You are checking whether a question uses domain terminology (alarm names,
performance counters, configuration parameters) that appears in the retrieved
context. Assign exactly one of these scores:
- 0 if the question contains no such domain terms, or uses a domain term that
  does not appear in the context
- 1 if every domain term in the question is present in the context

Examples:
Context mentions alarm "RectifierFault" and counter "pmPowerConsumption".
Question: "How do I clear the RectifierFault alarm?" -> 1
Question: "How do I clear the BatteryLow alarm?" -> 0
Question: "What is the weather like?" -> 0

Context:
{context_block}

Question:
{question}

Reply with the score only.
"""

RESPONSE_SPECIFICITY_JUDGE = """\
You are checking whether a response uses domain terminology (alarm names,
performance counters, configuration parameters) supported by the retrieved
context. Assign exactly one of these scores:
- 0 if the response uses a domain term that does not appear in the context,
  or mentions no alarm and no performance counter at all
- 1 if every domain term in the response is present in the context and the
  response mentions at least one alarm or performance counter

Examples:
Context mentions alarm "RectifierFault" and counter "pmPowerConsumption".
Response: "Check pmPowerConsumption, then replace the rectifier unit." -> 1
Response: "Restart the node and hope for the best." -> 0

Context:
{context_block}

Response:
{answer}

Reply with the score only.
"""

ASPECT_CRITIC_JUDGE = """\
You are checking whether a question can be answered from the retrieved
context alone. Assign exactly one of these scores:
- 0 if the context does not contain enough information to answer the question
- 1 if the context contains sufficient information to answer the question

Context:
{context_block}

Question:
{question}

Reply with the score only.
"""

DISCRIMINATOR = """\
Exactly one of the following question-answer entries is synthetic
(machine-generated); the others were written and verified by human experts.
Identify the synthetic entry.

{options_block}

Reply with the letter of the synthetic entry only.
"""


def prompt_hash(template: str) -> str:
    return hashlib.sha256(template.encode("utf-8")).hexdigest()[:16]
