"""Domain-grounded synthetic QA generation pipeline.

Stages: corpus ingestion and chunking, knowledge-graph indexing with
personalized PageRank retrieval, few-shot QA drafting and refinement,
judge-based quality scoring and filtering, and dataset-level analysis
(diversity, indistinguishability, generation ratio).
"""

__version__ = "0.1.0"
