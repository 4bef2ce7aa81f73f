"""Staged pipeline orchestration.

Order: ingest -> build-graph -> generate -> evaluate -> filter -> analyze.
Every stage reads only prior-stage artifacts (plain JSONL plus one graph
index file) from the output directory and records its outputs in the run
manifest before the next stage starts, so interrupted runs resume from the
first incomplete stage. Under the mock gateway with a fixed rng_seed, two
runs with the same config are byte-identical apart from manifest timing.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import yaml

from . import analysis, corpus, evaluation, generation, graph as kg
from .evaluation import FilterThresholds, MetricScores
from .gateway import (
    Gateway,
    HttpBackend,
    MockBackend,
    ModelRole,
    RetryPolicy,
    RoleConfig,
)
from .generation import QAPair, SeedExample, Stage, TopicSpec
from .mock_script import demo_chat_script

logger = logging.getLogger(__name__)

STAGES = ["ingest", "build-graph", "generate", "evaluate", "filter", "analyze"]


class ConfigError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


class EmptyOutputError(Exception):
    pass


@dataclass
class PipelineConfig:
    corpus_path: str = ""
    corpus_format: str = "jsonl"
    seeds_path: str = ""
    topics_path: str = ""
    out_dir: str = "out"
    chunking: corpus.ChunkingConfig = field(default_factory=corpus.ChunkingConfig)
    graph_damping: float = 0.85
    graph_epsilon: float = 1e-8
    graph_max_iters: int = 100
    synonym_threshold: float = 0.8
    match_top_m: int = 5
    match_floor: float = 0.5
    top_k: int = 3
    backend: str = "mock"  # mock | http
    mock_seed: int = 0
    max_inflight: int = 8
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    roles: Dict[ModelRole, RoleConfig] = field(default_factory=dict)
    per_topic_count: int = 10
    few_shot_k: int = 3
    rng_seed: Optional[int] = None
    relevancy_n: int = 3
    thresholds: FilterThresholds = field(default_factory=FilterThresholds)
    histogram_bins: int = 20
    ir_trials_per_item: int = 1

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid config: {exc}")
        return cls.from_dict(raw, base_dir=path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Optional[Path] = None) -> "PipelineConfig":
        def resolve(p: str) -> str:
            if p and base_dir is not None and not Path(p).is_absolute():
                return str(base_dir / p)
            return p

        cfg = cls()
        corpus_section = raw.get("corpus", {})
        cfg.corpus_path = resolve(corpus_section.get("path", ""))
        cfg.corpus_format = corpus_section.get("format", "jsonl")
        cfg.seeds_path = resolve(raw.get("seeds_path", ""))
        cfg.topics_path = resolve(raw.get("topics_path", ""))
        cfg.out_dir = resolve(raw.get("out_dir", "out"))

        ch = raw.get("chunking", {})
        cfg.chunking = corpus.ChunkingConfig(
            strategy=corpus.ChunkStrategy(ch.get("strategy", "none")),
            uniform_size=ch.get("uniform_size", 256),
            uniform_overlap=ch.get("uniform_overlap", 32),
            semantic_breakpoint=ch.get("semantic_breakpoint", 0.35),
        )
        g = raw.get("graph", {})
        cfg.graph_damping = g.get("damping", 0.85)
        cfg.graph_epsilon = g.get("epsilon", 1e-8)
        cfg.graph_max_iters = g.get("max_iters", 100)
        cfg.synonym_threshold = g.get("synonym_threshold", 0.8)
        cfg.match_top_m = g.get("match_top_m", 5)
        cfg.match_floor = g.get("match_floor", 0.5)
        cfg.top_k = g.get("top_k", 3)

        gw = raw.get("gateway", {})
        cfg.backend = gw.get("backend", "mock")
        cfg.mock_seed = gw.get("mock_seed", 0)
        cfg.max_inflight = gw.get("max_inflight", 8)
        retry = gw.get("retry", {})
        cfg.retry = RetryPolicy(
            max_attempts=retry.get("max_attempts", 3),
            initial_delay=retry.get("initial_delay", 0.5),
            multiplier=retry.get("multiplier", 2.0),
        )
        for name, rc in (gw.get("roles") or {}).items():
            cfg.roles[ModelRole(name)] = RoleConfig(
                endpoint_url=rc.get("endpoint_url", ""),
                model_name=rc.get("model_name", ""),
                api_key_env=rc.get("api_key_env", ""),
                temperature=rc.get("temperature"),
                max_tokens=rc.get("max_tokens", 2048),
            )

        gen = raw.get("generation", {})
        cfg.per_topic_count = gen.get("per_topic_count", 10)
        cfg.few_shot_k = gen.get("few_shot_k", 3)
        cfg.rng_seed = gen.get("rng_seed", raw.get("rng_seed"))
        cfg.relevancy_n = gen.get("relevancy_n", 3)

        th = raw.get("thresholds", {})
        cfg.thresholds = FilterThresholds(
            groundedness_min_exclusive=th.get("groundedness_min_exclusive", 0.75),
            aspect_required=th.get("aspect_required", 1),
            specificity_min_exclusive=th.get("specificity_min_exclusive", 0.75),
            relevancy_min_exclusive=th.get("relevancy_min_exclusive", 0.5),
        )
        an = raw.get("analysis", {})
        cfg.histogram_bins = an.get("bins", 20)
        cfg.ir_trials_per_item = an.get("ir_trials_per_item", 1)
        return cfg

    def validate(self) -> None:
        if self.rng_seed is None:
            raise ConfigError("rng_seed is mandatory (no wall-clock seeding)")
        for label, p in [
            ("corpus", self.corpus_path),
            ("seeds", self.seeds_path),
            ("topics", self.topics_path),
        ]:
            if not p:
                raise ConfigError(f"{label} path not configured")
            if not Path(p).exists():
                raise ConfigError(f"{label} path does not exist: {p}")
        self.chunking.validate()
        if self.backend not in ("mock", "http"):
            raise ConfigError(f"unknown gateway backend: {self.backend}")
        if self.backend == "http" and not self.roles:
            raise ConfigError("http backend requires role endpoint configuration")

    def semantic_dict(self) -> dict:
        """Every field that affects outputs; out_dir deliberately excluded."""
        return {
            "corpus_path": self.corpus_path,
            "corpus_format": self.corpus_format,
            "seeds_path": self.seeds_path,
            "topics_path": self.topics_path,
            "chunking": {
                "strategy": self.chunking.strategy.value,
                "uniform_size": self.chunking.uniform_size,
                "uniform_overlap": self.chunking.uniform_overlap,
                "semantic_breakpoint": self.chunking.semantic_breakpoint,
            },
            "graph": {
                "damping": self.graph_damping,
                "epsilon": self.graph_epsilon,
                "max_iters": self.graph_max_iters,
                "synonym_threshold": self.synonym_threshold,
                "match_top_m": self.match_top_m,
                "match_floor": self.match_floor,
                "top_k": self.top_k,
            },
            "gateway": {
                "backend": self.backend,
                "mock_seed": self.mock_seed,
                "roles": {
                    role.value: {
                        "endpoint_url": rc.endpoint_url,
                        "model_name": rc.model_name,
                        "temperature": rc.temperature,
                        "max_tokens": rc.max_tokens,
                    }
                    for role, rc in sorted(self.roles.items())
                },
            },
            "generation": {
                "per_topic_count": self.per_topic_count,
                "few_shot_k": self.few_shot_k,
                "rng_seed": self.rng_seed,
                "relevancy_n": self.relevancy_n,
            },
            "thresholds": {
                "groundedness_min_exclusive": self.thresholds.groundedness_min_exclusive,
                "aspect_required": self.thresholds.aspect_required,
                "specificity_min_exclusive": self.thresholds.specificity_min_exclusive,
                "relevancy_min_exclusive": self.thresholds.relevancy_min_exclusive,
            },
            "analysis": {
                "bins": self.histogram_bins,
                "ir_trials_per_item": self.ir_trials_per_item,
            },
        }

    def config_hash(self) -> str:
        canon = json.dumps(self.semantic_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def build_gateway(self) -> Gateway:
        if self.backend == "mock":
            backend = MockBackend(chat_script=demo_chat_script(), seed=self.mock_seed)
            sleep = lambda _t: None  # noqa: E731
        else:
            backend = HttpBackend()
            sleep = time.sleep
        roles = {r: RoleConfig() for r in ModelRole}
        roles.update(self.roles)
        return Gateway(
            backend=backend,
            roles=roles,
            retry=self.retry,
            max_inflight=self.max_inflight,
            sleep=sleep,
        )


class RunManifest:
    def __init__(self, run_id: str, config_hash: str):
        self.data = {
            "run_id": run_id,
            "config_hash": config_hash,
            "stages": {},
        }

    def record_stage(self, name: str, outputs: Dict[str, str], counts: Dict[str, int],
                     seconds: float, base: Optional[Path] = None) -> None:
        # paths are stored relative to the run directory so that two runs of
        # the same config differ only in the timing fields
        def rel(p: str) -> str:
            path = Path(p)
            if base is not None and path.is_absolute():
                try:
                    return path.relative_to(base).as_posix()
                except ValueError:
                    return str(path)
            return str(path)

        self.data["stages"][name] = {
            "outputs": {rel(p): _digest_file(p) for p in outputs.values()},
            "counts": counts,
            "seconds": round(seconds, 3),
        }

    def write(self, path: Path) -> None:
        path.write_text(
            json.dumps(self.data, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        data = json.loads(path.read_text(encoding="utf-8"))
        m = cls(data["run_id"], data["config_hash"])
        m.data = data
        return m


def _digest_file(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


class Pipeline:
    """Executes pipeline stages against one output directory."""

    def __init__(self, config: PipelineConfig, gateway: Optional[Gateway] = None):
        config.validate()
        self.cfg = config
        self.gateway = gateway or config.build_gateway()
        self.out = Path(config.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "reports").mkdir(exist_ok=True)

    # artifact paths
    @property
    def chunks_path(self) -> Path:
        return self.out / "chunks.jsonl"

    @property
    def graph_path(self) -> Path:
        return self.out / "graph.json"

    @property
    def candidates_path(self) -> Path:
        return self.out / "candidates.jsonl"

    @property
    def scored_path(self) -> Path:
        return self.out / "scored.jsonl"

    @property
    def retained_path(self) -> Path:
        return self.out / "retained.jsonl"

    @property
    def manifest_path(self) -> Path:
        return self.out / "manifest.json"

    def run(self, stages: Optional[Sequence[str]] = None, resume: bool = False) -> RunManifest:
        selected = list(stages) if stages else list(STAGES)
        for s in selected:
            if s not in STAGES:
                raise ConfigError(f"unknown stage: {s}")
        config_hash = self.cfg.config_hash()
        manifest = RunManifest(run_id=f"run-{config_hash}", config_hash=config_hash)
        completed: set = set()
        if resume and self.manifest_path.exists():
            prior = RunManifest.load(self.manifest_path)
            if prior.data.get("config_hash") == config_hash:
                manifest.data = prior.data
                completed = {
                    name
                    for name, info in prior.data["stages"].items()
                    if all((self.out / p).exists() for p in info["outputs"])
                }
        for name in selected:
            if name in completed:
                logger.info("stage %s already complete; skipping", name)
                continue
            start = time.monotonic()
            try:
                outputs, counts = self._run_stage(name)
            except (ConfigError, EmptyOutputError):
                raise
            except Exception as exc:
                manifest.write(self.manifest_path)
                raise StageError(name, str(exc)) from exc
            manifest.record_stage(
                name, outputs, counts, time.monotonic() - start, base=self.out
            )
            manifest.write(self.manifest_path)
        return manifest

    def _run_stage(self, name: str):
        return {
            "ingest": self.stage_ingest,
            "build-graph": self.stage_build_graph,
            "generate": self.stage_generate,
            "evaluate": self.stage_evaluate,
            "filter": self.stage_filter,
            "analyze": self.stage_analyze,
        }[name]()

    def stage_ingest(self):
        result = corpus.load_corpus(self.cfg.corpus_path, self.cfg.corpus_format)
        chunks: List[corpus.Chunk] = []
        for doc in result.documents:
            chunks.extend(
                corpus.chunk_document(
                    doc, self.cfg.chunking, embedder=self.gateway.embed_texts
                )
            )
        corpus.write_chunks(chunks, self.chunks_path)
        return (
            {"chunks": str(self.chunks_path)},
            {
                "documents": len(result.documents),
                "skipped_records": len(result.skipped),
                "chunks": len(chunks),
            },
        )

    def stage_build_graph(self):
        chunks = corpus.read_chunks(self.chunks_path)
        triples: List[kg.Triple] = []
        dropped = 0
        unindexed = 0
        extractor = lambda prompt: self.gateway.chat_text(ModelRole.EXTRACTOR, prompt)  # noqa: E731
        for chunk in chunks:
            try:
                extraction = kg.extract_triples(chunk, extractor)
            except Exception as exc:
                unindexed += 1
                logger.warning("chunk %s left unindexed: %s", chunk.chunk_id, exc)
                continue
            triples.extend(extraction.triples)
            dropped += extraction.dropped
        built = kg.build_graph(
            chunks, triples, self.gateway.embed_texts, self.cfg.synonym_threshold
        )
        kg.save_graph(built, self.graph_path)
        return (
            {"graph": str(self.graph_path)},
            {
                "chunks": len(chunks),
                "triples": len(triples),
                "dropped_triple_lines": dropped,
                "unindexed_chunks": unindexed,
            },
        )

    def _retrieval_config(self) -> kg.RetrievalConfig:
        return kg.RetrievalConfig(
            damping=self.cfg.graph_damping,
            epsilon=self.cfg.graph_epsilon,
            max_iters=self.cfg.graph_max_iters,
            match_top_m=self.cfg.match_top_m,
            match_floor=self.cfg.match_floor,
        )

    def stage_generate(self):
        built = kg.load_graph(self.graph_path)
        seeds = generation.read_seeds(self.cfg.seeds_path)
        topics = read_topics(self.cfg.topics_path, self.cfg.per_topic_count)
        rcfg = self._retrieval_config()

        def retriever(key: str, top_k: int):
            return kg.retrieve(
                built, kg.RetrievalQuery(key=key, top_k=top_k),
                self.gateway.embed_texts, rcfg,
            ).ranked

        pairs: List[QAPair] = []
        flagged = 0
        for topic in topics:
            seed_int = _derive_seed(self.cfg.rng_seed, "fewshot", topic.topic)
            few_shot = generation.sample_few_shot(
                seeds, min(self.cfg.few_shot_k, len(seeds)), seed_int
            )
            indices = [seeds.index(s) for s in few_shot]
            context_ids = retriever(topic.topic, self.cfg.top_k)
            context_texts = [built.passage_texts[cid] for cid, _ in context_ids]
            if not context_texts:
                flagged += 1
                logger.warning("topic %r has no retrievable context; skipped", topic.topic)
                continue
            draft = generation.draft_qa(
                topic,
                few_shot,
                context_texts,
                chat=lambda p: self.gateway.chat_text(ModelRole.BASE_GENERATOR, p),
                few_shot_indices=indices,
                model_name=self.gateway.roles[ModelRole.BASE_GENERATOR].model_name,
            )
            if draft.flagged:
                flagged += 1
            for pair in draft.pairs:
                generation.refine_answer(
                    pair,
                    retriever,
                    built.passage_texts,
                    chat=lambda p: self.gateway.chat_text(ModelRole.REFINER, p),
                    model_name=self.gateway.roles[ModelRole.REFINER].model_name,
                )
                pairs.append(pair)
        generation.write_pairs(pairs, self.candidates_path)
        return (
            {"candidates": str(self.candidates_path)},
            {
                "topics": len(topics),
                "flagged_topics": flagged,
                "pairs": len(pairs),
                "refined": sum(1 for p in pairs if p.stage is Stage.REFINED),
            },
        )

    def stage_evaluate(self):
        built = kg.load_graph(self.graph_path)
        pairs = generation.read_pairs(self.candidates_path)
        judge_chat = lambda p: self.gateway.chat_text(ModelRole.JUDGE, p)  # noqa: E731
        records = []
        scored = 0
        for pair in pairs:
            rec = pair.to_record()
            if pair.stage is not Stage.REFINED:
                rec["scores"] = None
                rec["decision"] = "rejected"
                records.append(rec)
                continue
            chunk_texts = [built.passage_texts[cid] for cid in pair.grounding]
            metric = evaluation.score_pair(
                pair,
                chunk_texts,
                chat=judge_chat,
                embed=self.gateway.embed_texts,
                relevancy_n=self.cfg.relevancy_n,
            )
            if metric is None:
                pair.advance(Stage.REJECTED, reasons=["unscorable"])
                rec = pair.to_record()
                rec["scores"] = None
                rec["decision"] = "rejected"
                records.append(rec)
                continue
            pair.advance(Stage.SCORED)
            decision = evaluation.apply_filter(metric, self.cfg.thresholds)
            rec = pair.to_record()
            rec["scores"] = metric.to_record()
            rec["decision"] = "retained" if decision.retained else "rejected"
            rec["reject_reasons"] = decision.reasons
            records.append(rec)
            scored += 1
        _write_jsonl(records, self.scored_path)
        return (
            {"scored": str(self.scored_path)},
            {"pairs": len(records), "scored": scored},
        )

    def stage_filter(self):
        records = _read_jsonl(self.scored_path)
        retained = []
        for rec in records:
            if rec.get("decision") == "retained":
                rec = dict(rec)
                rec["stage"] = Stage.RETAINED.value
                retained.append(rec)
        retained.sort(key=lambda r: (r["topic"], r["provenance"].get("ordinal", 0)))
        _write_jsonl(retained, self.retained_path)
        return (
            {"retained": str(self.retained_path)},
            {"scored": len(records), "retained": len(retained)},
        )

    def stage_analyze(self):
        retained = _read_jsonl(self.retained_path)
        seeds = generation.read_seeds(self.cfg.seeds_path)
        reports_dir = self.out / "reports"
        outputs = {}
        counts = {"retained": len(retained)}

        ratio = analysis.generation_ratio_from_stores(
            self.candidates_path, self.retained_path
        )
        ratio_path = reports_dir / "ratio.json"
        analysis.write_report(ratio.to_record(), ratio_path)
        outputs["ratio"] = str(ratio_path)

        questions = [r["question"] for r in retained]
        if len(questions) >= 2:
            div = analysis.pairwise_diversity(
                questions, self.gateway.embed_texts, bins=self.cfg.histogram_bins
            )
            div_path = reports_dir / "diversity_synthetic.json"
            analysis.write_report(div.to_record(), div_path)
            outputs["diversity_synthetic"] = str(div_path)

            seed_div = analysis.pairwise_diversity(
                [s.question for s in seeds],
                self.gateway.embed_texts,
                bins=self.cfg.histogram_bins,
            )
            seed_path = reports_dir / "diversity_seeds.json"
            analysis.write_report(seed_div.to_record(), seed_path)
            outputs["diversity_seeds"] = str(seed_path)

            comp = analysis.compare_datasets(div, seed_div)
            comp_path = reports_dir / "comparison.json"
            analysis.write_report(comp.to_record(), comp_path)
            outputs["comparison"] = str(comp_path)
        else:
            logger.warning("fewer than 2 retained questions; diversity skipped")

        if retained and len(seeds) >= 3:
            pairs = [QAPair.from_record(r) for r in retained]
            ir = analysis.indistinguishability_rate(
                pairs,
                seeds,
                chat=lambda p: self.gateway.chat_text(ModelRole.DISCRIMINATOR, p),
                rng_seed=self.cfg.rng_seed,
                trials_per_item=self.cfg.ir_trials_per_item,
            )
            ir_path = reports_dir / "ir.json"
            analysis.write_report(ir.to_record(), ir_path)
            outputs["ir"] = str(ir_path)
            counts["ir_trials"] = ir.trials
        return outputs, counts


def export_rft(retained_path: str | Path, chunks_path: str | Path,
               out_path: str | Path) -> int:
    """Write the fine-tuning-ready JSONL; errors (writing nothing) on empty input."""
    records = _read_jsonl(retained_path)
    if not records:
        raise EmptyOutputError(f"retained store is empty: {retained_path}")
    chunk_texts = {c.chunk_id: c.text for c in corpus.read_chunks(chunks_path)}
    rows = []
    for rec in records:
        rows.append(
            {
                "schema_version": 1,
                "prompt": rec["question"],
                "response": rec["refined_answer"],
                "contexts": [chunk_texts[cid] for cid in rec["grounding"]],
                "scores": rec.get("scores"),
                "provenance": rec.get("provenance", {}),
            }
        )
    _write_jsonl(rows, out_path)
    return len(rows)


def read_topics(path: str | Path, default_count: int) -> List[TopicSpec]:
    """Topics file: one topic per line, or JSONL {topic, per_topic_count}."""
    topics = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("{"):
                rec = json.loads(line)
                topics.append(
                    TopicSpec(
                        topic=rec["topic"],
                        per_topic_count=rec.get("per_topic_count", default_count),
                    )
                )
            else:
                topics.append(TopicSpec(topic=line, per_topic_count=default_count))
    return topics


def _derive_seed(rng_seed: int, *parts: str) -> int:
    joined = ":".join([str(rng_seed), *parts])
    return int(hashlib.sha256(joined.encode("utf-8")).hexdigest()[:8], 16)


def _write_jsonl(records: Sequence[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def _read_jsonl(path: str | Path) -> List[dict]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out
