"""Command-line interface.

Subcommands mirror the pipeline stages (ingest, build-graph, generate,
evaluate, filter, analyze), plus `run` for the whole flow and `export-rft`
for the final fine-tuning dataset.

Exit codes: 0 success, 2 config error, 3 stage failure, 4 empty-output error.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from .pipeline import (
    ConfigError,
    EmptyOutputError,
    Pipeline,
    PipelineConfig,
    StageError,
    export_rft,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_EMPTY = 4


@click.group()
@click.option("--config", "config_path", type=click.Path(), required=True,
              help="Pipeline config file (YAML or JSON).")
@click.option("--out-dir", type=click.Path(), default=None,
              help="Override the configured output directory.")
@click.option("--rng-seed", type=int, default=None,
              help="Override the configured RNG seed.")
@click.option("--resume", is_flag=True, default=False,
              help="Skip stages already recorded complete in the manifest.")
@click.option("-v", "--verbose", is_flag=True, default=False)
@click.pass_context
def main(ctx, config_path, out_dir, rng_seed, resume, verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = PipelineConfig.from_file(config_path)
        if out_dir is not None:
            cfg.out_dir = out_dir
        if rng_seed is not None:
            cfg.rng_seed = rng_seed
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        ctx.exit(EXIT_CONFIG)
    ctx.obj = {"config": cfg, "resume": resume}


def _run_stages(ctx, stages):
    cfg = ctx.obj["config"]
    try:
        pipeline = Pipeline(cfg)
        manifest = pipeline.run(stages=stages, resume=ctx.obj["resume"])
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        ctx.exit(EXIT_CONFIG)
    except EmptyOutputError as exc:
        click.echo(f"empty output: {exc}", err=True)
        ctx.exit(EXIT_EMPTY)
    except StageError as exc:
        click.echo(f"stage failure: {exc}", err=True)
        ctx.exit(EXIT_STAGE)
    for name, info in manifest.data["stages"].items():
        click.echo(f"{name}: {info['counts']}")
    ctx.exit(EXIT_OK)


@main.command()
@click.pass_context
def run(ctx):
    """Run the full pipeline: ingest through analyze."""
    _run_stages(ctx, None)


@main.command()
@click.pass_context
def ingest(ctx):
    """Load and chunk the corpus."""
    _run_stages(ctx, ["ingest"])


@main.command("build-graph")
@click.pass_context
def build_graph(ctx):
    """Extract triples and build the retrieval index."""
    _run_stages(ctx, ["build-graph"])


@main.command()
@click.pass_context
def generate(ctx):
    """Draft and refine candidate QA pairs."""
    _run_stages(ctx, ["generate"])


@main.command()
@click.pass_context
def evaluate(ctx):
    """Score refined pairs with the judge metrics."""
    _run_stages(ctx, ["evaluate"])


@main.command("filter")
@click.pass_context
def filter_cmd(ctx):
    """Apply the quality thresholds to produce the retained set."""
    _run_stages(ctx, ["filter"])


@main.command()
@click.pass_context
def analyze(ctx):
    """Emit diversity, indistinguishability, and ratio reports."""
    _run_stages(ctx, ["analyze"])


@main.command("export-rft")
@click.option("--out", "out_path", type=click.Path(), required=True,
              help="Destination JSONL for the fine-tuning dataset.")
@click.pass_context
def export_rft_cmd(ctx, out_path):
    """Export the retained pairs as fine-tuning-ready JSONL."""
    cfg = ctx.obj["config"]
    out = Path(cfg.out_dir)
    try:
        count = export_rft(out / "retained.jsonl", out / "chunks.jsonl", out_path)
    except FileNotFoundError as exc:
        click.echo(f"stage failure: missing input: {exc}", err=True)
        ctx.exit(EXIT_STAGE)
    except EmptyOutputError as exc:
        click.echo(f"empty output: {exc}", err=True)
        ctx.exit(EXIT_EMPTY)
    click.echo(f"exported {count} pairs to {out_path}")
    ctx.exit(EXIT_OK)


if __name__ == "__main__":
    main()
