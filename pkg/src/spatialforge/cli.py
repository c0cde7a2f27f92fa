"""The `forge` command line: every pipeline stage plus the full run."""

from __future__ import annotations

import json
from pathlib import Path

import click

from . import corpus as corpus_mod
from .corpus import AutoProber, SourceKind, ingest_records, probe_records, read_corpus, write_records
from .evaluation import build_eval_report, load_items, score_items
from .generation import generate_for_corpus, read_pairs, write_pairs
from .pipeline import (
    PipelineConfig,
    build_gateway,
    emit_report,
    export_training_format,
    run_pipeline,
)
from .prefilter import filter_corpus
from .quality import QualityConfig, run_quality_pipeline
from .review import SamplePlan, SessionStore, draw_sample
from .taxonomy import RelationTaxonomy, head_coverage, profile_corpus

_SOURCE_ALIASES = {"docci": SourceKind.DOCCI, "ln": SourceKind.LOCALIZED_NARRATIVES,
                   "pixmo": SourceKind.PIXMO_CAP, "custom": SourceKind.CUSTOM}


def _write_json_file(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, ensure_ascii=False, indent=2)
        fh.write("\n")


def _config_from_ctx(ctx: click.Context) -> PipelineConfig:
    opts = ctx.obj or {}
    overrides = {
        "checkpoint_dir": opts.get("checkpoint_dir"),
        "concurrency": opts.get("concurrency"),
        "seed": opts.get("seed"),
    }
    if opts.get("config"):
        return PipelineConfig.from_file(opts["config"], **overrides)
    return PipelineConfig.from_json_obj({}, **overrides)


def _gateway_from_ctx(ctx: click.Context, config: PipelineConfig):
    return build_gateway(config, mock_transcript=(ctx.obj or {}).get("mock_gateway"))


@click.group()
@click.option("--config", type=click.Path(exists=True), default=None, help="Pipeline config JSON.")
@click.option("--checkpoint-dir", default=None, help="Checkpoint/output directory.")
@click.option("--concurrency", type=int, default=None, help="Max in-flight service requests.")
@click.option("--seed", type=int, default=None, help="Seed for any sampling decisions.")
@click.option("--mock-gateway", type=click.Path(exists=True), default=None,
              help="Transcript JSONL replacing live services.")
@click.pass_context
def main(ctx, config, checkpoint_dir, concurrency, seed, mock_gateway):
    """Synthetic spatial-reasoning VQA dataset tooling."""
    ctx.obj = {
        "config": config,
        "checkpoint_dir": checkpoint_dir,
        "concurrency": concurrency,
        "seed": seed,
        "mock_gateway": mock_gateway,
    }


@main.command()
@click.option("--source", type=click.Choice(sorted(_SOURCE_ALIASES)), required=True)
@click.option("--in", "input_path", type=click.Path(exists=True), required=True)
@click.option("--out", "output_path", required=True)
@click.option("--probe-images", is_flag=True, default=False)
@click.option("--image-root", type=click.Path(), default=None,
              help="Base directory for relative image paths when probing.")
def ingest(source, input_path, output_path, probe_images, image_root):
    """Normalize a source JSONL file into the canonical corpus format."""
    kind = _SOURCE_ALIASES[source]
    with open(input_path, "r", encoding="utf-8") as fh:
        result = ingest_records(fh, kind, corpus_path=output_path)
    records = result.records
    if probe_images:
        probed = probe_records(records, AutoProber(root=image_root))
        records = [rec for rec, _ in probed]
        unavailable = sum(1 for rec in records if not rec.has_flag(corpus_mod.IMAGE_OK))
        click.echo(f"probed images: {len(records) - unavailable} available, {unavailable} missing")
    manifest = write_records(records, output_path, corpus_path=output_path)
    _write_json_file(output_path + ".manifest.json", manifest.to_dict())
    click.echo(
        f"ingested {manifest.record_count} records "
        f"({result.rejected_count} rejected: {result.rejections or 'none'})"
    )


@main.command()
@click.option("--corpus", "corpus_path", type=click.Path(exists=True), required=True)
@click.option("--taxonomy", "taxonomy_path", type=click.Path(exists=True), default=None)
@click.option("--out", "output_path", required=True)
@click.option("--head-fraction", type=float, default=None,
              help="Also report coverage of the top fraction of relations.")
def profile(corpus_path, taxonomy_path, output_path, head_fraction):
    """Relation-frequency breakdown of a corpus."""
    taxonomy = RelationTaxonomy.load(taxonomy_path) if taxonomy_path else RelationTaxonomy.default()
    records = read_corpus(corpus_path)
    prof = profile_corpus(records, taxonomy)
    out = prof.to_dict()
    if head_fraction is not None:
        out["head_coverage"] = {str(head_fraction): round(head_coverage(prof, head_fraction), 2)}
    _write_json_file(output_path, out)
    click.echo(
        f"profiled {prof.total_records} records: {prof.total_hits} hits, "
        f"{prof.spatial_record_count} records with spatial language"
    )


@main.command()
@click.option("--corpus", "corpus_path", type=click.Path(exists=True), required=True)
@click.option("--out", "output_path", required=True)
@click.option("--report", "report_path", required=True)
@click.option("--needs-review", "needs_review_path", default=None)
@click.pass_context
def prefilter(ctx, corpus_path, output_path, report_path, needs_review_path):
    """Keep only records whose descriptions contain spatial language."""
    config = _config_from_ctx(ctx)
    gateway = _gateway_from_ctx(ctx, config)
    records = read_corpus(corpus_path)
    result = filter_corpus(records, gateway, max_in_flight=config.concurrency)
    write_records(result.kept, output_path)
    _write_json_file(report_path, result.report.to_dict())
    if needs_review_path:
        with open(needs_review_path, "w", encoding="utf-8", newline="\n") as fh:
            for record, raw in result.needs_review:
                fh.write(json.dumps({"record_id": record.id, "raw_response": raw},
                                    ensure_ascii=False))
                fh.write("\n")
    click.echo(f"kept {len(result.kept)}/{len(records)} records")


@main.command()
@click.option("--corpus", "corpus_path", type=click.Path(exists=True), required=True)
@click.option("--out", "output_path", required=True)
@click.option("--report", "report_path", required=True)
@click.pass_context
def generate(ctx, corpus_path, output_path, report_path):
    """Generate QA pairs for every record in a filtered corpus."""
    config = _config_from_ctx(ctx)
    gateway = _gateway_from_ctx(ctx, config)
    records = read_corpus(corpus_path)
    result = generate_for_corpus(records, gateway, max_in_flight=config.concurrency)
    write_pairs(result.pairs, output_path)
    _write_json_file(report_path, {**result.report.to_dict(), "stats": result.stats.to_dict()})
    click.echo(
        f"generated {result.stats.pairs_generated} pairs from "
        f"{result.stats.records_processed} records "
        f"({result.stats.parse_failures} parse failures)"
    )


@main.command()
@click.option("--pairs", "pairs_path", type=click.Path(exists=True), required=True)
@click.option("--corpus", "corpus_path", type=click.Path(exists=True), required=True)
@click.option("--out", "output_path", required=True)
@click.option("--report", "report_path", required=True)
@click.option("--config", "quality_path", type=click.Path(exists=True), default=None,
              help="Quality-check thresholds JSON (defaults from the pipeline config).")
@click.option("--all-pairs", "all_pairs_path", default=None,
              help="Also write every pair with its verdicts.")
@click.option("--assume-images-ok", is_flag=True, default=False)
@click.pass_context
def qa(ctx, pairs_path, corpus_path, output_path, report_path, quality_path, all_pairs_path,
       assume_images_ok):
    """Run the quality checks over generated pairs."""
    config = _config_from_ctx(ctx)
    if quality_path:
        with open(quality_path, "r", encoding="utf-8") as fh:
            quality = QualityConfig.from_json_obj(json.load(fh))
    else:
        quality = config.quality
    gateway = _gateway_from_ctx(ctx, config)
    records = read_corpus(corpus_path)
    if assume_images_ok:
        records = [r.with_flag(corpus_mod.IMAGE_OK) for r in records]
    pairs = read_pairs(pairs_path)
    result = run_quality_pipeline(pairs, records, gateway, quality,
                                  max_in_flight=config.concurrency)
    write_pairs(result.accepted, output_path)
    if all_pairs_path:
        write_pairs(result.pairs, all_pairs_path)
    _write_json_file(report_path, [r.to_dict() for r in result.reports])
    click.echo(f"accepted {len(result.accepted)}/{len(pairs)} pairs")


@main.command()
@click.option("--pairs", "pairs_path", type=click.Path(exists=True), required=True)
@click.option("--corpus", "corpus_path", type=click.Path(exists=True), required=True)
@click.option("--n", "sample_n", default="auto", show_default=True,
              help='"auto" for the formula value, or an explicit integer.')
@click.option("--population", "population", type=int, default=None,
              help="Statistical population size override.")
@click.option("--seed", "seed", type=int, default=0)
@click.option("--store", "store_dir", default="sessions")
def sample(pairs_path, corpus_path, sample_n, population, seed, store_dir):
    """Draw a stratified review sample and persist it as a session."""
    pairs = read_pairs(pairs_path)
    records_by_id = {r.id: r for r in read_corpus(corpus_path)}
    population_size = population if population is not None else len(pairs)
    final_n = None
    if sample_n != "auto":
        final_n = int(sample_n)
        if population is None:
            population_size = min(len(pairs), final_n) if final_n else len(pairs)
            population_size = max(population_size, 1)
    try:
        plan = SamplePlan.build(population_size=population_size, final_n=final_n)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    by_stratum: dict[str, list[str]] = {}
    for pair in pairs:
        record = records_by_id.get(pair.record_id)
        if record is None:
            raise click.ClickException(f"pair {pair.pair_id} references unknown record")
        by_stratum.setdefault(record.source.value, []).append(pair.pair_id)
    try:
        draw = draw_sample(by_stratum, plan, seed)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    store = SessionStore(store_dir)
    session_id = store.create(plan, draw.pair_ids, seed, draw.warnings)
    for warning in draw.warnings:
        click.echo(f"warning: {warning}", err=True)
    click.echo(f"session {session_id}: {plan.final_n} pairs sampled (computed n={plan.computed_n})")


@main.command("review-serve")
@click.option("--pairs", "pairs_path", type=click.Path(exists=True), required=True)
@click.option("--corpus", "corpus_path", type=click.Path(exists=True), required=True)
@click.option("--port", type=int, default=8800)
@click.option("--host", default="127.0.0.1")
@click.option("--store", "store_dir", default="sessions")
@click.option("--ui-dir", type=click.Path(), default=None,
              help="Static directory with the browser app (optional).")
@click.option("--token", default=None, help="Shared token required on API calls.")
def review_serve(pairs_path, corpus_path, port, host, store_dir, ui_dir, token):
    """Serve the review API (and the UI, when built)."""
    import uvicorn

    from .review_server import create_app

    app = create_app(
        pairs=read_pairs(pairs_path),
        records=read_corpus(corpus_path),
        store=SessionStore(store_dir),
        ui_dir=Path(ui_dir) if ui_dir else None,
        token=token,
    )
    uvicorn.run(app, host=host, port=port, log_level="info")


@main.command("eval")
@click.option("--items", "items_path", type=click.Path(exists=True), required=True)
@click.option("--out", "output_path", required=True)
def eval_cmd(items_path, output_path):
    """Score model predictions with strict string matching."""
    items = load_items(items_path)
    scored = score_items(items)
    report = build_eval_report(items, scored)
    _write_json_file(output_path, report)
    click.echo(f"accuracy {report['accuracy']} over {report['items']} items")


@main.command()
@click.option("--pairs", "pairs_path", type=click.Path(exists=True), required=True)
@click.option("--corpus", "corpus_path", type=click.Path(exists=True), required=True)
@click.option("--out", "output_path", required=True)
@click.option("--grouped", is_flag=True, default=False,
              help="One line per record instead of one per pair.")
def export(pairs_path, corpus_path, output_path, grouped):
    """Export accepted pairs as fine-tuning chat samples."""
    pairs = read_pairs(pairs_path)
    records = read_corpus(corpus_path)
    with open(output_path, "w", encoding="utf-8", newline="\n") as fh:
        lines = export_training_format(pairs, records, fh, grouped=grouped)
    click.echo(f"wrote {lines} chat samples")


@main.command()
@click.option("--format", "fmt", type=click.Choice(["json", "markdown"]), default="markdown")
@click.option("--out", "output_path", default="-")
@click.pass_context
def report(ctx, fmt, output_path):
    """Render the run report from a checkpoint directory."""
    from .pipeline import RunReport
    from .reports import StageReport

    config = _config_from_ctx(ctx)
    report_path = Path(config.checkpoint_dir) / "report.json"
    if not report_path.exists():
        raise click.ClickException(f"no report at {report_path}; run `forge run` first")
    raw = json.loads(report_path.read_text(encoding="utf-8"))
    run_report = RunReport(
        rows=raw["rows"],
        totals=raw["totals"],
        stage_reports=[StageReport.from_dict(o) for o in raw["stages"]],
        gateway_calls=raw["gateway_calls"],
    )
    rendered = emit_report(run_report, fmt)
    if output_path == "-":
        click.echo(rendered, nl=False)
    else:
        Path(output_path).write_text(rendered, encoding="utf-8")


@main.command()
@click.option("--corpus", "corpus_path", type=click.Path(exists=True), required=True)
@click.option("--assume-images-ok", is_flag=True, default=False)
@click.pass_context
def run(ctx, corpus_path, assume_images_ok):
    """Full pipeline: prefilter, generate, quality, report."""
    config = _config_from_ctx(ctx)
    if assume_images_ok:
        from dataclasses import replace as _replace

        config = _replace(config, assume_images_ok=True)
    gateway = _gateway_from_ctx(ctx, config)
    from .pipeline import StaleCheckpoint

    try:
        result = run_pipeline(config, corpus_path, gateway)
    except StaleCheckpoint as exc:
        raise click.ClickException(
            f"{exc} (use a fresh --checkpoint-dir or restore the original inputs)"
        )
    totals = result.report.totals
    click.echo(
        f"run complete: {totals['size']} records -> {totals['filtered']} filtered -> "
        f"{totals['generated_pairs']} pairs -> {totals['accepted_pairs']} accepted"
    )
    click.echo(f"accepted dataset: {result.accepted_path}")


if __name__ == "__main__":
    main()
