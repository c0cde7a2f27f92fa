"""End-to-end orchestration: prefilter, generate, quality, with resume.

Every stage writes its output and report to the checkpoint directory
before the next stage starts, plus a progress log flushed per record
batch, so an interrupted run restarts from the last completed batch and
produces byte-identical artifacts. Volatile timing goes to a separate
timings file so the canonical report bytes are a pure function of inputs.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

from . import corpus as corpus_mod
from .corpus import IMAGE_OK, CaptionRecord, SourceKind, content_digest, read_corpus, write_records
from .gateway import CountingGateway, Endpoint, Gateway, HttpGateway, TranscriptGateway
from .generation import (
    GENERATION_DIGEST,
    GenerationOutcome,
    QAPair,
    generate_pairs,
    generation_stats,
    read_pairs,
    write_pairs,
)
from .prefilter import SPATIAL_CHECK_DIGEST, filter_corpus
from .quality import QualityConfig, build_stage_reports, run_quality_pipeline
from .reports import StageReport

DEFAULT_CONCURRENCY = 16
DEFAULT_BATCH_SIZE = 1000


class PipelineError(Exception):
    pass


class StaleCheckpoint(PipelineError):
    code = "stale_checkpoint"


@dataclass
class PipelineConfig:
    chat: Optional[Endpoint] = None
    embed: Optional[Endpoint] = None
    similarity: Optional[Endpoint] = None
    concurrency: int = DEFAULT_CONCURRENCY
    quality: QualityConfig = field(default_factory=QualityConfig)
    taxonomy_path: Optional[str] = None
    checkpoint_dir: str = "checkpoints"
    seed: int = 0
    batch_size: int = DEFAULT_BATCH_SIZE
    assume_images_ok: bool = False

    def __post_init__(self):
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.taxonomy_path and not Path(self.taxonomy_path).exists():
            raise ValueError(f"taxonomy_path does not exist: {self.taxonomy_path}")

    @staticmethod
    def _endpoint_from(obj: Optional[dict], env_prefix: str) -> Optional[Endpoint]:
        if obj is None:
            url = os.environ.get(f"{env_prefix}_URL")
            if not url:
                return None
            return Endpoint(url=url, api_key=os.environ.get(f"{env_prefix}_KEY", ""))
        return Endpoint(**obj)

    @classmethod
    def from_file(cls, path: Union[str, Path], **overrides) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls.from_json_obj(raw, **overrides)

    @classmethod
    def from_json_obj(cls, raw: dict, **overrides) -> "PipelineConfig":
        endpoints = raw.get("endpoints", {})
        kwargs: dict = {
            "chat": cls._endpoint_from(endpoints.get("chat"), "FORGE_CHAT"),
            "embed": cls._endpoint_from(endpoints.get("embed"), "FORGE_EMBED"),
            "similarity": cls._endpoint_from(endpoints.get("similarity"), "FORGE_SIMILARITY"),
        }
        for key in ("concurrency", "taxonomy_path", "checkpoint_dir", "seed", "batch_size",
                    "assume_images_ok"):
            if key in raw:
                kwargs[key] = raw[key]
        if "quality" in raw:
            kwargs["quality"] = QualityConfig.from_json_obj(raw["quality"])
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)

    def result_digest(self) -> str:
        """Digest of every setting that can change pipeline outputs."""
        canon = json.dumps(
            {
                "quality": self.quality.to_dict(),
                "seed": self.seed,
                "assume_images_ok": self.assume_images_ok,
                "prompts": {"check": SPATIAL_CHECK_DIGEST, "generate": GENERATION_DIGEST},
            },
            sort_keys=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def build_gateway(config: PipelineConfig, mock_transcript: Optional[str] = None) -> Gateway:
    if mock_transcript:
        return TranscriptGateway.load(mock_transcript)
    return HttpGateway(chat=config.chat, embed=config.embed, similarity=config.similarity)


# --- checkpoint plumbing ------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _read_json(path: Path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _read_batches(path: Path) -> list[dict]:
    """Complete batch lines; a torn trailing line from a crash is dropped."""
    if not path.exists():
        return []
    batches = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            if not raw.endswith("\n"):
                break
            line = raw.strip()
            if not line:
                continue
            try:
                batches.append(json.loads(line))
            except json.JSONDecodeError:
                break
    return batches


class _StageRunner:
    """Batched, resumable execution of one stage over an ordered unit list.

    A batch is the unit of atomicity: one progress line holds the batch's
    per-unit results plus the service calls it cost, so an interrupted and
    resumed stage reports the same totals as an uninterrupted one.
    """

    def __init__(self, stage_dir: Path, input_digest: str, batch_size: int):
        self.dir = stage_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.input_digest = input_digest
        self.batch_size = batch_size
        meta_path = self.dir / "meta.json"
        if meta_path.exists():
            meta = _read_json(meta_path)
            if meta.get("input_digest") != input_digest:
                raise StaleCheckpoint(
                    f"stage {self.dir.name}: checkpoint was built from different input"
                )
        else:
            _write_json(meta_path, {"input_digest": input_digest})

    @property
    def done_path(self) -> Path:
        return self.dir / "done.json"

    def is_done(self) -> bool:
        return self.done_path.exists()

    def mark_done(self, summary: dict) -> None:
        _write_json(self.done_path, {"input_digest": self.input_digest, **summary})

    def saved_calls(self) -> dict[str, int]:
        if self.is_done():
            return dict(_read_json(self.done_path).get("gateway_calls", {}))
        return {}

    def process(
        self,
        units: Sequence,
        process_batch: Callable[[Sequence], list[dict]],
        gateway_counter: CountingGateway,
    ) -> tuple[list[dict], dict[str, int]]:
        """Run unprocessed units; returns (per-unit results, total call tally)."""
        progress_path = self.dir / "progress.jsonl"
        batches = _read_batches(progress_path)
        results = [unit for batch in batches for unit in batch["units"]]
        calls = {"chat": 0, "embed": 0, "similarity": 0}
        for batch in batches:
            for kind, count in batch.get("calls", {}).items():
                calls[kind] += count
        if len(results) > len(units):
            raise StaleCheckpoint(
                f"stage {self.dir.name}: progress has more entries than input units"
            )
        with open(progress_path, "a", encoding="utf-8", newline="\n") as fh:
            i = len(results)
            while i < len(units):
                chunk = units[i : i + self.batch_size]
                before = dict(gateway_counter.calls)
                encoded = process_batch(chunk)
                delta = {
                    kind: gateway_counter.calls[kind] - before[kind]
                    for kind in gateway_counter.calls
                }
                line = {"units": encoded, "calls": delta}
                fh.write(json.dumps(line, ensure_ascii=False, separators=(",", ":")))
                fh.write("\n")
                fh.flush()
                os.fsync(fh.fileno())
                results.extend(encoded)
                for kind, count in delta.items():
                    calls[kind] += count
                i += len(chunk)
        return results, calls


# --- stage implementations ----------------------------------------------------

@dataclass
class PrefilterStageResult:
    kept: list[CaptionRecord]
    report: StageReport
    needs_review_count: int
    calls: dict[str, int]


def _stage_prefilter(
    stage_dir: Path,
    records: Sequence[CaptionRecord],
    gateway: Gateway,
    config: PipelineConfig,
) -> PrefilterStageResult:
    input_digest = content_digest(records)
    runner = _StageRunner(stage_dir, input_digest, config.batch_size)
    records_by_id = {r.id: r for r in records}
    if runner.is_done():
        kept = read_corpus(stage_dir / "output.jsonl")
        report = StageReport.from_dict(_read_json(stage_dir / "report.json"))
        return PrefilterStageResult(
            kept=kept,
            report=report,
            needs_review_count=report.sidelined.get("needs_review", 0),
            calls=runner.saved_calls(),
        )

    counter = CountingGateway(gateway)

    def process_batch(chunk: Sequence[CaptionRecord]) -> list[dict]:
        result = filter_corpus(chunk, counter, max_in_flight=config.concurrency)
        outcome_by_id: dict[str, dict] = {}
        for record, raw in result.needs_review:
            outcome_by_id[record.id] = {"record_id": record.id, "outcome": "needs_review",
                                        "raw_response": raw}
        for verdict in result.verdicts:
            outcome_by_id[verdict.record_id] = {
                "record_id": verdict.record_id,
                "outcome": "spatial" if verdict.is_spatial else "not_spatial",
                "raw_response": verdict.raw_response,
            }
        return [outcome_by_id[r.id] for r in chunk]

    outcomes, calls = runner.process(list(records), process_batch, counter)
    kept = [
        records_by_id[o["record_id"]].with_flag(corpus_mod.SPATIAL_OK)
        for o in outcomes
        if o["outcome"] == "spatial"
    ]
    dropped = sum(1 for o in outcomes if o["outcome"] == "not_spatial")
    needs_review = [o for o in outcomes if o["outcome"] == "needs_review"]
    report = StageReport(
        stage="prefilter",
        input=len(records),
        kept=len(kept),
        dropped=dropped,
        reasons={"not_spatial": dropped} if dropped else {},
        sidelined={"needs_review": len(needs_review)} if needs_review else {},
    )
    report.validate()
    write_records(kept, stage_dir / "output.jsonl")
    with open(stage_dir / "needs_review.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for o in sorted(needs_review, key=lambda x: x["record_id"]):
            fh.write(json.dumps(o, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")
    _write_json(stage_dir / "report.json", report.to_dict())
    runner.mark_done({"kept": len(kept), "gateway_calls": calls})
    return PrefilterStageResult(
        kept=kept, report=report, needs_review_count=len(needs_review), calls=calls
    )


@dataclass
class GenerateStageResult:
    pairs: list[QAPair]
    report: StageReport
    calls: dict[str, int]


def _stage_generate(
    stage_dir: Path,
    records: Sequence[CaptionRecord],
    gateway: Gateway,
    config: PipelineConfig,
) -> GenerateStageResult:
    input_digest = content_digest(records)
    runner = _StageRunner(stage_dir, input_digest, config.batch_size)
    if runner.is_done():
        pairs = read_pairs(stage_dir / "output.jsonl")
        report = StageReport.from_dict(_read_json(stage_dir / "report.json"))
        return GenerateStageResult(pairs=pairs, report=report, calls=runner.saved_calls())

    counter = CountingGateway(gateway)

    def process_batch(chunk: Sequence[CaptionRecord]) -> list[dict]:
        outcomes = _fan_out(
            lambda r: generate_pairs(r, counter), chunk, config.concurrency
        )
        return [
            {
                "record_id": o.record_id,
                "pairs": [{"question": p.question, "answer": p.answer} for p in o.pairs],
                "parse_failed": o.parse_failed,
                "truncated_pairs": o.truncated_pairs,
            }
            for o in outcomes
        ]

    encoded, calls = runner.process(list(records), process_batch, counter)
    outcomes = [
        GenerationOutcome(
            record_id=e["record_id"],
            pairs=[
                QAPair.make(e["record_id"], i, rp["question"], rp["answer"])
                for i, rp in enumerate(e["pairs"])
            ],
            parse_failed=e["parse_failed"],
            truncated_pairs=e["truncated_pairs"],
        )
        for e in encoded
    ]
    pairs = [p for o in outcomes for p in o.pairs]
    stats = generation_stats(outcomes)
    truncated = sum(o.truncated_pairs for o in outcomes)
    report = StageReport(
        stage="generate",
        input=len(records),
        kept=len(records) - stats.parse_failures,
        dropped=stats.parse_failures,
        reasons={"parse_failure": stats.parse_failures} if stats.parse_failures else {},
        info={
            "pairs_generated": stats.pairs_generated,
            **({"truncated_pairs": truncated} if truncated else {}),
        },
    )
    report.validate()
    write_pairs(pairs, stage_dir / "output.jsonl")
    _write_json(stage_dir / "report.json", report.to_dict())
    _write_json(stage_dir / "stats.json", stats.to_dict())
    runner.mark_done({"pairs": len(pairs), "gateway_calls": calls})
    return GenerateStageResult(
        pairs=sorted(pairs, key=lambda p: p.sort_key()), report=report, calls=calls
    )


@dataclass
class QualityStageResult:
    accepted: list[QAPair]
    all_pairs: list[QAPair]
    reports: list[StageReport]
    calls: dict[str, int]


def _stage_quality(
    stage_dir: Path,
    pairs: Sequence[QAPair],
    records: Sequence[CaptionRecord],
    gateway: Gateway,
    config: PipelineConfig,
) -> QualityStageResult:
    from .generation import pairs_digest

    input_digest = pairs_digest(pairs) + ":" + content_digest(records)
    runner = _StageRunner(stage_dir, input_digest, config.batch_size)
    if runner.is_done():
        accepted = read_pairs(stage_dir / "accepted.jsonl")
        all_pairs = read_pairs(stage_dir / "pairs_labeled.jsonl")
        reports = [StageReport.from_dict(o) for o in _read_json(stage_dir / "reports.json")]
        return QualityStageResult(
            accepted=accepted, all_pairs=all_pairs, reports=reports,
            calls=runner.saved_calls(),
        )

    records_by_id = {r.id: r for r in records}
    ordered = sorted(pairs, key=lambda p: p.sort_key())
    groups: list[list[QAPair]] = []
    for pair in ordered:
        if groups and groups[-1][0].record_id == pair.record_id:
            groups[-1].append(pair)
        else:
            groups.append([pair])

    counter = CountingGateway(gateway)

    def process_batch(chunk: Sequence[list[QAPair]]) -> list[dict]:
        lines = []
        for group in chunk:
            record = records_by_id.get(group[0].record_id)
            if record is None:
                raise PipelineError(f"pairs reference unknown record {group[0].record_id}")
            result = run_quality_pipeline(
                group, [record], counter, config.quality, max_in_flight=config.concurrency
            )
            lines.append(
                {
                    "record_id": record.id,
                    "pairs": [json.loads(p.to_json_line()) for p in result.pairs],
                    "drops": [list(d) for d in result.drops],
                    "semantic_skipped": result.semantic_skipped_records,
                }
            )
        return lines

    encoded, calls = runner.process(groups, process_batch, counter)
    all_pairs: list[QAPair] = []
    drops: list[tuple[str, str, str]] = []
    semantic_skipped = 0
    for entry in encoded:
        all_pairs.extend(QAPair.from_json_obj(o) for o in entry["pairs"])
        drops.extend(tuple(d) for d in entry["drops"])
        semantic_skipped += entry["semantic_skipped"]
    accepted = [p for p in all_pairs if p.final_status == "accepted"]
    reports = build_stage_reports(len(all_pairs), drops, semantic_skipped)
    write_pairs(accepted, stage_dir / "accepted.jsonl")
    write_pairs(all_pairs, stage_dir / "pairs_labeled.jsonl")
    _write_json(stage_dir / "reports.json", [r.to_dict() for r in reports])
    runner.mark_done({"accepted": len(accepted), "gateway_calls": calls})
    return QualityStageResult(
        accepted=sorted(accepted, key=lambda p: p.sort_key()),
        all_pairs=sorted(all_pairs, key=lambda p: p.sort_key()),
        reports=reports,
        calls=calls,
    )


def _fan_out(func, items: Sequence, max_in_flight: int) -> list:
    if max_in_flight > 1 and len(items) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            return list(pool.map(func, items))
    return [func(item) for item in items]


# --- run report -----------------------------------------------------------------

_SOURCE_ORDER = [SourceKind.DOCCI, SourceKind.LOCALIZED_NARRATIVES, SourceKind.PIXMO_CAP,
                 SourceKind.CUSTOM]


@dataclass
class RunReport:
    rows: list[dict]
    totals: dict
    stage_reports: list[StageReport]
    gateway_calls: dict[str, int]
    stage_seconds: dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timings: bool = False) -> dict:
        out = {
            "rows": self.rows,
            "totals": self.totals,
            "stages": [r.to_dict() for r in self.stage_reports],
            "gateway_calls": {k: self.gateway_calls[k] for k in sorted(self.gateway_calls)},
        }
        if include_timings:
            out["stage_seconds"] = {k: self.stage_seconds[k] for k in sorted(self.stage_seconds)}
        return out


def build_run_report(
    records: Sequence[CaptionRecord],
    kept_records: Sequence[CaptionRecord],
    pairs: Sequence[QAPair],
    accepted: Sequence[QAPair],
    stage_reports: Sequence[StageReport],
    gateway_calls: dict[str, int],
    stage_seconds: Optional[dict[str, float]] = None,
) -> RunReport:
    source_of = {r.id: r.source for r in records}
    sources = [s for s in _SOURCE_ORDER if any(r.source is s for r in records)]
    rows = []
    for source in sources:
        in_src = [r for r in records if r.source is source]
        kept_src = sum(1 for r in kept_records if r.source is source)
        gen_src = sum(1 for p in pairs if source_of[p.record_id] is source)
        acc_src = sum(1 for p in accepted if source_of[p.record_id] is source)
        words = sum(r.word_count for r in in_src)
        rows.append(
            {
                "source": source.value,
                "size": len(in_src),
                "filtered": kept_src,
                "mean_words": round(words / len(in_src), 1) if in_src else 0.0,
                "generated_pairs": gen_src,
                "accepted_pairs": acc_src,
            }
        )
    total_words = sum(r.word_count for r in records)
    totals = {
        "source": "total",
        "size": sum(row["size"] for row in rows),
        "filtered": sum(row["filtered"] for row in rows),
        "mean_words": round(total_words / len(records), 1) if records else 0.0,
        "generated_pairs": sum(row["generated_pairs"] for row in rows),
        "accepted_pairs": sum(row["accepted_pairs"] for row in rows),
    }
    return RunReport(
        rows=rows,
        totals=totals,
        stage_reports=list(stage_reports),
        gateway_calls=dict(gateway_calls),
        stage_seconds=dict(stage_seconds or {}),
    )


_REPORT_COLUMNS = (
    ("source", "Source"),
    ("size", "Size"),
    ("filtered", "Filtered"),
    ("mean_words", "Words"),
    ("generated_pairs", "Gen. Pairs"),
    ("accepted_pairs", "Accepted"),
)


def emit_report(report: RunReport, fmt: str = "json") -> str:
    """Render the run report; totals are recomputed, never trusted."""
    recomputed = {
        key: sum(row[key] for row in report.rows)
        for key in ("size", "filtered", "generated_pairs", "accepted_pairs")
    }
    totals = dict(report.totals)
    for key, value in recomputed.items():
        if totals.get(key) != value:
            raise PipelineError(f"totals mismatch for {key}: {totals.get(key)} != {value}")
    if fmt == "json":
        return json.dumps(report.to_dict(), ensure_ascii=False, indent=2) + "\n"
    if fmt != "markdown":
        raise ValueError(f"unknown report format: {fmt!r}")
    lines = []
    header = " | ".join(label for _, label in _REPORT_COLUMNS)
    lines.append(f"| {header} |")
    lines.append("|" + "|".join("---" for _ in _REPORT_COLUMNS) + "|")
    for row in list(report.rows) + [totals]:
        cells = " | ".join(str(row[key]) for key, _ in _REPORT_COLUMNS)
        lines.append(f"| {cells} |")
    lines.append("")
    lines.append("| Stage | Input | Kept | Dropped |")
    lines.append("|---|---|---|---|")
    for stage in report.stage_reports:
        lines.append(f"| {stage.stage} | {stage.input} | {stage.kept} | {stage.dropped} |")
    lines.append("")
    calls = ", ".join(f"{k}={report.gateway_calls[k]}" for k in sorted(report.gateway_calls))
    lines.append(f"Gateway calls: {calls}")
    return "\n".join(lines) + "\n"


# --- full pipeline ----------------------------------------------------------------

@dataclass
class RunResult:
    accepted: list[QAPair]
    all_pairs: list[QAPair]
    kept_records: list[CaptionRecord]
    report: RunReport
    checkpoint_dir: Path

    @property
    def accepted_path(self) -> Path:
        return self.checkpoint_dir / "quality" / "accepted.jsonl"


def run_pipeline(
    config: PipelineConfig,
    corpus_path: Union[str, Path],
    gateway: Gateway,
) -> RunResult:
    """prefilter -> generate -> quality with per-stage checkpoints.

    A rerun over an existing checkpoint resumes after the last completed
    stage; changed inputs or result-affecting config raise StaleCheckpoint.
    """
    ckpt = Path(config.checkpoint_dir)
    ckpt.mkdir(parents=True, exist_ok=True)
    records = read_corpus(corpus_path)
    if config.assume_images_ok:
        records = [r.with_flag(IMAGE_OK) for r in records]
    manifest = {
        "input_digest": content_digest(records),
        "config_digest": config.result_digest(),
        "prompt_digests": {
            "spatial_check": SPATIAL_CHECK_DIGEST,
            "qa_generation": GENERATION_DIGEST,
        },
    }
    manifest_path = ckpt / "manifest.json"
    if manifest_path.exists():
        existing = _read_json(manifest_path)
        if (
            existing.get("input_digest") != manifest["input_digest"]
            or existing.get("config_digest") != manifest["config_digest"]
        ):
            raise StaleCheckpoint(
                "checkpoint was created from different input or configuration"
            )
    else:
        _write_json(manifest_path, manifest)

    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    pre = _stage_prefilter(ckpt / "prefilter", records, gateway, config)
    timings["prefilter"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    gen = _stage_generate(ckpt / "generate", pre.kept, gateway, config)
    timings["generate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    qual = _stage_quality(ckpt / "quality", gen.pairs, pre.kept, gateway, config)
    timings["quality"] = time.perf_counter() - t0

    gateway_calls = {"chat": 0, "embed": 0, "similarity": 0}
    for stage_calls in (pre.calls, gen.calls, qual.calls):
        for kind, count in stage_calls.items():
            gateway_calls[kind] += count

    stage_reports = [pre.report, gen.report, *qual.reports]
    report = build_run_report(
        records=records,
        kept_records=pre.kept,
        pairs=gen.pairs,
        accepted=qual.accepted,
        stage_reports=stage_reports,
        gateway_calls=gateway_calls,
        stage_seconds=timings,
    )
    (ckpt / "report.json").write_text(emit_report(report, "json"), encoding="utf-8")
    _write_json(ckpt / "timings.json", {k: timings[k] for k in sorted(timings)})
    return RunResult(
        accepted=qual.accepted,
        all_pairs=qual.all_pairs,
        kept_records=pre.kept,
        report=report,
        checkpoint_dir=ckpt,
    )


def export_training_format(
    pairs: Sequence[QAPair],
    records: Sequence[CaptionRecord],
    output,
    grouped: bool = False,
) -> int:
    """Emit chat-format JSONL; returns the number of lines written.

    One line per pair, or one line per record in grouped mode with the
    record's pairs flattened into alternating user/assistant messages.
    """
    records_by_id = {r.id: r for r in records}
    dangling = sorted({p.record_id for p in pairs} - set(records_by_id))
    if dangling:
        raise PipelineError(f"pairs reference unknown records: {dangling[:10]}")
    ordered = sorted(pairs, key=lambda p: p.sort_key())
    lines = 0

    def _emit(obj: dict) -> None:
        nonlocal lines
        output.write(json.dumps(obj, ensure_ascii=False, separators=(",", ":")))
        output.write("\n")
        lines += 1

    if grouped:
        current_id: Optional[str] = None
        messages: list[dict] = []
        for pair in ordered:
            if pair.record_id != current_id:
                if messages:
                    _emit({"image": records_by_id[current_id].image_uri, "messages": messages})
                current_id = pair.record_id
                messages = []
            messages.append({"role": "user", "content": pair.question})
            messages.append({"role": "assistant", "content": pair.answer})
        if messages:
            _emit({"image": records_by_id[current_id].image_uri, "messages": messages})
    else:
        for pair in ordered:
            _emit(
                {
                    "image": records_by_id[pair.record_id].image_uri,
                    "messages": [
                        {"role": "user", "content": pair.question},
                        {"role": "assistant", "content": pair.answer},
                    ],
                }
            )
    return lines
