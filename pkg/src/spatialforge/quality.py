"""Post-generation quality assurance: five checks in increasing cost order.

Order: image-availability drop, duplicate removal (exact then semantic),
source-reference screen, answer-description consistency, image-question
similarity, and finally LLM spatial verification. A pair that fails one
stage is never evaluated by later stages.
"""

from __future__ import annotations

import hashlib
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from typing import Optional, Sequence

from .corpus import IMAGE_OK, CaptionRecord
from .gateway import (
    ChatRequest,
    Gateway,
    GatewayError,
    ImageEmbedError,
    VerdictParseError,
    classify_yes_no,
    cosine,
)
from .generation import CHECK_NAMES, QAPair
from .prefilter import render_spatial_check
from .reports import StageReport

DEFAULT_REFERENCE_KEYWORDS = frozenset(
    {"mention", "mentions", "mentioned", "description", "describe", "described", "caption", "text"}
)

STAGE_ORDER = (
    "image_availability",
    "dedup",
    "reference_check",
    "answer_consistency",
    "image_question_consistency",
    "spatial_verification",
)

_ADMIT_BUCKETS = 1_000_000


def _load_stopwords() -> frozenset[str]:
    raw = resources.files("spatialforge.assets").joinpath("stopwords.txt").read_text("utf-8")
    return frozenset(
        line.strip() for line in raw.splitlines() if line.strip() and not line.startswith("#")
    )


STOPWORDS = _load_stopwords()
_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z0-9]+)*")


@dataclass(frozen=True)
class QualityConfig:
    dedup_semantic_cutoff: float = 0.95
    clipscore_cutoff: float = 0.25
    reference_keywords: frozenset[str] = DEFAULT_REFERENCE_KEYWORDS
    answer_match_min_fraction: float = 0.5
    nonspatial_keep_fraction: float = 0.0

    def __post_init__(self):
        if not -1.0 <= self.dedup_semantic_cutoff <= 1.0:
            raise ValueError("dedup_semantic_cutoff must be a cosine in [-1, 1]")
        if not 0.0 <= self.clipscore_cutoff <= 2.5:
            raise ValueError("clipscore_cutoff must be in [0, 2.5]")
        if not 0.0 < self.answer_match_min_fraction <= 1.0:
            raise ValueError("answer_match_min_fraction must be in (0, 1]")
        if not 0.0 <= self.nonspatial_keep_fraction <= 1.0:
            raise ValueError("nonspatial_keep_fraction must be in [0, 1]")

    @classmethod
    def from_json_obj(cls, obj: dict) -> "QualityConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown quality config keys: {sorted(unknown)}")
        if "reference_keywords" in obj:
            obj = {**obj, "reference_keywords": frozenset(obj["reference_keywords"])}
        return cls(**obj)

    def to_dict(self) -> dict:
        return {
            "dedup_semantic_cutoff": self.dedup_semantic_cutoff,
            "clipscore_cutoff": self.clipscore_cutoff,
            "reference_keywords": sorted(self.reference_keywords),
            "answer_match_min_fraction": self.answer_match_min_fraction,
            "nonspatial_keep_fraction": self.nonspatial_keep_fraction,
        }


def _normalize_question(text: str) -> str:
    return " ".join(text.casefold().split())


def content_tokens(text: str) -> list[str]:
    return [t for t in _TOKEN_RE.findall(text.lower()) if t not in STOPWORDS]


@dataclass
class DedupOutcome:
    kept: list[QAPair]
    rejected: list[tuple[QAPair, str]]
    semantic_skipped: bool = False


def dedup_pairs(
    pairs: Sequence[QAPair], gateway: Gateway, config: QualityConfig
) -> DedupOutcome:
    """Remove duplicate questions within one record's pair group.

    Exact phase first (normalized full-string match, first occurrence
    wins), then greedy semantic dedup against earlier kept questions. An
    embedding failure skips the semantic phase for the group, keeping the
    exact-phase result.
    """
    record_ids = {p.record_id for p in pairs}
    if len(record_ids) > 1:
        raise ValueError(f"dedup group spans records: {sorted(record_ids)}")
    kept: list[QAPair] = []
    rejected: list[tuple[QAPair, str]] = []
    seen: dict[str, str] = {}
    for pair in pairs:
        key = _normalize_question(pair.question)
        if key in seen:
            rejected.append((pair, "dup_exact"))
        else:
            seen[key] = pair.pair_id
            kept.append(pair)
    if len(kept) > 1:
        try:
            vectors = [gateway.embed_text(p.question) for p in kept]
        except GatewayError:
            return DedupOutcome(kept=kept, rejected=rejected, semantic_skipped=True)
        survivors: list[QAPair] = []
        survivor_vecs: list[list[float]] = []
        for pair, vec in zip(kept, vectors):
            if any(cosine(vec, prev) >= config.dedup_semantic_cutoff for prev in survivor_vecs):
                rejected.append((pair, "dup_semantic"))
            else:
                survivors.append(pair)
                survivor_vecs.append(vec)
        kept = survivors
    return DedupOutcome(kept=kept, rejected=rejected)


def reference_check(pair: QAPair, config: QualityConfig) -> bool:
    """Pass unless the question or answer references the source text."""
    for text in (pair.question, pair.answer):
        for token in _TOKEN_RE.findall(text.lower()):
            if token in config.reference_keywords:
                return False
    return True


def answer_consistency(pair: QAPair, description: str, config: QualityConfig) -> bool:
    """Check that enough of the answer's content words appear in the description.

    Answers with no content tokens (e.g. bare "yes") pass vacuously.
    """
    tokens = content_tokens(pair.answer)
    if not tokens:
        return True
    desc_tokens = set(_TOKEN_RE.findall(description.lower()))
    matched = sum(1 for t in tokens if t in desc_tokens)
    return matched / len(tokens) >= config.answer_match_min_fraction


def image_question_consistency(
    pair: QAPair, image_uri: str, gateway: Gateway, config: QualityConfig
) -> tuple[bool, Optional[str]]:
    """Gate on image-question similarity; embedding failure is a fail."""
    try:
        score = gateway.cross_modal_score(image_uri, pair.question)
    except ImageEmbedError:
        return False, "image_embed_failed"
    if score.value >= config.clipscore_cutoff:
        return True, None
    return False, "clipscore_below_cutoff"


def admit_bucket(pair_id: str) -> int:
    """Deterministic admission bucket in [0, 1e6) for keep-fraction sampling."""
    digest = hashlib.sha256(pair_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % _ADMIT_BUCKETS


def verify_spatial(
    pair: QAPair, gateway: Gateway, config: QualityConfig
) -> tuple[bool, Optional[str]]:
    """Classify the QA pair itself for spatial content.

    With nonspatial_keep_fraction > 0, a deterministic hash bucket of the
    pair id admits that fraction of failing pairs; reproducible across
    runs, unlike RNG sampling.
    """
    subject = f"Q: {pair.question} A: {pair.answer}"
    request = ChatRequest(prompt=render_spatial_check(subject), response_hint="yes_no")
    response = gateway.complete_chat(request)
    try:
        verdict = classify_yes_no(response.text)
    except VerdictParseError:
        return False, "unparseable_verdict"
    if verdict:
        return True, None
    if config.nonspatial_keep_fraction > 0.0:
        if admit_bucket(pair.pair_id) < config.nonspatial_keep_fraction * _ADMIT_BUCKETS:
            return True, None
    return False, "not_spatial"


def _reset(pair: QAPair) -> QAPair:
    return replace(
        pair,
        verdicts={name: "skipped" for name in CHECK_NAMES},
        final_status="pending",
    )


@dataclass
class QualityResult:
    accepted: list[QAPair]
    pairs: list[QAPair]
    reports: list[StageReport]
    drops: list[tuple[str, str, str]] = field(default_factory=list)  # (pair_id, stage, reason)
    semantic_skipped_records: int = 0

    def report_by_stage(self) -> dict[str, StageReport]:
        return {r.stage: r for r in self.reports}


def build_stage_reports(
    total_pairs: int,
    drops: Sequence[tuple[str, str, str]],
    semantic_skipped_records: int = 0,
) -> list[StageReport]:
    """Reconstruct the ordered per-stage ledger from per-pair drop records.

    Used both for fresh runs and when reassembling reports from checkpoint
    batches, so the two paths cannot drift.
    """
    per_stage: dict[str, dict[str, int]] = {stage: {} for stage in STAGE_ORDER}
    for _, stage, reason in drops:
        per_stage[stage][reason] = per_stage[stage].get(reason, 0) + 1
    reports = []
    alive = total_pairs
    for stage in STAGE_ORDER:
        dropped = sum(per_stage[stage].values())
        info: dict[str, int] = {}
        if stage == "dedup" and semantic_skipped_records:
            info["semantic_phase_skipped_records"] = semantic_skipped_records
        report = StageReport(
            stage=stage,
            input=alive,
            kept=alive - dropped,
            dropped=dropped,
            reasons=per_stage[stage],
            info=info,
        )
        report.validate()
        reports.append(report)
        alive -= dropped
    return reports


def run_quality_pipeline(
    pairs: Sequence[QAPair],
    records: Sequence[CaptionRecord],
    gateway: Gateway,
    config: Optional[QualityConfig] = None,
    max_in_flight: int = 16,
) -> QualityResult:
    """Apply all checks in cost order with short-circuit semantics.

    Verdicts are reset at entry, so re-running the pipeline over its own
    accepted output (same services) is a no-op. Pairs whose record id does
    not resolve are a fatal error.
    """
    config = config or QualityConfig()
    records_by_id = {r.id: r for r in records}
    dangling = sorted({p.record_id for p in pairs} - set(records_by_id))
    if dangling:
        raise ValueError(f"pairs reference unknown records: {dangling[:5]}")

    work = [_reset(p) for p in pairs]
    drops: list[tuple[str, str, str]] = []

    def fail(pair: QAPair, check: Optional[str], stage: str, reason: str) -> None:
        if check is not None:
            pair.verdicts[check] = "fail"
        pair.final_status = "rejected"
        drops.append((pair.pair_id, stage, reason))

    # Image availability: cheapest gate, no verdict key of its own.
    survivors: list[QAPair] = []
    for pair in work:
        if records_by_id[pair.record_id].has_flag(IMAGE_OK):
            survivors.append(pair)
        else:
            fail(pair, None, "image_availability", "image_missing")

    # Dedup, per record group, original ordinal order within the group.
    groups: dict[str, list[QAPair]] = {}
    order: list[str] = []
    for pair in survivors:
        if pair.record_id not in groups:
            groups[pair.record_id] = []
            order.append(pair.record_id)
        groups[pair.record_id].append(pair)
    survivors = []
    semantic_skipped = 0
    for record_id in order:
        outcome = dedup_pairs(groups[record_id], gateway, config)
        if outcome.semantic_skipped:
            semantic_skipped += 1
        for pair in outcome.kept:
            pair.verdicts["dedup"] = "pass"
            survivors.append(pair)
        for pair, reason in outcome.rejected:
            fail(pair, "dedup", "dedup", reason)
    survivors.sort(key=lambda p: p.sort_key())

    # Reference screen: pure string matching.
    next_survivors = []
    for pair in survivors:
        if reference_check(pair, config):
            pair.verdicts["reference"] = "pass"
            next_survivors.append(pair)
        else:
            fail(pair, "reference", "reference_check", "reference_keyword")
    survivors = next_survivors

    # Answer-description consistency: pure string matching.
    next_survivors = []
    for pair in survivors:
        description = records_by_id[pair.record_id].description
        if answer_consistency(pair, description, config):
            pair.verdicts["answer"] = "pass"
            next_survivors.append(pair)
        else:
            fail(pair, "answer", "answer_consistency", "answer_unsupported")
    survivors = next_survivors

    # Image-question similarity: one similarity call per pair.
    def _img(pair: QAPair) -> tuple[bool, Optional[str]]:
        return image_question_consistency(
            pair, records_by_id[pair.record_id].image_uri, gateway, config
        )

    outcomes = _fan_out(_img, survivors, max_in_flight)
    next_survivors = []
    for pair, (ok, reason) in zip(survivors, outcomes):
        if ok:
            pair.verdicts["image"] = "pass"
            next_survivors.append(pair)
        else:
            fail(pair, "image", "image_question_consistency", reason or "clipscore_below_cutoff")
    survivors = next_survivors

    # Spatial verification: one chat call per pair, costliest stage last.
    outcomes = _fan_out(lambda p: verify_spatial(p, gateway, config), survivors, max_in_flight)
    next_survivors = []
    for pair, (ok, reason) in zip(survivors, outcomes):
        if ok:
            pair.verdicts["spatial"] = "pass"
            next_survivors.append(pair)
        else:
            fail(pair, "spatial", "spatial_verification", reason or "not_spatial")
    survivors = next_survivors

    for pair in survivors:
        pair.final_status = "accepted"
    reports = build_stage_reports(len(work), drops, semantic_skipped)
    return QualityResult(
        accepted=survivors,
        pairs=work,
        reports=reports,
        drops=drops,
        semantic_skipped_records=semantic_skipped,
    )


def _fan_out(func, items: Sequence, max_in_flight: int) -> list:
    if max_in_flight > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            return list(pool.map(func, items))
    return [func(item) for item in items]
