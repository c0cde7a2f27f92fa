"""LLM-based pre-filtering: keep only descriptions with explicit spatial language.

The classification prompt is an external asset substituted verbatim and
hash-pinned, so prompt drift between runs is detectable in reports.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from typing import Mapping, Sequence

from .corpus import SPATIAL_OK, CaptionRecord
from .gateway import ChatRequest, Gateway, VerdictParseError, classify_yes_no
from .reports import StageReport

_PLACEHOLDER = "{description}"


def _load_asset(name: str) -> str:
    return (
        resources.files("spatialforge.assets.prompts").joinpath(name).read_text(encoding="utf-8")
    )


SPATIAL_CHECK_TEMPLATE = _load_asset("spatial_check.txt")
SPATIAL_CHECK_DIGEST = hashlib.sha256(SPATIAL_CHECK_TEMPLATE.encode("utf-8")).hexdigest()


def render_spatial_check(subject: str) -> str:
    """Substitute the subject into the classification template, exactly once."""
    return SPATIAL_CHECK_TEMPLATE.replace(_PLACEHOLDER, subject, 1)


@dataclass(frozen=True)
class SpatialVerdict:
    record_id: str
    is_spatial: bool
    raw_response: str


class LabelMismatchError(Exception):
    code = "label_mismatch"


def classify_description(record: CaptionRecord, gateway: Gateway) -> SpatialVerdict:
    """One yes/no spatial classification; raises VerdictParseError on junk."""
    request = ChatRequest(prompt=render_spatial_check(record.description), response_hint="yes_no")
    response = gateway.complete_chat(request)
    try:
        verdict = classify_yes_no(response.text)
    except VerdictParseError:
        raise VerdictParseError(response.text)
    return SpatialVerdict(record_id=record.id, is_spatial=verdict, raw_response=response.text)


@dataclass
class FilterResult:
    kept: list[CaptionRecord]
    dropped: list[CaptionRecord]
    needs_review: list[tuple[CaptionRecord, str]]
    verdicts: list[SpatialVerdict]
    report: StageReport


def filter_corpus(
    records: Sequence[CaptionRecord],
    gateway: Gateway,
    max_in_flight: int = 16,
) -> FilterResult:
    """Classify every record; keep the spatial ones with spatial_ok set.

    Unparseable verdicts are routed to a needs_review side channel (and
    tallied), never silently counted as negatives. Results are merged in
    input order, so reports are reproducible.
    """

    def _one(record: CaptionRecord):
        try:
            return classify_description(record, gateway)
        except VerdictParseError as exc:
            return exc

    if max_in_flight > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            outcomes = list(pool.map(_one, records))
    else:
        outcomes = [_one(r) for r in records]

    kept: list[CaptionRecord] = []
    dropped: list[CaptionRecord] = []
    needs_review: list[tuple[CaptionRecord, str]] = []
    verdicts: list[SpatialVerdict] = []
    for record, outcome in zip(records, outcomes):
        if isinstance(outcome, VerdictParseError):
            needs_review.append((record, outcome.raw_text))
            continue
        verdicts.append(outcome)
        if outcome.is_spatial:
            kept.append(record.with_flag(SPATIAL_OK))
        else:
            dropped.append(record)

    report = StageReport(
        stage="prefilter",
        input=len(records),
        kept=len(kept),
        dropped=len(dropped),
        reasons={"not_spatial": len(dropped)} if dropped else {},
        sidelined={"needs_review": len(needs_review)} if needs_review else {},
    )
    report.validate()
    return FilterResult(
        kept=kept, dropped=dropped, needs_review=needs_review, verdicts=verdicts, report=report
    )


@dataclass(frozen=True)
class ClassifierMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    support: int


def classifier_metrics(
    gold: Mapping[str, bool], predicted: Mapping[str, bool]
) -> ClassifierMetrics:
    """Binary metrics with "spatial" as the positive class.

    support is the number of evaluated ids. Raises LabelMismatchError when
    the id sets differ.
    """
    if set(gold) != set(predicted):
        raise LabelMismatchError("gold and predicted ids differ")
    tp = fp = tn = fn = 0
    for rid, truth in gold.items():
        pred = predicted[rid]
        if pred and truth:
            tp += 1
        elif pred and not truth:
            fp += 1
        elif not pred and truth:
            fn += 1
        else:
            tn += 1
    total = tp + fp + tn + fn
    accuracy = (tp + tn) / total if total else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ClassifierMetrics(
        accuracy=accuracy, precision=precision, recall=recall, f1=f1, support=total
    )
