"""Structured QA-pair generation from filtered descriptions.

Each surviving description is turned into a JSON array of question/answer
pairs via a single prompt, decoded at temperature 0. Parsing is tolerant
(fences, prose, truncation salvage) but failures are tallied, never lost.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

from .corpus import SPATIAL_OK, CaptionRecord
from .gateway import (
    ChatRequest,
    Gateway,
    JsonArrayError,
    MalformedPairError,
    extract_json_array,
    salvage_truncated_array,
)
from .reports import StageReport

_PLACEHOLDER = "{description}"

GENERATION_TEMPLATE = (
    resources.files("spatialforge.assets.prompts")
    .joinpath("qa_generation.txt")
    .read_text(encoding="utf-8")
)
GENERATION_DIGEST = hashlib.sha256(GENERATION_TEMPLATE.encode("utf-8")).hexdigest()

PAIR_STATUSES = ("pending", "accepted", "rejected")
# Quality-check verdict keys, in executable order.
CHECK_NAMES = ("dedup", "reference", "answer", "image", "spatial")
VERDICT_VALUES = ("pass", "fail", "skipped")


def build_generation_prompt(description: str) -> str:
    """Substitute the description into the generation template.

    The single template placeholder is replaced exactly once; placeholder
    text inside the description stays literal, never re-substituted.
    """
    if not description.strip():
        raise ValueError("description must be nonempty")
    return GENERATION_TEMPLATE.replace(_PLACEHOLDER, description, 1)


@dataclass
class QAPair:
    pair_id: str
    record_id: str
    question: str
    answer: str
    verdicts: dict[str, str] = field(default_factory=dict)
    final_status: str = "pending"

    @classmethod
    def make(cls, record_id: str, ordinal: int, question: str, answer: str) -> "QAPair":
        question = question.strip()
        answer = answer.strip()
        if not question or not answer:
            raise ValueError("question and answer must be nonempty")
        return cls(
            pair_id=f"{record_id}#{ordinal}",
            record_id=record_id,
            question=question,
            answer=answer,
        )

    @property
    def ordinal(self) -> int:
        tail = self.pair_id.rsplit("#", 1)[-1]
        return int(tail) if tail.isdigit() else 0

    def sort_key(self) -> tuple[str, int]:
        return (self.record_id, self.ordinal)

    def to_json_line(self) -> str:
        obj = {
            "pair_id": self.pair_id,
            "record_id": self.record_id,
            "question": self.question,
            "answer": self.answer,
            "verdicts": {k: self.verdicts[k] for k in CHECK_NAMES if k in self.verdicts},
            "final_status": self.final_status,
        }
        return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_json_obj(cls, obj: dict) -> "QAPair":
        pair = cls(
            pair_id=obj["pair_id"],
            record_id=obj["record_id"],
            question=obj["question"],
            answer=obj["answer"],
            verdicts=dict(obj.get("verdicts", {})),
            final_status=obj.get("final_status", "pending"),
        )
        if pair.final_status not in PAIR_STATUSES:
            raise ValueError(f"bad final_status: {pair.final_status!r}")
        for check, verdict in pair.verdicts.items():
            if check not in CHECK_NAMES or verdict not in VERDICT_VALUES:
                raise ValueError(f"bad verdict entry: {check!r}={verdict!r}")
        return pair


def write_pairs(pairs: Sequence[QAPair], path) -> None:
    ordered = sorted(pairs, key=lambda p: p.sort_key())
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pair in ordered:
            fh.write(pair.to_json_line())
            fh.write("\n")


def read_pairs(path) -> list[QAPair]:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                pairs.append(QAPair.from_json_obj(json.loads(raw)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"pairs line {lineno}: {exc}") from exc
    return pairs


def pairs_digest(pairs: Sequence[QAPair]) -> str:
    h = hashlib.sha256()
    for pair in sorted(pairs, key=lambda p: p.sort_key()):
        h.update(pair.to_json_line().encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


class ExtractionFailed(Exception):
    def __init__(self, record_id: str, cause: Exception):
        super().__init__(f"record {record_id}: {cause}")
        self.record_id = record_id
        self.cause = cause


@dataclass
class GenerationOutcome:
    record_id: str
    pairs: list[QAPair]
    parse_failed: bool = False
    truncated_pairs: int = 0


def generate_pairs(record: CaptionRecord, gateway: Gateway) -> GenerationOutcome:
    """Generate QA pairs for one record; one identical-request retry on junk.

    Length-truncated responses are salvaged by dropping the incomplete
    trailing element (tallied). If extraction still fails after the retry,
    the outcome is zero pairs with parse_failed set.
    """
    if not record.has_flag(SPATIAL_OK):
        raise ValueError(f"record {record.id} is not marked {SPATIAL_OK}")
    request = ChatRequest(prompt=build_generation_prompt(record.description), response_hint="json_array")
    truncated = 0
    for attempt in range(2):
        response = gateway.complete_chat(request)
        try:
            raw_pairs = extract_json_array(response.text)
        except (JsonArrayError, MalformedPairError):
            if response.finish_reason == "length":
                try:
                    salvaged = salvage_truncated_array(response.text)
                except MalformedPairError:
                    salvaged = None
                if salvaged is not None:
                    raw_pairs = salvaged
                    truncated = 1
                else:
                    if attempt == 0:
                        continue
                    return GenerationOutcome(record.id, [], parse_failed=True)
            else:
                if attempt == 0:
                    continue
                return GenerationOutcome(record.id, [], parse_failed=True)
        pairs = [
            QAPair.make(record.id, i, rp["question"], rp["answer"])
            for i, rp in enumerate(raw_pairs)
        ]
        return GenerationOutcome(record.id, pairs, truncated_pairs=truncated)
    raise AssertionError("unreachable")


@dataclass
class GenerationStats:
    records_processed: int
    pairs_generated: int
    mean_pairs_per_record: float
    parse_failures: int
    mean_is_defined: bool = True

    def to_dict(self) -> dict:
        return {
            "records_processed": self.records_processed,
            "pairs_generated": self.pairs_generated,
            "mean_pairs_per_record": self.mean_pairs_per_record,
            "parse_failures": self.parse_failures,
            "mean_is_defined": self.mean_is_defined,
        }


def generation_stats(outcomes: Sequence[GenerationOutcome]) -> GenerationStats:
    records = len(outcomes)
    pairs = sum(len(o.pairs) for o in outcomes)
    failures = sum(1 for o in outcomes if o.parse_failed)
    if records == 0:
        return GenerationStats(0, 0, 0.0, 0, mean_is_defined=False)
    return GenerationStats(
        records_processed=records,
        pairs_generated=pairs,
        mean_pairs_per_record=pairs / records,
        parse_failures=failures,
    )


@dataclass
class GenerationResult:
    pairs: list[QAPair]
    outcomes: list[GenerationOutcome]
    stats: GenerationStats
    report: StageReport


def generate_for_corpus(
    records: Sequence[CaptionRecord],
    gateway: Gateway,
    max_in_flight: int = 16,
) -> GenerationResult:
    """Fan generation out over records; outputs merged in input order."""
    if max_in_flight > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            outcomes = list(pool.map(lambda r: generate_pairs(r, gateway), records))
    else:
        outcomes = [generate_pairs(r, gateway) for r in records]
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
    return GenerationResult(pairs=pairs, outcomes=outcomes, stats=stats, report=report)
