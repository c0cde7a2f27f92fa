"""Scoring harness for binary and multiple-choice spatial benchmarks.

Predictions are free-form model text; scoring is strict string matching
after a fixed normalization. Ambiguous predictions (zero or multiple
matching options) count as wrong.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Optional, Sequence, Union

from .gateway import VerdictParseError, classify_yes_no

EVAL_KINDS = ("binary", "multiple_choice")
BINARY_GOLDS = ("True", "False")


class EvalError(Exception):
    pass


class NoItemsError(EvalError):
    code = "no_items"


@dataclass(frozen=True)
class EvalItem:
    item_id: str
    kind: str
    options: tuple[str, ...]
    gold: str
    prediction_text: str

    def __post_init__(self):
        if self.kind not in EVAL_KINDS:
            raise ValueError(f"bad kind: {self.kind!r}")
        if self.kind == "binary":
            if self.options:
                raise ValueError("binary items carry no options")
            if self.gold not in BINARY_GOLDS:
                raise ValueError(f"binary gold must be True/False, got {self.gold!r}")
        else:
            if len(self.options) < 2:
                raise ValueError("multiple_choice needs at least 2 options")
            if self.gold not in self.options:
                raise ValueError(f"gold {self.gold!r} not among options")

    @classmethod
    def from_json_obj(cls, obj: dict) -> "EvalItem":
        return cls(
            item_id=obj["item_id"],
            kind=obj["kind"],
            options=tuple(obj.get("options", ())),
            gold=obj["gold"],
            prediction_text=obj["prediction_text"],
        )


_OPTION_PREFIX_RE = re.compile(r"^\(?([a-z])[).]\s*")
_TERMINAL_PUNCT_RE = re.compile(r"[.!?,;:]+$")


def normalize_answer(text: str) -> str:
    """Lowercase, collapse whitespace, strip terminal punctuation and
    option-letter prefixes like "a)", "(b)", "c."."""
    out = " ".join(text.lower().split())
    out = _OPTION_PREFIX_RE.sub("", out)
    out = _TERMINAL_PUNCT_RE.sub("", out)
    return out.strip()


@dataclass(frozen=True)
class ScoredItem:
    item_id: str
    correct: bool
    matched_option: Optional[str] = None
    reason: Optional[str] = None


def _phrase_occurs(phrase: str, text: str) -> bool:
    if not phrase:
        return False
    return re.search(rf"(?<![0-9a-z]){re.escape(phrase)}(?![0-9a-z])", text) is not None


def score_item(item: EvalItem) -> ScoredItem:
    """Score one prediction against gold via string matching."""
    prediction = normalize_answer(item.prediction_text)
    if item.kind == "binary":
        try:
            verdict = classify_yes_no(prediction)
        except VerdictParseError:
            return ScoredItem(item.item_id, correct=False, reason="no_verdict")
        matched = "True" if verdict else "False"
        return ScoredItem(item.item_id, correct=matched == item.gold, matched_option=matched)
    matches = [opt for opt in item.options if _phrase_occurs(normalize_answer(opt), prediction)]
    if len(matches) != 1:
        return ScoredItem(item.item_id, correct=False, reason="ambiguous_prediction")
    return ScoredItem(
        item.item_id, correct=matches[0] == item.gold, matched_option=matches[0]
    )


def aggregate_accuracy(scored: Sequence[ScoredItem]) -> float:
    """Percent correct; callers render to 1 decimal place."""
    if not scored:
        raise NoItemsError("no items to aggregate")
    return 100.0 * sum(1 for s in scored if s.correct) / len(scored)


def load_items(source: Union[str, Path, IO[str]]) -> list[EvalItem]:
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            return load_items(fh)
    items = []
    for lineno, raw in enumerate(source, start=1):
        if not raw.strip():
            continue
        try:
            items.append(EvalItem.from_json_obj(json.loads(raw)))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise EvalError(f"items line {lineno}: {exc}") from exc
    return items


def score_items(items: Iterable[EvalItem]) -> list[ScoredItem]:
    return [score_item(item) for item in items]


def build_eval_report(items: Sequence[EvalItem], scored: Sequence[ScoredItem]) -> dict:
    by_kind: dict[str, list[ScoredItem]] = {}
    for item, s in zip(items, scored):
        by_kind.setdefault(item.kind, []).append(s)
    reasons: dict[str, int] = {}
    for s in scored:
        if s.reason:
            reasons[s.reason] = reasons.get(s.reason, 0) + 1
    return {
        "items": len(scored),
        "correct": sum(1 for s in scored if s.correct),
        "accuracy": round(aggregate_accuracy(scored), 1),
        "per_kind": {
            kind: {
                "items": len(group),
                "correct": sum(1 for s in group if s.correct),
                "accuracy": round(aggregate_accuracy(group), 1),
            }
            for kind, group in sorted(by_kind.items())
        },
        "reasons": {k: reasons[k] for k in sorted(reasons)},
    }
