"""Statistically sized human review: sampling plans, sessions, error rates.

Sample sizes come from the finite-population formula; sampling is
proportionally stratified by source with a seeded RNG, so a plan plus a
seed always reproduces the same review set. Sessions persist as
append-only JSONL event logs; state is a fold over events.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

REVIEW_VERDICTS = (
    "correct",
    "wrong_answer",
    "relation_hallucination",
    "object_hallucination",
    "not_spatial",
)

DEFAULT_CONFIDENCE_Z = 1.96
DEFAULT_PROPORTION = 0.5
DEFAULT_MARGIN = 0.05


class ReviewError(Exception):
    pass


class SessionIncompleteError(ReviewError):
    code = "session_incomplete"


class DuplicateLabelError(ReviewError):
    code = "duplicate_label"


class UnknownSessionError(ReviewError):
    code = "unknown_session"


def required_sample_size(
    population_size: int,
    confidence_z: float = DEFAULT_CONFIDENCE_Z,
    proportion: float = DEFAULT_PROPORTION,
    margin: float = DEFAULT_MARGIN,
) -> int:
    """Finite-population sample size, ceiling-rounded."""
    if population_size < 1:
        raise ValueError("population_size must be >= 1")
    if not 0.0 < proportion < 1.0:
        raise ValueError("proportion must be in (0, 1)")
    if confidence_z <= 0.0:
        raise ValueError("confidence_z must be positive")
    if not 0.0 < margin < 1.0:
        raise ValueError("margin must be in (0, 1)")
    variance_term = confidence_z**2 * proportion * (1.0 - proportion)
    numerator = population_size * variance_term
    denominator = margin**2 * (population_size - 1) + variance_term
    return math.ceil(numerator / denominator)


@dataclass(frozen=True)
class SamplePlan:
    population_size: int
    confidence_z: float
    proportion: float
    margin: float
    computed_n: int
    final_n: int

    def __post_init__(self):
        expected = required_sample_size(
            self.population_size, self.confidence_z, self.proportion, self.margin
        )
        if self.computed_n != expected:
            raise ValueError(f"computed_n {self.computed_n} != formula value {expected}")
        if self.final_n < self.computed_n:
            raise ValueError(f"final_n {self.final_n} < computed_n {self.computed_n}")

    @classmethod
    def build(
        cls,
        population_size: int,
        confidence_z: float = DEFAULT_CONFIDENCE_Z,
        proportion: float = DEFAULT_PROPORTION,
        margin: float = DEFAULT_MARGIN,
        final_n: Optional[int] = None,
    ) -> "SamplePlan":
        computed = required_sample_size(population_size, confidence_z, proportion, margin)
        return cls(
            population_size=population_size,
            confidence_z=confidence_z,
            proportion=proportion,
            margin=margin,
            computed_n=computed,
            final_n=final_n if final_n is not None else computed,
        )

    def to_dict(self) -> dict:
        return {
            "population_size": self.population_size,
            "confidence_z": self.confidence_z,
            "proportion": self.proportion,
            "margin": self.margin,
            "computed_n": self.computed_n,
            "final_n": self.final_n,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SamplePlan":
        return cls(**obj)


def apportion(
    sizes: Mapping[str, int],
    total: int,
    weights: Optional[Mapping[str, float]] = None,
) -> tuple[dict[str, int], list[str]]:
    """Largest-remainder apportionment capped at stratum sizes.

    weights defaults to the sizes themselves (proportional allocation). A
    stratum whose capacity is below its apportioned share is exhausted and
    the deficit reallocated to the remaining strata; such strata are
    returned so callers can warn. Ties break by stratum name.
    """
    if total > sum(sizes.values()):
        raise ValueError(f"cannot apportion {total} across population {sum(sizes.values())}")
    basis = dict(weights) if weights is not None else {n: float(s) for n, s in sizes.items()}
    allocation = {name: 0 for name in sizes}
    open_strata = {n for n, size in sizes.items() if size > 0 and basis.get(n, 0) > 0}
    deficit_strata: list[str] = []
    remaining = total
    while remaining > 0:
        if not open_strata:
            # Weight basis exhausted; spread the rest over leftover capacity.
            open_strata = {n for n, size in sizes.items() if allocation[n] < size}
            for n in open_strata:
                basis[n] = float(sizes[n])
        pool = sum(basis[n] for n in open_strata)
        quotas = {n: remaining * basis[n] / pool for n in open_strata}
        grants = {n: int(math.floor(q)) for n, q in quotas.items()}
        leftover = remaining - sum(grants.values())
        by_remainder = sorted(open_strata, key=lambda n: (-(quotas[n] - grants[n]), n))
        for n in by_remainder[:leftover]:
            grants[n] += 1
        remaining = 0
        for n, grant in grants.items():
            capacity = sizes[n] - allocation[n]
            if grant > capacity:
                remaining += grant - capacity
                grant = capacity
                deficit_strata.append(n)
            allocation[n] += grant
            if allocation[n] >= sizes[n]:
                open_strata = open_strata - {n}
    return allocation, sorted(set(deficit_strata))


@dataclass(frozen=True)
class ReviewLabel:
    pair_id: str
    verdict: str
    reviewer: str
    timestamp: str

    def __post_init__(self):
        if self.verdict not in REVIEW_VERDICTS:
            raise ValueError(f"unknown verdict: {self.verdict!r}")

    @classmethod
    def make(cls, pair_id: str, verdict: str, reviewer: str) -> "ReviewLabel":
        return cls(
            pair_id=pair_id,
            verdict=verdict,
            reviewer=reviewer,
            timestamp=datetime.now(timezone.utc).isoformat(),
        )

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "verdict": self.verdict,
            "reviewer": self.reviewer,
            "timestamp": self.timestamp,
        }


@dataclass
class ReviewSession:
    session_id: str
    plan: SamplePlan
    sampled_pair_ids: list[str]
    labels: list[ReviewLabel] = field(default_factory=list)

    @property
    def labeled_pair_ids(self) -> set[str]:
        return {label.pair_id for label in self.labels}

    @property
    def complete(self) -> bool:
        return set(self.sampled_pair_ids) <= self.labeled_pair_ids

    @property
    def status(self) -> str:
        return "complete" if self.complete else "open"

    def next_unlabeled(self) -> Optional[str]:
        labeled = self.labeled_pair_ids
        for pair_id in self.sampled_pair_ids:
            if pair_id not in labeled:
                return pair_id
        return None


@dataclass
class SampleDraw:
    pair_ids: list[str]
    strata: dict[str, int]
    warnings: list[str]


def _stratum_seed(seed: int, stratum: str) -> int:
    digest = hashlib.sha256(f"{seed}:{stratum}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def draw_sample(
    pair_ids_by_stratum: Mapping[str, Sequence[str]],
    plan: SamplePlan,
    seed: int,
    weights: Optional[Mapping[str, float]] = None,
) -> SampleDraw:
    """Proportional stratified sample of final_n ids, deterministic by seed.

    Within each stratum, sampling is uniform without replacement over the
    sorted id list, so the draw is independent of input ordering.
    """
    sizes = {name: len(ids) for name, ids in pair_ids_by_stratum.items()}
    population = sum(sizes.values())
    if population < plan.final_n:
        raise ValueError(f"population {population} smaller than final_n {plan.final_n}")
    allocation, deficits = apportion(sizes, plan.final_n, weights)
    warnings = [
        f"stratum {name!r} exhausted below its apportioned share; deficit reallocated"
        for name in deficits
    ]
    sampled: list[str] = []
    for name in sorted(allocation):
        k = allocation[name]
        if k == 0:
            continue
        rng = random.Random(_stratum_seed(seed, name))
        sampled.extend(rng.sample(sorted(pair_ids_by_stratum[name]), k))
    return SampleDraw(pair_ids=sampled, strata=allocation, warnings=warnings)


# --- statistics ---------------------------------------------------------------

@dataclass(frozen=True)
class RateWithCI:
    rate: float
    halfwidth: float
    ci_low: float
    ci_high: float

    def to_dict(self) -> dict:
        return {
            "rate": self.rate,
            "halfwidth": self.halfwidth,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
        }


def _normal_ci(rate: float, n: int, z: float) -> RateWithCI:
    if n == 0:
        return RateWithCI(0.0, 0.0, 0.0, 0.0)
    half = z * math.sqrt(rate * (1.0 - rate) / n)
    return RateWithCI(rate, half, max(0.0, rate - half), min(1.0, rate + half))


def _wilson_ci(rate: float, n: int, z: float) -> RateWithCI:
    if n == 0:
        return RateWithCI(0.0, 0.0, 0.0, 0.0)
    z2 = z * z
    center = (rate + z2 / (2 * n)) / (1 + z2 / n)
    half = (z / (1 + z2 / n)) * math.sqrt(rate * (1 - rate) / n + z2 / (4 * n * n))
    return RateWithCI(rate, half, max(0.0, center - half), min(1.0, center + half))


@dataclass
class ReviewStats:
    labeled_count: int
    error_rate: RateWithCI
    relation_hallucination_rate: RateWithCI
    object_hallucination_rate: RateWithCI

    def to_dict(self) -> dict:
        return {
            "labeled_count": self.labeled_count,
            "error_rate": self.error_rate.to_dict(),
            "relation_hallucination_rate": self.relation_hallucination_rate.to_dict(),
            "object_hallucination_rate": self.object_hallucination_rate.to_dict(),
        }


def tally_stats(
    labels: Sequence[ReviewLabel],
    confidence_z: float = DEFAULT_CONFIDENCE_Z,
    ci_method: str = "normal",
) -> ReviewStats:
    """Error and hallucination rates over a label multiset, with CIs."""
    if ci_method not in ("normal", "wilson"):
        raise ValueError(f"unknown ci_method: {ci_method!r}")
    ci = _normal_ci if ci_method == "normal" else _wilson_ci
    n = len(labels)
    errors = sum(1 for l in labels if l.verdict != "correct")
    relation = sum(1 for l in labels if l.verdict == "relation_hallucination")
    objects = sum(1 for l in labels if l.verdict == "object_hallucination")
    return ReviewStats(
        labeled_count=n,
        error_rate=ci(errors / n if n else 0.0, n, confidence_z),
        relation_hallucination_rate=ci(relation / n if n else 0.0, n, confidence_z),
        object_hallucination_rate=ci(objects / n if n else 0.0, n, confidence_z),
    )


def compute_review_stats(
    session: ReviewSession,
    confidence_z: float = DEFAULT_CONFIDENCE_Z,
    ci_method: str = "normal",
) -> ReviewStats:
    """Final statistics; refuses incomplete sessions."""
    if not session.complete:
        raise SessionIncompleteError(
            f"session {session.session_id} has unlabeled pairs"
        )
    return tally_stats(session.labels, confidence_z, ci_method)


# --- persistence --------------------------------------------------------------

class SessionStore:
    """Append-only JSONL event logs, one file per session."""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def _path(self, session_id: str) -> Path:
        if not session_id or "/" in session_id or session_id.startswith("."):
            raise UnknownSessionError(f"bad session id: {session_id!r}")
        return self.directory / f"{session_id}.jsonl"

    def _lock(self, session_id: str) -> threading.Lock:
        with self._guard:
            if session_id not in self._locks:
                self._locks[session_id] = threading.Lock()
            return self._locks[session_id]

    def create(
        self,
        plan: SamplePlan,
        sampled_pair_ids: Sequence[str],
        seed: int,
        warnings: Sequence[str] = (),
        session_id: Optional[str] = None,
    ) -> str:
        if len(sampled_pair_ids) != plan.final_n:
            raise ValueError(
                f"sample has {len(sampled_pair_ids)} ids, plan.final_n is {plan.final_n}"
            )
        if len(set(sampled_pair_ids)) != len(sampled_pair_ids):
            raise ValueError("sampled pair ids contain duplicates")
        session_id = session_id or uuid.uuid4().hex[:12]
        path = self._path(session_id)
        if path.exists():
            raise ValueError(f"session {session_id} already exists")
        event = {
            "event": "created",
            "session_id": session_id,
            "plan": plan.to_dict(),
            "sampled_pair_ids": list(sampled_pair_ids),
            "seed": seed,
            "warnings": list(warnings),
        }
        with self._lock(session_id):
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(json.dumps(event, ensure_ascii=False))
                fh.write("\n")
        return session_id

    def list_ids(self) -> list[str]:
        return sorted(p.stem for p in self.directory.glob("*.jsonl"))

    def load(self, session_id: str) -> ReviewSession:
        path = self._path(session_id)
        if not path.exists():
            raise UnknownSessionError(f"no such session: {session_id}")
        session: Optional[ReviewSession] = None
        seen: set[tuple[str, str]] = set()
        with open(path, "r", encoding="utf-8") as fh:
            for raw in fh:
                if not raw.strip():
                    continue
                event = json.loads(raw)
                if event["event"] == "created":
                    session = ReviewSession(
                        session_id=event["session_id"],
                        plan=SamplePlan.from_dict(event["plan"]),
                        sampled_pair_ids=list(event["sampled_pair_ids"]),
                    )
                elif event["event"] == "label":
                    if session is None:
                        raise ReviewError(f"label before creation in {path}")
                    key = (event["pair_id"], event["reviewer"])
                    if key in seen:  # defensive: duplicates are rejected on write
                        continue
                    seen.add(key)
                    session.labels.append(
                        ReviewLabel(
                            pair_id=event["pair_id"],
                            verdict=event["verdict"],
                            reviewer=event["reviewer"],
                            timestamp=event["timestamp"],
                        )
                    )
        if session is None:
            raise ReviewError(f"session file {path} has no creation event")
        return session

    def append_label(self, session_id: str, label: ReviewLabel) -> ReviewSession:
        """Write one label; one active label per (pair_id, reviewer)."""
        with self._lock(session_id):
            session = self.load(session_id)
            if label.pair_id not in set(session.sampled_pair_ids):
                raise ValueError(f"pair {label.pair_id} is not part of session {session_id}")
            if any(
                existing.pair_id == label.pair_id and existing.reviewer == label.reviewer
                for existing in session.labels
            ):
                raise DuplicateLabelError(
                    f"{label.reviewer} already labeled {label.pair_id}"
                )
            event = {"event": "label", **label.to_dict()}
            with open(self._path(session_id), "a", encoding="utf-8", newline="\n") as fh:
                fh.write(json.dumps(event, ensure_ascii=False))
                fh.write("\n")
            session.labels.append(label)
            return session
