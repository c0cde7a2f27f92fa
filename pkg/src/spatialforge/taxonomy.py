"""Spatial-relation lexicon plus corpus frequency profiling.

Keyword matching is case-insensitive, on word boundaries, non-overlapping,
longest match first, so "in front of" never also counts "front".
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

from .corpus import CaptionRecord

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z0-9]+)*")

GRANULARITIES = ("coarse", "fine")


class TaxonomyError(Exception):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class SpatialRelation:
    name: str
    keywords: tuple[str, ...]
    granularity: str = "coarse"

    def __post_init__(self):
        if not self.keywords:
            raise TaxonomyError(f"relation {self.name!r} has no keywords")
        if self.granularity not in GRANULARITIES:
            raise TaxonomyError(f"relation {self.name!r}: bad granularity {self.granularity!r}")


class RelationTaxonomy:
    """Validated, ordered relation list with a precompiled phrase index."""

    def __init__(self, relations: Sequence[SpatialRelation]):
        names = [r.name for r in relations]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise TaxonomyError(f"duplicate relation names: {dupes}")
        phrase_owner: dict[tuple[str, ...], str] = {}
        for rel in relations:
            for kw in rel.keywords:
                toks = tuple(tokenize(kw))
                if not toks:
                    raise TaxonomyError(f"relation {rel.name!r}: unmatchable keyword {kw!r}")
                owner = phrase_owner.get(toks)
                if owner is not None and owner != rel.name:
                    raise TaxonomyError(
                        f"keyword {kw!r} appears under both {owner!r} and {rel.name!r}"
                    )
                phrase_owner[toks] = rel.name
        self.relations = list(relations)
        self._phrases = phrase_owner
        # First-token index: token -> phrase lengths to try, longest first.
        starts: dict[str, set[int]] = {}
        for toks in phrase_owner:
            starts.setdefault(toks[0], set()).add(len(toks))
        self._starts = {tok: tuple(sorted(lens, reverse=True)) for tok, lens in starts.items()}

    def __len__(self) -> int:
        return len(self.relations)

    def names(self) -> list[str]:
        return [r.name for r in self.relations]

    @classmethod
    def from_json_obj(cls, obj: dict) -> "RelationTaxonomy":
        rels = [
            SpatialRelation(
                name=r["name"],
                keywords=tuple(r["keywords"]),
                granularity=r.get("granularity", "coarse"),
            )
            for r in obj["relations"]
        ]
        return cls(rels)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RelationTaxonomy":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_obj(json.load(fh))

    @classmethod
    def default(cls) -> "RelationTaxonomy":
        data = resources.files("spatialforge.assets").joinpath("taxonomy_default.json")
        return cls.from_json_obj(json.loads(data.read_text(encoding="utf-8")))


@dataclass
class DatasetProfile:
    per_relation_counts: dict[str, int]
    total_records: int
    spatial_record_count: int
    per_relation_percent: dict[str, float]

    @property
    def total_hits(self) -> int:
        return sum(self.per_relation_counts.values())

    def to_dict(self) -> dict:
        by_share = sorted(self.per_relation_counts, key=lambda n: (-self.per_relation_counts[n], n))
        return {
            "total_records": self.total_records,
            "spatial_record_count": self.spatial_record_count,
            "total_hits": self.total_hits,
            "relations": [
                {
                    "name": name,
                    "count": self.per_relation_counts[name],
                    "percent": round(self.per_relation_percent[name], 2),
                }
                for name in by_share
            ],
        }


def match_relations(text: str, taxonomy: RelationTaxonomy) -> Counter:
    """Count non-overlapping keyword hits per relation name."""
    tokens = tokenize(text)
    counts: Counter = Counter()
    starts = taxonomy._starts
    phrases = taxonomy._phrases
    n = len(tokens)
    i = 0
    while i < n:
        lengths = starts.get(tokens[i])
        if lengths is None:
            i += 1
            continue
        for length in lengths:
            if i + length > n:
                continue
            rel = phrases.get(tuple(tokens[i : i + length]))
            if rel is not None:
                counts[rel] += 1
                i += length
                break
        else:
            i += 1
    return counts


def percent_breakdown(counts: Mapping[str, float]) -> dict[str, float]:
    """Share of total per entry, in percent; zeros when there are no hits."""
    total = sum(counts.values())
    if total <= 0:
        return {name: 0.0 for name in counts}
    return {name: 100.0 * value / total for name, value in counts.items()}


def profile_corpus(
    records: Iterable[CaptionRecord], taxonomy: RelationTaxonomy
) -> DatasetProfile:
    counts: Counter = Counter({name: 0 for name in taxonomy.names()})
    total_records = 0
    spatial_records = 0
    for rec in records:
        total_records += 1
        hits = match_relations(rec.description, taxonomy)
        if hits:
            spatial_records += 1
            counts.update(hits)
    plain = dict(counts)
    return DatasetProfile(
        per_relation_counts=plain,
        total_records=total_records,
        spatial_record_count=spatial_records,
        per_relation_percent=percent_breakdown(plain),
    )


def head_coverage(profile: DatasetProfile, top_fraction: float) -> float:
    """Percent of all hits held by the top ceil(fraction * relations) relations.

    Ordering is count-descending with name-ascending tie-break, so reports
    are deterministic.
    """
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError(f"top_fraction must be in (0, 1], got {top_fraction}")
    total = profile.total_hits
    if total <= 0:
        raise TaxonomyError("no_relation_hits")
    names = sorted(
        profile.per_relation_counts,
        key=lambda n: (-profile.per_relation_counts[n], n),
    )
    k = math.ceil(top_fraction * len(names))
    head = sum(profile.per_relation_counts[n] for n in names[:k])
    return 100.0 * head / total
