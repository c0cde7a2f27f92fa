"""Keyword matching, corpus profiling, and head-coverage statistics."""

from __future__ import annotations

import random
import re
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatialforge.taxonomy import (
    DatasetProfile,
    RelationTaxonomy,
    SpatialRelation,
    TaxonomyError,
    head_coverage,
    match_relations,
    percent_breakdown,
    profile_corpus,
)

from conftest import make_record


def simple_taxonomy(**relations: list) -> RelationTaxonomy:
    return RelationTaxonomy(
        [SpatialRelation(name=name, keywords=tuple(kws)) for name, kws in relations.items()]
    )


class TestMatchRelations:
    def test_empty_text(self):
        tx = simple_taxonomy(on=["on"])
        assert match_relations("", tx) == Counter()

    def test_direct_keyword_hits(self):
        tx = simple_taxonomy(**{"on": ["on"], "left of": ["left of"]})
        hits = match_relations("the cup is on the table, left of the plate", tx)
        assert hits == Counter({"on": 1, "left of": 1})

    def test_case_insensitive_word_boundaries(self):
        tx = simple_taxonomy(on=["on"])
        assert match_relations("ON the mat", tx) == Counter({"on": 1})
        assert match_relations("the ONLY thing", tx) == Counter()
        assert match_relations("carbon monoxide", tx) == Counter()

    def test_longest_match_wins(self):
        tx = simple_taxonomy(front=["front"], **{"in front": ["in front of"]})
        hits = match_relations("a tree in front of the house, at the front", tx)
        assert hits == Counter({"in front": 1, "front": 1})

    def test_non_overlapping(self):
        tx = simple_taxonomy(on=["on", "on top of"], top=["top of"])
        assert match_relations("the hat is on top of the box", tx) == Counter({"on": 1})

    def test_keyword_collision_rejected(self):
        with pytest.raises(TaxonomyError):
            simple_taxonomy(near=["beside"], adjacent=["beside"])

    def test_duplicate_relation_names_rejected(self):
        with pytest.raises(TaxonomyError):
            RelationTaxonomy(
                [SpatialRelation("on", ("on",)), SpatialRelation("on", ("atop",))]
            )

    def test_planted_counts_match_regex_oracle(self):
        # Corpus with hand-planted totals {on: 50, under: 30, facing: 2};
        # the oracle recounts with word-boundary regexes.
        tx = simple_taxonomy(on=["on"], under=["under"], facing=["facing"])
        rng = random.Random(7)
        planted = {"on": 50, "under": 30, "facing": 2}
        slots = [kw for kw, n in planted.items() for _ in range(n)]
        rng.shuffle(slots)
        records = []
        buf = []
        for i, kw in enumerate(slots):
            buf.append(f"the box sits {kw} the shelf near nothing special")
            if len(buf) == 4 or i == len(slots) - 1:
                records.append(make_record(f"r{i}", description=". ".join(buf)))
                buf = []
        profile = profile_corpus(records, tx)
        oracle = {
            name: sum(
                len(re.findall(rf"\b{kw}\b", rec.description.lower()))
                for rec in records
                for kw in tx.relations[idx].keywords
            )
            for idx, name in enumerate(tx.names())
        }
        assert oracle == planted
        assert profile.per_relation_counts == planted

    def test_randomized_corpus_matches_independent_matcher(self):
        # Independent oracle: character-walk tokenizer plus linear
        # longest-match over the keyword list, sharing no code with the
        # production matcher.
        def oracle_tokens(text: str) -> list[str]:
            tokens, current = [], []
            for ch in text.lower() + " ":
                if ch.isalnum() or (ch == "'" and current):
                    current.append(ch)
                else:
                    if current:
                        word = "".join(current).rstrip("'")
                        if word:
                            tokens.append(word)
                    current = []
            return tokens

        def oracle_match(text: str, taxonomy: RelationTaxonomy) -> Counter:
            keyword_seqs = []
            for rel in taxonomy.relations:
                for kw in rel.keywords:
                    keyword_seqs.append((oracle_tokens(kw), rel.name))
            keyword_seqs.sort(key=lambda item: -len(item[0]))
            tokens = oracle_tokens(text)
            counts: Counter = Counter()
            i = 0
            while i < len(tokens):
                for seq, name in keyword_seqs:
                    if tokens[i : i + len(seq)] == seq:
                        counts[name] += 1
                        i += len(seq)
                        break
                else:
                    i += 1
            return counts

        taxonomy = RelationTaxonomy.default()
        vocab = [
            "a", "the", "cat", "dog", "box", "shelf", "wall", "on", "top", "of",
            "in", "front", "left", "right", "to", "under", "over", "between",
            "at", "edge", "corner", "background", "far", "from", "near", "facing",
            "leaning", "against", "middle", "center", "inside", "outside", "it's",
        ]
        rng = random.Random(20240815)
        records = [
            make_record(
                f"r{i:04d}",
                description=" ".join(rng.choice(vocab) for _ in range(rng.randint(4, 30))),
            )
            for i in range(1000)
        ]
        profile = profile_corpus(records, taxonomy)
        oracle_counts: Counter = Counter({name: 0 for name in taxonomy.names()})
        for rec in records:
            oracle_counts.update(oracle_match(rec.description, taxonomy))
        assert profile.per_relation_counts == dict(oracle_counts)

    @settings(max_examples=30, deadline=None)
    @given(copies=st.integers(min_value=2, max_value=5))
    def test_duplicating_records_scales_counts_not_percent(self, copies):
        tx = simple_taxonomy(on=["on"], under=["under"])
        base = [
            make_record("a", description="a cup on the table"),
            make_record("b", description="dust under the bed, a cat on the rug"),
        ]
        p1 = profile_corpus(base, tx)
        scaled_records = [
            make_record(f"{rec.id}_{c}", description=rec.description)
            for c in range(copies)
            for rec in base
        ]
        p2 = profile_corpus(scaled_records, tx)
        for name in tx.names():
            assert p2.per_relation_counts[name] == copies * p1.per_relation_counts[name]
            assert p2.per_relation_percent[name] == pytest.approx(
                p1.per_relation_percent[name], abs=1e-9
            )


class TestPercentBreakdown:
    def test_reference_share_arithmetic(self):
        counts = {"A": 443_800, "B": 30_303_700}
        assert round(percent_breakdown(counts)["A"], 2) == 1.44

    def test_second_reference_share(self):
        counts = {"A": 943_000, "B": 30_747_500 - 943_000}
        assert round(percent_breakdown(counts)["A"], 2) == 3.07

    def test_single_hit_is_total(self):
        tx = simple_taxonomy(on=["on"])
        profile = profile_corpus([make_record("x", description="cat on mat")], tx)
        assert profile.per_relation_percent == {"on": 100.0}
        assert profile.spatial_record_count == 1

    def test_percentages_sum_to_hundred(self):
        counts = {f"rel{i}": (i * 37) % 11 + 1 for i in range(25)}
        assert sum(percent_breakdown(counts).values()) == pytest.approx(100.0, abs=0.01)


class TestHeadCoverage:
    def _profile(self, counts: dict) -> DatasetProfile:
        return DatasetProfile(
            per_relation_counts=counts,
            total_records=1,
            spatial_record_count=1,
            per_relation_percent=percent_breakdown(counts),
        )

    def test_uniform_profile_symmetry(self):
        profile = self._profile({f"r{i}": 10 for i in range(10)})
        assert head_coverage(profile, 0.5) == pytest.approx(50.0)

    def test_hand_computed_skew(self):
        profile = self._profile({"a": 90, "b": 5, "c": 3, "d": 1, "e": 1})
        assert head_coverage(profile, 0.2) == pytest.approx(90.0)

    def test_constructed_head_heavy_fixture(self):
        # 100 relations built so the top 17% hold exactly 90% of the hits.
        counts = {}
        head_total = 900
        for i in range(17):
            counts[f"head{i:02d}"] = head_total // 17 + (1 if i < head_total % 17 else 0)
        tail_total = 100
        for i in range(83):
            counts[f"tail{i:02d}"] = tail_total // 83 + (1 if i < tail_total % 83 else 0)
        assert sum(counts.values()) == 1000
        profile = self._profile(counts)
        assert head_coverage(profile, 0.17) >= 90.0

    def test_full_fraction_is_everything(self):
        profile = self._profile({"a": 3, "b": 2, "c": 1})
        assert head_coverage(profile, 1.0) == pytest.approx(100.0)

    def test_monotone_in_fraction(self):
        profile = self._profile({f"r{i}": (13 * i) % 29 + 1 for i in range(20)})
        values = [head_coverage(profile, f / 20) for f in range(1, 21)]
        assert values == sorted(values)

    def test_no_hits_is_an_error(self):
        profile = self._profile({"a": 0, "b": 0})
        with pytest.raises(TaxonomyError, match="no_relation_hits"):
            head_coverage(profile, 0.5)

    def test_tie_break_is_deterministic(self):
        profile = self._profile({"b": 5, "a": 5, "c": 0})
        # ceil(0.34 * 3) = 2 -> top two by (count desc, name asc) = a, b.
        assert head_coverage(profile, 0.34) == pytest.approx(100.0)


class TestDefaultLexicon:
    def test_loads_and_validates(self):
        tx = RelationTaxonomy.default()
        assert len(tx) >= 20
        granularities = {r.granularity for r in tx.relations}
        assert granularities == {"coarse", "fine"}

    def test_matches_realistic_sentence(self):
        tx = RelationTaxonomy.default()
        hits = match_relations(
            "The lamp stands to the left of the sofa, in front of a window, "
            "with a rug underneath.",
            tx,
        )
        assert hits["left"] == 1
        assert hits["in front"] == 1
        assert hits["under"] == 1
