from __future__ import annotations

import json

import pytest
from hypothesis import given, strategies as st

from codebook_forge.corpus import (
    Corpus,
    CorpusError,
    LabelSet,
    Narrative,
    SplitError,
    build_balanced_split,
    build_random_split,
    build_validation_split,
    concat_narrative,
    ingest_corpus,
)


def _line(rec_id, cme="text", le="", **extra):
    rec = {"id": rec_id, "cme": cme, "le": le}
    rec.update(extra)
    return json.dumps(rec)


class TestIngest:
    def test_well_formed_input(self):
        lines = [_line("n1"), _line("n2"), _line("n3")]
        corpus, rejects = ingest_corpus(lines)
        assert len(corpus) == 3
        assert rejects == []

    def test_missing_id_rejected_with_line_number(self):
        lines = [_line("n1"), json.dumps({"cme": "x"}), _line("n3")]
        corpus, rejects = ingest_corpus(lines)
        assert len(corpus) == 2
        assert len(rejects) == 1
        assert rejects[0].line_no == 2

    def test_duplicate_id_rejected(self):
        lines = [_line("n1", cme="a"), _line("n1", cme="b")]
        corpus, rejects = ingest_corpus(lines)
        assert len(corpus) == 1
        assert len(rejects) == 1
        assert "duplicate" in rejects[0].reason

    def test_no_parseable_lines_is_fatal(self):
        with pytest.raises(CorpusError):
            ingest_corpus(["not json", "{broken"])

    def test_empty_texts_rejected(self):
        corpus, rejects = ingest_corpus([_line("n1"), _line("n2", cme="", le="")])
        assert len(corpus) == 1
        assert rejects[0].line_no == 2

    def test_labels_and_meta_parsed(self):
        lines = [_line("n1", labels={"Var": "1.0"}, meta={"year": "2010"})]
        corpus, _ = ingest_corpus(lines)
        narrative = corpus.get("n1")
        assert narrative.labels == {"Var": "1.0"}
        assert narrative.meta == {"year": "2010"}

    def test_canonical_serialization_round_trips(self):
        lines = [_line("n1", labels={"Var": "1.0"}), _line("n2", le="other")]
        corpus, _ = ingest_corpus(lines)
        again, rejects = ingest_corpus(corpus.to_jsonl().splitlines())
        assert rejects == []
        assert again.to_jsonl() == corpus.to_jsonl()


class TestConcat:
    def test_both_sections(self):
        n = Narrative(id="n1", cme_text="A.", le_text="B.")
        assert concat_narrative(n) == "CME Report: A.\n\nLE Report: B."

    def test_empty_section_omitted(self):
        assert concat_narrative(Narrative(id="n1", cme_text="A.")) == "CME Report: A."
        assert concat_narrative(Narrative(id="n2", le_text="B.")) == "LE Report: B."

    def test_both_empty_is_error(self):
        with pytest.raises(ValueError):
            Narrative(id="n1", cme_text="", le_text="")

    @given(
        st.tuples(st.text(min_size=1, max_size=40), st.text(max_size=40)),
        st.tuples(st.text(min_size=1, max_size=40), st.text(max_size=40)),
    )
    def test_injective_on_text_pairs(self, pair_a, pair_b):
        # Section headers make the concatenation invertible.
        if pair_a == pair_b:
            return
        if not (pair_a[0].strip() or pair_a[1].strip()):
            return
        if not (pair_b[0].strip() or pair_b[1].strip()):
            return
        a = concat_narrative(Narrative(id="a", cme_text=pair_a[0], le_text=pair_a[1]))
        b = concat_narrative(Narrative(id="b", cme_text=pair_b[0], le_text=pair_b[1]))
        # Distinct (cme, le) pairs may only collide when a stripped-empty field
        # is dropped; rebuild the effective pair to compare like with like.
        eff_a = (pair_a[0] if pair_a[0].strip() else None, pair_a[1] if pair_a[1].strip() else None)
        eff_b = (pair_b[0] if pair_b[0].strip() else None, pair_b[1] if pair_b[1].strip() else None)
        if eff_a != eff_b:
            assert a != b


def _labeled_corpus(counts: dict[str, int]) -> tuple[Corpus, LabelSet]:
    narratives = []
    labels = {}
    i = 0
    for label, count in counts.items():
        for _ in range(count):
            nid = f"n{i:04d}"
            narratives.append(Narrative(id=nid, cme_text=f"text {i}"))
            labels[nid] = label
            i += 1
    return Corpus(narratives), LabelSet(variable="Var", labels=labels)


class TestBalancedSplit:
    def test_five_hundred_narrative_balanced_split(self):
        corpus, labels = _labeled_corpus({"0.0": 300, "1.0": 260})
        split = build_balanced_split(corpus, labels, per_class=250, seed=3)
        assert len(split.ids) == 500
        histogram = {}
        for nid in split.ids:
            histogram[labels.labels[nid]] = histogram.get(labels.labels[nid], 0) + 1
        assert histogram == {"0.0": 250, "1.0": 250}

    def test_exhaustive_when_classes_have_exactly_per_class(self):
        corpus, labels = _labeled_corpus({"a": 1, "b": 1})
        split = build_balanced_split(corpus, labels, per_class=1, seed=0)
        assert sorted(split.ids) == sorted(corpus.ids())

    def test_insufficient_class_named_in_error(self):
        corpus, labels = _labeled_corpus({"a": 5, "b": 2})
        with pytest.raises(SplitError, match="'b' has 2"):
            build_balanced_split(corpus, labels, per_class=3, seed=0)

    def test_seed_reproducibility(self):
        corpus, labels = _labeled_corpus({"0.0": 40, "1.0": 40})
        for seed in (0, 1, 17, 12345):
            first = build_balanced_split(corpus, labels, per_class=10, seed=seed)
            second = build_balanced_split(corpus, labels, per_class=10, seed=seed)
            assert first.ids == second.ids

    def test_different_seeds_differ(self):
        corpus, labels = _labeled_corpus({"0.0": 200, "1.0": 200})
        a = build_balanced_split(corpus, labels, per_class=50, seed=1)
        b = build_balanced_split(corpus, labels, per_class=50, seed=2)
        assert a.ids != b.ids


class TestValidationSplit:
    def test_exactly_j_per_class(self):
        _, labels = _labeled_corpus({"implicit": 30, "explicit": 25, "none": 90})
        split = build_validation_split(labels, j=20, seed=1)
        assert len(split.ids) == 60
        per_class = {}
        for nid in split.ids:
            per_class[labels.labels[nid]] = per_class.get(labels.labels[nid], 0) + 1
        assert per_class == {"implicit": 20, "explicit": 20, "none": 20}
        assert split.role == "validation"

    def test_minimal_case(self):
        _, labels = _labeled_corpus({"x": 1, "y": 1})
        split = build_validation_split(labels, j=1)
        assert len(split.ids) == 2

    def test_deficit_lists_class_and_count(self):
        _, labels = _labeled_corpus({"x": 5, "y": 1})
        with pytest.raises(SplitError, match="y: 1 < 2"):
            build_validation_split(labels, j=2)


def test_random_split_seeded():
    corpus, _ = _labeled_corpus({"a": 50})
    split = build_random_split(corpus, 10, seed=4)
    assert split.ids == build_random_split(corpus, 10, seed=4).ids
    assert len(set(split.ids)) == 10


def test_split_serialization_round_trip():
    corpus, labels = _labeled_corpus({"a": 4, "b": 4})
    split = build_balanced_split(corpus, labels, per_class=2, seed=7)
    from codebook_forge.corpus import DatasetSplit

    assert DatasetSplit.from_json(split.to_json()) == split
