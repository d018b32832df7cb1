from __future__ import annotations

from collections import Counter

import pytest

from codebook_forge.codebook import apply_update, init_codebook, render_annotation_prompt
from codebook_forge.corpus import concat_narrative
from codebook_forge.gateway import parse_prediction
from codebook_forge.synth import (
    PlantedRule,
    StubLM,
    StubSynthesizer,
    SyntheticCorpusSpec,
    SynthSpecError,
    apply_rules,
    build_cot_cache,
    build_world,
    generate_corpus,
)
from conftest import LEGAL_CLASSES, legal_spec, legal_variable


class TestGenerateCorpus:
    def test_size_and_mix(self):
        spec = legal_spec(size=300, mix=(0.12, 0.12, 0.76))
        corpus, truth = generate_corpus(spec)
        assert len(corpus) == 300
        histogram = Counter(truth.labels.values())
        assert abs(histogram["implicit_interaction"] - 36) <= 2
        assert abs(histogram["explicit_interaction"] - 36) <= 2
        assert abs(histogram["no_interaction"] - 228) <= 2

    def test_same_seed_identical_corpora(self):
        a, truth_a = generate_corpus(legal_spec(seed=5))
        b, truth_b = generate_corpus(legal_spec(seed=5))
        assert a.to_jsonl() == b.to_jsonl()
        assert truth_a.labels == truth_b.labels

    def test_different_seeds_differ(self):
        a, _ = generate_corpus(legal_spec(seed=1))
        b, _ = generate_corpus(legal_spec(seed=2))
        assert a.to_jsonl() != b.to_jsonl()

    def test_size_zero_rejected(self):
        with pytest.raises(SynthSpecError):
            legal_spec(size=0)

    def test_truth_recoverable_from_texts(self):
        spec = legal_spec(size=200)
        corpus, truth = generate_corpus(spec)
        for narrative in corpus:
            recovered = apply_rules(
                concat_narrative(narrative), spec.rules, spec.default_label
            )
            assert recovered == truth.labels[narrative.id]

    def test_trigger_in_distractor_vocabulary_rejected(self):
        with pytest.raises(SynthSpecError, match="collide"):
            SyntheticCorpusSpec(
                size=10,
                classes=LEGAL_CLASSES,
                rules=(PlantedRule.make(["attorney"], "explicit_interaction", 1),
                       PlantedRule.make(["divorce"], "implicit_interaction", 2)),
                distractor_vocabulary=("money", "attorney"),
                class_mix=(0.2, 0.2, 0.6),
                seed=0,
                default_label="no_interaction",
            )

    def test_class_without_rule_rejected(self):
        with pytest.raises(SynthSpecError, match="no generating rule"):
            SyntheticCorpusSpec(
                size=10,
                classes=LEGAL_CLASSES,
                rules=(PlantedRule.make(["attorney"], "explicit_interaction", 1),),
                distractor_vocabulary=("money",),
                class_mix=(0.2, 0.2, 0.6),
                seed=0,
                default_label="no_interaction",
            )

    def test_duplicate_priorities_rejected(self):
        with pytest.raises(SynthSpecError, match="priorities"):
            SyntheticCorpusSpec(
                size=10,
                classes=LEGAL_CLASSES,
                rules=(
                    PlantedRule.make(["attorney"], "explicit_interaction", 1),
                    PlantedRule.make(["divorce"], "implicit_interaction", 1),
                ),
                distractor_vocabulary=("money",),
                class_mix=(0.2, 0.2, 0.6),
                seed=0,
                default_label="no_interaction",
            )

    def test_spec_serialization_round_trip(self):
        spec = legal_spec()
        assert SyntheticCorpusSpec.from_json(spec.to_json()) == spec


def _predict_label(model, codebook, narrative) -> str:
    system, user = render_annotation_prompt(codebook, concat_narrative(narrative))
    raw = model.complete(system, user)
    return parse_prediction(raw, LEGAL_CLASSES).label


def _accuracy(model, codebook, corpus, truth) -> float:
    hits = sum(
        _predict_label(model, codebook, n) == truth.labels[n.id] for n in corpus
    )
    return hits / len(corpus)


class TestStubLM:
    def test_empty_guidelines_gives_majority_prior(self):
        world = build_world(legal_spec(size=200))
        cb = init_codebook(legal_variable())
        majority_share = Counter(world.truth.labels.values())["no_interaction"] / 200
        accuracy = _accuracy(world.annotator, cb, world.corpus, world.truth)
        assert accuracy == pytest.approx(majority_share)

    def test_full_guidelines_give_perfect_accuracy(self):
        world = build_world(legal_spec(size=200))
        bullets = [
            "if the narrative mentions divorce or custody, label implicit_interaction",
            "if the narrative mentions attorney, label explicit_interaction",
        ]
        cb = apply_update(init_codebook(legal_variable()), bullets, 1)
        assert _accuracy(world.annotator, cb, world.corpus, world.truth) == 1.0

    def test_half_guidelines_strictly_between(self):
        world = build_world(legal_spec(size=300))
        cb0 = init_codebook(legal_variable())
        half = apply_update(cb0, ["if the narrative mentions attorney, label explicit_interaction"], 1)
        low = _accuracy(world.annotator, cb0, world.corpus, world.truth)
        mid = _accuracy(world.annotator, half, world.corpus, world.truth)
        assert low < mid < 1.0

    def test_fixed_rules_make_competent_annotator(self):
        world = build_world(legal_spec(size=150), competent=True)
        cb = init_codebook(legal_variable())
        assert _accuracy(world.annotator, cb, world.corpus, world.truth) == 1.0

    def test_reply_uses_single_quoted_format(self):
        world = build_world(legal_spec(size=50))
        narrative = next(iter(world.corpus))
        system, user = render_annotation_prompt(
            init_codebook(legal_variable()), concat_narrative(narrative)
        )
        raw = world.annotator.complete(system, user)
        assert raw.startswith("{'reason':")


class TestStubSynthesizer:
    def _update_prompt(self, bullets, errors):
        from codebook_forge.codebook import render_update_prompt

        cb = apply_update(init_codebook(legal_variable()), bullets, 1)
        return render_update_prompt(cb, errors)

    def test_one_bullet_per_error_preserving_priors(self):
        from codebook_forge.codebook import ErrorExample

        errors = [
            ErrorExample("t1", "no_interaction", "implicit_interaction",
                         "the narrative mentions 'custody' so the label is implicit_interaction", ""),
            ErrorExample("t2", "no_interaction", "explicit_interaction",
                         "the narrative mentions 'attorney' so the label is explicit_interaction", ""),
        ]
        system, user = self._update_prompt(["prior bullet"], errors)
        reply = StubSynthesizer().complete(system, user)
        assert reply.startswith("Guidelines:")
        lines = [l for l in reply.splitlines() if l.startswith("* ")]
        assert lines[0] == "* prior bullet"
        assert len(lines) == 3

    def test_duplicate_rationales_deduplicated(self):
        from codebook_forge.codebook import ErrorExample

        rationale = "the narrative mentions 'custody' so the label is implicit_interaction"
        errors = [
            ErrorExample("t1", "no_interaction", "implicit_interaction", rationale, ""),
            ErrorExample("t2", "no_interaction", "implicit_interaction", rationale, ""),
        ]
        system, user = self._update_prompt([], errors)
        reply = StubSynthesizer().complete(system, user)
        lines = [l for l in reply.splitlines() if l.startswith("* ")]
        assert len(lines) == 1

    def test_unquoted_rationale_falls_back_to_longest_token(self):
        from codebook_forge.codebook import ErrorExample

        errors = [
            ErrorExample("t1", "no_interaction", "implicit_interaction",
                         "clearly a custody dispute", ""),
        ]
        system, user = self._update_prompt([], errors)
        reply = StubSynthesizer().complete(system, user)
        assert "if the narrative mentions" in reply


def test_cot_cache_quotes_trigger_tokens():
    spec = legal_spec(size=100)
    corpus, truth = generate_corpus(spec)
    cache = build_cot_cache(corpus, spec.rules, spec.default_label)
    assert set(cache) == set(corpus.ids())
    for narrative_id, label in truth.labels.items():
        if label != "no_interaction":
            assert "'" in cache[narrative_id]
            assert label in cache[narrative_id]
