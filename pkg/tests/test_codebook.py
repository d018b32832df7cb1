from __future__ import annotations

from pathlib import Path

import pytest

from codebook_forge.codebook import (
    Codebook,
    ErrorExample,
    GuidelineParseError,
    PromptTemplates,
    TemplateError,
    apply_update,
    diff,
    init_codebook,
    parse_guideline_list,
    render_annotation_prompt,
    render_update_prompt,
    replace_update,
)
from codebook_forge.corpus import Variable

FIXTURES = Path(__file__).parent / "fixtures"

LEGAL_DEFS = """Label: no_interaction
* Definition: It is not implied or explicitly stated that V had interactions with a lawyer.

Label: implicit_interaction
* Definition: V had an implicit interaction with a lawyer where it is implied that V had an interaction with a lawyer.

Label: explicit_interaction
* Definition: There are explicit mentions of V interacting with a lawyer or attorney."""


def legal_variable_with_defs() -> Variable:
    return Variable(
        name="legal_interaction",
        kind="multiclass",
        response_options=("implicit_interaction", "explicit_interaction", "no_interaction"),
        reference_codebook_text=LEGAL_DEFS,
    )


class TestInitCodebook:
    def test_three_class_variable_lists_definitions(self):
        cb = init_codebook(legal_variable_with_defs())
        assert cb.version == 0
        assert cb.bullets == ()
        assert "Label: no_interaction" in cb.response_options_block
        assert "Definition:" in cb.response_options_block

    def test_binary_without_reference_text_lists_bare_options(self):
        var = Variable(name="DepressedMood", kind="binary", response_options=("0.0", "1.0"))
        cb = init_codebook(var)
        assert cb.response_options_block == "Response options: 0.0, 1.0"

    def test_init_is_pure(self):
        var = legal_variable_with_defs()
        a, _ = render_annotation_prompt(init_codebook(var), "n")
        b, _ = render_annotation_prompt(init_codebook(var), "n")
        assert a == b


class TestRenderAnnotationPrompt:
    def test_version_zero_has_no_guidelines_section(self):
        system, user = render_annotation_prompt(init_codebook(legal_variable_with_defs()), "text")
        assert "Guidelines:" not in system
        assert user == "text"

    def test_two_bullets_render_two_star_lines(self):
        cb = apply_update(init_codebook(legal_variable_with_defs()), ["A rule.", "B rule."], 1)
        system, _ = render_annotation_prompt(cb, "text")
        star_lines = [line for line in system.splitlines() if line.startswith("* ")]
        # the options block contributes its own definition bullets
        assert "* A rule." in star_lines
        assert "* B rule." in star_lines
        assert system.count("Guidelines:") == 1

    def test_golden_file(self):
        system, _ = render_annotation_prompt(init_codebook(legal_variable_with_defs()), "x")
        expected = (FIXTURES / "annotation_prompt_legal.txt").read_text(encoding="utf-8")
        assert system == expected

    def test_empty_update_changes_nothing_rendered(self):
        cb = init_codebook(legal_variable_with_defs())
        updated = apply_update(cb, [], 1)
        assert updated.version == cb.version + 1
        assert render_annotation_prompt(updated, "n") == render_annotation_prompt(cb, "n")


class TestRenderUpdatePrompt:
    def test_errors_rendered_with_labels_and_reasoning(self):
        cb = apply_update(init_codebook(legal_variable_with_defs()), ["Old rule."], 1)
        errors = [
            ErrorExample(
                narrative_text="CME Report: V was 50.",
                model_label="no_interaction",
                correct_label="implicit_interaction",
                rationale="the narrative mentions 'custody' so the label is implicit_interaction",
                span="V was 50.",
            )
        ]
        system, user = render_update_prompt(cb, errors)
        assert "legal_interaction" in system
        assert "* Old rule." in user
        assert "Correct label: implicit_interaction" in user
        assert "Human reasoning: the narrative mentions 'custody'" in user

    def test_no_errors_rejected(self):
        cb = init_codebook(legal_variable_with_defs())
        with pytest.raises(ValueError):
            render_update_prompt(cb, [])


class TestParseGuidelineList:
    def test_star_bullets_with_trailing_commas(self):
        assert parse_guideline_list("Guidelines: * A, * B") == ["A", "B"]

    def test_unrecognized_marker_skipped(self):
        assert parse_guideline_list("• not a star bullet\n* C") == ["C"]

    def test_newline_bullets(self):
        assert parse_guideline_list("Guidelines:\nfirst rule\nsecond rule") == [
            "first rule",
            "second rule",
        ]

    def test_dash_bullets(self):
        assert parse_guideline_list("Guidelines:\n- first\n- second") == ["first", "second"]

    def test_preamble_before_first_star_dropped(self):
        assert parse_guideline_list("Sure, here they are: * keep this") == ["keep this"]

    def test_empty_reply_is_parse_error(self):
        with pytest.raises(GuidelineParseError):
            parse_guideline_list("Guidelines: ")

    def test_long_reply_bullet_count(self):
        fixture = (FIXTURES / "synthesis_reply_26_bullets.txt").read_text(encoding="utf-8")
        bullets = parse_guideline_list(fixture)
        assert len(bullets) == 26

    def test_round_trip_of_rendered_bullets(self):
        bullets = ["First rule applies.", "Second rule, with a comma.", "Third."]
        rendered = "Guidelines: " + " ".join(f"* {b}" for b in bullets)
        assert parse_guideline_list(rendered) == bullets


class TestUpdates:
    def _base(self) -> Codebook:
        return init_codebook(legal_variable_with_defs())

    def test_append_adds_new_bullet(self):
        cb = apply_update(self._base(), ["A"], 1)
        updated = apply_update(cb, ["X"], 2, ["fb-1"])
        assert updated.bullet_texts() == ["A", "X"]
        assert updated.version == 2

    def test_append_dedups_exact_strings(self):
        cb = apply_update(self._base(), ["A"], 1)
        updated = apply_update(cb, ["A"], 2, ["fb-1"])
        assert updated.bullet_texts() == ["A"]
        assert updated.version == 2
        assert all(b.origin_iteration <= updated.version for b in updated.bullets)

    def test_append_partial_duplicates(self):
        cb = apply_update(self._base(), ["A"], 1, ["fb-0"])
        updated = apply_update(cb, ["A", "B", "C"], 2, ["fb-1"])
        new_rows = [b for b in updated.bullets if b.origin_iteration == 2]
        assert [b.text for b in new_rows] == ["B", "C"]

    def test_replace_rewrites_and_keeps_provenance(self):
        cb = apply_update(self._base(), ["A", "B"], 1, ["fb-0"])
        updated = replace_update(cb, ["B", "C"], 2, ["fb-1"])
        assert updated.bullet_texts() == ["B", "C"]
        by_text = {b.text: b for b in updated.bullets}
        assert by_text["B"].origin_iteration == 1
        assert by_text["C"].origin_iteration == 2
        assert by_text["C"].origin_feedback_ids == ("fb-1",)

    def test_provenance_never_exceeds_version(self):
        cb = self._base()
        for i in range(1, 6):
            cb = apply_update(cb, [f"rule {i}"], cb.version + 1, [f"fb-{i}"])
        assert all(b.origin_iteration <= cb.version for b in cb.bullets)


class TestDiff:
    def test_added_only(self):
        v0 = init_codebook(legal_variable_with_defs())
        v1 = apply_update(v0, ["A"], 1)
        assert diff(v0, v1) == (["A"], [])

    def test_identity(self):
        cb = apply_update(init_codebook(legal_variable_with_defs()), ["A"], 1)
        assert diff(cb, cb) == ([], [])

    def test_asymmetry(self):
        v0 = init_codebook(legal_variable_with_defs())
        v2 = apply_update(v0, ["A", "B"], 1)
        v1 = apply_update(v0, ["A"], 1)
        assert diff(v2, v1) == ([], ["B"])


class TestTemplates:
    def test_default_templates_validate(self):
        PromptTemplates()

    def test_missing_placeholder_rejected(self):
        with pytest.raises(TemplateError):
            PromptTemplates(annotation_template="no placeholders here ---USER--- {narrative}")

    def test_duplicated_placeholder_rejected(self):
        bad = PromptTemplates().annotation_template.replace(
            "{narrative}", "{narrative} {narrative}"
        )
        with pytest.raises(TemplateError):
            PromptTemplates(annotation_template=bad)

    def test_load_from_files(self, tmp_path):
        path = tmp_path / "annotation.txt"
        path.write_text(
            "Var {variable}\n{options}\n{guidelines}\n---USER---\n{narrative}",
            encoding="utf-8",
        )
        templates = PromptTemplates.load(annotation_path=str(path))
        assert templates.annotation_template.startswith("Var {variable}")

    def test_codebook_serialization_round_trip(self):
        cb = apply_update(init_codebook(legal_variable_with_defs()), ["A rule."], 1, ["fb"])
        assert Codebook.from_json(cb.to_json()) == cb
