"""Versioned guideline sets and prompt rendering.

A codebook for a variable is a preamble, a response-options block, and an
ordered list of guideline bullets, each carrying provenance (the iteration
and feedback items that introduced it). Version 0 has no bullets: the model
sees only the variable name and its response options.

Prompt templates are data: the shipped defaults can be overridden from
plain-text files so operators can adjust wording without code changes. A
template is a single UTF-8 text with the system and user sections separated
by a ``---USER---`` line; each named placeholder must appear exactly once.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from typing import Sequence

from . import CodebookForgeError
from .corpus import Variable


class GuidelineParseError(CodebookForgeError):
    """The synthesis reply contained no recoverable guideline bullets."""

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class TemplateError(CodebookForgeError):
    """A prompt template is missing or repeating a required placeholder."""


USER_SECTION_MARKER = "---USER---"

DEFAULT_ANNOTATION_TEMPLATE = """\
Instructions: You are an expert suicide caseworker and your job is to annotate reports with the {variable} variable. Do not read into the text and stick to the definition of the variable strictly. If two reports are provided, use both reports to determine your response but only return one response for both reports with no additional text!
Provide the reasoning for your answer, the span of text that you used to generate your answer and your response using the response options only, and return your answer in the following format: {'reason': 'reasoning', 'span': 'span of text', 'response': 'one of the response options'}

{options}

{guidelines}
---USER---
{narrative}"""

DEFAULT_UPDATE_TEMPLATE = """\
You are an expert suicide caseworker and your job is to curate a set of guidelines that will be used by another model to label suicide reports with the variable: {variable}. You will be shown the original set of guidelines, the report that was used to label the variable, the model's label, the correct human label, the human's reasoning, and the span of text that the human used from the reports to decide their label. You have to return a set of new guidelines using this information which will be used to annotate the variable for future reports. Keep the guidelines concise, and use the human reasoning, span, or other information from the report to update the guidelines; make sure to not lose out on information in the original set of guidelines but try not to have too much repetition. You have to return your answer in the following format with absolutely no additional text!: 'Guidelines: *..., *...'
---USER---
Original guidelines:
{guidelines}

Reviewed reports:
{errors}"""

_ANNOTATION_PLACEHOLDERS = ("{variable}", "{options}", "{guidelines}", "{narrative}")
_UPDATE_PLACEHOLDERS = ("{variable}", "{guidelines}", "{errors}")


def _check_placeholders(template: str, placeholders: Sequence[str]) -> None:
    for ph in placeholders:
        count = template.count(ph)
        if count != 1:
            raise TemplateError(
                f"placeholder {ph} must appear exactly once, found {count}"
            )


@dataclass(frozen=True)
class PromptTemplates:
    annotation_template: str = DEFAULT_ANNOTATION_TEMPLATE
    update_template: str = DEFAULT_UPDATE_TEMPLATE

    def __post_init__(self) -> None:
        _check_placeholders(self.annotation_template, _ANNOTATION_PLACEHOLDERS)
        _check_placeholders(self.update_template, _UPDATE_PLACEHOLDERS)

    @classmethod
    def load(
        cls,
        annotation_path: str | None = None,
        update_path: str | None = None,
    ) -> "PromptTemplates":
        annotation = DEFAULT_ANNOTATION_TEMPLATE
        update = DEFAULT_UPDATE_TEMPLATE
        if annotation_path:
            with open(annotation_path, encoding="utf-8") as fh:
                annotation = fh.read()
        if update_path:
            with open(update_path, encoding="utf-8") as fh:
                update = fh.read()
        return cls(annotation_template=annotation, update_template=update)


@dataclass(frozen=True)
class GuidelineBullet:
    text: str
    origin_iteration: int = 0
    origin_feedback_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("guideline bullet text must be non-empty")

    def to_json(self) -> dict:
        return {
            "text": self.text,
            "origin_iteration": self.origin_iteration,
            "origin_feedback_ids": list(self.origin_feedback_ids),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GuidelineBullet":
        return cls(
            text=obj["text"],
            origin_iteration=obj.get("origin_iteration", 0),
            origin_feedback_ids=tuple(obj.get("origin_feedback_ids", [])),
        )


@dataclass(frozen=True)
class Codebook:
    """One version of the guideline set for a variable.

    ``preamble`` keeps the {options} and {guidelines} slots unresolved so a
    rendered prompt always reflects the current bullets.
    """

    variable: str
    version: int
    preamble: str
    response_options_block: str
    bullets: tuple[GuidelineBullet, ...] = ()
    response_options: tuple[str, ...] = ()

    def bullet_texts(self) -> list[str]:
        return [b.text for b in self.bullets]

    def to_json(self) -> dict:
        return {
            "variable": self.variable,
            "version": self.version,
            "preamble": self.preamble,
            "options": self.response_options_block,
            "response_options": list(self.response_options),
            "bullets": [b.to_json() for b in self.bullets],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Codebook":
        return cls(
            variable=obj["variable"],
            version=obj["version"],
            preamble=obj["preamble"],
            response_options_block=obj["options"],
            bullets=tuple(GuidelineBullet.from_json(b) for b in obj.get("bullets", [])),
            response_options=tuple(obj.get("response_options", [])),
        )


def render_options_block(variable: Variable) -> str:
    """Options with their definitions when reference text exists, bare names otherwise."""
    if variable.reference_codebook_text:
        return "Classes:\n\n" + variable.reference_codebook_text.strip()
    return "Response options: " + ", ".join(variable.response_options)


def init_codebook(variable: Variable, templates: PromptTemplates | None = None) -> Codebook:
    """The version-0 codebook: variable name and response options, no bullets."""
    templates = templates or PromptTemplates()
    system_part = templates.annotation_template.split(USER_SECTION_MARKER)[0]
    preamble = system_part.replace("{variable}", variable.name).rstrip("\n")
    return Codebook(
        variable=variable.name,
        version=0,
        preamble=preamble,
        response_options_block=render_options_block(variable),
        bullets=(),
        response_options=tuple(variable.response_options),
    )


def _guidelines_section(bullets: Sequence[GuidelineBullet]) -> str:
    if not bullets:
        return ""
    return "Guidelines:\n" + "\n".join(f"* {b.text}" for b in bullets)


def render_annotation_prompt(cb: Codebook, narrative_text: str) -> tuple[str, str]:
    """Render the (system, user) annotation prompt for one narrative.

    Byte-deterministic; the Guidelines section is omitted entirely when the
    codebook has no bullets.
    """
    system = cb.preamble.replace("{options}", cb.response_options_block)
    system = system.replace("{guidelines}", _guidelines_section(cb.bullets))
    system = re.sub(r"\n{3,}", "\n\n", system).strip("\n")
    return system, narrative_text


@dataclass(frozen=True)
class ErrorExample:
    """One reviewed prediction rendered into the guideline-update prompt."""

    narrative_text: str
    model_label: str
    correct_label: str
    rationale: str
    span: str = ""


def render_error_block(errors: Sequence[ErrorExample]) -> str:
    blocks = []
    for err in errors:
        blocks.append(
            "Report:\n"
            f"{err.narrative_text}\n"
            f"Model label: {err.model_label}\n"
            f"Correct label: {err.correct_label}\n"
            f"Human reasoning: {err.rationale}\n"
            f"Span: {err.span}"
        )
    return "\n---\n".join(blocks)


def render_update_prompt(
    cb: Codebook,
    errors: Sequence[ErrorExample],
    templates: PromptTemplates | None = None,
) -> tuple[str, str]:
    """Render the (system, user) guideline-update prompt from error items."""
    if not errors:
        raise ValueError("guideline update rendered with no error items")
    templates = templates or PromptTemplates()
    parts = templates.update_template.split(USER_SECTION_MARKER)
    if len(parts) != 2:
        raise TemplateError("update template must contain one ---USER--- marker")
    system_part, user_part = parts
    guidelines = _guidelines_section(cb.bullets) or "(none yet)"
    system = system_part.replace("{variable}", cb.variable).strip("\n")
    user = user_part.replace("{guidelines}", guidelines)
    user = user.replace("{errors}", render_error_block(errors)).strip("\n")
    return system, user


_GUIDELINES_PREFIX_RE = re.compile(r"^\s*guidelines\s*:\s*", re.IGNORECASE)
_DASH_LINE_RE = re.compile(r"^\s*-\s+")


def parse_guideline_list(text: str) -> list[str]:
    """Extract bullet texts from a synthesis reply.

    Strips an optional ``Guidelines:`` prefix, splits on ``*`` markers
    (``-`` and bare newline bullets are also accepted), trims whitespace and
    trailing commas, and drops empty or unrecognized-marker items.
    """
    stripped = _GUIDELINES_PREFIX_RE.sub("", text.strip())
    if "*" in stripped:
        pieces = stripped.split("*")[1:]  # text before the first marker is preamble
    elif any(_DASH_LINE_RE.match(line) for line in stripped.splitlines()):
        pieces = [
            _DASH_LINE_RE.sub("", line)
            for line in stripped.splitlines()
            if _DASH_LINE_RE.match(line)
        ]
    else:
        pieces = stripped.splitlines()
    bullets = []
    for piece in pieces:
        item = piece.strip().rstrip(",").strip()
        if not item or item.startswith("•"):
            continue
        bullets.append(item)
    if not bullets:
        raise GuidelineParseError("no guideline bullets recovered from reply", raw=text)
    return bullets


def apply_update(
    cb: Codebook,
    new_bullets: Sequence[str],
    iteration: int,
    feedback_ids: Sequence[str] = (),
) -> Codebook:
    """Append-style update: deduplicated union preserving order, version + 1.

    Provenance is attached only to bullets not already present.
    """
    existing = {b.text for b in cb.bullets}
    added = []
    for text in new_bullets:
        if text not in existing:
            existing.add(text)
            added.append(
                GuidelineBullet(
                    text=text,
                    origin_iteration=iteration,
                    origin_feedback_ids=tuple(feedback_ids),
                )
            )
    return replace(cb, version=cb.version + 1, bullets=cb.bullets + tuple(added))


def replace_update(
    cb: Codebook,
    full_bullets: Sequence[str],
    iteration: int,
    feedback_ids: Sequence[str] = (),
) -> Codebook:
    """Rewrite-style update: the reply is the complete new bullet list.

    Bullets that survive from the previous version keep their provenance;
    genuinely new ones are attributed to this iteration.
    """
    previous = {b.text: b for b in cb.bullets}
    seen: set[str] = set()
    bullets: list[GuidelineBullet] = []
    for text in full_bullets:
        if text in seen:
            continue
        seen.add(text)
        if text in previous:
            bullets.append(previous[text])
        else:
            bullets.append(
                GuidelineBullet(
                    text=text,
                    origin_iteration=iteration,
                    origin_feedback_ids=tuple(feedback_ids),
                )
            )
    return replace(cb, version=cb.version + 1, bullets=tuple(bullets))


def diff(a: Codebook, b: Codebook) -> tuple[list[str], list[str]]:
    """Order-preserving set difference of bullet texts: (added, removed)."""
    a_texts = set(a.bullet_texts())
    b_texts = set(b.bullet_texts())
    added = [t for t in b.bullet_texts() if t not in a_texts]
    removed = [t for t in a.bullet_texts() if t not in b_texts]
    return added, removed


def dump_codebook(cb: Codebook) -> str:
    return json.dumps(cb.to_json(), sort_keys=True, ensure_ascii=False, indent=2)


def load_codebook(path: str) -> Codebook:
    with open(path, encoding="utf-8") as fh:
        return Codebook.from_json(json.load(fh))
