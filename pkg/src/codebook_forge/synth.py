"""Offline synthetic world for closed-loop testing.

Real corpora for this domain are restricted and live models are
nondeterministic, so end-to-end correctness rests on a controllable world:
seeded synthetic corpora whose true labels are fully determined by planted
lexical rules, a stub annotation model that literally follows guideline
bullets of the form ``if the narrative mentions X, label Y``, and a stub
synthesizer that turns error feedback into exactly such bullets. Better
guidelines therefore measurably improve the stub, which is the property the
refinement loop's convergence tests require.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import CodebookForgeError
from .corpus import Corpus, LabelSet, Narrative, concat_narrative
from .gateway import format_prediction


class SynthSpecError(CodebookForgeError):
    """The synthetic corpus spec is infeasible or inconsistent."""


_TOKEN_RE = re.compile(r"[a-z0-9']+")


def _tokens(text: str) -> set[str]:
    return set(_TOKEN_RE.findall(text.lower()))


@dataclass(frozen=True)
class PlantedRule:
    """A lexical trigger: any of the tokens forces the rule's label."""

    trigger_tokens: frozenset[str]
    label: str
    priority: int

    @classmethod
    def make(cls, tokens: Sequence[str], label: str, priority: int) -> "PlantedRule":
        return cls(frozenset(t.lower() for t in tokens), label, priority)

    def to_json(self) -> dict:
        return {
            "trigger_tokens": sorted(self.trigger_tokens),
            "label": self.label,
            "priority": self.priority,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PlantedRule":
        return cls.make(obj["trigger_tokens"], obj["label"], obj["priority"])


def apply_rules(
    text: str, rules: Sequence[PlantedRule], default_label: str
) -> str:
    """The true label of a text: highest-priority matching rule, else default."""
    tokens = _tokens(text)
    best: PlantedRule | None = None
    for rule in rules:
        if tokens & rule.trigger_tokens:
            if best is None or rule.priority > best.priority:
                best = rule
    return best.label if best else default_label


# Words used by the narrative templates themselves; trigger and distractor
# vocabularies must stay disjoint from these or truth labels would drift.
_SCAFFOLD_TOKENS = frozenset(
    """v was years old the records mention involvement in last month family
    reported concerns neighbors described issues recently a history of is
    noted report""".split()
)

_DISTRACTOR_TEMPLATES = (
    "Family reported {word} concerns.",
    "Neighbors described {word} issues recently.",
    "A history of {word} is noted in the report.",
)

_TRIGGER_TEMPLATE = "Records mention {word} involvement in the last month."


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Recipe for a seeded corpus with planted, recoverable labels."""

    size: int
    classes: tuple[str, ...]
    rules: tuple[PlantedRule, ...]
    distractor_vocabulary: tuple[str, ...]
    class_mix: tuple[float, ...]
    seed: int
    default_label: str
    variable_name: str = "synthetic_variable"

    def __post_init__(self) -> None:
        if self.size < 1:
            raise SynthSpecError("corpus size must be >= 1")
        if len(self.classes) != len(self.class_mix):
            raise SynthSpecError("class_mix must align with classes")
        if abs(sum(self.class_mix) - 1.0) > 1e-9:
            raise SynthSpecError("class_mix must sum to 1")
        if self.default_label not in self.classes:
            raise SynthSpecError("default_label must be one of the classes")
        priorities = [r.priority for r in self.rules]
        if len(set(priorities)) != len(priorities):
            raise SynthSpecError("planted rules must have distinct priorities")
        rule_labels = {r.label for r in self.rules}
        for cls_label in self.classes:
            if cls_label != self.default_label and cls_label not in rule_labels:
                raise SynthSpecError(f"class {cls_label!r} has no generating rule")
        trigger_tokens = set().union(*(r.trigger_tokens for r in self.rules)) if self.rules else set()
        vocab_tokens = {w.lower() for w in self.distractor_vocabulary}
        clashes = trigger_tokens & (vocab_tokens | _SCAFFOLD_TOKENS)
        if clashes:
            raise SynthSpecError(
                f"trigger tokens collide with distractor/template words: {sorted(clashes)}"
            )
        if vocab_tokens & _SCAFFOLD_TOKENS:
            raise SynthSpecError("distractor vocabulary collides with template words")

    def to_json(self) -> dict:
        return {
            "size": self.size,
            "classes": list(self.classes),
            "rules": [r.to_json() for r in self.rules],
            "distractor_vocabulary": list(self.distractor_vocabulary),
            "class_mix": list(self.class_mix),
            "seed": self.seed,
            "default_label": self.default_label,
            "variable_name": self.variable_name,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticCorpusSpec":
        return cls(
            size=obj["size"],
            classes=tuple(obj["classes"]),
            rules=tuple(PlantedRule.from_json(r) for r in obj["rules"]),
            distractor_vocabulary=tuple(obj["distractor_vocabulary"]),
            class_mix=tuple(obj["class_mix"]),
            seed=obj["seed"],
            default_label=obj["default_label"],
            variable_name=obj.get("variable_name", "synthetic_variable"),
        )

    @classmethod
    def load(cls, path: str) -> "SyntheticCorpusSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def _quota_counts(mix: Sequence[float], size: int) -> list[int]:
    """Largest-remainder allocation of ``size`` items over the mix."""
    raw = [m * size for m in mix]
    counts = [int(x) for x in raw]
    remainders = sorted(
        range(len(mix)), key=lambda i: (raw[i] - counts[i], -i), reverse=True
    )
    for i in range(size - sum(counts)):
        counts[remainders[i % len(mix)]] += 1
    return counts


def generate_corpus(spec: SyntheticCorpusSpec) -> tuple[Corpus, LabelSet]:
    """Build a seeded corpus whose labels the planted rules fully determine."""
    rng = np.random.default_rng([spec.seed, 401])
    counts = _quota_counts(spec.class_mix, spec.size)
    assignment: list[str] = []
    for cls_label, count in zip(spec.classes, counts):
        assignment.extend([cls_label] * count)
    rng.shuffle(assignment)

    rules_by_label: dict[str, list[PlantedRule]] = {}
    for rule in spec.rules:
        rules_by_label.setdefault(rule.label, []).append(rule)

    vocab = list(spec.distractor_vocabulary)
    narratives: list[Narrative] = []
    truth: dict[str, str] = {}
    for idx, cls_label in enumerate(assignment):
        narrative_id = f"syn{idx:05d}"
        age = int(rng.integers(18, 90))
        sentences = [f"V was {age} years old."]
        if cls_label != spec.default_label:
            rules = rules_by_label[cls_label]
            rule = rules[int(rng.integers(0, len(rules)))]
            token = sorted(rule.trigger_tokens)[int(rng.integers(0, len(rule.trigger_tokens)))]
            sentences.append(_TRIGGER_TEMPLATE.format(word=token))
        n_distractors = int(rng.integers(1, 4))
        for _ in range(n_distractors):
            template = _DISTRACTOR_TEMPLATES[int(rng.integers(0, len(_DISTRACTOR_TEMPLATES)))]
            word = vocab[int(rng.integers(0, len(vocab)))]
            sentences.append(template.format(word=word))
        cut = 1 + int(rng.integers(0, len(sentences)))
        cme_text = " ".join(sentences[:cut])
        le_text = " ".join(sentences[cut:])
        narrative = Narrative(
            id=narrative_id,
            cme_text=cme_text,
            le_text=le_text,
            labels={spec.variable_name: cls_label},
        )
        recovered = apply_rules(concat_narrative(narrative), spec.rules, spec.default_label)
        if recovered != cls_label:
            raise SynthSpecError(
                f"generated narrative {narrative_id} recovers label {recovered!r}, "
                f"expected {cls_label!r}; trigger/distractor vocabularies overlap"
            )
        narratives.append(narrative)
        truth[narrative_id] = cls_label

    labels = LabelSet(variable=spec.variable_name, labels=truth, annotator="planted-truth")
    return Corpus(narratives), labels


def build_cot_cache(
    corpus: Corpus, rules: Sequence[PlantedRule], default_label: str
) -> dict[str, str]:
    """Reference rationales for simulated feedback, one per narrative.

    Rationales quote the trigger token so the stub synthesizer can lift it
    into a guideline bullet.
    """
    cache: dict[str, str] = {}
    for narrative in corpus:
        text = concat_narrative(narrative)
        tokens = _tokens(text)
        best: PlantedRule | None = None
        for rule in rules:
            if tokens & rule.trigger_tokens:
                if best is None or rule.priority > best.priority:
                    best = rule
        if best is None:
            cache[narrative.id] = (
                f"nothing here indicates the variable, so the label is {default_label}"
            )
        else:
            token = sorted(best.trigger_tokens & tokens)[0]
            cache[narrative.id] = (
                f"the narrative mentions '{token}' so the label is {best.label}"
            )
    return cache


# --- stub models ----------------------------------------------------------------

_BULLET_RULE_RE = re.compile(
    r"if the narrative mentions (.+?), label ([A-Za-z0-9_.]+)", re.IGNORECASE
)


def _rules_from_guidelines(system_prompt: str) -> list[tuple[frozenset[str], str]]:
    rules = []
    for match in _BULLET_RULE_RE.finditer(system_prompt):
        tokens = frozenset(
            t.strip().lower() for t in match.group(1).split(" or ") if t.strip()
        )
        if tokens:
            rules.append((tokens, match.group(2)))
    return rules


class StubLM:
    """Annotation-model double that literally follows guideline bullets.

    Rules extracted from the rendered guidelines are applied first (in
    bullet order, first match wins), then a fixed rule table, then a weak
    prior that always answers ``default_label``. Deterministic; replies use
    the single-quoted output format so the lenient parse path is exercised.
    """

    supports_parallel = False

    def __init__(
        self,
        default_label: str,
        fixed_rules: Sequence[PlantedRule] = (),
        options: Sequence[str] = (),
    ):
        self.default_label = default_label
        self.fixed_rules = sorted(fixed_rules, key=lambda r: -r.priority)
        self.options = tuple(options)
        self._rule_cache: dict[str, list[tuple[frozenset[str], str]]] = {}
        self.calls = 0

    def _guideline_rules(self, system: str) -> list[tuple[frozenset[str], str]]:
        if system not in self._rule_cache:
            self._rule_cache[system] = _rules_from_guidelines(system)
        return self._rule_cache[system]

    def complete(self, system: str, user: str) -> str:
        self.calls += 1
        tokens = _tokens(user)
        label: str | None = None
        matched_token = ""
        for rule_tokens, rule_label in self._guideline_rules(system):
            hit = tokens & rule_tokens
            if hit:
                label = rule_label
                matched_token = sorted(hit)[0]
                break
        if label is None:
            for rule in self.fixed_rules:
                hit = tokens & rule.trigger_tokens
                if hit:
                    label = rule.label
                    matched_token = sorted(hit)[0]
                    break
        if label is None:
            return format_prediction(
                self.default_label, "no relevant mention was found", ""
            )
        span = ""
        for sentence in re.split(r"(?<=[.!?])\s+", user):
            if matched_token in _tokens(sentence):
                span = sentence.strip()
                break
        reason = f"the narrative mentions '{matched_token}' so the label is {label}"
        return format_prediction(label, reason, span)


class StubSynthesizer:
    """Guideline-synthesis double: one bullet per error item.

    Parses the rendered update prompt — prior bullets plus the reviewed
    reports — and emits the prior bullets followed by
    ``if the narrative mentions <tokens>, label <y>`` per error, where the
    tokens are lifted from the quoted parts of the human reasoning.
    """

    supports_parallel = False

    _CORRECT_RE = re.compile(r"^Correct label: (.+)$", re.MULTILINE)
    _REASON_RE = re.compile(r"^Human reasoning: (.+)$", re.MULTILINE)
    _QUOTED_RE = re.compile(r"'([^']+)'")

    def complete(self, system: str, user: str) -> str:
        prior = [
            line[2:].strip()
            for line in user.splitlines()
            if line.startswith("* ")
        ]
        labels = self._CORRECT_RE.findall(user)
        reasons = self._REASON_RE.findall(user)
        bullets = list(prior)
        seen = set(prior)
        for label, reason in zip(labels, reasons):
            quoted = self._QUOTED_RE.findall(reason)
            if quoted:
                tokens = [t.lower() for t in quoted]
            else:
                words = sorted(_tokens(reason), key=lambda w: (-len(w), w))
                tokens = words[:1]
            if not tokens:
                continue
            bullet = f"if the narrative mentions {' or '.join(tokens)}, label {label.strip()}"
            if bullet not in seen:
                seen.add(bullet)
                bullets.append(bullet)
        return "Guidelines:\n" + "\n".join(f"* {b}" for b in bullets)


@dataclass
class StubWorld:
    """Everything a closed-loop run needs, derived from one spec."""

    spec: SyntheticCorpusSpec
    corpus: Corpus
    truth: LabelSet
    annotator: StubLM
    synthesizer: StubSynthesizer
    cot_cache: dict[str, str] = field(default_factory=dict)


def build_world(spec: SyntheticCorpusSpec, competent: bool = False) -> StubWorld:
    """Generate the corpus and wire up the stub models.

    With ``competent=True`` the stub annotator already knows the planted
    rules (useful as a high-agreement "endpoint" double); by default it
    starts with only the weak prior and must learn from guidelines.
    """
    corpus, truth = generate_corpus(spec)
    annotator = StubLM(
        default_label=spec.default_label,
        fixed_rules=spec.rules if competent else (),
        options=spec.classes,
    )
    return StubWorld(
        spec=spec,
        corpus=corpus,
        truth=truth,
        annotator=annotator,
        synthesizer=StubSynthesizer(),
        cot_cache=build_cot_cache(corpus, spec.rules, spec.default_label),
    )
