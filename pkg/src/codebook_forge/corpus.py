"""Corpus ingestion, narratives, reference labels, and evaluation splits.

A corpus is a line-delimited UTF-8 file, one JSON record per line:

    {"id": "...", "cme": "...", "le": "...", "labels": {"VarName": "1.0"}, "meta": {...}}

``labels`` and ``meta`` are optional. Corpora are immutable after ingestion
and safe for concurrent reads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import CodebookForgeError

CME_HEADER = "CME Report: "
LE_HEADER = "LE Report: "


class CorpusError(CodebookForgeError):
    """Fatal corpus-level failure (unreadable source, empty ingest, bad split)."""


class SplitError(CodebookForgeError):
    """A requested split cannot be built from the available labels."""


@dataclass(frozen=True)
class Narrative:
    """One case record: two free-text narrative fields plus metadata.

    At least one of ``cme_text`` / ``le_text`` is non-empty; ``labels`` holds
    optional reference labels keyed by variable name.
    """

    id: str
    cme_text: str = ""
    le_text: str = ""
    meta: dict[str, str] = field(default_factory=dict)
    labels: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("narrative id must be non-empty")
        if not self.cme_text.strip() and not self.le_text.strip():
            raise ValueError(f"narrative {self.id!r}: both narrative fields are empty")


@dataclass(frozen=True)
class Variable:
    """A structured variable: name, kind, and its ordered response options."""

    name: str
    kind: str  # "binary" | "multiclass"
    response_options: tuple[str, ...]
    reference_codebook_text: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("binary", "multiclass"):
            raise ValueError(f"unknown variable kind {self.kind!r}")
        if len(self.response_options) < 2:
            raise ValueError("a variable needs at least 2 response options")
        if len(set(self.response_options)) != len(self.response_options):
            raise ValueError("response options must be distinct")

    @classmethod
    def from_json(cls, obj: dict) -> "Variable":
        return cls(
            name=obj["name"],
            kind=obj.get("kind", "binary"),
            response_options=tuple(obj["response_options"]),
            reference_codebook_text=obj.get("reference_codebook_text"),
        )

    def to_json(self) -> dict:
        out: dict = {
            "name": self.name,
            "kind": self.kind,
            "response_options": list(self.response_options),
        }
        if self.reference_codebook_text is not None:
            out["reference_codebook_text"] = self.reference_codebook_text
        return out


@dataclass
class LabelSet:
    """Labels for one variable from one annotator (human or model)."""

    variable: str
    labels: dict[str, str]
    annotator: str = "reference"
    rationale: dict[str, str] = field(default_factory=dict)

    def validate_against(self, variable: Variable) -> None:
        bad = {v for v in self.labels.values() if v not in variable.response_options}
        if bad:
            raise ValueError(
                f"labels outside {variable.name} response options: {sorted(bad)}"
            )

    def to_json(self) -> dict:
        out: dict = {
            "variable": self.variable,
            "annotator": self.annotator,
            "labels": dict(self.labels),
        }
        if self.rationale:
            out["rationale"] = dict(self.rationale)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "LabelSet":
        return cls(
            variable=obj["variable"],
            labels=dict(obj["labels"]),
            annotator=obj.get("annotator", "reference"),
            rationale=dict(obj.get("rationale", {})),
        )


@dataclass(frozen=True)
class DatasetSplit:
    """An ordered subset of corpus ids with the seed that produced it."""

    role: str  # full | balanced_eval | random_eval | validation | guide
    ids: tuple[str, ...]
    seed: int

    def __post_init__(self) -> None:
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("split contains duplicate ids")

    def to_json(self) -> dict:
        return {"role": self.role, "seed": self.seed, "ids": list(self.ids)}

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetSplit":
        return cls(role=obj["role"], ids=tuple(obj["ids"]), seed=obj["seed"])


@dataclass(frozen=True)
class RejectedLine:
    line_no: int
    reason: str


class Corpus:
    """Immutable, ordered collection of narratives keyed by id."""

    def __init__(self, narratives: Iterable[Narrative]):
        self._by_id: dict[str, Narrative] = {}
        for n in narratives:
            if n.id in self._by_id:
                raise CorpusError(f"duplicate narrative id {n.id!r}")
            self._by_id[n.id] = n

    def __len__(self) -> int:
        return len(self._by_id)

    def __contains__(self, narrative_id: str) -> bool:
        return narrative_id in self._by_id

    def __iter__(self) -> Iterator[Narrative]:
        return iter(self._by_id.values())

    def ids(self) -> list[str]:
        return list(self._by_id)

    def get(self, narrative_id: str) -> Narrative:
        try:
            return self._by_id[narrative_id]
        except KeyError:
            raise KeyError(f"unknown narrative id {narrative_id!r}") from None

    def reference_labels(self, variable: str, annotator: str = "reference") -> LabelSet:
        labels = {n.id: n.labels[variable] for n in self if variable in n.labels}
        return LabelSet(variable=variable, labels=labels, annotator=annotator)

    def to_jsonl(self) -> str:
        """Canonical line serialization, also used for content digests."""
        lines = []
        for n in self:
            rec: dict = {"id": n.id, "cme": n.cme_text, "le": n.le_text}
            if n.labels:
                rec["labels"] = dict(sorted(n.labels.items()))
            if n.meta:
                rec["meta"] = dict(sorted(n.meta.items()))
            lines.append(json.dumps(rec, sort_keys=True, ensure_ascii=False))
        return "\n".join(lines) + ("\n" if lines else "")


def _parse_record(obj: dict) -> Narrative:
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    rec_id = obj.get("id")
    if not rec_id or not isinstance(rec_id, str):
        raise ValueError("missing or invalid 'id'")
    labels = obj.get("labels") or {}
    meta = obj.get("meta") or {}
    if not isinstance(labels, dict) or not isinstance(meta, dict):
        raise ValueError("'labels'/'meta' must be objects")
    return Narrative(
        id=rec_id,
        cme_text=str(obj.get("cme", "") or ""),
        le_text=str(obj.get("le", "") or ""),
        meta={str(k): str(v) for k, v in meta.items()},
        labels={str(k): str(v) for k, v in labels.items()},
    )


def ingest_corpus(lines: Iterable[str]) -> tuple[Corpus, list[RejectedLine]]:
    """Parse a line-delimited record stream into a corpus.

    Invalid records are rejected individually with their 1-based line number;
    a stream with no parseable record at all is a fatal `CorpusError`.
    """
    narratives: dict[str, Narrative] = {}
    rejects: list[RejectedLine] = []
    saw_line = False
    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        saw_line = True
        try:
            obj = json.loads(line)
            narrative = _parse_record(obj)
        except (json.JSONDecodeError, ValueError) as exc:
            rejects.append(RejectedLine(line_no, str(exc)))
            continue
        if narrative.id in narratives:
            rejects.append(RejectedLine(line_no, f"duplicate id {narrative.id!r}"))
            continue
        narratives[narrative.id] = narrative
    if not saw_line or not narratives:
        raise CorpusError("no parseable records in corpus source")
    return Corpus(narratives.values()), rejects


def load_corpus(path: str) -> tuple[Corpus, list[RejectedLine]]:
    with open(path, encoding="utf-8") as fh:
        return ingest_corpus(fh)


def concat_narrative(narrative: Narrative) -> str:
    """Join the two report fields under their section headers.

    An empty field's section is omitted entirely; both empty is an error
    (excluded by the Narrative invariant, but guarded for raw inputs).
    """
    parts = []
    if narrative.cme_text.strip():
        parts.append(CME_HEADER + narrative.cme_text)
    if narrative.le_text.strip():
        parts.append(LE_HEADER + narrative.le_text)
    if not parts:
        raise CorpusError(f"narrative {narrative.id!r} has no text in either field")
    return "\n\n".join(parts)


def _group_by_label(labels: LabelSet) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for narrative_id in sorted(labels.labels):
        groups.setdefault(labels.labels[narrative_id], []).append(narrative_id)
    return groups


def build_balanced_split(
    corpus: Corpus, labels: LabelSet, per_class: int, seed: int
) -> DatasetSplit:
    """Sample ``per_class`` ids per label class, without replacement.

    Reproducible by seed; classes are filled in sorted-label order.
    """
    if per_class < 1:
        raise SplitError("per_class must be >= 1")
    groups = _group_by_label(labels)
    for label, ids in sorted(groups.items()):
        present = [i for i in ids if i in corpus]
        if len(present) < per_class:
            raise SplitError(
                f"class {label!r} has {len(present)} labeled narratives < {per_class}"
            )
    rng = np.random.default_rng([seed, 17])
    chosen: list[str] = []
    for label in sorted(groups):
        ids = [i for i in groups[label] if i in corpus]
        picked = rng.permutation(len(ids))[:per_class]
        chosen.extend(ids[j] for j in sorted(picked))
    return DatasetSplit(role="balanced_eval", ids=tuple(chosen), seed=seed)


def build_validation_split(labels: LabelSet, j: int, seed: int = 0) -> DatasetSplit:
    """Build the held-out validation split: exactly ``j`` ids per class.

    Takes j per class after a seeded shuffle (chosen ids listed
    lowest-id-first within each class) so runs are byte-reproducible.
    """
    if j < 1:
        raise SplitError("j must be >= 1")
    groups = _group_by_label(labels)
    deficits = {
        label: len(ids) for label, ids in sorted(groups.items()) if len(ids) < j
    }
    if deficits:
        detail = ", ".join(f"{label}: {count} < {j}" for label, count in deficits.items())
        raise SplitError(f"validation split deficit ({detail})")
    rng = np.random.default_rng([seed, 23])
    chosen: list[str] = []
    for label in sorted(groups):
        ids = groups[label]
        picked = rng.permutation(len(ids))[:j]
        chosen.extend(sorted(ids[k] for k in picked))
    return DatasetSplit(role="validation", ids=tuple(chosen), seed=seed)


def build_random_split(corpus: Corpus, size: int, seed: int) -> DatasetSplit:
    """Seeded uniform sample of ``size`` ids, without replacement."""
    all_ids = sorted(corpus.ids())
    if size > len(all_ids):
        raise SplitError(f"requested {size} ids from a corpus of {len(all_ids)}")
    rng = np.random.default_rng([seed, 29])
    picked = rng.permutation(len(all_ids))[:size]
    return DatasetSplit(
        role="random_eval", ids=tuple(all_ids[k] for k in picked), seed=seed
    )
