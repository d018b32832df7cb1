"""The iterative codebook-refinement loop.

Each iteration samples a batch from the pool (excluding everything already
validated and the held-out validation split), predicts each narrative with
the current codebook, collects feedback (human or simulated) on every
prediction, appends all validated items to the growing guide set, and —
when any prediction was wrong — synthesizes an updated guideline set from
the error items. The run stops once accuracy on the validation split
reaches the target with enough validated items behind it, or the feedback
budget is exhausted.

Feedback can arrive asynchronously: an iteration parks in
``awaiting_feedback`` after predictions are made and completes when the
last item of the batch resolves, so a human expert never blocks a thread.
Every source of randomness is derived from the run seed and the iteration
index, which makes interrupted runs resumable bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import CodebookForgeError
from .codebook import (
    Codebook,
    ErrorExample,
    PromptTemplates,
    apply_update,
    init_codebook,
    parse_guideline_list,
    render_annotation_prompt,
    replace_update,
)
from .corpus import (
    Corpus,
    LabelSet,
    Narrative,
    Variable,
    build_validation_split,
    concat_narrative,
)
from .embeddings import Embedder, SamplingError, keyword_upsample, select_batch
from .gateway import ChatModel, FailedPrediction, Prediction, predict_many, synthesize_guidelines
from .metrics import LabelPair, per_class_f1
from .runstore import RunStore, content_digest

UNPARSEABLE_LABEL = "<unparseable>"

TERMINAL_STATUSES = ("converged", "budget_exhausted", "capped")


class EngineError(CodebookForgeError):
    """Configuration or state-machine violation in the refinement loop."""


class FeedbackConflictError(CodebookForgeError):
    """A feedback id was replayed with different content."""


class UnknownFeedbackError(CodebookForgeError):
    """No pending item carries the submitted feedback id."""


@dataclass(frozen=True)
class RunConfig:
    """Everything that parameterizes one refinement run."""

    variable: Variable
    b: int  # feedback budget: max expert-validated items
    n: int  # batch size per iteration
    k: int  # minimum guide-set size before the accuracy target may stop the run
    m: float  # target accuracy on the validation split
    j: int  # minimum per-class size of the validation split
    sampling: str = "random"  # random | coverage
    seed: int = 0
    max_iterations: int = 100
    keywords: tuple[str, ...] = ()
    upsample_size: int | None = None
    rationale_errors_enabled: bool = False
    guideline_update_mode: str = "replace"  # replace | append

    def __post_init__(self) -> None:
        if self.n < 1 or self.k < 1:
            raise EngineError("n and k must be >= 1")
        if self.b < self.k:
            raise EngineError("budget b must be >= minimum guide size k")
        if not 0.0 < self.m <= 1.0:
            raise EngineError("target accuracy m must be in (0, 1]")
        if self.j < 1:
            raise EngineError("j must be >= 1")
        if self.max_iterations < 1:
            raise EngineError("max_iterations must be >= 1")
        if self.sampling not in ("random", "coverage"):
            raise EngineError(f"unknown sampling strategy {self.sampling!r}")
        if self.guideline_update_mode not in ("replace", "append"):
            raise EngineError(f"unknown guideline update mode {self.guideline_update_mode!r}")

    def to_json(self) -> dict:
        return {
            "variable": self.variable.to_json(),
            "b": self.b,
            "n": self.n,
            "k": self.k,
            "m": self.m,
            "j": self.j,
            "sampling": self.sampling,
            "seed": self.seed,
            "max_iterations": self.max_iterations,
            "keywords": list(self.keywords),
            "upsample_size": self.upsample_size,
            "rationale_errors_enabled": self.rationale_errors_enabled,
            "guideline_update_mode": self.guideline_update_mode,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        return cls(
            variable=Variable.from_json(obj["variable"]),
            b=obj["b"],
            n=obj["n"],
            k=obj["k"],
            m=obj["m"],
            j=obj["j"],
            sampling=obj.get("sampling", "random"),
            seed=obj.get("seed", 0),
            max_iterations=obj.get("max_iterations", 100),
            keywords=tuple(obj.get("keywords", [])),
            upsample_size=obj.get("upsample_size"),
            rationale_errors_enabled=obj.get("rationale_errors_enabled", False),
            guideline_update_mode=obj.get("guideline_update_mode", "replace"),
        )


@dataclass(frozen=True)
class PendingItem:
    """A prediction parked for expert review."""

    feedback_id: str
    narrative_id: str
    model_label: str
    model_reason: str
    model_span: str
    span_verbatim: bool
    parse_path: str
    raw_output: str
    parse_ok: bool

    def to_json(self) -> dict:
        return {
            "feedback_id": self.feedback_id,
            "narrative_id": self.narrative_id,
            "model_label": self.model_label,
            "model_reason": self.model_reason,
            "model_span": self.model_span,
            "span_verbatim": self.span_verbatim,
            "parse_path": self.parse_path,
            "raw_output": self.raw_output,
            "parse_ok": self.parse_ok,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PendingItem":
        return cls(**obj)


@dataclass(frozen=True)
class FeedbackItem:
    """One reviewed prediction: what the model said, what the expert decided."""

    feedback_id: str
    narrative_id: str
    model_label: str
    model_reason: str
    correct_label: str
    expert_rationale: str
    is_error: bool
    error_kind: str  # label | rationale-only | none
    source: str  # human | simulated
    timestamp: int  # logical tick, deterministic for simulated feedback

    def to_json(self) -> dict:
        return {
            "feedback_id": self.feedback_id,
            "narrative_id": self.narrative_id,
            "model_label": self.model_label,
            "model_reason": self.model_reason,
            "correct_label": self.correct_label,
            "expert_rationale": self.expert_rationale,
            "is_error": self.is_error,
            "error_kind": self.error_kind,
            "source": self.source,
            "timestamp": self.timestamp,
        }


@dataclass(frozen=True)
class GuideEntry:
    narrative_id: str
    label: str
    rationale: str

    def to_json(self) -> list:
        return [self.narrative_id, self.label, self.rationale]


class FeedbackProvider(Protocol):
    """Supplies the corrected label and rationale for one prediction."""

    source: str

    def answer(
        self, narrative: Narrative, item: PendingItem
    ) -> tuple[str, str, str]: ...


class SimulatedProvider:
    """Feedback from reference labels plus cached chain-of-thought rationales.

    The cached model reasoning stands in for the expert rationale; ids
    missing from the cache fall back to a fixed template and are flagged.
    """

    source = "simulated"

    def __init__(self, reference_labels: LabelSet, cot_cache: dict[str, str] | None = None):
        self.labels = reference_labels
        self.cot_cache = dict(cot_cache or {})
        self.fallback_ids: list[str] = []

    def answer(self, narrative: Narrative, item: PendingItem) -> tuple[str, str, str]:
        y = self.labels.labels[narrative.id]
        e = self.cot_cache.get(narrative.id)
        if e is None:
            e = f"reference label is {y}"
            self.fallback_ids.append(narrative.id)
        kind = "label" if item.model_label != y else "none"
        return y, e, kind


def simulated_provider(
    reference_labels: LabelSet,
    cot_cache: dict[str, str] | None = None,
    pool_ids: Sequence[str] | None = None,
) -> SimulatedProvider:
    """Build a simulated provider, verifying label coverage of the pool."""
    if pool_ids is not None:
        missing = [i for i in pool_ids if i not in reference_labels.labels]
        if missing:
            raise EngineError(
                f"{len(missing)} pool narratives lack reference labels "
                f"(first: {missing[:3]})"
            )
    return SimulatedProvider(reference_labels, cot_cache)


@dataclass
class LoopState:
    """Mutable loop state; everything here persists to state.json."""

    run_id: str
    t: int = 0
    status: str = "running"
    stop_reason: str | None = None
    codebook_version: int = 0
    guide: list[GuideEntry] = field(default_factory=list)
    pool_ids: list[str] = field(default_factory=list)
    val_ids: list[str] = field(default_factory=list)
    last_acc_val: float | None = None
    last_per_class_f1: dict[str, float] | None = None
    finalized: bool = False

    def guide_ids(self) -> set[str]:
        return {g.narrative_id for g in self.guide}

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "t": self.t,
            "status": self.status,
            "stop_reason": self.stop_reason,
            "codebook_version": self.codebook_version,
            "guide": [g.to_json() for g in self.guide],
            "pool_ids": self.pool_ids,
            "val_ids": self.val_ids,
            "last_acc_val": self.last_acc_val,
            "last_per_class_f1": self.last_per_class_f1,
            "finalized": self.finalized,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LoopState":
        return cls(
            run_id=obj["run_id"],
            t=obj["t"],
            status=obj["status"],
            stop_reason=obj.get("stop_reason"),
            codebook_version=obj["codebook_version"],
            guide=[GuideEntry(*entry) for entry in obj.get("guide", [])],
            pool_ids=list(obj.get("pool_ids", [])),
            val_ids=list(obj.get("val_ids", [])),
            last_acc_val=obj.get("last_acc_val"),
            last_per_class_f1=obj.get("last_per_class_f1"),
            finalized=obj.get("finalized", False),
        )


def check_stopping(
    acc_val: float | None, guide_size: int, t: int, config: RunConfig
) -> tuple[bool, str | None]:
    """Evaluate the stopping predicate after a completed iteration.

    Stops converged when the accuracy target is met with at least k
    validated items; stops budget_exhausted when the guide set exceeds the
    budget; stops capped at the iteration ceiling. The conjunction binds
    tighter than the disjunction.
    """
    if acc_val is not None and acc_val >= config.m and guide_size >= config.k:
        return True, "converged"
    if guide_size > config.b:
        return True, "budget_exhausted"
    if t >= config.max_iterations:
        return True, "capped"
    return False, None


class RunEngine:
    """Drives one refinement run against a run directory."""

    def __init__(
        self,
        store: RunStore,
        config: RunConfig,
        corpus: Corpus,
        val_labels: LabelSet,
        annotator: ChatModel,
        synthesizer: ChatModel,
        templates: PromptTemplates | None = None,
        embedder: Embedder | None = None,
        parallelism: int = 1,
    ):
        self.store = store
        self.config = config
        self.corpus = corpus
        self.val_labels = val_labels
        self.annotator = annotator
        self.synthesizer = synthesizer
        self.templates = templates or PromptTemplates()
        self.embedder = embedder
        self.parallelism = parallelism
        self.state = LoopState(run_id=store.manifest.run_id)
        self.codebook: Codebook = init_codebook(config.variable, self.templates)
        self._pending: dict | None = None

    # --- construction ------------------------------------------------------

    @classmethod
    def start(
        cls,
        store_root,
        run_id: str,
        config: RunConfig,
        corpus: Corpus,
        val_labels: LabelSet,
        annotator: ChatModel,
        synthesizer: ChatModel,
        templates: PromptTemplates | None = None,
        embedder: Embedder | None = None,
        parallelism: int = 1,
        extra_config: dict | None = None,
    ) -> "RunEngine":
        """Initialize a run: build the validation split and the sampling pool."""
        val_labels.validate_against(config.variable)
        val_split = build_validation_split(val_labels, config.j, seed=config.seed)
        val_ids = list(val_split.ids)

        if config.keywords:
            if embedder is None:
                raise EngineError("keyword upsampling requires an embedder")
            size = config.upsample_size or min(len(corpus), 10 * config.b)
            upsampled = keyword_upsample(corpus, config.keywords, size, embedder)
            pool_ids = [i for i in upsampled.ids if i not in set(val_ids)]
        else:
            pool_ids = [i for i in sorted(corpus.ids()) if i not in set(val_ids)]
        if len(pool_ids) < config.n:
            raise EngineError(
                f"pool of {len(pool_ids)} narratives cannot supply batches of {config.n}"
            )

        stored_config = {"run": config.to_json()}
        if extra_config:
            stored_config.update(extra_config)
        store = RunStore.create(
            store_root,
            run_id=run_id,
            config=stored_config,
            corpus_digest=content_digest(corpus.to_jsonl()),
        )
        store.write_val_labels(
            {"labels": val_labels.to_json(), "val_ids": val_ids, "j": config.j}
        )
        engine = cls(
            store,
            config,
            corpus,
            val_labels,
            annotator,
            synthesizer,
            templates,
            embedder,
            parallelism,
        )
        engine.state.pool_ids = pool_ids
        engine.state.val_ids = val_ids
        store.write_codebook(engine.codebook)
        engine._persist_state()
        return engine

    @classmethod
    def resume(
        cls,
        store_root,
        corpus: Corpus,
        annotator: ChatModel,
        synthesizer: ChatModel,
        templates: PromptTemplates | None = None,
        embedder: Embedder | None = None,
        parallelism: int = 1,
    ) -> "RunEngine":
        """Reopen a persisted run; the iteration log is the source of truth."""
        store = RunStore.open(store_root)
        if content_digest(corpus.to_jsonl()) != store.manifest.corpus_digest:
            raise EngineError("corpus does not match the digest recorded at run start")
        config = RunConfig.from_json(store.config["run"])
        val_obj = store.read_val_labels()
        val_labels = LabelSet.from_json(val_obj["labels"])
        engine = cls(
            store,
            config,
            corpus,
            val_labels,
            annotator,
            synthesizer,
            templates,
            embedder,
            parallelism,
        )
        engine.state = engine._rebuild_state(val_obj["val_ids"])
        engine.codebook = store.read_codebook(engine.state.codebook_version)
        pending = store.read_pending()
        if pending and pending.get("t") == engine.state.t:
            engine._pending = pending
            engine.state.status = "awaiting_feedback"
        engine._persist_state()
        return engine

    def _rebuild_state(self, val_ids: list[str]) -> LoopState:
        """Replay the iteration log; cross-check state.json when present."""
        records = self.store.iterations()
        state = LoopState(run_id=self.store.manifest.run_id)
        state.val_ids = list(val_ids)
        try:
            persisted = self.store.read_state()
            state.pool_ids = list(persisted.get("pool_ids", []))
        except CodebookForgeError:
            persisted = None
        if not state.pool_ids:
            state.pool_ids = self._derive_pool(val_ids)
        for record in records:
            for fb in record["feedback"]:
                state.guide.append(
                    GuideEntry(fb["narrative_id"], fb["correct_label"], fb["expert_rationale"])
                )
            state.codebook_version = record["codebook_version"]
            metrics = record["metrics"]
            state.last_acc_val = metrics.get("acc_val")
            state.last_per_class_f1 = metrics.get("per_class_f1")
            state.t = record["t"] + 1
            state.status = record["status_after"]
            state.stop_reason = record.get("stop_reason")
        if persisted is not None and persisted.get("t") == state.t:
            state.finalized = persisted.get("finalized", False)
        return state

    def _derive_pool(self, val_ids: list[str]) -> list[str]:
        if self.config.keywords:
            if self.embedder is None:
                raise EngineError("keyword upsampling requires an embedder")
            size = self.config.upsample_size or min(len(self.corpus), 10 * self.config.b)
            upsampled = keyword_upsample(self.corpus, self.config.keywords, size, self.embedder)
            return [i for i in upsampled.ids if i not in set(val_ids)]
        return [i for i in sorted(self.corpus.ids()) if i not in set(val_ids)]

    # --- persistence helpers -------------------------------------------------

    def _persist_state(self) -> None:
        self.store.write_state(self.state.to_json())
        if self.store.manifest.status != self.state.status:
            self.store.set_status(self.state.status)

    def _narrative_text(self, narrative_id: str) -> str:
        return concat_narrative(self.corpus.get(narrative_id))

    # --- prediction ------------------------------------------------------------

    def _predict_ids(self, ids: Sequence[str]) -> list[Prediction | FailedPrediction]:
        jobs = []
        for narrative_id in ids:
            system, user = render_annotation_prompt(
                self.codebook, self._narrative_text(narrative_id)
            )
            jobs.append((narrative_id, system, user))
        return predict_many(
            self.annotator, jobs, self.config.variable.response_options, self.parallelism
        )

    def _accuracy(self, ids: Sequence[str], references: dict[str, str]) -> tuple[float, list[LabelPair]]:
        outcomes = self._predict_ids(ids)
        pairs = []
        hits = 0
        for narrative_id, outcome in zip(ids, outcomes):
            predicted = outcome.label if isinstance(outcome, Prediction) else UNPARSEABLE_LABEL
            pairs.append(
                LabelPair(narrative_id=narrative_id, predicted=predicted, reference=references[narrative_id])
            )
            if predicted == references[narrative_id]:
                hits += 1
        return hits / len(ids), pairs

    # --- the loop ---------------------------------------------------------------

    def begin_iteration(self) -> list[PendingItem]:
        """Sample the next batch and park its predictions for feedback."""
        if self.state.status in TERMINAL_STATUSES:
            raise EngineError(f"run is terminal ({self.state.status}); no new iterations")
        if self.state.status == "awaiting_feedback":
            return [PendingItem.from_json(i) for i in self._pending["items"]]

        t = self.state.t
        texts = None
        if self.config.sampling == "coverage":
            texts = {i: self._narrative_text(i) for i in self.state.pool_ids}
            for entry in self.state.guide:
                texts.setdefault(entry.narrative_id, self._narrative_text(entry.narrative_id))
        try:
            batch = select_batch(
                self.config.sampling,
                self.state.pool_ids,
                sorted(self.state.guide_ids()),
                self.config.n,
                np.random.SeedSequence([self.config.seed, 2, t]),
                texts=texts,
                embedder=self.embedder,
            )
        except SamplingError as exc:
            self.state.status = "capped"
            self.state.stop_reason = f"pool exhausted: {exc}"
            self._persist_state()
            return []

        outcomes = self._predict_ids(batch)
        items = []
        for narrative_id, outcome in zip(batch, outcomes):
            feedback_id = f"{self.state.run_id}-t{t}-{narrative_id}"
            if isinstance(outcome, Prediction):
                items.append(
                    PendingItem(
                        feedback_id=feedback_id,
                        narrative_id=narrative_id,
                        model_label=outcome.label,
                        model_reason=outcome.reason,
                        model_span=outcome.span,
                        span_verbatim=outcome.span_verbatim,
                        parse_path=outcome.parse_path,
                        raw_output=outcome.raw_output,
                        parse_ok=True,
                    )
                )
            else:
                items.append(
                    PendingItem(
                        feedback_id=feedback_id,
                        narrative_id=narrative_id,
                        model_label=UNPARSEABLE_LABEL,
                        model_reason=outcome.error,
                        model_span="",
                        span_verbatim=False,
                        parse_path="none",
                        raw_output=outcome.raw_output,
                        parse_ok=False,
                    )
                )
        self._pending = {
            "t": t,
            "items": [i.to_json() for i in items],
            "resolved": {},
            "acks": {},
        }
        self.state.status = "awaiting_feedback"
        self.store.write_pending(self._pending)
        self._persist_state()
        return items

    def pending_items(self) -> list[PendingItem]:
        if self._pending is None:
            return []
        resolved = self._pending["resolved"]
        return [
            PendingItem.from_json(i)
            for i in self._pending["items"]
            if i["feedback_id"] not in resolved
        ]

    def submit_feedback(
        self,
        feedback_id: str,
        correct_label: str,
        rationale: str = "",
        error_kind: str | None = None,
        source: str = "human",
    ) -> dict:
        """Resolve one pending item; idempotent by feedback id."""
        if self._pending is None:
            raise UnknownFeedbackError(f"no feedback batch is pending ({feedback_id})")
        by_id = {i["feedback_id"]: i for i in self._pending["items"]}
        if feedback_id not in by_id:
            raise UnknownFeedbackError(f"unknown feedback id {feedback_id}")
        if correct_label not in self.config.variable.response_options:
            raise EngineError(
                f"label {correct_label!r} is not one of the response options "
                f"{list(self.config.variable.response_options)}"
            )
        submission = {
            "correct_label": correct_label,
            "rationale": rationale,
            "error_kind": error_kind,
            "source": source,
        }
        existing = self._pending["resolved"].get(feedback_id)
        if existing is not None:
            if existing != submission:
                raise FeedbackConflictError(
                    f"feedback {feedback_id} already resolved with different content"
                )
            return self._pending["acks"][feedback_id]
        self._pending["resolved"][feedback_id] = submission
        remaining = len(self._pending["items"]) - len(self._pending["resolved"])
        ack = {
            "feedback_id": feedback_id,
            "remaining": remaining,
            "batch_complete": remaining == 0,
        }
        self._pending.setdefault("acks", {})[feedback_id] = ack
        self.store.write_pending(self._pending)
        return ack

    def batch_complete(self) -> bool:
        return (
            self._pending is not None
            and len(self._pending["resolved"]) == len(self._pending["items"])
        )

    def complete_iteration(self) -> dict:
        """Fold resolved feedback into the run: update, evaluate, record."""
        if self.state.status != "awaiting_feedback" or not self.batch_complete():
            raise EngineError("iteration is not ready to complete")
        t = self._pending["t"]
        items = [PendingItem.from_json(i) for i in self._pending["items"]]
        resolved = self._pending["resolved"]

        feedback: list[FeedbackItem] = []
        for index, item in enumerate(items):
            submission = resolved[item.feedback_id]
            kind = submission.get("error_kind")
            label_wrong = item.model_label != submission["correct_label"]
            if kind == "rationale-only" and self.config.rationale_errors_enabled and not label_wrong:
                error_kind = "rationale-only"
            elif label_wrong:
                error_kind = "label"
            else:
                error_kind = "none"
            feedback.append(
                FeedbackItem(
                    feedback_id=item.feedback_id,
                    narrative_id=item.narrative_id,
                    model_label=item.model_label,
                    model_reason=item.model_reason,
                    correct_label=submission["correct_label"],
                    expert_rationale=submission["rationale"],
                    is_error=label_wrong or error_kind == "rationale-only",
                    error_kind=error_kind,
                    source=submission.get("source", "human"),
                    timestamp=t * 1000 + index,
                )
            )

        self.state.guide.extend(
            GuideEntry(fb.narrative_id, fb.correct_label, fb.expert_rationale)
            for fb in feedback
        )
        errors = [fb for fb in feedback if fb.is_error]
        version_before = self.codebook.version
        if errors:
            examples = [
                ErrorExample(
                    narrative_text=self._narrative_text(fb.narrative_id),
                    model_label=fb.model_label,
                    correct_label=fb.correct_label,
                    rationale=fb.expert_rationale,
                    span=next(
                        i.model_span for i in items if i.feedback_id == fb.feedback_id
                    ),
                )
                for fb in errors
            ]
            reply = synthesize_guidelines(self.synthesizer, self.codebook, examples, self.templates)
            bullets = parse_guideline_list(reply)
            feedback_ids = [fb.feedback_id for fb in errors]
            if self.config.guideline_update_mode == "replace":
                self.codebook = replace_update(
                    self.codebook, bullets, self.codebook.version + 1, feedback_ids
                )
            else:
                self.codebook = apply_update(
                    self.codebook, bullets, self.codebook.version + 1, feedback_ids
                )
            self.state.codebook_version = self.codebook.version
            self.store.write_codebook(self.codebook)

        guide_refs = {g.narrative_id: g.label for g in self.state.guide}
        guide_ids = [g.narrative_id for g in self.state.guide]
        acc_guide, _ = self._accuracy(guide_ids, guide_refs)

        updated = self.codebook.version != version_before
        if updated or self.state.last_acc_val is None:
            acc_val, val_pairs = self._accuracy(self.state.val_ids, self.val_labels.labels)
            carried = False
            f1_map: dict[str, float] | None = None
            if self.config.variable.kind == "multiclass":
                f1_map = per_class_f1(val_pairs, self.config.variable.response_options)
            self.state.last_acc_val = acc_val
            self.state.last_per_class_f1 = f1_map
        else:
            acc_val = self.state.last_acc_val
            f1_map = self.state.last_per_class_f1
            carried = True

        guide_size = len(self.state.guide)
        metrics = {
            "acc_guide": acc_guide,
            "acc_val": acc_val,
            "val_carried": carried,
            "guide_size": guide_size,
        }
        if f1_map is not None:
            metrics["per_class_f1"] = f1_map

        self.state.t = t + 1
        stopped, reason = check_stopping(acc_val, guide_size, self.state.t, self.config)
        self.state.status = reason if stopped else "running"
        self.state.stop_reason = reason

        record = {
            "t": t,
            "batch": [i.narrative_id for i in items],
            "predictions": [i.to_json() for i in items],
            "feedback": [fb.to_json() for fb in feedback],
            "error_ids": [fb.narrative_id for fb in errors],
            "codebook_version_before": version_before,
            "codebook_version": self.codebook.version,
            "metrics": metrics,
            "status_after": self.state.status,
            "stop_reason": self.state.stop_reason,
        }
        self.store.append_iteration(record)
        self._pending = None
        self.store.write_pending(None)
        self._persist_state()
        return record

    def run_iteration(self, provider: FeedbackProvider) -> dict:
        """One full iteration with an in-process feedback provider."""
        items = self.begin_iteration()
        if not items and self.state.status in TERMINAL_STATUSES:
            raise EngineError(f"run terminated: {self.state.stop_reason}")
        for item in items:
            if item.feedback_id in self._pending["resolved"]:
                continue
            narrative = self.corpus.get(item.narrative_id)
            y, e, kind = provider.answer(narrative, item)
            self.submit_feedback(
                item.feedback_id,
                y,
                e,
                error_kind=kind if kind != "none" else None,
                source=getattr(provider, "source", "human"),
            )
        return self.complete_iteration()

    def run_to_completion(self, provider: FeedbackProvider) -> LoopState:
        while self.state.status not in TERMINAL_STATUSES:
            try:
                self.run_iteration(provider)
            except EngineError:
                if self.state.status in TERMINAL_STATUSES:
                    break
                raise
        return self.state

    def finalize(self) -> list[dict]:
        """Annotate everything left in the pool with the final codebook."""
        if self.state.status not in TERMINAL_STATUSES:
            raise EngineError("finalize requires a terminal run")
        if self.state.finalized:
            return self.store.annotations()
        guide_ids = self.state.guide_ids()
        targets = [i for i in self.state.pool_ids if i not in guide_ids]
        records: list[dict] = []
        if targets:
            outcomes = self._predict_ids(targets)
            for narrative_id, outcome in zip(targets, outcomes):
                if isinstance(outcome, Prediction):
                    records.append(
                        {
                            "narrative_id": narrative_id,
                            "label": outcome.label,
                            "reason": outcome.reason,
                            "span": outcome.span,
                            "parse_path": outcome.parse_path,
                            "unresolved": False,
                        }
                    )
                else:
                    records.append(
                        {
                            "narrative_id": narrative_id,
                            "label": None,
                            "reason": outcome.error,
                            "span": "",
                            "parse_path": "none",
                            "unresolved": True,
                        }
                    )
        self.store.append_annotations(records)
        self.state.finalized = True
        self._persist_state()
        return records
