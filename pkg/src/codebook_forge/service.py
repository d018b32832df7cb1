"""HTTP interface for driving refinement runs.

The feedback console (or any automation) works a run entirely over this
API: create and start a run, poll the pending-feedback queue, submit
corrections, and read back the codebook and the metrics timeline. The
service never mutates run state directly — every state change funnels
through the engine's serialized feedback path, and each run has exactly one
writer. Narrative text is served per item, never bulk-exported.

All errors share one body shape:

    {"error": {"code": "...", "message": "...", "field": "..."}}
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import CodebookForgeError
from .codebook import PromptTemplates, diff
from .corpus import Corpus, LabelSet, Variable, concat_narrative, load_corpus
from .embeddings import DeterministicEmbedder, EmbedderConfig, build_embedder
from .engine import (
    EngineError,
    FeedbackConflictError,
    RunConfig,
    RunEngine,
    TERMINAL_STATUSES,
    UnknownFeedbackError,
    simulated_provider,
)
from .gateway import HttpChatModel, ModelEndpoint
from .synth import StubWorld, SyntheticCorpusSpec, build_world


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, field_name: str | None = None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.field = field_name


def _require(payload: dict, key: str, kind=None):
    if key not in payload:
        raise ApiError(422, "missing_field", f"missing required field {key!r}", key)
    value = payload[key]
    if kind is not None and not isinstance(value, kind):
        raise ApiError(422, "invalid_field", f"field {key!r} has the wrong type", key)
    return value


@dataclass
class RunSession:
    """One live run: engine plus the service-level idempotency ledger."""

    engine: RunEngine
    mode: str
    world: StubWorld | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)
    acks: dict[str, dict] = field(default_factory=dict)
    submissions: dict[str, dict] = field(default_factory=dict)
    started: bool = False


class RunRegistry:
    """All runs this service instance is hosting."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.sessions: dict[str, RunSession] = {}

    def get(self, run_id: str) -> RunSession:
        session = self.sessions.get(run_id)
        if session is None:
            raise ApiError(404, "unknown_run", f"no run with id {run_id!r}")
        return session


def _validate_run_config(payload: dict, variable: Variable) -> RunConfig:
    cfg = _require(payload, "config", dict)
    for key in ("b", "n", "k", "j"):
        value = _require(cfg, key, int)
        if value < 1:
            raise ApiError(422, "invalid_field", f"{key} must be >= 1", key)
    m = _require(cfg, "m", (int, float))
    if not 0.0 < float(m) <= 1.0:
        raise ApiError(422, "invalid_field", "m must be in (0, 1]", "m")
    if cfg["b"] < cfg["k"]:
        raise ApiError(422, "invalid_field", "budget b must be >= k", "b")
    sampling = cfg.get("sampling", "random")
    if sampling not in ("random", "coverage"):
        raise ApiError(422, "invalid_field", "sampling must be random or coverage", "sampling")
    try:
        return RunConfig(
            variable=variable,
            b=cfg["b"],
            n=cfg["n"],
            k=cfg["k"],
            m=float(m),
            j=cfg["j"],
            sampling=sampling,
            seed=cfg.get("seed", 0),
            max_iterations=cfg.get("max_iterations", 100),
            keywords=tuple(cfg.get("keywords", [])),
            upsample_size=cfg.get("upsample_size"),
            rationale_errors_enabled=cfg.get("rationale_errors_enabled", False),
            guideline_update_mode=cfg.get("guideline_update_mode", "replace"),
        )
    except EngineError as exc:
        raise ApiError(422, "invalid_config", str(exc), "config")


def _build_session(registry: RunRegistry, payload: dict) -> tuple[str, RunSession]:
    run_id = payload.get("run_id") or f"run-{uuid.uuid4().hex[:12]}"
    if run_id in registry.sessions or (registry.root / run_id).exists():
        raise ApiError(409, "duplicate_run", f"run {run_id!r} already exists", "run_id")
    mode = payload.get("mode", "human")
    if mode not in ("human", "simulated"):
        raise ApiError(422, "invalid_field", "mode must be human or simulated", "mode")

    world: StubWorld | None = None
    if "stub_world" in payload:
        spec_obj = _require(payload, "stub_world", dict)
        try:
            spec = SyntheticCorpusSpec.from_json(spec_obj)
            world = build_world(spec)
        except (KeyError, ValueError, CodebookForgeError) as exc:
            raise ApiError(422, "invalid_stub_world", str(exc), "stub_world")
        corpus = world.corpus
        val_labels = world.truth
        variable = Variable(
            name=spec.variable_name,
            kind="binary" if len(spec.classes) == 2 else "multiclass",
            response_options=spec.classes,
        )
        annotator = world.annotator
        synthesizer = world.synthesizer
    else:
        variable = Variable.from_json(_require(payload, "variable", dict))
        corpus_path = _require(payload, "corpus_path", str)
        try:
            corpus, _ = load_corpus(corpus_path)
        except OSError as exc:
            raise ApiError(422, "invalid_field", f"cannot read corpus: {exc}", "corpus_path")
        val_path = _require(payload, "val_labels_path", str)
        try:
            with open(val_path, encoding="utf-8") as fh:
                val_labels = LabelSet.from_json(json.load(fh))
        except OSError as exc:
            raise ApiError(422, "invalid_field", f"cannot read labels: {exc}", "val_labels_path")
        endpoint_cfg = _require(payload, "endpoint", dict)
        endpoint = ModelEndpoint(
            base_url=_require(endpoint_cfg, "base_url", str),
            model_id=_require(endpoint_cfg, "model_id", str),
            temperature=endpoint_cfg.get("temperature", 0.2),
            max_tokens=endpoint_cfg.get("max_tokens", 1024),
        )
        annotator = HttpChatModel(endpoint)
        synthesizer = HttpChatModel(endpoint)

    config = _validate_run_config(payload, variable)
    embedder_cfg = payload.get("embedder")
    if embedder_cfg:
        embedder = build_embedder(EmbedderConfig(**embedder_cfg))
    else:
        embedder = DeterministicEmbedder()
    try:
        engine = RunEngine.start(
            registry.root / run_id,
            run_id=run_id,
            config=config,
            corpus=corpus,
            val_labels=val_labels,
            annotator=annotator,
            synthesizer=synthesizer,
            templates=PromptTemplates(),
            embedder=embedder,
            extra_config={"mode": mode},
        )
    except EngineError as exc:
        raise ApiError(422, "invalid_config", str(exc), "config")
    session = RunSession(engine=engine, mode=mode, world=world)
    registry.sessions[run_id] = session
    return run_id, session


def _pending_view(session: RunSession) -> list[dict]:
    engine = session.engine
    views = []
    for item in engine.pending_items():
        views.append(
            {
                "feedback_id": item.feedback_id,
                "narrative_id": item.narrative_id,
                "narrative_text": concat_narrative(engine.corpus.get(item.narrative_id)),
                "model_label": item.model_label,
                "model_reason": item.model_reason,
                "model_span": item.model_span,
                "span_verbatim": item.span_verbatim,
                "parse_ok": item.parse_ok,
                "response_options": list(engine.config.variable.response_options),
                "codebook_version": engine.codebook.version,
            }
        )
    return views


def _run_summary(run_id: str, session: RunSession) -> dict:
    engine = session.engine
    state = engine.state
    guide_size = len(state.guide)
    return {
        "run_id": run_id,
        "status": state.status,
        "stop_reason": state.stop_reason,
        "t": state.t,
        "guide_size": guide_size,
        "budget": engine.config.b,
        "budget_remaining": max(0, engine.config.b - guide_size),
        "codebook_version": engine.codebook.version,
        "variable": engine.config.variable.to_json(),
        "config": engine.config.to_json(),
        "val_size": len(state.val_ids),
        "pool_size": len(state.pool_ids),
        "pending_count": len(engine.pending_items()),
        "finalized": state.finalized,
        "mode": session.mode,
    }


def _advance_if_complete(session: RunSession) -> bool:
    """Complete the parked iteration once its batch is fully resolved."""
    engine = session.engine
    if not engine.batch_complete():
        return False
    engine.complete_iteration()
    if engine.state.status not in TERMINAL_STATUSES:
        engine.begin_iteration()
    elif not engine.state.finalized:
        engine.finalize()
    return True


def create_app(root: Path | str, registry: RunRegistry | None = None) -> FastAPI:
    registry = registry or RunRegistry(Path(root))
    app = FastAPI(title="codebook-forge", docs_url=None, redoc_url=None)
    app.state.registry = registry

    @app.exception_handler(ApiError)
    async def _api_error_handler(_request: Request, exc: ApiError):
        body = {"error": {"code": exc.code, "message": exc.message, "field": exc.field}}
        return JSONResponse(status_code=exc.status, content=body)

    @app.get("/health")
    def health():
        return {"status": "ok", "runs": len(registry.sessions)}

    @app.post("/runs", status_code=201)
    async def create_run(request: Request):
        payload = await request.json()
        if not isinstance(payload, dict):
            raise ApiError(422, "invalid_body", "request body must be a JSON object")
        run_id, _session = _build_session(registry, payload)
        return {"run_id": run_id, "status": "running", "t": 0}

    @app.get("/runs")
    def list_runs():
        return {
            "runs": [_run_summary(rid, s) for rid, s in sorted(registry.sessions.items())]
        }

    @app.post("/runs/{run_id}/start")
    def start_run(run_id: str):
        session = registry.get(run_id)
        with session.lock:
            engine = session.engine
            if session.mode == "simulated":
                if not session.started:
                    session.started = True
                    provider = simulated_provider(
                        session.world.truth if session.world else engine.val_labels,
                        session.world.cot_cache if session.world else None,
                    )
                    engine.run_to_completion(provider)
                    if not engine.state.finalized:
                        engine.finalize()
                return _run_summary(run_id, session)
            if engine.state.status in TERMINAL_STATUSES:
                return _run_summary(run_id, session)
            if not session.started:
                session.started = True
            engine.begin_iteration()
            return _run_summary(run_id, session)

    @app.get("/runs/{run_id}")
    def get_run(run_id: str):
        session = registry.get(run_id)
        with session.lock:
            return _run_summary(run_id, session)

    @app.get("/runs/{run_id}/pending")
    def get_pending(run_id: str, wait: str | None = None):
        session = registry.get(run_id)
        deadline = 0.0
        if wait:
            try:
                deadline = time.monotonic() + float(wait.rstrip("s"))
            except ValueError:
                raise ApiError(422, "invalid_field", "wait must look like '30s'", "wait")
        while True:
            with session.lock:
                items = _pending_view(session)
                status = session.engine.state.status
            if items or status in TERMINAL_STATUSES or time.monotonic() >= deadline:
                return {"status": status, "items": items}
            time.sleep(0.05)

    @app.post("/runs/{run_id}/feedback")
    async def post_feedback(run_id: str, request: Request):
        session = registry.get(run_id)
        payload = await request.json()
        feedback_id = _require(payload, "feedback_id", str)
        correct_label = _require(payload, "correct_label", str)
        rationale = payload.get("rationale", "")
        error_kind = payload.get("error_kind")
        submission = {
            "feedback_id": feedback_id,
            "correct_label": correct_label,
            "rationale": rationale,
            "error_kind": error_kind,
        }
        with session.lock:
            engine = session.engine
            if feedback_id in session.acks:
                if session.submissions[feedback_id] != submission:
                    raise ApiError(
                        409, "conflicting_feedback",
                        f"feedback {feedback_id} was already submitted with different content",
                        "feedback_id",
                    )
                return session.acks[feedback_id]
            if correct_label not in engine.config.variable.response_options:
                raise ApiError(
                    422, "invalid_label",
                    f"label {correct_label!r} is not a response option",
                    "correct_label",
                )
            try:
                ack = engine.submit_feedback(
                    feedback_id, correct_label, rationale, error_kind, source="human"
                )
            except UnknownFeedbackError as exc:
                raise ApiError(404, "unknown_feedback", str(exc), "feedback_id")
            except FeedbackConflictError as exc:
                raise ApiError(409, "conflicting_feedback", str(exc), "feedback_id")
            advanced = _advance_if_complete(session)
            response = {
                **ack,
                "iteration_advanced": advanced,
                "status": engine.state.status,
                "t": engine.state.t,
                "codebook_version": engine.codebook.version,
            }
            session.acks[feedback_id] = response
            session.submissions[feedback_id] = submission
            return response

    @app.get("/runs/{run_id}/codebook")
    def get_codebook(run_id: str, version: int | None = None):
        session = registry.get(run_id)
        with session.lock:
            engine = session.engine
            latest = engine.codebook.version
            target = latest if version is None else version
            if target < 0 or target > latest:
                raise ApiError(404, "unknown_version", f"no codebook version {target}", "version")
            cb = engine.store.read_codebook(target)
            if target > 0:
                previous = engine.store.read_codebook(target - 1)
                added, removed = diff(previous, cb)
            else:
                added, removed = cb.bullet_texts(), []
            return {
                "codebook": cb.to_json(),
                "latest_version": latest,
                "diff": {"added": added, "removed": removed, "versus": max(0, target - 1)},
            }

    @app.get("/runs/{run_id}/metrics")
    def get_metrics(run_id: str):
        session = registry.get(run_id)
        with session.lock:
            engine = session.engine
            return {
                "rows": engine.store.metrics_timeline(),
                "target_m": engine.config.m,
                "budget": engine.config.b,
                "min_guide_size": engine.config.k,
            }

    @app.get("/runs/{run_id}/narratives/{narrative_id}")
    def get_narrative(run_id: str, narrative_id: str):
        session = registry.get(run_id)
        engine = session.engine
        if narrative_id not in engine.corpus:
            raise ApiError(404, "unknown_narrative", f"no narrative {narrative_id!r}")
        return {
            "id": narrative_id,
            "text": concat_narrative(engine.corpus.get(narrative_id)),
        }

    return app
