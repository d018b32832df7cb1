"""Chat-completion client and structured-output parsing.

The wire protocol is the common ``/v1/chat/completions`` shape. Model
replies are expected in the annotation output format

    {'reason': 'reasoning', 'span': 'span of text', 'response': '1.0 or 0.0'}

(with ``label`` accepted as an alternative key), but real model output
drifts: single quotes, leading prose, unescaped newlines, bare labels. The
parser is a ladder — strict JSON, then lenient repairs, then a regex over
the label field alone — and every returned label is traceable to a
substring of the raw output. Nothing is ever fabricated: an unrecoverable
reply raises a typed error carrying the raw text.
"""

from __future__ import annotations

import ast
import json
import os
import random
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import httpx

from . import API_KEY_ENV_VAR, CodebookForgeError
from .codebook import Codebook, ErrorExample, PromptTemplates, render_update_prompt


class TransportError(CodebookForgeError):
    """Retries exhausted against the model endpoint."""


class ProtocolError(CodebookForgeError):
    """Endpoint answered with a non-retryable error status."""

    def __init__(self, message: str, status_code: int):
        super().__init__(message)
        self.status_code = status_code


class UnparseablePredictionError(CodebookForgeError):
    """No label could be recovered from the model output."""

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class InvalidLabelError(CodebookForgeError):
    """A label was recovered but is outside the variable's response options."""

    def __init__(self, label: str, options: Sequence[str], raw: str):
        super().__init__(f"label {label!r} not in response options {list(options)}")
        self.label = label
        self.raw = raw


class SynthesisError(CodebookForgeError):
    """The guideline-synthesis call returned an empty or unusable reply."""


@dataclass(frozen=True)
class ModelEndpoint:
    """Connection and generation parameters for one chat model."""

    base_url: str
    model_id: str
    temperature: float = 0.2
    max_tokens: int = 1024
    timeout: float = 120.0
    max_retries: int = 3
    parallelism_cap: int = 4

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be within [0, 2]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        if self.parallelism_cap < 1:
            raise ValueError("parallelism_cap must be >= 1")


@dataclass(frozen=True)
class Prediction:
    """One parsed model prediction, with audit fields."""

    narrative_id: str
    label: str
    reason: str
    span: str
    raw_output: str
    parse_path: str  # strict | lenient | regex
    span_verbatim: bool = False


@dataclass(frozen=True)
class FailedPrediction:
    """A prediction that could not be parsed or transported; never dropped."""

    narrative_id: str
    error: str
    raw_output: str = ""


class ChatModel(Protocol):
    """Anything that can answer a (system, user) prompt with text."""

    supports_parallel: bool

    def complete(self, system: str, user: str) -> str: ...


class HttpChatModel:
    """Wire client with exponential backoff on transport failures and 429s."""

    supports_parallel = True

    def __init__(
        self,
        endpoint: ModelEndpoint,
        client: httpx.Client | None = None,
        sleeper=time.sleep,
    ):
        self.endpoint = endpoint
        self._client = client or httpx.Client(timeout=endpoint.timeout)
        self._sleep = sleeper
        self._jitter = random.Random(0)

    def complete(self, system: str, user: str) -> str:
        url = self.endpoint.base_url.rstrip("/") + "/v1/chat/completions"
        headers = {}
        api_key = os.environ.get(API_KEY_ENV_VAR)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        body = {
            "model": self.endpoint.model_id,
            "temperature": self.endpoint.temperature,
            "max_tokens": self.endpoint.max_tokens,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        }
        delay = 1.0
        last_error: Exception | None = None
        for attempt in range(self.endpoint.max_retries + 1):
            try:
                response = self._client.post(url, json=body, headers=headers)
            except httpx.HTTPError as exc:
                last_error = exc
            else:
                if response.status_code == 429:
                    last_error = TransportError("rate limited (429)")
                elif response.status_code >= 300:
                    raise ProtocolError(
                        f"chat endpoint returned status {response.status_code}",
                        status_code=response.status_code,
                    )
                else:
                    data = response.json()
                    return data["choices"][0]["message"]["content"]
            if attempt < self.endpoint.max_retries:
                self._sleep(delay + self._jitter.uniform(0, 0.25))
                delay *= 2
        raise TransportError(f"chat request failed after retries: {last_error}")


def complete(model: ChatModel, system: str, user: str) -> str:
    return model.complete(system, user)


# --- output parsing -----------------------------------------------------------

_BINARY_ALIASES = {
    "1": "1.0",
    "1.0": "1.0",
    "yes": "1.0",
    "true": "1.0",
    "0": "0.0",
    "0.0": "0.0",
    "no": "0.0",
    "false": "0.0",
}

_LABEL_KEYS = ("response", "label")
_REASON_KEYS = ("reason", "reasoning")

_LABEL_RE = re.compile(
    r"""["']?(?:response|label)["']?\s*[:=]\s*["']?([A-Za-z0-9_.\- ]+?)["']?(?:[,}\n]|$)""",
    re.IGNORECASE,
)


def normalize_label(raw_label: str, options: Sequence[str]) -> str | None:
    """Map a raw label string onto a response option, or None.

    Case-insensitive match on option names (spaces and underscores
    interchangeable), then the binary alias table. Idempotent.
    """
    candidate = raw_label.strip().strip("'\"").strip()
    candidate = candidate.rstrip(".").strip()
    by_name = {opt.lower().replace(" ", "_"): opt for opt in options}
    key = candidate.lower().replace(" ", "_")
    if key in by_name:
        return by_name[key]
    alias = _BINARY_ALIASES.get(candidate.lower())
    if alias is not None and alias in options:
        return alias
    return None


def _first_object_span(text: str) -> str | None:
    """The first balanced {...} span, ignoring braces inside quoted strings."""
    start = text.find("{")
    if start < 0:
        return None
    depth = 0
    quote: str | None = None
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if quote:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == quote:
                quote = None
            continue
        if ch in "'\"":
            quote = ch
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start : i + 1]
    return None


def _object_candidates(raw: str):
    """Yield (dict, path) candidates from progressively looser parses."""
    try:
        obj = json.loads(raw)
        if isinstance(obj, dict):
            yield obj, "strict"
    except json.JSONDecodeError:
        pass
    span = _first_object_span(raw)
    if span is None:
        return
    for candidate in (span, span.replace("\n", " ")):
        try:
            obj = json.loads(candidate, strict=False)
            if isinstance(obj, dict):
                yield obj, "lenient"
                return
        except json.JSONDecodeError:
            pass
        try:
            obj = ast.literal_eval(candidate)
            if isinstance(obj, dict):
                yield obj, "lenient"
                return
        except (ValueError, SyntaxError):
            pass


def parse_prediction(
    raw: str, options: Sequence[str], narrative_id: str = ""
) -> Prediction:
    """Extract (reason, span, label) from a model reply via the parsing ladder."""
    for obj, path in _object_candidates(raw):
        label_value = None
        for key_name in _LABEL_KEYS:
            for key in obj:
                if str(key).strip().lower() == key_name:
                    label_value = obj[key]
                    break
            if label_value is not None:
                break
        if label_value is None:
            continue
        label = normalize_label(str(label_value), options)
        if label is None:
            raise InvalidLabelError(str(label_value), options, raw)
        reason = ""
        for key_name in _REASON_KEYS:
            for key in obj:
                if str(key).strip().lower() == key_name:
                    reason = str(obj[key])
                    break
            if reason:
                break
        span = str(obj.get("span", "") or "")
        return Prediction(
            narrative_id=narrative_id,
            label=label,
            reason=reason,
            span=span,
            raw_output=raw,
            parse_path=path,
        )

    match = _LABEL_RE.search(raw)
    if match:
        label = normalize_label(match.group(1), options)
        if label is None:
            raise InvalidLabelError(match.group(1), options, raw)
        return Prediction(
            narrative_id=narrative_id,
            label=label,
            reason=raw,
            span="",
            raw_output=raw,
            parse_path="regex",
        )
    # Last rung: the reply is a bare label and nothing else.
    bare = normalize_label(raw, options)
    if bare is not None:
        return Prediction(
            narrative_id=narrative_id,
            label=bare,
            reason=raw,
            span="",
            raw_output=raw,
            parse_path="regex",
        )
    raise UnparseablePredictionError("no label recoverable from model output", raw=raw)


def format_prediction(label: str, reason: str, span: str) -> str:
    """Render a prediction back into the single-quoted annotation format."""
    return "{'reason': %r, 'span': %r, 'response': %r}" % (reason, span, label)


def predict(
    model: ChatModel,
    narrative_id: str,
    system: str,
    user: str,
    options: Sequence[str],
) -> Prediction:
    """One annotation call: complete, parse, and record audit fields."""
    raw = model.complete(system, user)
    prediction = parse_prediction(raw, options, narrative_id=narrative_id)
    span_verbatim = bool(prediction.span) and prediction.span in user
    return Prediction(
        narrative_id=prediction.narrative_id,
        label=prediction.label,
        reason=prediction.reason,
        span=prediction.span,
        raw_output=prediction.raw_output,
        parse_path=prediction.parse_path,
        span_verbatim=span_verbatim,
    )


def predict_many(
    model: ChatModel,
    jobs: Sequence[tuple[str, str, str]],
    options: Sequence[str],
    parallelism: int = 1,
) -> list[Prediction | FailedPrediction]:
    """Predict a batch of (narrative_id, system, user) jobs in input order.

    Parse and transport failures are captured per item as FailedPrediction
    so callers can surface them; they are never silently dropped.
    """

    def one(job: tuple[str, str, str]) -> Prediction | FailedPrediction:
        narrative_id, system, user = job
        try:
            return predict(model, narrative_id, system, user, options)
        except (UnparseablePredictionError, InvalidLabelError) as exc:
            return FailedPrediction(
                narrative_id=narrative_id,
                error=str(exc),
                raw_output=getattr(exc, "raw", ""),
            )
        except (TransportError, ProtocolError) as exc:
            return FailedPrediction(narrative_id=narrative_id, error=str(exc))

    if parallelism > 1 and getattr(model, "supports_parallel", False) and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(one, jobs))
    return [one(job) for job in jobs]


def synthesize_guidelines(
    model: ChatModel,
    current: Codebook,
    errors: Sequence[ErrorExample],
    templates: PromptTemplates | None = None,
) -> str:
    """Run the guideline-update call and return the raw reply text."""
    if not errors:
        raise ValueError("guideline synthesis requires at least one error item")
    system, user = render_update_prompt(current, errors, templates)
    reply = model.complete(system, user)
    if not reply.strip():
        raise SynthesisError("guideline synthesis returned an empty reply")
    return reply
