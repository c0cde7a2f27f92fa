"""Client-side abstraction over chat, embedding, and image-text similarity.

Every downstream stage talks to one of three capabilities through the
``Gateway`` interface, so the whole pipeline is testable offline with a
scripted or transcript-backed implementation. Also houses the robust
parsers for model output (yes/no verdicts, JSON arrays of QA pairs).
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol, Sequence, Union

import requests

DEFAULT_TEMPERATURE = 0.0
DEFAULT_MAX_NEW_TOKENS = 8192
CLIPSCORE_MAX = 2.5

RESPONSE_HINTS = ("free_text", "json_array", "yes_no")
FINISH_REASONS = ("stop", "length", "error")


class GatewayError(Exception):
    code = "gateway_error"

    def __init__(self, message: str = "", code: Optional[str] = None):
        super().__init__(message or self.__class__.code)
        if code is not None:
            self.code = code


class ServiceUnavailable(GatewayError):
    code = "service_unavailable"


class BadRequest(GatewayError):
    code = "bad_request"


class VerdictParseError(GatewayError):
    code = "unparseable_verdict"

    def __init__(self, raw_text: str = ""):
        super().__init__(f"no yes/no verdict in: {raw_text[:80]!r}")
        self.raw_text = raw_text


class JsonArrayError(GatewayError):
    code = "no_json_array"


class MalformedPairError(GatewayError):
    code = "malformed_pair"

    def __init__(self, index: int, message: str = ""):
        super().__init__(message or f"element {index} lacks a nonempty question/answer")
        self.index = index


class EmbeddingDimMismatch(GatewayError):
    code = "embedding_dim_mismatch"


class InvalidEmbedding(GatewayError):
    code = "invalid_embedding"


class ImageEmbedError(GatewayError):
    code = "image_embed_failed"


class TranscriptMiss(GatewayError):
    code = "transcript_miss"


@dataclass
class ChatRequest:
    prompt: str
    temperature: float = DEFAULT_TEMPERATURE
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS
    response_hint: str = "free_text"

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_new_tokens <= 0:
            raise ValueError("max_new_tokens must be positive")
        if self.response_hint not in RESPONSE_HINTS:
            raise ValueError(f"bad response_hint: {self.response_hint!r}")


@dataclass
class ChatResponse:
    text: str
    finish_reason: str = "stop"
    latency_ms: int = 0

    def __post_init__(self):
        if self.finish_reason not in FINISH_REASONS:
            raise ValueError(f"bad finish_reason: {self.finish_reason!r}")


_SCALE_RANGES = {"cosine": (-1.0, 1.0), "clipscore": (0.0, CLIPSCORE_MAX)}


@dataclass(frozen=True)
class SimilarityScore:
    value: float
    scale: str = "clipscore"

    def __post_init__(self):
        lo, hi = _SCALE_RANGES[self.scale]
        if not lo <= self.value <= hi:
            raise ValueError(f"{self.scale} value {self.value} outside [{lo}, {hi}]")


def clipscore_from_cosine(cosine: float) -> float:
    return CLIPSCORE_MAX * max(0.0, cosine)


# --- model-output parsing ----------------------------------------------------

_AFFIRMATIVE = {"yes", "true"}
_NEGATIVE = {"no", "false"}
_WORD_RE = re.compile(r"[a-z]+")


def classify_yes_no(text: str) -> bool:
    """Verdict from the first affirmative/negative token in the text."""
    for token in _WORD_RE.findall(text.lower()):
        if token in _AFFIRMATIVE:
            return True
        if token in _NEGATIVE:
            return False
    raise VerdictParseError(text)


def _balanced_array_span(text: str, start: int) -> Optional[int]:
    """End index (inclusive) of the bracket-balanced span opening at start.

    Square brackets inside JSON string literals do not count. Returns None
    when the span never closes.
    """
    depth = 0
    in_string = False
    escape = False
    for j in range(start, len(text)):
        c = text[j]
        if in_string:
            if escape:
                escape = False
            elif c == "\\":
                escape = True
            elif c == '"':
                in_string = False
            continue
        if c == '"':
            in_string = True
        elif c == "[":
            depth += 1
        elif c == "]":
            depth -= 1
            if depth == 0:
                return j
    return None


def _validate_pairs(parsed: list) -> list[dict[str, str]]:
    pairs = []
    for idx, el in enumerate(parsed):
        if not isinstance(el, dict):
            raise MalformedPairError(idx, f"element {idx} is not an object")
        q = el.get("question")
        a = el.get("answer")
        if not isinstance(q, str) or not isinstance(a, str):
            raise MalformedPairError(idx)
        q, a = q.strip(), a.strip()
        if not q or not a:
            raise MalformedPairError(idx)
        pairs.append({"question": q, "answer": a})
    return pairs


def extract_json_array(text: str) -> list[dict[str, str]]:
    """Parse the first balanced JSON array out of arbitrary model output.

    Tolerates code fences and leading/trailing prose. Extra keys on
    elements are ignored; each element must carry nonempty "question" and
    "answer" strings. Raises JsonArrayError when no parsable array exists,
    MalformedPairError when the array parses but an element is invalid.
    """
    i = text.find("[")
    while i != -1:
        end = _balanced_array_span(text, i)
        if end is not None:
            try:
                parsed = json.loads(text[i : end + 1])
            except json.JSONDecodeError:
                parsed = None
            if parsed is not None:
                return _validate_pairs(parsed)
        i = text.find("[", i + 1)
    raise JsonArrayError("no balanced JSON array in model output")


def salvage_truncated_array(text: str) -> Optional[list[dict[str, str]]]:
    """Recover complete leading elements from a length-truncated array.

    Finds the last element that closed at array depth and reparses up to
    it. Returns None when not even one complete element exists. Raises
    MalformedPairError if the recovered elements are themselves invalid.
    """
    start = text.find("[")
    if start == -1:
        return None
    depth = 0
    in_string = False
    escape = False
    last_complete = None
    for j in range(start, len(text)):
        c = text[j]
        if in_string:
            if escape:
                escape = False
            elif c == "\\":
                escape = True
            elif c == '"':
                in_string = False
            continue
        if c == '"':
            in_string = True
        elif c in "[{":
            depth += 1
        elif c in "]}":
            depth -= 1
            if c == "}" and depth == 1:
                last_complete = j
    if last_complete is None:
        return None
    try:
        parsed = json.loads(text[start : last_complete + 1] + "]")
    except json.JSONDecodeError:
        return None
    if not parsed:
        return None
    return _validate_pairs(parsed)


# --- gateway interface and implementations -----------------------------------

class Gateway(Protocol):  # pragma: no cover - interface
    def complete_chat(self, request: ChatRequest) -> ChatResponse: ...

    def embed_text(self, text: str) -> list[float]: ...

    def cross_modal_score(self, image_uri: str, text: str) -> SimilarityScore: ...


def unit_norm(vector: Sequence[float]) -> list[float]:
    norm = math.sqrt(math.fsum(x * x for x in vector))
    if norm == 0.0 or not math.isfinite(norm):
        raise InvalidEmbedding("embedding has zero or non-finite norm")
    return [x / norm for x in vector]


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    if len(a) != len(b):
        raise EmbeddingDimMismatch(f"vector dims differ: {len(a)} != {len(b)}")
    return math.fsum(x * y for x, y in zip(a, b))


def request_digest(kind: str, payload: dict) -> str:
    canon = json.dumps(
        {"kind": kind, **payload}, sort_keys=True, ensure_ascii=False, separators=(",", ":")
    )
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def chat_digest(request: ChatRequest) -> str:
    return request_digest(
        "chat",
        {
            "prompt": request.prompt,
            "temperature": request.temperature,
            "max_new_tokens": request.max_new_tokens,
        },
    )


def embed_digest(text: str) -> str:
    return request_digest("embed", {"text": text})


def similarity_digest(image_uri: str, text: str) -> str:
    return request_digest("similarity", {"image_uri": image_uri, "text": text})


class RateLimiter:
    """Token bucket; acquire() blocks until a token is available."""

    def __init__(
        self,
        rate_per_s: float,
        capacity: Optional[float] = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if rate_per_s <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate_per_s
        self.capacity = capacity if capacity is not None else rate_per_s
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


@dataclass
class Endpoint:
    """Descriptor for one remote capability."""

    url: str
    api_key: str = ""
    model: str = ""
    timeout_s: float = 60.0
    expected_dim: Optional[int] = None
    rate_per_s: float = 8.0

    def headers(self) -> dict[str, str]:
        h = {"Content-Type": "application/json"}
        if self.api_key:
            h["Authorization"] = f"Bearer {self.api_key}"
        return h


RETRY_BACKOFFS_S = (1.0, 2.0, 4.0)
RETRY_ATTEMPTS = 3


class HttpGateway:
    """Blocking HTTP client with retry, backoff, and per-endpoint rate limits.

    Retries only timeouts, connection failures, and 5xx responses; any
    other 4xx is a non-retryable bad request. Safe to share across worker
    threads.
    """

    def __init__(
        self,
        chat: Optional[Endpoint] = None,
        embed: Optional[Endpoint] = None,
        similarity: Optional[Endpoint] = None,
        attempts: int = RETRY_ATTEMPTS,
        backoffs_s: Sequence[float] = RETRY_BACKOFFS_S,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.chat_endpoint = chat
        self.embed_endpoint = embed
        self.similarity_endpoint = similarity
        self.attempts = attempts
        self.backoffs_s = tuple(backoffs_s)
        self._sleep = sleep
        self._clock = clock
        self._local = threading.local()
        self._limiters = {
            name: RateLimiter(ep.rate_per_s, sleep=sleep)
            for name, ep in (("chat", chat), ("embed", embed), ("similarity", similarity))
            if ep is not None
        }

    def _session(self) -> requests.Session:
        sess = getattr(self._local, "session", None)
        if sess is None:
            sess = requests.Session()
            self._local.session = sess
        return sess

    def _post(self, name: str, endpoint: Endpoint, payload: dict) -> dict:
        if endpoint is None:
            raise BadRequest(f"no {name} endpoint configured")
        limiter = self._limiters.get(name)
        last_error = ""
        for attempt in range(self.attempts):
            if limiter is not None:
                limiter.acquire()
            try:
                resp = self._session().post(
                    endpoint.url,
                    json=payload,
                    headers=endpoint.headers(),
                    timeout=endpoint.timeout_s,
                )
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_error = str(exc)
            else:
                if resp.status_code < 400:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise ServiceUnavailable(f"non-JSON response from {name}: {exc}")
                if resp.status_code < 500:
                    raise BadRequest(f"{name} returned HTTP {resp.status_code}: {resp.text[:200]}")
                last_error = f"HTTP {resp.status_code}"
            if attempt + 1 < self.attempts:
                self._sleep(self.backoffs_s[min(attempt, len(self.backoffs_s) - 1)])
        raise ServiceUnavailable(f"{name} failed after {self.attempts} attempts: {last_error}")

    def complete_chat(self, request: ChatRequest) -> ChatResponse:
        if self.chat_endpoint is None:
            raise BadRequest("no chat endpoint configured")
        t0 = self._clock()
        body = self._post(
            "chat",
            self.chat_endpoint,
            {
                "model": self.chat_endpoint.model,
                "messages": [{"role": "user", "content": request.prompt}],
                "temperature": request.temperature,
                "max_tokens": request.max_new_tokens,
            },
        )
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ServiceUnavailable(f"malformed chat response: {exc}")
        finish = choice.get("finish_reason", "stop")
        if finish not in FINISH_REASONS:
            finish = "stop"
        return ChatResponse(
            text=text,
            finish_reason=finish,
            latency_ms=int((self._clock() - t0) * 1000),
        )

    def embed_text(self, text: str) -> list[float]:
        if not text:
            raise BadRequest("cannot embed empty text")
        if self.embed_endpoint is None:
            raise BadRequest("no embed endpoint configured")
        body = self._post(
            "embed",
            self.embed_endpoint,
            {"model": self.embed_endpoint.model, "input": [text]},
        )
        try:
            vector = body["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ServiceUnavailable(f"malformed embedding response: {exc}")
        expected = self.embed_endpoint.expected_dim
        if expected is not None and len(vector) != expected:
            raise EmbeddingDimMismatch(f"expected dim {expected}, got {len(vector)}")
        return unit_norm(vector)

    def cross_modal_score(self, image_uri: str, text: str) -> SimilarityScore:
        if self.similarity_endpoint is None:
            raise BadRequest("no similarity endpoint configured")
        try:
            body = self._post(
                "similarity",
                self.similarity_endpoint,
                {"image_uri": image_uri, "text": text},
            )
        except BadRequest as exc:
            raise ImageEmbedError(str(exc))
        if "cosine" not in body:
            raise ImageEmbedError(f"similarity service returned no cosine: {body}")
        return SimilarityScore(clipscore_from_cosine(float(body["cosine"])), scale="clipscore")


class FunctionGateway:
    """Gateway driven by plain callables; the workhorse for tests.

    chat(prompt) -> str or ChatResponse; embed(text) -> vector;
    similarity(image_uri, text) -> cosine in [-1, 1].
    """

    def __init__(
        self,
        chat: Optional[Callable[[str], Union[str, ChatResponse]]] = None,
        embed: Optional[Callable[[str], Sequence[float]]] = None,
        similarity: Optional[Callable[[str, str], float]] = None,
    ):
        self._chat = chat
        self._embed = embed
        self._similarity = similarity

    def complete_chat(self, request: ChatRequest) -> ChatResponse:
        if self._chat is None:
            raise BadRequest("no chat behavior scripted")
        out = self._chat(request.prompt)
        if isinstance(out, ChatResponse):
            return out
        return ChatResponse(text=out, finish_reason="stop")

    def embed_text(self, text: str) -> list[float]:
        if self._embed is None:
            raise BadRequest("no embed behavior scripted")
        return unit_norm(self._embed(text))

    def cross_modal_score(self, image_uri: str, text: str) -> SimilarityScore:
        if self._similarity is None:
            raise BadRequest("no similarity behavior scripted")
        return SimilarityScore(
            clipscore_from_cosine(float(self._similarity(image_uri, text))), scale="clipscore"
        )


class TranscriptGateway:
    """Replays canned responses keyed by request digest from a JSONL file.

    Transcript lines look like {"request_digest": ..., "response_text": ...}
    with an optional "finish_reason". A digest with no transcript entry is
    an error: offline runs must be exhaustive.
    """

    def __init__(self, entries: dict[str, dict]):
        self._entries = entries

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TranscriptGateway":
        entries: dict[str, dict] = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                if not raw.strip():
                    continue
                obj = json.loads(raw)
                if "request_digest" not in obj or "response_text" not in obj:
                    raise ValueError(f"transcript line {lineno}: missing keys")
                entries[obj["request_digest"]] = obj
        return cls(entries)

    def _lookup(self, digest: str, kind: str) -> dict:
        entry = self._entries.get(digest)
        if entry is None:
            raise TranscriptMiss(f"no transcript entry for {kind} request {digest[:12]}")
        return entry

    def complete_chat(self, request: ChatRequest) -> ChatResponse:
        entry = self._lookup(chat_digest(request), "chat")
        return ChatResponse(
            text=entry["response_text"],
            finish_reason=entry.get("finish_reason", "stop"),
        )

    def embed_text(self, text: str) -> list[float]:
        entry = self._lookup(embed_digest(text), "embed")
        return unit_norm(json.loads(entry["response_text"]))

    def cross_modal_score(self, image_uri: str, text: str) -> SimilarityScore:
        entry = self._lookup(similarity_digest(image_uri, text), "similarity")
        raw = json.loads(entry["response_text"])
        cos = raw["cosine"] if isinstance(raw, dict) else float(raw)
        return SimilarityScore(clipscore_from_cosine(float(cos)), scale="clipscore")


def write_transcript(path: Union[str, Path], entries: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


class CountingGateway:
    """Wrapper tallying calls and the in-flight high-water mark."""

    def __init__(self, inner: Gateway):
        self.inner = inner
        self.calls = {"chat": 0, "embed": 0, "similarity": 0}
        self.max_in_flight = 0
        self._in_flight = 0
        self._lock = threading.Lock()

    def _enter(self, kind: str) -> None:
        with self._lock:
            self.calls[kind] += 1
            self._in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self._in_flight)

    def _exit(self) -> None:
        with self._lock:
            self._in_flight -= 1

    def complete_chat(self, request: ChatRequest) -> ChatResponse:
        self._enter("chat")
        try:
            return self.inner.complete_chat(request)
        finally:
            self._exit()

    def embed_text(self, text: str) -> list[float]:
        self._enter("embed")
        try:
            return self.inner.embed_text(text)
        finally:
            self._exit()

    def cross_modal_score(self, image_uri: str, text: str) -> SimilarityScore:
        self._enter("similarity")
        try:
            return self.inner.cross_modal_score(image_uri, text)
        finally:
            self._exit()
