"""Utterance log-likelihoods from an external language model over HTTP.

The prompt lists the few-shot pairs as ``Input:``/``Output:`` lines, then
the serialized salient steps of the hypothesised plan and a bare
``Output:``. The instruction is scored as the continuation (with a leading
space) and its token log-probabilities are summed.

Two wire protocols are supported:

``logprobs-json``
    ``POST {base_url}/v1/logprobs`` with ``{"model", "prompt", "continuation"}``;
    the reply is ``{"tokens": [...], "token_logprobs": [...]}`` covering the
    continuation only.
``openai-completions``
    the legacy completions endpoint with ``echo=true, max_tokens=0,
    logprobs=0``; continuation tokens are picked out by ``text_offset``.

The API key is read from ``LM_API_KEY`` and never from config files.
Replies are cached as JSON files keyed by the prompt and utterance hashes.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import requests

API_KEY_ENV = "LM_API_KEY"
PROVIDERS = ("logprobs-json", "openai-completions")


class LMError(RuntimeError):
    pass


class LMTransportError(LMError):
    def __init__(self, message: str, status: int | None = None, retry_after: float | None = None):
        super().__init__(message)
        self.status = status
        self.retry_after = retry_after


class LMUnavailableError(LMTransportError):
    """The endpoint could not be reached at all."""


class LMAuthError(LMTransportError):
    pass


class MalformedResponseError(LMError):
    pass


@dataclass(frozen=True)
class LMEndpoint:
    base_url: str
    model: str
    provider: str = "logprobs-json"
    timeout: float = 30.0
    max_in_flight: int = 4

    def __post_init__(self):
        if self.provider not in PROVIDERS:
            raise ValueError(f"provider must be one of {PROVIDERS}")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> LMEndpoint:
        forbidden = {"api_key", "key", "token"} & set(data)
        if forbidden:
            raise ValueError(f"credentials belong in ${API_KEY_ENV}, not in config ({sorted(forbidden)})")
        return cls(**data)


def build_prompt(examples: Sequence[tuple[str, str]], serialized: str) -> str:
    lines = []
    for inp, out in examples:
        lines.append(f"Input: {inp}")
        lines.append(f"Output: {out}")
    lines.append(f"Input: {serialized}")
    lines.append("Output:")
    return "\n".join(lines)


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _retry_after(response: requests.Response) -> float | None:
    value = response.headers.get("Retry-After")
    try:
        return float(value) if value is not None else None
    except ValueError:
        return None


def _number(value, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or math.isnan(value):
        raise MalformedResponseError(f"{what} is not a number: {value!r}")
    return float(value)


def parse_logprobs_json(payload: dict) -> tuple[list[str], list[float]]:
    try:
        tokens = list(payload["tokens"])
        logprobs = [_number(v, "token logprob") for v in payload["token_logprobs"]]
    except (KeyError, TypeError) as exc:
        raise MalformedResponseError(f"missing field in reply: {exc}") from None
    if len(tokens) != len(logprobs):
        raise MalformedResponseError("tokens and token_logprobs differ in length")
    return tokens, logprobs


def parse_openai_completion(payload: dict, prompt_chars: int) -> tuple[list[str], list[float]]:
    try:
        lp = payload["choices"][0]["logprobs"]
        rows = list(zip(lp["tokens"], lp["token_logprobs"], lp["text_offset"]))
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedResponseError(f"missing field in reply: {exc}") from None
    tokens, logprobs = [], []
    for token, logprob, offset in rows:
        if offset < prompt_chars:
            continue
        tokens.append(token)
        logprobs.append(_number(logprob, "token logprob"))
    if not tokens:
        raise MalformedResponseError("reply contains no continuation tokens")
    return tokens, logprobs


class ExternalLMScorer:
    """Callable ``(u, serialized) -> log P(u | serialized, examples)``.

    Safe to share between threads: requests are capped at
    ``endpoint.max_in_flight`` and each cache entry has a single writer.
    """

    def __init__(self, endpoint: LMEndpoint, examples: Sequence[tuple[str, str]], cache_dir: str | Path | None = None,
                 session: requests.Session | None = None):
        if not examples:
            raise ValueError("few-shot examples are required")
        self.endpoint = endpoint
        self.examples = tuple(examples)
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.session = session or requests.Session()
        self._slots = threading.BoundedSemaphore(endpoint.max_in_flight)
        self._key_locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self.requests_sent = 0

    def __call__(self, u: str, serialized: str) -> float:
        return self.score(u, serialized)

    def score(self, u: str, serialized: str) -> float:
        prompt = build_prompt(self.examples, serialized)
        key = self.cache_key(prompt, u)
        with self._lock_for(key):
            cached = self._read_cache(key)
            if cached is not None:
                return cached["logprob"]
            tokens, logprobs = self._request(prompt, " " + u)
            total = math.fsum(logprobs)
            self._write_cache(key, {
                "model": self.endpoint.model,
                "prompt_sha256": _sha(prompt),
                "utterance": u,
                "tokens": tokens,
                "token_logprobs": logprobs,
                "logprob": total,
            })
            return total

    def cache_key(self, prompt: str, u: str) -> str:
        return _sha(f"{self.endpoint.model}\x00{_sha(prompt)}\x00{u}")

    def _lock_for(self, key: str) -> threading.Lock:
        with self._locks_guard:
            return self._key_locks.setdefault(key, threading.Lock())

    def _cache_path(self, key: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / key[:2] / f"{key}.json"

    def _read_cache(self, key: str) -> dict | None:
        path = self._cache_path(key)
        if path is None or not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def _write_cache(self, key: str, record: dict) -> None:
        path = self._cache_path(key)
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(record, fh, sort_keys=True)
        os.replace(tmp, path)

    def _request(self, prompt: str, continuation: str) -> tuple[list[str], list[float]]:
        ep = self.endpoint
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        base = ep.base_url.rstrip("/")
        if ep.provider == "logprobs-json":
            url = f"{base}/v1/logprobs"
            body = {"model": ep.model, "prompt": prompt, "continuation": continuation}
        else:
            url = f"{base}/v1/completions"
            body = {"model": ep.model, "prompt": prompt + continuation, "max_tokens": 0, "echo": True, "logprobs": 0}
        with self._slots:
            try:
                response = self.session.post(url, json=body, headers=headers, timeout=ep.timeout)
            except requests.ConnectionError as exc:
                raise LMUnavailableError(f"cannot reach {url}: {exc}") from exc
            except requests.Timeout as exc:
                raise LMUnavailableError(f"timed out talking to {url}") from exc
            self.requests_sent += 1
        if response.status_code in (401, 403):
            raise LMAuthError(f"{url} rejected the credentials", response.status_code, _retry_after(response))
        if response.status_code >= 400:
            raise LMTransportError(
                f"{url} answered {response.status_code}", response.status_code, _retry_after(response)
            )
        try:
            payload = response.json()
        except ValueError:
            raise MalformedResponseError("reply is not JSON") from None
        if ep.provider == "logprobs-json":
            return parse_logprobs_json(payload)
        return parse_openai_completion(payload, len(prompt))
