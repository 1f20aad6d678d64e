"""Uniform access layer for model calls.

All generation, extraction, classification and judging traffic goes through
one Gateway so that caching, retry policy, determinism controls and the
offline stub behave identically for every caller. Responses are cached
content-addressed by request hash, which is what makes pipeline runs
freezable and resumable without re-paying for model calls.
"""

from __future__ import annotations

import json
import os
import re
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

from .canonical import canonical_json, digest

ROLE_TAGS = frozenset(
    {
        "vignette_gen",
        "extraction",
        "support_class",
        "g_classifier",
        "perturber",
        "rubric_agent",
        "judge",
        "candidate",
    }
)

# Judges must stay near-deterministic; everything else defaults to creative.
JUDGE_MAX_TEMPERATURE = 0.3
ROLE_DEFAULT_TEMPERATURE = {"judge": 0.0, "candidate": 0.0}
GENERATION_DEFAULT_TEMPERATURE = 0.7


class GatewayError(Exception):
    """Base class for gateway failures."""


class TransportError(GatewayError):
    """Provider unreachable or persistently failing after retries."""


class DecodeError(GatewayError):
    """Provider returned a payload that could not be decoded."""


class UnscriptedRequestError(GatewayError):
    """The stub provider received a request no script rule matches."""


@dataclass(frozen=True)
class ModelRequest:
    role_tag: str
    parts: dict[str, str]
    temperature: float | None = None
    max_tokens: int | None = None
    provider_hint: str | None = None

    def __post_init__(self):
        if self.role_tag not in ROLE_TAGS:
            raise ValueError(f"unknown role_tag {self.role_tag!r}")
        temp = self.temperature
        if self.role_tag == "judge" and temp is not None and temp > JUDGE_MAX_TEMPERATURE:
            raise ValueError(
                f"judge requests must use temperature <= {JUDGE_MAX_TEMPERATURE}, got {temp}"
            )

    @property
    def effective_temperature(self) -> float:
        if self.temperature is not None:
            return self.temperature
        return ROLE_DEFAULT_TEMPERATURE.get(self.role_tag, GENERATION_DEFAULT_TEMPERATURE)

    @property
    def joined(self) -> str:
        return "\n".join(self.parts[k] for k in sorted(self.parts))

    @property
    def request_hash(self) -> str:
        return digest(
            {
                "role_tag": self.role_tag,
                "parts": self.parts,
                "temperature": self.effective_temperature,
                "max_tokens": self.max_tokens,
                "provider_hint": self.provider_hint,
            }
        )


@dataclass
class ModelResponse:
    text: str
    provider_id: str
    latency: float = 0.0
    cached: bool = False
    retries: int = 0

    def json(self) -> Any:
        obj = extract_json(self.text)
        if obj is None:
            raise DecodeError(f"response is not JSON: {self.text[:120]!r}")
        return obj


def extract_json(text: str) -> Any:
    """Parse JSON from a response, tolerating surrounding prose."""
    text = (text or "").strip()
    if not text:
        return None
    try:
        return json.loads(text)
    except (json.JSONDecodeError, ValueError):
        pass
    start = text.find("{")
    end = text.rfind("}")
    if start != -1 and end > start:
        try:
            return json.loads(text[start : end + 1])
        except (json.JSONDecodeError, ValueError):
            return None
    return None


class Provider(Protocol):
    provider_id: str

    def complete_once(self, request: ModelRequest) -> str: ...


@dataclass
class ProviderConfig:
    provider_id: str
    endpoint: str
    model: str
    credential_env: str = "GUIDEBENCH_API_KEY"
    max_retries: int = 2
    timeout: float = 60.0
    rate_limit_per_minute: float | None = None

    def to_public_dict(self) -> dict:
        # The credential env-var *name* is configuration; its value never is.
        return {
            "provider_id": self.provider_id,
            "endpoint": self.endpoint,
            "model": self.model,
            "credential_env": self.credential_env,
        }


class HTTPChatProvider:
    """Vendor REST chat-completion client (OpenAI-style wire protocol)."""

    def __init__(self, config: ProviderConfig):
        self.config = config
        self.provider_id = config.provider_id
        self._last_call = 0.0
        self._rate_lock = threading.Lock()

    def _respect_rate_limit(self) -> None:
        if not self.config.rate_limit_per_minute:
            return
        interval = 60.0 / self.config.rate_limit_per_minute
        with self._rate_lock:
            wait = self._last_call + interval - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last_call = time.monotonic()

    def complete_once(self, request: ModelRequest) -> str:
        import requests

        self._respect_rate_limit()
        key = os.environ.get(self.config.credential_env, "")
        if not key:
            raise TransportError(
                f"no credential in ${self.config.credential_env} for {self.provider_id}"
            )
        messages = []
        if "system" in request.parts:
            messages.append({"role": "system", "content": request.parts["system"]})
        user_parts = [v for k, v in sorted(request.parts.items()) if k != "system"]
        messages.append({"role": "user", "content": "\n\n".join(user_parts)})
        payload: dict[str, Any] = {
            "model": self.config.model,
            "messages": messages,
            "temperature": request.effective_temperature,
        }
        if request.max_tokens is not None:
            payload["max_tokens"] = request.max_tokens
        try:
            resp = requests.post(
                self.config.endpoint,
                json=payload,
                headers={"Authorization": f"Bearer {key}"},
                timeout=self.config.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code != 200:
            raise TransportError(f"HTTP {resp.status_code} from {self.provider_id}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise DecodeError(f"malformed payload from {self.provider_id}: {exc}") from exc


class StubProvider:
    """Scripted offline provider.

    The script is an ordered list of rules. A rule matches when its "role"
    (if given) equals the request role and its "contains" (if given) is a
    substring of the request's joined parts. The first matching rule answers.
    Rules may carry a single "response", a JSON payload "response_json", or a
    "responses" sequence consumed call by call (the last entry repeats).
    "fail_times" injects that many transport failures before answering.
    Requests matching no rule raise UnscriptedRequestError: offline tests are
    required to enumerate every call the pipeline makes.
    """

    def __init__(self, script: list[dict], provider_id: str = "stub"):
        self.provider_id = provider_id
        self._rules = [dict(rule) for rule in script]
        self._cursor = [0] * len(self._rules)
        self._fails_left = [int(rule.get("fail_times", 0)) for rule in self._rules]
        self._lock = threading.Lock()
        self.calls: list[dict] = []

    def _matches(self, rule: dict, request: ModelRequest) -> bool:
        role = rule.get("role")
        if role is not None and role != request.role_tag:
            return False
        needle = rule.get("contains")
        if needle is not None and needle not in request.joined:
            return False
        return True

    def complete_once(self, request: ModelRequest) -> str:
        with self._lock:
            self.calls.append({"role_tag": request.role_tag, "hash": request.request_hash})
            for i, rule in enumerate(self._rules):
                if not self._matches(rule, request):
                    continue
                if self._fails_left[i] > 0:
                    self._fails_left[i] -= 1
                    raise TransportError(f"scripted failure ({rule.get('contains', rule.get('role'))})")
                if "responses" in rule:
                    seq = rule["responses"]
                    idx = min(self._cursor[i], len(seq) - 1)
                    self._cursor[i] += 1
                    value = seq[idx]
                elif "response_json" in rule:
                    value = rule["response_json"]
                else:
                    value = rule.get("response", "")
                if not isinstance(value, str):
                    value = canonical_json(value)
                return value
        raise UnscriptedRequestError(
            f"no script rule matches role_tag={request.role_tag!r}"
        )


def load_stub_script(path: str | Path) -> list[dict]:
    """Load stub rules from one JSON file or every *.json file in a directory."""
    p = Path(path)
    if p.is_dir():
        rules: list[dict] = []
        for f in sorted(p.glob("*.json")):
            rules.extend(json.loads(f.read_text()))
        return rules
    return json.loads(p.read_text())


@dataclass
class Gateway:
    """Cached, retrying front door to one provider."""

    provider: Provider
    cache_dir: str | Path | None = None
    max_retries: int = 2
    backoff_base: float = 0.05
    max_in_flight: int = 4
    _memory_cache: dict[str, str] = field(default_factory=dict, repr=False)
    _sem: threading.Semaphore = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        self._sem = threading.Semaphore(self.max_in_flight)
        if self.cache_dir is not None:
            Path(self.cache_dir).mkdir(parents=True, exist_ok=True)

    # -- cache ----------------------------------------------------------
    def _cache_path(self, request_hash: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return Path(self.cache_dir) / (request_hash.replace(":", "_") + ".json")

    def _cache_get(self, request: ModelRequest) -> str | None:
        h = request.request_hash
        if h in self._memory_cache:
            return self._memory_cache[h]
        path = self._cache_path(h)
        if path is not None and path.exists():
            entry = json.loads(path.read_text())
            self._memory_cache[h] = entry["text"]
            return entry["text"]
        return None

    def _cache_put(self, request: ModelRequest, text: str) -> None:
        h = request.request_hash
        self._memory_cache[h] = text
        path = self._cache_path(h)
        if path is None:
            return
        entry = {"request_hash": h, "role_tag": request.role_tag, "text": text,
                 "provider_id": self.provider.provider_id}
        fd, tmp = tempfile.mkstemp(dir=str(path.parent), suffix=".tmp")
        with os.fdopen(fd, "w") as f:
            f.write(json.dumps(entry, sort_keys=True))
        os.replace(tmp, path)

    # -- completion -----------------------------------------------------
    def complete(self, request: ModelRequest) -> ModelResponse:
        if request.role_tag == "judge" and request.effective_temperature > JUDGE_MAX_TEMPERATURE:
            raise ValueError("judge-role temperature above determinism bound")
        cached = self._cache_get(request)
        if cached is not None:
            return ModelResponse(text=cached, provider_id=self.provider.provider_id,
                                 cached=True)
        with self._sem:
            attempt = 0
            start = time.monotonic()
            while True:
                try:
                    text = self.provider.complete_once(request)
                    break
                except TransportError:
                    if attempt >= self.max_retries:
                        raise
                    time.sleep(self.backoff_base * (2**attempt))
                    attempt += 1
        latency = time.monotonic() - start
        self._cache_put(request, text)
        return ModelResponse(text=text, provider_id=self.provider.provider_id,
                             latency=latency, retries=attempt)

    def complete_json(self, request: ModelRequest) -> Any:
        return self.complete(request).json()


def stub_gateway(script: list[dict], provider_id: str = "stub",
                 cache_dir: str | Path | None = None) -> Gateway:
    return Gateway(provider=StubProvider(script, provider_id=provider_id),
                   cache_dir=cache_dir)


def judge_ensemble(providers: list[Provider], cache_dir: str | Path | None = None) -> list[Gateway]:
    """Wrap an odd-sized set of judge providers, one Gateway each."""
    if len(providers) % 2 == 0 or not providers:
        raise ValueError("judge ensemble must have an odd size >= 1")
    gateways = []
    for i, provider in enumerate(providers):
        sub = None if cache_dir is None else Path(cache_dir) / f"judge{i}"
        gateways.append(Gateway(provider=provider, cache_dir=sub))
    return gateways


_SECRET_PATTERN = re.compile(r"(api[_-]?key|authorization|bearer)", re.IGNORECASE)


def scan_for_secrets(root: str | Path, secrets: list[str]) -> list[str]:
    """Return files under root containing any secret value or credential header."""
    findings = []
    for path in sorted(Path(root).rglob("*")):
        if not path.is_file():
            continue
        try:
            content = path.read_text(errors="ignore")
        except OSError:
            continue
        if any(s and s in content for s in secrets) or _SECRET_PATTERN.search(content):
            findings.append(str(path))
    return findings
