"""Backend gateway: prompt rendering, a scripted backend and a remote chat-completion adapter."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping

import httpx

log = logging.getLogger(__name__)

PLACEHOLDER = re.compile(r"<<<<([A-Z][A-Z0-9_]*)>>>>")
API_KEY_ENV = "EHRCON_API_KEY"

TEMPLATE_NAMES = (
    "note_segmentation",
    "ner",
    "time_filter",
    "table_identification",
    "pseudo_table",
    "self_correction",
    "value_reformat",
)


class GatewayError(RuntimeError):
    pass


class PromptError(GatewayError):
    pass


class BackendTimeout(GatewayError):
    pass


class TransportError(GatewayError):
    pass


class ScriptKeyMissing(GatewayError):
    pass


@dataclass(frozen=True)
class PromptInstance:
    template_name: str
    placeholders: tuple[tuple[str, str], ...]
    rendered_text: str
    note_id: str = ""
    entity: str = ""

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.rendered_text.encode("utf-8")).hexdigest()


_TEMPLATE_CACHE: dict[tuple[str, str | None], str] = {}


def load_template(name: str, template_dir: str | Path | None = None) -> str:
    key = (name, str(template_dir) if template_dir else None)
    if key in _TEMPLATE_CACHE:
        return _TEMPLATE_CACHE[key]
    if template_dir is not None:
        text = (Path(template_dir) / f"{name}.txt").read_text(encoding="utf-8")
    else:
        try:
            text = resources.files("ehrconsist").joinpath(f"prompts/{name}.txt").read_text(encoding="utf-8")
        except FileNotFoundError:
            raise PromptError(f"no prompt template named {name!r}") from None
    _TEMPLATE_CACHE[key] = text
    return text


def template_placeholders(text: str) -> set[str]:
    return set(PLACEHOLDER.findall(text))


def render(template_name: str, values: Mapping[str, str], *, note_id: str = "", entity: str = "",
           template_dir: str | Path | None = None) -> PromptInstance:
    """Bind every placeholder; unknown or missing names are errors."""
    text = load_template(template_name, template_dir)
    needed = template_placeholders(text)
    missing = needed - set(values)
    if missing:
        raise PromptError(f"{template_name}: unbound placeholders {sorted(missing)}")
    extra = set(values) - needed
    if extra:
        raise PromptError(f"{template_name}: unknown placeholders {sorted(extra)}")
    # bound text is inserted in one pass, so markers inside values are never re-expanded;
    # they are defused so the rendered prompt carries no marker at all
    safe = {k: str(v).replace("<<<<", "<<< <").replace(">>>>", "> >>>") for k, v in values.items()}
    rendered = PLACEHOLDER.sub(lambda m: safe[m.group(1)], text)
    if "<<<<" in rendered:
        raise PromptError(f"{template_name}: residual placeholder marker")
    return PromptInstance(template_name, tuple(sorted(safe.items())), rendered, note_id, entity)


class BackendKind(str, Enum):
    REMOTE = "remote"
    SCRIPTED = "scripted"


@dataclass(frozen=True)
class RetryPolicy:
    retries: int = 2
    backoff_seconds: float = 0.5


@dataclass(frozen=True)
class BackendConfig:
    kind: BackendKind = BackendKind.SCRIPTED
    endpoint_url: str = ""
    model: str = ""
    temperature: float = 0.0
    max_concurrent_requests: int = 4
    timeout_seconds: float = 60.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    script_path: str = ""
    cache_dir: str = ""

    def validate(self) -> "BackendConfig":
        if self.max_concurrent_requests < 1:
            raise GatewayError("max_concurrent_requests must be >= 1")
        if self.timeout_seconds <= 0:
            raise GatewayError("timeout must be positive")
        if self.retry.retries < 0:
            raise GatewayError("retries must be >= 0")
        if self.kind is BackendKind.SCRIPTED and not self.script_path:
            raise GatewayError("scripted backend needs a script path")
        if self.kind is BackendKind.REMOTE and (not self.endpoint_url or not self.model):
            raise GatewayError("remote backend needs an endpoint url and a model name")
        return self

    def to_json(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value, "endpoint_url": self.endpoint_url, "model": self.model,
            "temperature": self.temperature, "timeout_seconds": self.timeout_seconds,
            "retries": self.retry.retries, "script_path": self.script_path,
        }


class Backend:
    """All model access goes through ``complete``."""

    def complete(self, prompt: PromptInstance) -> str:  # pragma: no cover - interface
        raise NotImplementedError


# ---------------------------------------------------------------------------
# scripted backend

def script_key(template: str, note_id: str, entity: str) -> str:
    return f"{template}|{note_id}|{entity}"


@dataclass
class Script:
    """Scripted answers.

    JSON shape::

        {"version": 1,
         "responses": {"ner|F1|*": "...", "time_filter|F1|HR@3=87": "..."},
         "defaults": {"note_segmentation": "..."}}

    Lookup order: exact ``template|note|entity`` key, then ``template|note|*``,
    then the per-template default.
    """

    responses: dict[str, str] = field(default_factory=dict)
    defaults: dict[str, str] = field(default_factory=dict)

    def add(self, template: str, note_id: str, entity: str, answer: str) -> None:
        self.responses[script_key(template, note_id, entity)] = answer

    def to_json(self) -> dict[str, Any]:
        return {"version": 1, "responses": dict(sorted(self.responses.items())),
                "defaults": dict(sorted(self.defaults.items()))}

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, ensure_ascii=False) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Script":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict) or not isinstance(data.get("responses", {}), dict):
            raise GatewayError(f"{path}: not a script file")
        return cls(dict(data.get("responses", {})), dict(data.get("defaults", {})))


class ScriptedBackend(Backend):
    def __init__(self, script: Script) -> None:
        self.script = script

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        return cls(Script.load(path))

    def complete(self, prompt: PromptInstance) -> str:
        key = script_key(prompt.template_name, prompt.note_id, prompt.entity)
        if key in self.script.responses:
            return self.script.responses[key]
        wildcard = script_key(prompt.template_name, prompt.note_id, "*")
        if wildcard in self.script.responses:
            return self.script.responses[wildcard]
        if prompt.template_name in self.script.defaults:
            return self.script.defaults[prompt.template_name]
        raise ScriptKeyMissing(f"no scripted answer for {key}")


# ---------------------------------------------------------------------------
# remote backend

class ResponseCache:
    """Answers keyed by the sha256 of the rendered prompt; optionally mirrored to disk."""

    def __init__(self, directory: str | Path | None = None) -> None:
        self._mem: dict[str, str] = {}
        self._lock = threading.Lock()
        self._dir = Path(directory) if directory else None
        if self._dir:
            self._dir.mkdir(parents=True, exist_ok=True)

    def get(self, digest: str) -> str | None:
        with self._lock:
            if digest in self._mem:
                return self._mem[digest]
        if self._dir:
            p = self._dir / f"{digest}.json"
            if p.exists():
                text = json.loads(p.read_text(encoding="utf-8"))["response"]
                with self._lock:
                    self._mem[digest] = text
                return text
        return None

    def put(self, digest: str, text: str) -> None:
        with self._lock:
            self._mem[digest] = text
        if self._dir:
            (self._dir / f"{digest}.json").write_text(json.dumps({"response": text}), encoding="utf-8")


class RemoteBackend(Backend):
    """OpenAI-style chat-completion client; see docs/backend_wire_format.md."""

    def __init__(self, cfg: BackendConfig, *, transport: httpx.BaseTransport | None = None,
                 cache: ResponseCache | None = None, sleep: Callable[[float], None] = time.sleep) -> None:
        self.cfg = cfg
        self._sem = threading.BoundedSemaphore(cfg.max_concurrent_requests)
        self._client = httpx.Client(timeout=cfg.timeout_seconds, transport=transport)
        self._cache = cache if cache is not None else ResponseCache(cfg.cache_dir or None)
        self._sleep = sleep

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(API_KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _body(self, prompt: PromptInstance) -> dict[str, Any]:
        return {
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "messages": [{"role": "user", "content": prompt.rendered_text}],
        }

    def complete(self, prompt: PromptInstance) -> str:
        cached = self._cache.get(prompt.digest)
        if cached is not None:
            return cached
        attempts = self.cfg.retry.retries + 1
        last: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                self._sleep(self.cfg.retry.backoff_seconds * (2 ** (attempt - 1)))
            try:
                with self._sem:
                    resp = self._client.post(self.cfg.endpoint_url, json=self._body(prompt),
                                             headers=self._headers())
            except httpx.TimeoutException as exc:
                last = BackendTimeout(f"request timed out: {exc}")
                continue
            except httpx.TransportError as exc:
                last = TransportError(f"transport failure: {exc}")
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = TransportError(f"server answered {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise TransportError(f"request rejected with {resp.status_code}: {resp.text[:200]}")
            try:
                text = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise TransportError(f"malformed completion payload: {exc}") from None
            if not isinstance(text, str):
                raise TransportError("completion content is not text")
            self._cache.put(prompt.digest, text)
            return text
        log.warning("giving up on %s after %d attempts", prompt.template_name, attempts)
        assert last is not None
        raise last

    def close(self) -> None:
        self._client.close()


def make_backend(cfg: BackendConfig) -> Backend:
    cfg.validate()
    if cfg.kind is BackendKind.SCRIPTED:
        return ScriptedBackend.from_file(cfg.script_path)
    return RemoteBackend(cfg)


_backends: dict[BackendConfig, Backend] = {}
_backends_lock = threading.Lock()


def complete(prompt: PromptInstance, cfg: BackendConfig | Backend) -> str:
    """Answer ``prompt`` with a backend instance or one built (once) from a config."""
    if isinstance(cfg, Backend):
        return cfg.complete(prompt)
    with _backends_lock:
        backend = _backends.get(cfg)
        if backend is None:
            backend = _backends[cfg] = make_backend(cfg)
    return backend.complete(prompt)
