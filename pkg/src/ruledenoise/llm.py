"""Chat-completion backends: a deterministic script and an OpenAI-compatible HTTP client."""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
import httpx

from .errors import ConfigurationError, ProtocolError, TransportError
from .prompts import format_confidence, parse_confidence_subject
from .rules import apply_rules

log = logging.getLogger(__name__)

API_KEY_ENV = "RULEAGENT_API_KEY"
PROMPT_KINDS = ("planning", "confidence", "rules")


@dataclass
class ChatRequest:
    system: str
    user: str
    kind: str = "planning"
    model: str = "gpt-4o-mini"
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self):
        if not self.system.strip() or not self.user.strip():
            raise ValueError("system and user messages must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def messages(self) -> list[dict]:
        return [{"role": "system", "content": self.system}, {"role": "user", "content": self.user}]


@dataclass
class TranscriptEntry:
    request: ChatRequest
    response: str

    def to_json(self) -> dict:
        return {"request": asdict(self.request), "response": self.response}


class Backend:
    """Base class; subclasses implement :meth:`_complete`."""

    concurrent = False
    model = "scripted"
    temperature = 0.0
    max_tokens = 1024

    def __init__(self):
        self._transcript: list[TranscriptEntry] = []
        self._lock = threading.Lock()

    def request(self, kind: str, system: str, user: str) -> ChatRequest:
        return ChatRequest(system, user, kind, self.model, self.temperature, self.max_tokens)

    def complete(self, request: ChatRequest) -> str:
        text = self._complete(request)
        with self._lock:
            self._transcript.append(TranscriptEntry(request, text))
        return text

    def _complete(self, request: ChatRequest) -> str:
        raise NotImplementedError

    def transcript(self) -> list[TranscriptEntry]:
        with self._lock:
            return list(self._transcript)

    def write_transcript(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self.transcript():
                fh.write(json.dumps(entry.to_json(), sort_keys=True, ensure_ascii=False) + "\n")


class RuleResponder:
    """Deterministic stand-in for confidence reflection.

    Answers each confidence prompt by running the bound agent's current rule
    memory over the loss traces: ``noisy_score`` when an executable leaf
    fires, ``clean_score`` otherwise. Scripts select it with ``"@rules"``.
    """

    def __init__(self, clean_score: float = 1.5, noisy_score: float = 0.0):
        self.clean_score = clean_score
        self.noisy_score = noisy_score
        self.agent = None
        self._key = None
        self._fired: dict[tuple[int, int], tuple[str, ...]] = {}

    def bind(self, agent) -> "RuleResponder":
        self.agent = agent
        self._key = None
        return self

    def _verdicts(self):
        trace = self.agent.session.trace
        tree = self.agent.memories.rules.current
        key = (id(tree), tree.revision, trace.num_records)
        if key != self._key:
            verdicts = apply_rules(tree, trace)
            pairs = zip(trace.users.tolist(), trace.items.tolist())
            self._fired = dict(zip(pairs, verdicts.fired))
            self._key = key
        return self._fired

    def __call__(self, request: ChatRequest) -> str:
        if self.agent is None:
            raise ConfigurationError("rule responder has no agent bound")
        user, item = parse_confidence_subject(request.user)
        fired = self._verdicts().get((user, item))
        if fired is None:
            raise ConfigurationError(f"interaction ({user}, {item}) has no loss trace")
        if fired:
            ids = ", ".join(f"Rule-{r}" for r in fired)
            return format_confidence(self.noisy_score, f"its loss history triggers {ids}")
        return format_confidence(self.clean_score, "no executable denoising rule fires on its loss history")


RULE_RESPONDER_TOKEN = "@rules"


class ScriptedBackend(Backend):
    """Canned responses keyed by (prompt kind, occurrence index).

    ``script`` maps a prompt kind to either a list of responses or a dict
    with ``responses`` (list), optional ``cycle`` (bool) and optional
    ``default``. A response may be a callable taking the request, or the
    string ``"@rules"`` for a :class:`RuleResponder`.
    """

    def __init__(self, script: dict):
        super().__init__()
        self.script = {}
        for kind, spec in script.items():
            if isinstance(spec, (list, tuple)):
                spec = {"responses": list(spec)}
            elif isinstance(spec, str) or callable(spec):
                spec = {"default": spec}
            self.script[kind] = {
                "responses": list(spec.get("responses", [])),
                "cycle": bool(spec.get("cycle", False)),
                "default": spec.get("default"),
            }
        self._seen: dict[str, int] = {}
        self._responders = []
        for spec in self.script.values():
            spec["responses"] = [self._resolve(r) for r in spec["responses"]]
            spec["default"] = self._resolve(spec["default"])

    def _resolve(self, resp):
        if resp == RULE_RESPONDER_TOKEN:
            resp = RuleResponder()
        if hasattr(resp, "bind"):
            self._responders.append(resp)
        return resp

    def bind(self, agent) -> None:
        """Give rule-grounded responders access to the running agent."""
        for r in self._responders:
            r.bind(agent)

    @classmethod
    def from_file(cls, path) -> "ScriptedBackend":
        try:
            return cls(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read backend script {path}: {exc}") from None

    def _complete(self, request: ChatRequest) -> str:
        with self._lock:
            k = self._seen.get(request.kind, 0)
            self._seen[request.kind] = k + 1
        spec = self.script.get(request.kind)
        if spec is None:
            raise ConfigurationError(f"script has no entry for prompt kind {request.kind!r}")
        responses = spec["responses"]
        if k < len(responses):
            resp = responses[k]
        elif spec["cycle"] and responses:
            resp = responses[k % len(responses)]
        elif spec["default"] is not None:
            resp = spec["default"]
        else:
            raise ConfigurationError(f"script exhausted for {request.kind!r} at call {k}")
        return resp(request) if callable(resp) else resp


class HttpBackend(Backend):
    """POSTs to ``<base_url>/v1/chat/completions`` with bearer auth.

    Retries 429 and 5xx responses (and connection failures) with
    exponential backoff, ``attempts`` tries in total.
    """

    concurrent = True

    def __init__(self, base_url: str, model: str = "gpt-4o-mini", temperature: float = 0.0,
                 max_tokens: int = 1024, attempts: int = 3, backoff: float = 1.0,
                 timeout: float = 60.0, api_key: str | None = None,
                 transport: httpx.BaseTransport | None = None, sleep=time.sleep):
        super().__init__()
        api_key = api_key or os.environ.get(API_KEY_ENV, "").strip()
        if not api_key:
            raise ConfigurationError(f"environment variable {API_KEY_ENV} is not set")
        self.url = base_url.rstrip("/") + "/v1/chat/completions"
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.attempts = attempts
        self.backoff = backoff
        self._sleep = sleep
        self._client = httpx.Client(
            timeout=timeout, transport=transport,
            headers={"Authorization": f"Bearer {api_key}"},
        )

    def _complete(self, request: ChatRequest) -> str:
        payload = {
            "model": request.model,
            "messages": request.messages(),
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        last = None
        for attempt in range(self.attempts):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.url, json=payload)
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
                log.warning("chat request failed (%s), attempt %d", last, attempt + 1)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                log.warning("chat request got %s, attempt %d", last, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            return _extract_content(resp)
        raise TransportError(f"giving up after {self.attempts} attempts ({last})")

    def close(self):
        self._client.close()


def _extract_content(resp: httpx.Response) -> str:
    try:
        content = resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError):
        raise ProtocolError(f"unexpected response body: {resp.text[:200]}") from None
    if not isinstance(content, str) or not content.strip():
        raise ProtocolError("empty completion")
    return content


def make_backend(cfg: dict) -> Backend:
    """Build a backend from the ``backend`` section of a run config."""
    kind = cfg.get("kind", "scripted")
    if kind == "scripted":
        if "script" in cfg and isinstance(cfg["script"], dict):
            return ScriptedBackend(cfg["script"])
        if not cfg.get("script"):
            raise ConfigurationError("scripted backend needs a 'script' path")
        return ScriptedBackend.from_file(cfg["script"])
    if kind == "http":
        if not cfg.get("base_url"):
            raise ConfigurationError("http backend needs a 'base_url'")
        return HttpBackend(
            cfg["base_url"], cfg.get("model", "gpt-4o-mini"), float(cfg.get("temperature", 0.0)),
            int(cfg.get("max_tokens", 1024)),
        )
    raise ConfigurationError(f"unknown backend kind {kind!r}")
