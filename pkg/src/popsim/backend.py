"""Text-generation and embedding backends.

All model calls go through :class:`Backend`. Three implementations exist:

* :class:`ScriptedBackend` answers from an ordered rule list and never
  touches the network. Used by tests and by offline runs.
* :class:`HttpBackend` talks to an OpenAI-compatible HTTP endpoint.
* :class:`ReplayBackend` wraps another backend with an append-only
  record/replay cache, or serves a recorded cache on its own.

Prompts are rendered from a template file (see :class:`TemplateStore`);
templates are data, so wording can change without touching code.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import string
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .errors import (
    BackendUnavailable,
    MalformedResponse,
    PreconditionError,
    TemplateError,
)

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"
DEFAULT_TEMPLATES = DATA_DIR / "templates.txt"
DEFAULT_RULES = DATA_DIR / "scripted_rules.yaml"


class PromptKind(str, Enum):
    CHOOSE_POSITIVE = "choose-positive"
    RANK_CANDIDATES = "rank-candidates"
    UPDATE_USER_MEMORY = "update-user-memory"
    EXTRACT_RELEVANT = "extract-relevant-preferences"
    FUSE_PREFERENCES = "fuse-preferences"
    UPDATE_ITEM_MEMORY = "update-item-memory"
    EXTRACT_TAGS = "extract-tags"
    NAME_GROUP = "name-group"


# Slots every template of a kind must receive. Templates may reference more.
KIND_SLOTS: dict[PromptKind, frozenset[str]] = {
    PromptKind.CHOOSE_POSITIVE: frozenset({"neg", "pos"}),
    PromptKind.RANK_CANDIDATES: frozenset({"candidates"}),
    PromptKind.UPDATE_USER_MEMORY: frozenset({"memory", "pos", "neg"}),
    PromptKind.EXTRACT_RELEVANT: frozenset({"memory", "source_domain", "target_domain"}),
    PromptKind.FUSE_PREFERENCES: frozenset({"separated", "extracts", "fused"}),
    PromptKind.UPDATE_ITEM_MEMORY: frozenset({"item", "user_memory"}),
    PromptKind.EXTRACT_TAGS: frozenset({"memory"}),
    PromptKind.NAME_GROUP: frozenset({"tags"}),
}

DEFAULT_MEMORY_BUDGET = 2000


def truncate_memory(text: str, budget: int = DEFAULT_MEMORY_BUDGET) -> str:
    """Keep the newest ``budget`` characters of a memory text.

    Memories are rewritten in place, so the oldest content sits at the front.
    """
    if budget <= 0 or len(text) <= budget:
        return text
    return text[-budget:]


def digest(obj: Any) -> str:
    """sha256 over canonical JSON (sorted keys, no whitespace)."""
    if isinstance(obj, bytes):
        payload = obj
    elif isinstance(obj, str):
        payload = obj.encode("utf-8")
    else:
        payload = json.dumps(obj, sort_keys=True, separators=(",", ":"),
                             ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True)
class PromptRequest:
    kind: PromptKind
    template_id: str
    slots: Mapping[str, str]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", PromptKind(self.kind))
        object.__setattr__(self, "slots", {k: str(v) for k, v in self.slots.items()})

    def validate(self) -> None:
        missing = KIND_SLOTS[self.kind] - set(self.slots)
        if missing:
            raise PreconditionError(
                f"{self.kind.value} request missing slots {sorted(missing)}")

    def key(self) -> str:
        """Cache key: digest of (template_id, canonical slots, seed)."""
        return digest({"template_id": self.template_id,
                       "slots": dict(self.slots), "seed": self.seed})


@dataclass
class CompletionResponse:
    text: str
    usage: dict[str, int] = field(default_factory=dict)
    prompt: str = ""
    cached: bool = False


# ---------------------------------------------------------------- templates

_SECTION = re.compile(r"^=== *([A-Za-z0-9_.\-]+) *===\s*$")


def template_fields(template: str) -> list[str]:
    """Placeholder names in order of first appearance. ``{{``/``}}`` escape braces."""
    names = []
    try:
        parsed = list(string.Formatter().parse(template))
    except ValueError as exc:
        raise TemplateError(f"malformed template: {exc}") from exc
    for _, name, spec, conv in parsed:
        if name is None:
            continue
        if not name.isidentifier() or spec or conv:
            raise TemplateError(f"unsupported placeholder {{{name}}}")
        if name not in names:
            names.append(name)
    return names


def render_template(template: str, slots: Mapping[str, str]) -> str:
    """Substitute every ``{slot}``. Missing and unused slots are both errors."""
    fields = template_fields(template)
    missing = [f for f in fields if f not in slots]
    if missing:
        raise TemplateError(f"missing slots: {missing}")
    unused = sorted(set(slots) - set(fields))
    if unused:
        raise TemplateError(f"unused slots: {unused}")
    return template.format_map({k: str(v) for k, v in slots.items()})


class TemplateStore:
    """Named templates parsed from a sectioned text file.

    File layout::

        === choose_positive ===
        ...template text with {slots}...

        === rank_candidates ===
        ...
    """

    def __init__(self, templates: Mapping[str, str], source: str = "<memory>"):
        self.templates = dict(templates)
        self.source = source
        for tid, text in self.templates.items():
            fields = template_fields(text)
            # position bias: the negative candidate must be shown first
            if "neg" in fields and "pos" in fields and text.index("{neg}") > text.index("{pos}"):
                raise TemplateError(f"template {tid!r} places {{pos}} before {{neg}}")

    @classmethod
    def parse(cls, text: str, source: str = "<memory>") -> "TemplateStore":
        templates: dict[str, list[str]] = {}
        current = None
        for line in text.splitlines():
            m = _SECTION.match(line)
            if m:
                current = m.group(1)
                if current in templates:
                    raise TemplateError(f"duplicate template {current!r} in {source}")
                templates[current] = []
            elif current is not None:
                templates[current].append(line)
            elif line.strip() and not line.startswith("#"):
                raise TemplateError(f"text outside a template section in {source}")
        return cls({k: "\n".join(v).strip("\n") for k, v in templates.items()}, source)

    @classmethod
    def from_file(cls, path: str | os.PathLike | None = None) -> "TemplateStore":
        path = Path(path) if path else DEFAULT_TEMPLATES
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise TemplateError(f"cannot read template file {path}: {exc}") from exc
        return cls.parse(text, str(path))

    def render(self, template_id: str, slots: Mapping[str, str]) -> str:
        if template_id not in self.templates:
            raise TemplateError(f"unknown template {template_id!r}")
        return render_template(self.templates[template_id], slots)

    def digest(self) -> str:
        return digest(self.templates)


# ------------------------------------------------------------------ backends

def check_vector(vec: Sequence[float], dimension: int) -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != dimension:
        raise MalformedResponse(f"embedding has shape {arr.shape}, expected ({dimension},)")
    norm = float(np.linalg.norm(arr))
    if not np.isfinite(norm) or norm <= 0:
        raise MalformedResponse("embedding norm must be finite and positive")
    return arr


class Backend:
    """Common request validation and prompt rendering.

    Subclasses implement ``_generate(request, prompt)`` and ``_embed(text)``.
    """

    dimension: int

    def __init__(self, templates: TemplateStore | None = None, dimension: int = 16):
        self.templates = templates or TemplateStore.from_file()
        self.dimension = dimension
        self.calls: list[tuple[str, str]] = []  # (kind, template_id), for call-order checks
        self._lock = threading.Lock()

    def complete(self, request: PromptRequest) -> CompletionResponse:
        request.validate()
        prompt = self.templates.render(request.template_id, request.slots)
        with self._lock:
            self.calls.append((request.kind.value, request.template_id))
        resp = self._generate(request, prompt)
        resp.prompt = prompt
        if not resp.text or not resp.text.strip():
            raise MalformedResponse(f"empty generation for {request.kind.value}")
        return resp

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise PreconditionError("cannot embed empty text")
        return check_vector(self._embed(text), self.dimension)

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.embed(t) for t in texts]

    def identity(self) -> str:
        raise NotImplementedError

    def _generate(self, request: PromptRequest, prompt: str) -> CompletionResponse:
        raise NotImplementedError

    def _embed(self, text: str) -> Sequence[float]:
        raise NotImplementedError


_SLOT_REF = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


@dataclass
class ScriptedRule:
    """One scripted completion rule. A rule with no predicates is a catch-all."""

    response: str
    kind: str | None = None
    template_id: str | None = None
    contains: str | None = None  # substring of any slot value
    slot_contains: dict[str, str] = field(default_factory=dict)
    seed: int | None = None

    @property
    def is_catch_all(self) -> bool:
        return (self.kind is None and self.template_id is None and self.contains is None
                and not self.slot_contains and self.seed is None)

    def matches(self, request: PromptRequest) -> bool:
        if self.kind is not None and request.kind.value != self.kind:
            return False
        if self.template_id is not None and request.template_id != self.template_id:
            return False
        if self.seed is not None and request.seed != self.seed:
            return False
        if self.contains is not None and not any(self.contains in v for v in request.slots.values()):
            return False
        for name, needle in self.slot_contains.items():
            if needle not in request.slots.get(name, ""):
                return False
        return True

    def render(self, request: PromptRequest) -> str:
        # {slot} references are filled from the request; unknown names stay literal
        values = dict(request.slots, seed=str(request.seed))
        return _SLOT_REF.sub(lambda m: values.get(m.group(1), m.group(0)), self.response)


@dataclass
class EmbeddingRule:
    vector: list[float]
    text: str | None = None       # exact match (case-insensitive, stripped)
    contains: str | None = None   # substring match (case-insensitive)

    def matches(self, text: str) -> bool:
        t = text.strip().lower()
        if self.text is not None:
            return t == self.text.strip().lower()
        if self.contains is not None:
            return self.contains.lower() in t
        return False


def hash_vector(text: str, dimension: int) -> np.ndarray:
    """Deterministic pseudo-embedding built from sha256 bytes; platform independent."""
    out = bytearray()
    counter = 0
    norm_text = text.strip().lower().encode("utf-8")
    while len(out) < dimension:
        out.extend(hashlib.sha256(norm_text + counter.to_bytes(4, "big")).digest())
        counter += 1
    raw = np.frombuffer(bytes(out[:dimension]), dtype=np.uint8).astype(np.float64)
    vec = raw / 127.5 - 1.0
    if not np.any(vec):
        vec[0] = 1.0
    return vec


class ScriptedBackend(Backend):
    """Deterministic rule-driven backend; first matching rule wins.

    Completion rules must end with a catch-all. Embeddings come from the
    embedding rules, falling back to :func:`hash_vector`.
    """

    def __init__(self, rules: Sequence[ScriptedRule], embeddings: Sequence[EmbeddingRule] = (),
                 templates: TemplateStore | None = None, dimension: int = 16,
                 source: str = "<memory>"):
        super().__init__(templates, dimension)
        self.rules = list(rules)
        self.embedding_rules = list(embeddings)
        self.source = source
        if not any(r.is_catch_all for r in self.rules):
            raise ValueError("scripted rules need a catch-all rule (no predicates)")
        for r in self.embedding_rules:
            if len(r.vector) != dimension:
                raise ValueError(f"embedding rule vector length {len(r.vector)} != dimension {dimension}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], templates: TemplateStore | None = None,
                  source: str = "<memory>") -> "ScriptedBackend":
        dimension = int(data.get("dimension", 16))
        rules = [ScriptedRule(**r) for r in data.get("completions", [])]
        embeddings = [EmbeddingRule(**e) for e in data.get("embeddings", [])]
        return cls(rules, embeddings, templates=templates, dimension=dimension, source=source)

    @classmethod
    def from_file(cls, path: str | os.PathLike | None = None,
                  templates: TemplateStore | None = None) -> "ScriptedBackend":
        path = Path(path) if path else DEFAULT_RULES
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        backend = cls.from_dict(data, templates=templates, source=str(path))
        backend._file_digest = digest(path.read_bytes())
        return backend

    def identity(self) -> str:
        fd = getattr(self, "_file_digest", None) or digest(
            [r.__dict__ for r in self.rules] + [e.__dict__ for e in self.embedding_rules])
        return f"scripted:{fd[:16]}"

    def _generate(self, request, prompt):
        for rule in self.rules:
            if rule.matches(request):
                text = rule.render(request)
                return CompletionResponse(text, {"prompt_tokens": len(prompt.split()),
                                                 "completion_tokens": len(text.split())})
        raise AssertionError("unreachable: catch-all rule exists")

    def _embed(self, text):
        for rule in self.embedding_rules:
            if rule.matches(text):
                return rule.vector
        return hash_vector(text, self.dimension)


class HttpBackend(Backend):
    """OpenAI-compatible chat-completions and embeddings client.

    Transport failures are retried ``retries`` times in total with exponential
    backoff (``backoff``, ``2*backoff``, ...), then surface as
    :class:`BackendUnavailable`.
    """

    def __init__(self, endpoint: str, model: str, embedding_model: str | None = None,
                 api_key_env: str | None = "OPENAI_API_KEY", templates: TemplateStore | None = None,
                 dimension: int = 1536, retries: int = 3, backoff: float = 1.0,
                 timeout: float = 60.0, temperature: float = 0.0, client=None):
        super().__init__(templates, dimension)
        import httpx

        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.embedding_model = embedding_model or model
        self.retries = max(1, retries)
        self.backoff = backoff
        self.temperature = temperature
        headers = {}
        key = os.environ.get(api_key_env) if api_key_env else None
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._httpx = httpx
        self.client = client or httpx.Client(timeout=timeout, headers=headers)

    def identity(self) -> str:
        return f"live:{self.model}|{self.embedding_model}@{self.endpoint}"

    def _post(self, path: str, payload: dict) -> dict:
        last = None
        for attempt in range(self.retries):
            try:
                resp = self.client.post(f"{self.endpoint}{path}", json=payload)
                if resp.status_code >= 500 or resp.status_code == 429:
                    raise self._httpx.HTTPStatusError(
                        f"status {resp.status_code}", request=resp.request, response=resp)
                resp.raise_for_status()
                return resp.json()
            except (self._httpx.TransportError, self._httpx.HTTPStatusError) as exc:
                last = exc
                if isinstance(exc, self._httpx.HTTPStatusError) and exc.response.status_code < 500 \
                        and exc.response.status_code != 429:
                    break
                if attempt + 1 < self.retries:
                    delay = self.backoff * (2 ** attempt)
                    logger.warning("backend call failed (%s); retrying in %.1fs", exc, delay)
                    time.sleep(delay)
        raise BackendUnavailable(f"{path} failed after {self.retries} attempts: {last}")

    def _generate(self, request, prompt):
        data = self._post("/chat/completions", {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
            "seed": request.seed,
        })
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected completion payload: {exc}") from exc
        usage = {k: int(v) for k, v in (data.get("usage") or {}).items() if isinstance(v, int)}
        return CompletionResponse(text.strip(), usage)

    def _embed(self, text):
        data = self._post("/embeddings", {"model": self.embedding_model, "input": text})
        try:
            return data["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected embedding payload: {exc}") from exc


class ReplayBackend(Backend):
    """Append-only record/replay cache in front of another backend.

    With ``inner=None`` the cache is served read-only and a miss raises
    :class:`BackendUnavailable`. Each record is one JSON line:
    ``{"digest", "kind", "response", "timestamp"}``.
    """

    def __init__(self, path: str | os.PathLike, inner: Backend | None = None,
                 templates: TemplateStore | None = None, dimension: int | None = None):
        templates = templates or (inner.templates if inner else None)
        dim = dimension or (inner.dimension if inner else 16)
        super().__init__(templates, dim)
        self.path = Path(path)
        self.inner = inner
        self.entries: dict[str, dict] = {}
        self.hits = 0
        self.misses = 0
        self._load()

    def _load(self):
        if not self.path.exists():
            return
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    self.entries[rec["digest"]] = rec
                except (json.JSONDecodeError, KeyError):
                    # a torn final write from an interrupted run; anything else is kept
                    logger.warning("skipping unreadable cache record %s:%d", self.path, lineno)

    def identity(self) -> str:
        return f"replay({self.inner.identity() if self.inner else self.path.name})"

    def _append(self, key: str, kind: str, response: dict):
        rec = {"digest": key, "kind": kind, "response": response, "timestamp": int(time.time())}
        with self._lock:
            self.entries[key] = rec
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")

    def _generate(self, request, prompt):
        key = request.key()
        rec = self.entries.get(key)
        if rec is not None:
            self.hits += 1
            r = rec["response"]
            return CompletionResponse(r["text"], dict(r.get("usage", {})), cached=True)
        self.misses += 1
        if self.inner is None:
            raise BackendUnavailable(f"replay cache miss for {request.kind.value} ({key[:12]})")
        resp = self.inner._generate(request, prompt)
        if resp.text and resp.text.strip():
            self._append(key, request.kind.value, {"text": resp.text, "usage": resp.usage})
        return resp

    def _embed(self, text):
        key = digest({"embed": text, "dimension": self.dimension})
        rec = self.entries.get(key)
        if rec is not None:
            self.hits += 1
            return rec["response"]["vector"]
        self.misses += 1
        if self.inner is None:
            raise BackendUnavailable(f"replay cache miss for embedding ({key[:12]})")
        vec = check_vector(self.inner._embed(text), self.dimension)
        self._append(key, "embed", {"vector": [float(x) for x in vec]})
        return vec
