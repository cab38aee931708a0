"""Experiment configuration: one YAML file with nested sections.

See ``data/example_config.yaml`` for every key and its default.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .backend import Backend, HttpBackend, ReplayBackend, ScriptedBackend, TemplateStore, digest
from .errors import ConfigError
from .evaluation import METHODS, EvalConfig
from .simulation import VARIANTS, RunConfig

EXAMPLE_CONFIG = Path(__file__).parent / "data" / "example_config.yaml"

# config section key -> RunConfig field
_RUN_KEYS = {
    ("run", "seed"): "seed", ("run", "passes"): "passes",
    ("run", "dual_layer"): "dual_layer", ("run", "shared_groups"): "shared_groups",
    ("run", "group_by"): "group_by",
    ("memory", "budget_chars"): "memory_budget", ("memory", "group_capacity"): "group_capacity",
    ("memory", "shared_view_size"): "shared_view_size", ("memory", "self_echo"): "self_echo",
    ("groups", "max_tags"): "max_tags", ("groups", "k"): "k", ("groups", "max_groups"): "max_groups",
    ("groups", "resegment_every"): "resegment_every",
    ("groups", "segments_per_pass"): "segments_per_pass",
    ("update", "fuse_every_interaction"): "fuse_every_interaction",
    ("output", "snapshot_every"): "snapshot_every", ("output", "trace_prompts"): "trace_prompts",
}


@dataclass
class BackendConfig:
    kind: str = "scripted"  # scripted | live | replay
    templates: str | None = None
    rules: str | None = None
    cache: str | None = None
    endpoint: str = "https://api.openai.com/v1"
    model: str | None = None
    embedding_model: str | None = None
    api_key_env: str = "OPENAI_API_KEY"
    dimension: int = 1536
    retries: int = 3
    backoff: float = 1.0
    timeout: float = 60.0
    temperature: float = 0.0

    def build(self) -> Backend:
        templates = TemplateStore.from_file(self.templates)
        if self.kind == "scripted":
            return ScriptedBackend.from_file(self.rules, templates=templates)
        if self.kind == "live":
            if not self.model:
                raise ConfigError("backend.model is required for the live backend")
            live = HttpBackend(self.endpoint, self.model, self.embedding_model, self.api_key_env,
                               templates=templates, dimension=self.dimension, retries=self.retries,
                               backoff=self.backoff, timeout=self.timeout,
                               temperature=self.temperature)
            return ReplayBackend(self.cache, inner=live) if self.cache else live
        if self.kind == "replay":
            if not self.cache:
                raise ConfigError("backend.cache is required for the replay backend")
            if not Path(self.cache).exists():
                raise FileNotFoundError(f"replay cache {self.cache} not found")
            return ReplayBackend(self.cache, templates=templates, dimension=self.dimension)
        raise ConfigError(f"unknown backend kind {self.kind!r}")


@dataclass
class ExperimentConfig:
    name: str
    run: RunConfig
    backend: BackendConfig
    eval: EvalConfig
    bundle: str
    out_dir: str
    source: Path | None = None
    raw: dict = field(default_factory=dict)

    def config_digest(self) -> str:
        """Identity of everything that shapes training (not eval or output paths)."""
        templates = TemplateStore.from_file(self.backend.templates)
        return digest({"run": self.run.to_dict(), "templates": templates.digest()})


def _resolve(base: Path | None, value: str | None) -> str | None:
    if value is None or base is None or os.path.isabs(value):
        return value
    return str((base / value).resolve())


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, Any] | None = None,
                domains: list[str] | None = None) -> ExperimentConfig:
    """Read a config file. ``overrides`` use dotted keys, e.g. ``{"run.seed": 3}``."""
    path = Path(path) if path else EXAMPLE_CONFIG
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, key = dotted.split(".", 1)
        raw.setdefault(section, {})[key] = value
    base = path.parent.resolve()
    sect = lambda name: raw.get(name) or {}  # noqa: E731

    run = sect("run")
    variant = run.get("variant", "agentcf++")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    dual, shared, group_by = VARIANTS[variant]
    kwargs: dict[str, Any] = {"dual_layer": dual, "shared_groups": shared, "group_by": group_by}
    extra = {("run", "name"), ("run", "variant"), ("output", "dir")}
    for section in ("run", "memory", "groups", "update", "output"):
        for key, value in sect(section).items():
            if (section, key) in _RUN_KEYS:
                kwargs[_RUN_KEYS[(section, key)]] = value
            elif (section, key) not in extra:
                raise ConfigError(f"unknown config key {section}.{key}")
    run_cfg = RunConfig(domains=list(domains or []), **kwargs)

    bsec = dict(sect("backend"))
    valid = {f.name for f in fields(BackendConfig)}
    unknown = set(bsec) - valid
    if unknown:
        raise ConfigError(f"unknown backend keys {sorted(unknown)}")
    for key in ("templates", "rules", "cache"):
        bsec[key] = _resolve(base, bsec.get(key))
    backend = BackendConfig(**bsec)

    esec = dict(sect("eval"))
    methods = tuple(esec.pop("methods", METHODS))
    bad = set(methods) - set(METHODS)
    if bad:
        raise ConfigError(f"unknown eval methods {sorted(bad)}")
    try:
        eval_cfg = EvalConfig(methods=methods, **esec)
    except TypeError as exc:
        raise ConfigError(f"bad eval section: {exc}") from exc
    if eval_cfg.runs < 1:
        raise ConfigError("eval.runs must be >= 1")

    bundle = _resolve(base, sect("data").get("bundle"))
    if not bundle:
        raise ConfigError("data.bundle is required")
    # output paths are relative to the working directory, not the config file
    out_dir = sect("output").get("dir") or f"runs/{run.get('name', path.stem)}"
    return ExperimentConfig(run.get("name", path.stem), run_cfg, backend, eval_cfg, bundle,
                            out_dir, path, raw)
