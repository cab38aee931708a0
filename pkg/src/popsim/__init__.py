"""User/item agent simulation with dual-layer memories and interest-group shared memory."""

__version__ = "0.1.0"

from .backend import (  # noqa: E402
    HttpBackend,
    PromptKind,
    PromptRequest,
    ReplayBackend,
    ScriptedBackend,
    TemplateStore,
)
from .memory import SimState  # noqa: E402
from .simulation import RunConfig, Simulator, run_training  # noqa: E402

__all__ = [
    "HttpBackend", "PromptKind", "PromptRequest", "ReplayBackend", "ScriptedBackend",
    "TemplateStore", "SimState", "RunConfig", "Simulator", "run_training",
]
