"""Chronological training loop: inference phase, reflection updates, broadcast.

Per training interaction ``(u, i, d)`` the loop runs, in order::

    sample_negative -> infer -> update_user -> fuse -> update_items -> broadcast

``fuse`` only runs with the dual-layer memory on and ``broadcast`` only with
shared groups on. Interest groups are rebuilt every ``resegment_every``
interactions. Every phase is appended to a :class:`Trace`.
"""
from __future__ import annotations

import json
import logging
import math
import os
import random
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .backend import (
    Backend,
    CompletionResponse,
    PromptKind,
    PromptRequest,
    digest,
    truncate_memory,
)
from .dataset import CatalogItem, Interaction, chronological
from .errors import (
    BackendUnavailable,
    ConfigError,
    MalformedResponse,
    NoNegativeAvailable,
)
from .groups import SegmentationConfig, resegment
from .memory import (
    DecisionContext,
    ItemAgent,
    SharedEntry,
    SimState,
    UserAgent,
    side_info_text,
)

logger = logging.getLogger(__name__)

PHASES = ("sample_negative", "infer", "update_user", "fuse", "update_items", "broadcast")

# name -> (dual_layer, shared_groups, group_by)
VARIANTS = {
    "agentcf": (False, False, "interest"),
    "agentcf+dual": (True, False, "interest"),
    "agentcf+shared": (False, True, "interest"),
    "agentcf++wo-group": (True, True, "history"),
    "agentcf++": (True, True, "interest"),
}

TRACE_VERSION = 1


@dataclass
class RunConfig:
    domains: list[str] = field(default_factory=list)
    dual_layer: bool = True
    shared_groups: bool = True
    group_by: str = "interest"
    seed: int = 0
    passes: int = 1
    # memory
    memory_budget: int = 2000
    group_capacity: int = 20
    shared_view_size: int = 10
    self_echo: bool = True
    # groups
    max_tags: int = 8
    k: int = 0
    max_groups: int = 3
    resegment_every: int | None = None  # None: segments_per_pass times per pass
    segments_per_pass: int = 4
    # update phase
    fuse_every_interaction: bool = True
    # persistence
    snapshot_every: int = 0
    trace_prompts: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.group_by not in ("interest", "history"):
            raise ConfigError(f"group_by must be 'interest' or 'history', not {self.group_by!r}")
        if self.group_by == "history" and not self.shared_groups:
            raise ConfigError("group_by=history requires shared_groups=true")
        for name in ("memory_budget", "group_capacity", "max_tags", "max_groups",
                     "passes", "segments_per_pass"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.resegment_every is not None and self.resegment_every <= 0:
            raise ConfigError("resegment_every must be positive")
        if self.shared_view_size < 0 or self.k < 0 or self.snapshot_every < 0:
            raise ConfigError("shared_view_size, k and snapshot_every must be >= 0")

    @classmethod
    def preset(cls, variant: str, **overrides) -> "RunConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        dual, shared, group_by = VARIANTS[variant]
        return cls(dual_layer=dual, shared_groups=shared, group_by=group_by, **overrides)

    @property
    def variant(self) -> str:
        for name, flags in VARIANTS.items():
            if flags == (self.dual_layer, self.shared_groups, self.group_by):
                return name
        # group_by is irrelevant when groups are off
        return "agentcf+dual" if self.dual_layer else "agentcf"

    def segmentation(self) -> SegmentationConfig:
        return SegmentationConfig(max_tags=self.max_tags, k=self.k, max_groups=self.max_groups,
                                  capacity=self.group_capacity, group_by=self.group_by,
                                  seed=self.seed, budget=self.memory_budget)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return digest(self.to_dict())


@dataclass
class InferenceOutcome:
    chosen: str
    explanation: str
    correct: bool
    degraded: bool = False


# ------------------------------------------------------------------ trace

class Trace:
    """Newline-delimited phase records, optionally mirrored to a file."""

    def __init__(self, path: str | os.PathLike | None = None, header: Mapping | None = None,
                 append: bool = False):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        self._fh = None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("a" if append else "w", encoding="utf-8")
        if header is not None and not append:
            self.write({"record": "header", "version": TRACE_VERSION, **header})

    def write(self, rec: dict) -> None:
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")
            self._fh.flush()

    def phases(self, name: str | None = None) -> list[dict]:
        return [r for r in self.records if r.get("record") == "phase"
                and (name is None or r["phase"] == name)]

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None

    def digest(self) -> str:
        return digest("\n".join(json.dumps(r, sort_keys=True, ensure_ascii=False)
                                for r in self.records))

    @staticmethod
    def truncate_file(path: str | os.PathLike, step: int) -> None:
        """Drop every record after ``step`` (used when resuming from a checkpoint)."""
        path = Path(path)
        kept = []
        for line in path.read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            if rec.get("record") == "header" or (rec.get("record") == "phase" and rec["step"] <= step):
                kept.append(line)
        path.write_text("".join(ln + "\n" for ln in kept), encoding="utf-8")


# -------------------------------------------------------------- state setup

def make_item(c: CatalogItem) -> ItemAgent:
    side = side_info_text(c.title, c.category) or f"Item {c.id}"
    return ItemAgent(c.id, c.domain, side, c.title, c.category)


def build_state(config: RunConfig, items: Iterable[CatalogItem | ItemAgent],
                users: Iterable[str]) -> SimState:
    state = SimState(config.domains, dual_layer=config.dual_layer)
    for it in items:
        if it.domain not in config.domains:
            continue
        state.add_item(make_item(it) if isinstance(it, CatalogItem) else it)
    for u in sorted(set(users)):
        state.add_user(u)
    state.meta = {"step": 0, "epoch": 0, "tags": {}}
    return state


def memory_view(state: SimState) -> dict[tuple, str]:
    view = {}
    for uid, u in state.users.items():
        for k, v in u.separated.items():
            view[("user", uid, "separated", k)] = v
        for k, v in u.fused.items():
            view[("user", uid, "fused", k)] = v
    for iid, it in state.items.items():
        view[("item", iid, "memory", it.domain)] = it.memory
    return view


def diff_views(before: Mapping[tuple, str], after: Mapping[tuple, str]) -> list[dict]:
    out = []
    for key in sorted(after):
        if before.get(key) != after[key]:
            kind, aid, layer, dom = key
            out.append({"target": f"{kind}/{aid}/{layer}/{dom}", "domain": dom,
                        "digest": digest(after[key])[:16], "text": after[key]})
    return out


# ---------------------------------------------------------------- parsing

def _id_pattern(item_id: str) -> re.Pattern:
    return re.compile(r"(?<![\w-])" + re.escape(item_id) + r"(?![\w-])")


def parse_choice(text: str, neg_id: str, pos_id: str) -> str | None:
    """Return ``"neg"``, ``"pos"`` or ``None``. Option A is the negative (shown first)."""
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        return None
    first = lines[0]
    neg_hit, pos_hit = bool(_id_pattern(neg_id).search(first)), bool(_id_pattern(pos_id).search(first))
    if neg_hit != pos_hit:
        return "neg" if neg_hit else "pos"
    low = re.sub(r"[^\w\s]", " ", first).split()
    votes = set()
    for idx, tok in enumerate(low):
        t = tok.lower()
        if tok == "A" or t == "first" or (t == "1" and idx == 0):
            votes.add("neg")
        elif tok == "B" or t == "second" or (t == "2" and idx == 0):
            votes.add("pos")
        elif t in ("option", "choice") and idx + 1 < len(low) and low[idx + 1].lower() in ("a", "b"):
            votes.add("neg" if low[idx + 1].lower() == "a" else "pos")
    if len(votes) == 1:
        return votes.pop()
    return None


def explanation_of(text: str) -> str:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    return " ".join(lines[1:]) if len(lines) > 1 else (lines[0] if lines else "")


# -------------------------------------------------------------- simulator

class Simulator:
    """Runs the training loop over a fixed state, backend and config."""

    def __init__(self, state: SimState, backend: Backend, config: RunConfig,
                 interacted: Mapping[str, set[str]] | None = None, trace: Trace | None = None,
                 checkpoint: Callable[[SimState], None] | None = None,
                 segmentation_log: Callable[[list[dict]], None] | None = None):
        self.state = state
        self.backend = backend
        self.config = config
        self.interacted = {u: set(v) for u, v in (interacted or {}).items()}
        self.trace = trace or Trace()
        self.checkpoint = checkpoint
        self.segmentation_log = segmentation_log
        self.degraded = 0
        self._calls: list[dict] = []

    # -- helpers
    def _mem(self, text: str) -> str:
        text = truncate_memory(text, self.config.memory_budget)
        return text if text.strip() else "(empty)"

    def _block(self, item: ItemAgent) -> str:
        return f"[{item.id}] {truncate_memory(item.memory, self.config.memory_budget)}"

    def _complete(self, kind: PromptKind, template_id: str, slots: dict, seed: int) -> CompletionResponse:
        resp = self.backend.complete(PromptRequest(kind, template_id, slots, seed))
        call = {"kind": kind.value, "template_id": template_id,
                "prompt_digest": digest(resp.prompt)[:16], "response_digest": digest(resp.text)[:16]}
        self._calls.append(call)
        return resp

    def _rng(self, step: int, salt: str = "") -> random.Random:
        return random.Random(f"{self.config.seed}:{step}:{salt}")

    def _seed(self, step: int) -> int:
        return self.config.seed * 1_000_003 + step

    # -- phases
    def sample_negative(self, u: UserAgent, d: str, step: int) -> ItemAgent:
        seen = self.interacted.get(u.id, set()) | set(u.history)
        pool = sorted(iid for iid, it in self.state.items.items() if it.domain == d and iid not in seen)
        if not pool:
            raise NoNegativeAvailable(f"user {u.id} has interacted with every {d} item")
        return self.state.items[self._rng(step, "neg").choice(pool)]

    def infer(self, u: UserAgent, i: ItemAgent, j: ItemAgent, d: str, step: int) -> InferenceOutcome:
        if i.id == j.id:
            raise ValueError("positive and negative must differ")
        ctx = self.state.decision_context(u, d, self.config.shared_view_size, self.config.self_echo)
        slots = {"separated": self._mem(ctx.separated), "fused": self._mem(ctx.fused),
                 "shared": ctx.shared_text(), "domain": d,
                 "neg": self._block(j), "pos": self._block(i)}
        self._last_prompt = self.backend.templates.render("choose_positive", slots)
        for attempt in range(2):
            try:
                resp = self._complete(PromptKind.CHOOSE_POSITIVE, "choose_positive", slots,
                                      self._seed(step) + attempt)
            except (BackendUnavailable, MalformedResponse) as exc:
                logger.warning("step %d: choice call failed (%s)", step, exc)
                continue
            choice = parse_choice(resp.text, j.id, i.id)
            if choice is not None:
                chosen = i.id if choice == "pos" else j.id
                return InferenceOutcome(chosen, explanation_of(resp.text), chosen == i.id)
        chosen = i.id if self._rng(step, "coin").random() < 0.5 else j.id
        return InferenceOutcome(chosen, "(no parseable answer; chosen by coin flip)",
                                chosen == i.id, degraded=True)

    def update_user_separated(self, u: UserAgent, d: str, i: ItemAgent, j: ItemAgent,
                              outcome: InferenceOutcome, step: int) -> bool:
        k = self.state.key(d)
        slots = {"memory": self._mem(u.separated[k]), "domain": d,
                 "neg": self._block(j), "pos": self._block(i), "pos_id": i.id, "neg_id": j.id,
                 "chosen": "Option B" if outcome.chosen == i.id else "Option A",
                 "explanation": outcome.explanation or "(none)",
                 "verdict": "Your choice was right." if outcome.correct else "Your choice was wrong."}
        try:
            resp = self._complete(PromptKind.UPDATE_USER_MEMORY, "update_user_memory", slots,
                                  self._seed(step))
        except (BackendUnavailable, MalformedResponse) as exc:
            logger.warning("step %d: user update skipped (%s)", step, exc)
            return False
        self.state.write_separated(u, d, resp.text.strip())
        return True

    def fuse(self, u: UserAgent, d: str, step: int) -> bool:
        """Two-step fusion: per-domain relevance extracts, then one integration call."""
        extracts = []
        for other in self.state.domains:
            if other == d or not u.separated[other].strip():
                continue
            try:
                resp = self._complete(PromptKind.EXTRACT_RELEVANT, "extract_relevant_preferences",
                                      {"memory": self._mem(u.separated[other]),
                                       "source_domain": other, "target_domain": d},
                                      self._seed(step))
            except (BackendUnavailable, MalformedResponse) as exc:
                logger.warning("step %d: extract from %s skipped (%s)", step, other, exc)
                continue
            text = resp.text.strip()
            if text.lower().rstrip(".") != "none":
                extracts.append(f"From {other}: {text}")
        try:
            resp = self._complete(PromptKind.FUSE_PREFERENCES, "fuse_preferences",
                                  {"domain": d, "separated": self._mem(u.separated[d]),
                                   "extracts": "\n".join(extracts) or "(none)",
                                   "fused": self._mem(u.fused[d])},
                                  self._seed(step))
        except (BackendUnavailable, MalformedResponse) as exc:
            logger.warning("step %d: fuse skipped (%s)", step, exc)
            return False
        self.state.write_fused(u, d, resp.text.strip())
        return True

    def update_item_memories(self, i: ItemAgent, j: ItemAgent, u: UserAgent, d: str,
                             step: int) -> int:
        user_text = self._mem(self.state.user_memory_for_items(u, d))
        failed = 0
        for item, relation in ((i, "appeal to"), (j, "do not appeal to")):
            try:
                resp = self._complete(PromptKind.UPDATE_ITEM_MEMORY, "update_item_memory",
                                      {"item": self._mem(item.memory), "user_memory": user_text,
                                       "user_id": u.id, "relation": relation, "domain": d},
                                      self._seed(step))
            except (BackendUnavailable, MalformedResponse) as exc:
                logger.warning("step %d: item %s update skipped (%s)", step, item.id, exc)
                failed += 1
                continue
            item.memory = resp.text.strip()
        return failed

    def broadcast(self, u: UserAgent, i: ItemAgent, d: str, t: int) -> list[dict]:
        entry = SharedEntry(u.id, i.summary(), d, t)
        groups = self.state.broadcast(u, entry)
        return [{"group": g, "entry": [entry.user, entry.item_summary, entry.domain, entry.timestamp]}
                for g in groups]

    # -- loop
    def _record(self, step: int, phase: str, inter: Interaction, before: dict, **extra) -> dict:
        after = memory_view(self.state)
        writes = diff_views(before, after)
        rec = {"record": "phase", "step": step, "phase": phase, "user": inter.user,
               "item": inter.item, "domain": inter.domain, "timestamp": inter.timestamp,
               "calls": self._calls, "writes": writes,
               "diff_digest": digest([(w["target"], w["digest"]) for w in writes])[:16],
               "degraded": False, **extra}
        self._calls = []
        if rec["degraded"]:
            self.degraded += 1
        self.trace.write(rec)
        return after

    def step(self, step: int, inter: Interaction) -> None:
        st, cfg = self.state, self.config
        d = st.check_domain(inter.domain)
        u = st.users[inter.user]
        i = st.items[inter.item]
        view = memory_view(st)

        j = self.sample_negative(u, d, step)
        u.history.append(i.id)
        view = self._record(step, "sample_negative", inter, view, negative=j.id)

        outcome = self.infer(u, i, j, d, step)
        prompt = self._last_prompt
        extra = {"negative": j.id, "chosen": outcome.chosen, "correct": outcome.correct,
                 "degraded": outcome.degraded,
                 "neg_index": prompt.find(self._block(j)), "pos_index": prompt.find(self._block(i))}
        if cfg.trace_prompts:
            extra["prompt"] = prompt
        view = self._record(step, "infer", inter, view, **extra)

        ok = self.update_user_separated(u, d, i, j, outcome, step)
        view = self._record(step, "update_user", inter, view, negative=j.id, degraded=not ok)

        if cfg.dual_layer and cfg.fuse_every_interaction:
            ok = self.fuse(u, d, step)
            view = self._record(step, "fuse", inter, view, degraded=not ok)

        failed = self.update_item_memories(i, j, u, d, step)
        view = self._record(step, "update_items", inter, view, negative=j.id, degraded=failed > 0)

        if cfg.shared_groups:
            pushed = self.broadcast(u, i, d, inter.timestamp)
            self._record(step, "broadcast", inter, view, entries=pushed)

    def resegment(self, step: int) -> None:
        st = self.state
        epoch = st.meta.get("epoch", 0) + 1
        n_calls = len(self.backend.calls)
        result = resegment(st, self.backend, self.config.segmentation(), epoch)
        calls = [{"kind": k, "template_id": t} for k, t in self.backend.calls[n_calls:]]
        rec = {"record": "phase", "step": step, "phase": "resegment", "epoch": epoch,
               "calls": calls, "degraded": result is None}
        if result is None:
            self.degraded += 1
            rec["retained"] = True
        else:
            groups, report = result
            st.replace_groups(groups)
            st.meta["epoch"] = epoch
            rec["groups"] = [{"id": g.id, "name": g.name, "members": sorted(g.member_users),
                              "capacity": g.shared.capacity, "top_tags": g.top_tags}
                             for g in sorted(groups, key=lambda g: g.id)]
            if self.segmentation_log:
                self.segmentation_log(report)
        rec["tags"] = {u: list(t) for u, t in sorted(st.meta.get("tags", {}).items())}
        self.trace.write(rec)

    def run(self, train: Sequence[Interaction],
            on_step: Callable[[int, Interaction, SimState], None] | None = None) -> SimState:
        """Process ``train`` chronologically; resumes after ``state.meta['step']``."""
        cfg = self.config
        ordered = chronological(train)
        for r in ordered:
            self.interacted.setdefault(r.user, set()).add(r.item)
        total = len(ordered) * cfg.passes
        every = cfg.resegment_every or max(1, math.ceil(len(ordered) / cfg.segments_per_pass))
        start = self.state.meta.get("step", 0)
        for step in range(start + 1, total + 1):
            inter = ordered[(step - 1) % len(ordered)]
            self.step(step, inter)
            self.state.meta["step"] = step
            # never rebuild after the last interaction: that would wipe shared memories
            if cfg.shared_groups and step % every == 0 and step < total:
                self.resegment(step)
            if on_step:
                on_step(step, inter, self.state)
            if self.checkpoint and cfg.snapshot_every and step % cfg.snapshot_every == 0:
                self.checkpoint(self.state)
        if cfg.dual_layer and not cfg.fuse_every_interaction and start < total:
            self.fuse_all(total)
        return self.state

    def fuse_all(self, step: int) -> None:
        """Lazy fusion: one fuse per (user, domain) with a non-empty separated memory."""
        for uid in sorted(self.state.users):
            u = self.state.users[uid]
            for d in self.state.domains:
                if not u.separated[d].strip():
                    continue
                before = memory_view(self.state)
                ok = self.fuse(u, d, step)
                self._record(step, "fuse", Interaction(uid, "", d, 0), before, degraded=not ok)

    def finish(self) -> str:
        snap = self.state.digest()
        self.trace.write({"record": "end", "steps": self.state.meta.get("step", 0),
                          "snapshot_digest": snap, "degraded": self.degraded})
        return snap


def run_training(train: Sequence[Interaction], items: Iterable[CatalogItem | ItemAgent],
                 config: RunConfig, backend: Backend,
                 interacted: Mapping[str, set[str]] | None = None,
                 trace: Trace | None = None, **kwargs) -> tuple[SimState, Trace]:
    """Build a fresh state, train on ``train`` and close the trace with an end record."""
    if interacted is None:
        interacted = {}
        for r in train:
            interacted.setdefault(r.user, set()).add(r.item)
    state = build_state(config, items, interacted.keys() | {r.user for r in train})
    sim = Simulator(state, backend, config, interacted, trace, **kwargs)
    sim.run(train)
    sim.finish()
    return state, sim.trace


# -------------------------------------------------------------- replay

def apply_trace(state: SimState, records: Sequence[dict]) -> SimState:
    """Re-apply recorded writes, broadcasts and segmentations to an initial state."""
    from .groups import InterestGroup
    from .memory import GroupSharedMemory

    for rec in records:
        if rec.get("record") != "phase":
            continue
        phase = rec["phase"]
        if phase == "sample_negative":
            state.users[rec["user"]].history.append(rec["item"])
        for w in rec.get("writes", []):
            kind, aid, layer, key = w["target"].split("/", 3)
            if kind == "item":
                state.items[aid].memory = w["text"]
            else:
                getattr(state.users[aid], layer)[key] = w["text"]
        if phase == "broadcast":
            for e in rec["entries"]:
                state.groups[e["group"]].shared.push(SharedEntry(*e["entry"]))
        elif phase == "resegment":
            if not rec.get("retained"):
                state.replace_groups(
                    InterestGroup(g["id"], g["name"], set(g["members"]),
                                  GroupSharedMemory(g["capacity"]), list(g["top_tags"]))
                    for g in rec["groups"])
                state.meta["epoch"] = rec["epoch"]
            state.meta["tags"] = {u: list(t) for u, t in rec.get("tags", {}).items()}
        state.meta["step"] = rec["step"]
    return state


# ----------------------------------------------------- popularity scenario

RAIN_GEAR_ITEMS = [
    CatalogItem("boots", "Outdoors", "Hiking Boots", "Outdoor activity gear"),
    CatalogItem("backpack", "Outdoors", "Trail Backpack", "Outdoor activity gear"),
    CatalogItem("poles", "Outdoors", "Trekking Poles", "Outdoor activity gear"),
    CatalogItem("raincoat", "Outdoors", "Rain Coat", "Rain gear"),
    CatalogItem("umbrella", "Outdoors", "Storm Umbrella", "Rain gear"),
    CatalogItem("tent", "Outdoors", "Camping Tent", "Camping equipment"),
    CatalogItem("towel", "Outdoors", "Beach Towel", "Summer accessories"),
    CatalogItem("hat", "Outdoors", "Sun Hat", "Summer accessories"),
    CatalogItem("cooler", "Outdoors", "Picnic Cooler", "Summer accessories"),
]

# t1: everyone buys outdoor gear; t2: Bob and Carl buy rain gear; t3: Carl buys camping gear
RAIN_GEAR_INTERACTIONS = [
    Interaction("alice", "boots", "Outdoors", 1),
    Interaction("bob", "backpack", "Outdoors", 1),
    Interaction("carl", "poles", "Outdoors", 1),
    Interaction("bob", "raincoat", "Outdoors", 2),
    Interaction("carl", "umbrella", "Outdoors", 2),
    Interaction("carl", "tent", "Outdoors", 3),
]

RAIN_GEAR_RULES = {
    "dimension": 4,
    "completions": [
        {"kind": "choose-positive", "response": "B\nOption B suits me."},
        {"kind": "update-user-memory", "response": "likes {pos_id}; {memory}"},
        {"kind": "fuse-preferences", "response": "{separated}"},
        {"kind": "update-item-memory", "response": "{item} | {relation} {user_id}"},
        {"kind": "extract-tags", "response": "outdoor activities; hiking"},
        {"response": "{tags}"},
    ],
    "embeddings": [
        {"text": "outdoor activities", "vector": [1, 0, 0, 0]},
        {"text": "hiking", "vector": [0.9, 0.1, 0, 0]},
    ],
}


def rain_gear_scenario(variant: str = "agentcf++") -> dict[int, DecisionContext]:
    """Three shoppers; only Bob and Carl act after t1.

    Returns Alice's decision context after each timestamp's interactions.
    Groups are built once, right after the t1 purchases.
    """
    from .backend import ScriptedBackend

    backend = ScriptedBackend.from_dict(RAIN_GEAR_RULES)
    config = RunConfig.preset(variant, domains=["Outdoors"], resegment_every=3)
    state = build_state(config, RAIN_GEAR_ITEMS, ["alice", "bob", "carl"])
    sim = Simulator(state, backend, config)
    contexts = {}

    def grab(step, inter, st):
        contexts[inter.timestamp] = st.decision_context("alice", "Outdoors", config.shared_view_size,
                                                        config.self_echo)

    sim.run(RAIN_GEAR_INTERACTIONS, on_step=grab)
    return contexts
