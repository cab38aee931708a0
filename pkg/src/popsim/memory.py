"""Agent memory state: items, dual-layer user memories, group-shared queues.

The simulation loop is the only writer. Everything lives in one
:class:`SimState` so it can be snapshotted and restored as a unit.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .backend import digest
from .errors import InvalidItem, SnapshotError, UnknownDomain

SINGLE_MEMORY_KEY = "ALL"
SNAPSHOT_FORMAT = "popsim-snapshot"
SNAPSHOT_VERSION = 1


@dataclass
class ItemAgent:
    id: str
    domain: str
    side_info: str
    title: str = ""
    category: str = ""
    memory: str = ""

    def summary(self) -> str:
        """Compact label used in shared memories: title plus 100 chars of category."""
        if self.title:
            return f"{self.title} ({self.category[:100]})" if self.category else self.title
        return self.side_info[:100]


def side_info_text(title: str, category: str) -> str:
    parts = []
    if title:
        parts.append(f"Title: {title}")
    if category:
        parts.append(f"Category: {category}")
    return "; ".join(parts)


def init_item(item: ItemAgent) -> ItemAgent:
    if not item.side_info or not item.side_info.strip():
        raise InvalidItem(f"item {item.id!r} has no side information")
    item.memory = item.side_info.strip()
    return item


@dataclass
class UserAgent:
    id: str
    separated: dict[str, str] = field(default_factory=dict)
    fused: dict[str, str] = field(default_factory=dict)
    groups: list[str] = field(default_factory=list)
    history: list[str] = field(default_factory=list)  # training items processed, in order


@dataclass(frozen=True)
class SharedEntry:
    user: str
    item_summary: str
    domain: str
    timestamp: int

    def __post_init__(self):
        if not self.item_summary:
            raise ValueError("shared entry needs an item summary")


class GroupSharedMemory:
    """Fixed-capacity FIFO of recent member interactions."""

    def __init__(self, capacity: int = 20, entries: Iterable[SharedEntry] = ()):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.entries: deque[SharedEntry] = deque(entries, maxlen=capacity)

    def push(self, entry: SharedEntry) -> "GroupSharedMemory":
        self.entries.append(entry)  # deque(maxlen) evicts from the left
        return self

    def recent(self, n: int) -> list[SharedEntry]:
        """Newest first."""
        if n <= 0:
            return []
        return list(reversed(self.entries))[:n]

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        return (isinstance(other, GroupSharedMemory) and self.capacity == other.capacity
                and list(self.entries) == list(other.entries))

    def __repr__(self):
        return f"GroupSharedMemory(capacity={self.capacity}, entries={list(self.entries)!r})"


def push_shared(g: GroupSharedMemory, e: SharedEntry) -> GroupSharedMemory:
    return g.push(e)


@dataclass
class InterestGroup:
    id: str
    name: str
    member_users: set[str]
    shared: GroupSharedMemory
    top_tags: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class DecisionContext:
    separated: str
    fused: str
    shared_views: tuple[tuple[str, str], ...]

    def shared_text(self) -> str:
        if not self.shared_views:
            return "(none)"
        blocks = [f"[{name}]\n{text or '(no recent activity)'}" for name, text in self.shared_views]
        return "\n".join(blocks)


def render_entries(entries: Sequence[SharedEntry]) -> str:
    return "\n".join(f"- {e.user} bought {e.item_summary} in {e.domain}" for e in entries)


class SimState:
    """All mutable agent state for one run."""

    def __init__(self, domains: Sequence[str], dual_layer: bool = True):
        if not domains:
            raise ValueError("at least one domain is required")
        self.domains = list(domains)
        self.dual_layer = dual_layer
        self.memory_keys = list(domains) if dual_layer else [SINGLE_MEMORY_KEY]
        self.users: dict[str, UserAgent] = {}
        self.items: dict[str, ItemAgent] = {}
        self.groups: dict[str, InterestGroup] = {}
        self.meta: dict = {}

    # -- construction
    def add_user(self, user_id: str) -> UserAgent:
        if user_id not in self.users:
            self.users[user_id] = UserAgent(
                user_id,
                separated={k: "" for k in self.memory_keys},
                fused={k: "" for k in self.memory_keys},
            )
        return self.users[user_id]

    def add_item(self, item: ItemAgent) -> ItemAgent:
        self.check_domain(item.domain)
        self.items[item.id] = init_item(item)
        return item

    # -- reads
    def check_domain(self, d: str) -> str:
        if d not in self.domains:
            raise UnknownDomain(f"unknown domain {d!r}; configured {self.domains}")
        return d

    def key(self, d: str) -> str:
        """Memory key for domain ``d`` (the sentinel key in single-memory mode)."""
        self.check_domain(d)
        return d if self.dual_layer else SINGLE_MEMORY_KEY

    def decision_context(self, u: UserAgent | str, d: str, s: int = 10,
                         self_echo: bool = True) -> DecisionContext:
        user = self.users[u] if isinstance(u, str) else u
        k = self.key(d)
        views = []
        for gid in user.groups:
            group = self.groups.get(gid)
            if group is None:
                continue
            entries = list(reversed(group.shared.entries))
            if not self_echo:
                entries = [e for e in entries if e.user != user.id]
            views.append((group.name, render_entries(entries[:max(s, 0)])))
        return DecisionContext(user.separated[k], user.fused[k], tuple(views))

    def user_memory_for_items(self, u: UserAgent, d: str) -> str:
        """The user text items learn from: fused memory, or the single memory."""
        k = self.key(d)
        return u.fused[k] if self.dual_layer else u.separated[k]

    # -- writes
    def write_separated(self, u: UserAgent, d: str, text: str) -> UserAgent:
        u.separated[self.key(d)] = text
        return u

    def write_fused(self, u: UserAgent, d: str, text: str) -> UserAgent:
        u.fused[self.key(d)] = text
        return u

    def broadcast(self, u: UserAgent, entry: SharedEntry) -> list[str]:
        touched = []
        for gid in u.groups:
            if gid in self.groups:
                self.groups[gid].shared.push(entry)
                touched.append(gid)
        return touched

    def replace_groups(self, groups: Iterable[InterestGroup]) -> None:
        self.groups = {g.id: g for g in groups}
        for user in self.users.values():
            user.groups = sorted(g.id for g in self.groups.values() if user.id in g.member_users)

    # -- persistence
    def snapshot(self) -> str:
        lines = [json.dumps({"format": SNAPSHOT_FORMAT, "version": SNAPSHOT_VERSION,
                             "domains": self.domains, "dual_layer": self.dual_layer,
                             "meta": self.meta}, sort_keys=True, ensure_ascii=False)]
        records = []
        for iid in sorted(self.items):
            it = self.items[iid]
            records.append(("item", iid, {"domain": it.domain, "side_info": it.side_info,
                                          "title": it.title, "category": it.category,
                                          "memory": it.memory}))
        for uid in sorted(self.users):
            us = self.users[uid]
            records.append(("user", uid, {"separated": us.separated, "fused": us.fused,
                                          "groups": sorted(us.groups), "history": us.history}))
        for gid in sorted(self.groups):
            g = self.groups[gid]
            records.append(("group", gid, {
                "name": g.name, "members": sorted(g.member_users), "capacity": g.shared.capacity,
                "top_tags": g.top_tags,
                "entries": [[e.user, e.item_summary, e.domain, e.timestamp] for e in g.shared.entries],
            }))
        for kind, rid, payload in records:
            lines.append(json.dumps({"record": kind, "id": rid, "payload": payload},
                                    sort_keys=True, ensure_ascii=False))
        lines.append(json.dumps({"record": "end", "count": len(records)}))
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return digest(self.snapshot())

    @classmethod
    def restore(cls, blob: str) -> "SimState":
        lines = [ln for ln in blob.split("\n") if ln.strip()]
        try:
            header = json.loads(lines[0])
            if header.get("format") != SNAPSHOT_FORMAT:
                raise SnapshotError("not a snapshot file")
            if header.get("version") != SNAPSHOT_VERSION:
                raise SnapshotError(f"unsupported snapshot version {header.get('version')}")
            state = cls(header["domains"], header["dual_layer"])
            state.meta = header.get("meta", {})
            records = [json.loads(ln) for ln in lines[1:]]
        except SnapshotError:
            raise
        except (IndexError, ValueError, KeyError, TypeError) as exc:
            raise SnapshotError(f"corrupt snapshot: {exc}") from exc
        if not records or records[-1].get("record") != "end" or records[-1].get("count") != len(records) - 1:
            raise SnapshotError("snapshot is truncated")
        try:
            for rec in records[:-1]:
                kind, rid, p = rec["record"], rec["id"], rec["payload"]
                if kind == "item":
                    state.items[rid] = ItemAgent(rid, p["domain"], p["side_info"], p["title"],
                                                 p["category"], p["memory"])
                elif kind == "user":
                    state.users[rid] = UserAgent(rid, dict(p["separated"]), dict(p["fused"]),
                                                 list(p["groups"]), list(p["history"]))
                elif kind == "group":
                    shared = GroupSharedMemory(p["capacity"], (SharedEntry(*e) for e in p["entries"]))
                    state.groups[rid] = InterestGroup(rid, p["name"], set(p["members"]), shared,
                                                      list(p.get("top_tags", [])))
                else:
                    raise SnapshotError(f"unknown record kind {kind!r}")
        except SnapshotError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise SnapshotError(f"corrupt snapshot record: {exc}") from exc
        return state

    def __eq__(self, other):
        return isinstance(other, SimState) and self.snapshot() == other.snapshot()
