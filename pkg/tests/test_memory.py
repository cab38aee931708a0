import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popsim.errors import InvalidItem, SnapshotError, UnknownDomain
from popsim.memory import (
    SINGLE_MEMORY_KEY,
    GroupSharedMemory,
    InterestGroup,
    ItemAgent,
    SharedEntry,
    SimState,
    init_item,
    push_shared,
    side_info_text,
)

from oracles import FifoOracle

DOMAINS = ["Books", "CDs", "Movies"]


def entry(n, user="u", domain="Books"):
    return SharedEntry(user, f"item {n}", domain, n)


def test_item_memory_starts_as_side_info():
    it = init_item(ItemAgent("b1", "Books", side_info_text("Dune", "Science Fiction")))
    assert it.memory == "Title: Dune; Category: Science Fiction"


def test_item_without_side_info_rejected():
    with pytest.raises(InvalidItem):
        init_item(ItemAgent("b1", "Books", "   "))


def test_summary_truncates_category():
    it = ItemAgent("x", "Books", "s", "T", "c" * 150)
    assert it.summary() == "T (" + "c" * 100 + ")"


def test_unknown_domain():
    state = SimState(DOMAINS)
    u = state.add_user("u")
    with pytest.raises(UnknownDomain):
        state.write_separated(u, "Toys", "x")
    with pytest.raises(UnknownDomain):
        state.add_item(ItemAgent("t", "Toys", "toy"))


def test_single_memory_mode_uses_one_key():
    state = SimState(DOMAINS, dual_layer=False)
    u = state.add_user("u")
    assert list(u.separated) == [SINGLE_MEMORY_KEY]
    state.write_separated(u, "Books", "likes books")
    assert state.decision_context(u, "CDs").separated == "likes books"


def test_dual_layer_writes_are_isolated():
    state = SimState(DOMAINS)
    u = state.add_user("u")
    state.write_separated(u, "Books", "likes fantasy")
    state.write_fused(u, "CDs", "fused cds")
    assert u.separated == {"Books": "likes fantasy", "CDs": "", "Movies": ""}
    assert u.fused == {"Books": "", "CDs": "fused cds", "Movies": ""}


def test_fifo_eviction_and_order():
    g = GroupSharedMemory(3)
    for n in range(5):
        push_shared(g, entry(n))
    assert [e.timestamp for e in g.entries] == [2, 3, 4]
    assert [e.timestamp for e in g.recent(2)] == [4, 3]
    assert g.recent(0) == []


def test_capacity_must_be_positive():
    with pytest.raises(ValueError):
        GroupSharedMemory(0)


@settings(max_examples=60)
@given(st.integers(min_value=1, max_value=50), st.lists(st.integers(0, 10**6), max_size=300))
def test_fifo_matches_unbounded_suffix(capacity, stamps):
    g = GroupSharedMemory(capacity)
    oracle = FifoOracle(capacity)
    for s in stamps:
        e = entry(s)
        g.push(e)
        oracle.push(e)
        assert len(g) <= capacity
    assert list(g.entries) == oracle.view()


def _state_with_group(self_echo_user="alice"):
    state = SimState(["Outdoors"])
    for uid in ("alice", "bob"):
        state.add_user(uid)
    g = InterestGroup("g0", "camping", {"alice", "bob"}, GroupSharedMemory(20))
    state.replace_groups([g])
    state.broadcast(state.users["bob"], SharedEntry("bob", "Raincoat", "Outdoors", 1))
    state.broadcast(state.users[self_echo_user], SharedEntry(self_echo_user, "Tent", "Outdoors", 2))
    return state


def test_decision_context_newest_first():
    ctx = _state_with_group().decision_context("alice", "Outdoors", s=10)
    assert ctx.shared_views == (("camping", "- alice bought Tent in Outdoors\n"
                                             "- bob bought Raincoat in Outdoors"),)


def test_decision_context_without_self_echo():
    ctx = _state_with_group().decision_context("alice", "Outdoors", s=10, self_echo=False)
    assert ctx.shared_views == (("camping", "- bob bought Raincoat in Outdoors"),)


def test_decision_context_view_size():
    ctx = _state_with_group().decision_context("alice", "Outdoors", s=1)
    assert ctx.shared_views[0][1] == "- alice bought Tent in Outdoors"


def test_broadcast_reaches_only_member_groups():
    state = SimState(["Outdoors"])
    a = state.add_user("a")
    state.add_user("b")
    state.replace_groups([
        InterestGroup("g0", "x", {"a"}, GroupSharedMemory(5)),
        InterestGroup("g1", "y", {"b"}, GroupSharedMemory(5)),
    ])
    assert a.groups == ["g0"]
    assert state.broadcast(a, entry(1, "a", "Outdoors")) == ["g0"]
    assert len(state.groups["g1"].shared) == 0


# ---------------------------------------------------------------- snapshots

text = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=40)


@st.composite
def states(draw):
    dual = draw(st.booleans())
    state = SimState(DOMAINS, dual_layer=dual)
    for i in range(draw(st.integers(0, 4))):
        d = DOMAINS[i % 3]
        state.add_item(ItemAgent(f"i{i}", d, "info " + draw(text), draw(text), draw(text)))
    for uid in draw(st.lists(st.sampled_from(["u1", "u2", "u3"]), unique=True)):
        u = state.add_user(uid)
        for d in DOMAINS:
            state.write_separated(u, d, draw(text))
            state.write_fused(u, d, draw(text))
        u.history = draw(st.lists(st.sampled_from(["i0", "i1"]), max_size=3))
    groups = []
    for gi in range(draw(st.integers(0, 2))):
        g = InterestGroup(f"g{gi}", draw(text), set(state.users), GroupSharedMemory(draw(st.integers(1, 5))),
                          draw(st.lists(text, max_size=2)))
        for n in range(draw(st.integers(0, 7))):
            g.shared.push(SharedEntry("u1", "x" + draw(text), "Books", n))
        groups.append(g)
    state.replace_groups(groups)
    state.meta = {"step": draw(st.integers(0, 100))}
    return state


@settings(max_examples=50)
@given(states())
def test_snapshot_round_trip(state):
    blob = state.snapshot()
    again = SimState.restore(blob)
    assert again == state
    assert again.snapshot() == blob


def test_snapshot_header_and_end():
    state = SimState(DOMAINS)
    state.add_user("u")
    lines = state.snapshot().splitlines()
    head = json.loads(lines[0])
    assert head["format"] == "popsim-snapshot" and head["version"] == 1
    assert json.loads(lines[-1]) == {"record": "end", "count": 1}


def test_truncated_snapshot_rejected():
    state = SimState(DOMAINS)
    state.add_user("u")
    state.add_user("v")
    lines = state.snapshot().splitlines()
    with pytest.raises(SnapshotError):
        SimState.restore("\n".join(lines[:-1]))
    with pytest.raises(SnapshotError):
        SimState.restore("\n".join(lines[:1] + lines[2:]))
    with pytest.raises(SnapshotError):
        SimState.restore(lines[0] + "\n" + lines[1][:10])
    with pytest.raises(SnapshotError):
        SimState.restore("")


def test_snapshot_version_checked():
    blob = SimState(DOMAINS).snapshot().replace('"version": 1', '"version": 99')
    with pytest.raises(SnapshotError):
        SimState.restore(blob)
