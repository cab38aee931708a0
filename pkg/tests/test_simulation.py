import json

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from popsim.dataset import CatalogItem, Interaction
from popsim.errors import ConfigError, NoNegativeAvailable
from popsim.memory import SimState
from popsim.simulation import (
    VARIANTS,
    RunConfig,
    Simulator,
    Trace,
    apply_trace,
    build_state,
    parse_choice,
    rain_gear_scenario,
    run_training,
)

from conftest import scripted

ECHO_RULES = [
    {"kind": "choose-positive", "response": "B\nfits my taste"},
    {"kind": "update-user-memory", "response": "[{domain}] likes {pos_id}; {memory}"},
    {"kind": "extract-relevant-preferences", "response": "{source_domain} carries over"},
    {"kind": "fuse-preferences", "response": "fused {domain}: {separated}"},
    {"kind": "update-item-memory", "response": "{item} / {relation} {user_id}"},
    {"kind": "extract-tags", "response": "reading; music"},
    {"response": "{tags}"},
]
DOMAINS4 = ["Books", "CDs", "Movies", "Games"]
CATALOG = [CatalogItem(f"{d[0].lower()}{n}", d, f"{d} title {n}", f"{d} category")
           for d in DOMAINS4 for n in range(6)]


def echo_backend():
    return scripted(ECHO_RULES, dimension=8)


def stream(pairs):
    return [Interaction(u, f"{d[0].lower()}{n}", d, t) for t, (u, d, n) in enumerate(pairs, 1)]


# ---------------------------------------------------------------- parsing

@pytest.mark.parametrize("text,expected", [
    ("B", "pos"), ("A", "neg"), ("Option B\nbecause", "pos"), ("option a.", "neg"),
    ("I choose the second one", "pos"), ("first", "neg"), ("2", "pos"),
    ("[i9] looks great", "pos"), ("[j1]", "neg"), ("A or B", None), ("", None), ("maybe", None),
])
def test_parse_choice(text, expected):
    assert parse_choice(text, "j1", "i9") == expected


# ---------------------------------------------------------------- config

def test_variant_presets():
    for name, flags in VARIANTS.items():
        cfg = RunConfig.preset(name, domains=["Books"])
        assert (cfg.dual_layer, cfg.shared_groups, cfg.group_by) == flags
        assert cfg.variant == name


def test_history_grouping_requires_groups():
    with pytest.raises(ConfigError):
        RunConfig(shared_groups=False, group_by="history")
    with pytest.raises(ConfigError):
        RunConfig(group_capacity=0)


# ---------------------------------------------------------------- phases

def test_negative_is_same_domain_and_unseen():
    cfg = RunConfig.preset("agentcf", domains=DOMAINS4)
    state = build_state(cfg, CATALOG, ["u"])
    sim = Simulator(state, echo_backend(), cfg, {"u": {"b0", "b1"}})
    for step in range(20):
        j = sim.sample_negative(state.users["u"], "Books", step)
        assert j.domain == "Books" and j.id not in {"b0", "b1"}


def test_no_negative_available():
    cfg = RunConfig.preset("agentcf", domains=["Books"])
    items = [CatalogItem("b0", "Books", "t", "c")]
    state = build_state(cfg, items, ["u"])
    with pytest.raises(NoNegativeAvailable):
        Simulator(state, echo_backend(), cfg, {"u": {"b0"}}).sample_negative(state.users["u"], "Books", 1)


def test_unparseable_choice_is_coin_flip_and_degraded():
    b = scripted([{"kind": "choose-positive", "response": "no idea"}] + ECHO_RULES)
    cfg = RunConfig.preset("agentcf", domains=DOMAINS4)
    state, trace = run_training(stream([("u", "Books", 0)]), CATALOG, cfg, b)
    infer = trace.phases("infer")[0]
    assert infer["degraded"] is True
    assert [c["kind"] for c in infer["calls"]] == ["choose-positive"] * 2
    assert trace.records[-1]["degraded"] >= 1


def test_fuse_call_order_three_domains():
    cfg = RunConfig.preset("agentcf+dual", domains=["Books", "CDs", "Movies"])
    b = echo_backend()
    state = build_state(cfg, CATALOG, ["u"])
    u = state.users["u"]
    for d in ("Books", "CDs", "Movies"):
        state.write_separated(u, d, f"likes {d}")
    sim = Simulator(state, b, cfg)
    assert sim.fuse(u, "CDs", 1)
    assert b.calls == [("extract-relevant-preferences", "extract_relevant_preferences")] * 2 + [
        ("fuse-preferences", "fuse_preferences")]
    assert u.fused["CDs"] == "fused CDs: likes CDs"
    assert u.fused["Books"] == "" and u.fused["Movies"] == ""


def test_fuse_skips_empty_domains():
    cfg = RunConfig.preset("agentcf+dual", domains=["Books", "CDs", "Movies"])
    b = echo_backend()
    state = build_state(cfg, CATALOG, ["u"])
    state.write_separated(state.users["u"], "Books", "x")
    Simulator(state, b, cfg).fuse(state.users["u"], "Books", 1)
    assert [k for k, _ in b.calls] == ["fuse-preferences"]


def test_phase_order_per_interaction():
    cfg = RunConfig.preset("agentcf++", domains=DOMAINS4, resegment_every=100)
    _, trace = run_training(stream([("u", "Books", 0), ("u", "CDs", 1)]), CATALOG, cfg, echo_backend())
    names = [r["phase"] for r in trace.phases() if r["step"] == 1]
    assert names == ["sample_negative", "infer", "update_user", "fuse", "update_items", "broadcast"]


def test_lazy_fusion_runs_once_per_user_domain():
    cfg = RunConfig.preset("agentcf+dual", domains=DOMAINS4, fuse_every_interaction=False)
    pairs = [("u", "Books", 0), ("u", "Books", 1), ("u", "CDs", 0), ("v", "Books", 2)]
    _, trace = run_training(stream(pairs), CATALOG, cfg, echo_backend())
    fuses = trace.phases("fuse")
    assert sorted((r["user"], r["domain"]) for r in fuses) == [("u", "Books"), ("u", "CDs"), ("v", "Books")]


def test_resegmentation_schedule():
    cfg = RunConfig.preset("agentcf++", domains=DOMAINS4)  # ceil(8 / 4) = every 2 steps
    pairs = [(f"u{n % 3}", DOMAINS4[n % 4], n % 6) for n in range(8)]
    _, trace = run_training(stream(pairs), CATALOG, cfg, echo_backend())
    assert [r["step"] for r in trace.phases("resegment")] == [2, 4, 6]


def test_ablation_has_no_extract_fuse_or_broadcast():
    cfg = RunConfig.preset("agentcf", domains=DOMAINS4)
    pairs = [(f"u{n % 3}", DOMAINS4[n % 4], n % 6) for n in range(12)]
    b = echo_backend()
    _, trace = run_training(stream(pairs), CATALOG, cfg, b)
    kinds = {c["kind"] for r in trace.phases() for c in r["calls"]}
    assert kinds == {"choose-positive", "update-user-memory", "update-item-memory"}
    assert not trace.phases("broadcast") and not trace.phases("resegment")


def test_item_update_uses_single_memory_in_ablation():
    cfg = RunConfig.preset("agentcf", domains=DOMAINS4)
    state, _ = run_training(stream([("u", "Books", 0)]), CATALOG, cfg, echo_backend())
    assert state.items["b0"].memory.endswith("/ appeal to u")
    assert "[Books] likes b0" in state.users["u"].separated["ALL"]


# ---------------------------------------------------------------- invariants

pairs_strategy = st.lists(st.tuples(st.sampled_from(["u1", "u2", "u3"]), st.sampled_from(DOMAINS4),
                                    st.integers(0, 3)), min_size=1, max_size=12)


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(pairs_strategy)
def test_writes_stay_in_interaction_domain(pairs):
    cfg = RunConfig.preset("agentcf++", domains=DOMAINS4)
    _, trace = run_training(stream(pairs), CATALOG, cfg, echo_backend())
    for rec in trace.phases():
        for w in rec.get("writes", []):
            assert w["domain"] == rec["domain"], (rec["phase"], w["target"])


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(pairs_strategy, st.sampled_from(sorted(VARIANTS)))
def test_negative_shown_before_positive(pairs, variant):
    cfg = RunConfig.preset(variant, domains=DOMAINS4)
    _, trace = run_training(stream(pairs), CATALOG, cfg, echo_backend())
    for rec in trace.phases("infer"):
        assert 0 <= rec["neg_index"] < rec["pos_index"]


@settings(max_examples=20, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(pairs_strategy, st.sampled_from(sorted(VARIANTS)))
def test_trace_replay_reproduces_state(pairs, variant):
    cfg = RunConfig.preset(variant, domains=DOMAINS4)
    train = stream(pairs)
    state, trace = run_training(train, CATALOG, cfg, echo_backend())
    fresh = build_state(cfg, CATALOG, {r.user for r in train})
    assert apply_trace(fresh, trace.records) == state
    assert trace.records[-1]["snapshot_digest"] == state.digest()


def test_runs_are_deterministic():
    cfg = RunConfig.preset("agentcf++", domains=DOMAINS4)
    pairs = [(f"u{n % 3}", DOMAINS4[n % 4], n % 6) for n in range(10)]
    a = run_training(stream(pairs), CATALOG, cfg, echo_backend())
    b = run_training(stream(pairs), CATALOG, cfg, echo_backend())
    assert a[0].digest() == b[0].digest() and a[1].digest() == b[1].digest()


class Killed(Exception):
    pass


def test_resume_from_checkpoint_matches_uninterrupted(tmp_path):
    cfg = RunConfig.preset("agentcf++", domains=DOMAINS4, snapshot_every=3)
    pairs = [(f"u{n % 3}", DOMAINS4[n % 4], n % 6) for n in range(11)]
    train = stream(pairs)
    full, full_trace = run_training(train, CATALOG, cfg, echo_backend())

    saved = {}
    state = build_state(cfg, CATALOG, {r.user for r in train})
    path = tmp_path / "trace.jsonl"
    sim = Simulator(state, echo_backend(), cfg, trace=Trace(path, header={}),
                    checkpoint=lambda s: saved.__setitem__("blob", s.snapshot()))

    def die(step, inter, st):
        if step == 7:
            raise Killed

    with pytest.raises(Killed):
        sim.run(train, on_step=die)
    sim.trace.close()

    restored = SimState.restore(saved["blob"])
    assert restored.meta["step"] == 6
    Trace.truncate_file(path, 6)
    sim2 = Simulator(restored, echo_backend(), cfg, trace=Trace(path, append=True))
    sim2.run(train)
    sim2.finish()
    sim2.trace.close()
    assert restored.digest() == full.digest()
    # the file carries a header record; the in-memory reference trace does not
    resumed = [json.loads(ln) for ln in path.read_text().splitlines()]
    assert resumed[1:] == full_trace.records


# ---------------------------------------------------------------- popularity

def test_rain_gear_contexts_shift_with_groups():
    ctx = rain_gear_scenario("agentcf++")
    assert ctx[1] != ctx[2] != ctx[3]
    assert "Rain Coat" in ctx[2].shared_text() and "Storm Umbrella" in ctx[2].shared_text()
    assert "Camping Tent" in ctx[3].shared_text()


def test_rain_gear_contexts_static_without_groups():
    ctx = rain_gear_scenario("agentcf")
    assert ctx[1] == ctx[2] == ctx[3]
    assert ctx[1].shared_views == ()
