"""Candidate sampling, agent and baseline rankings, NDCG/MRR, run aggregation."""
from __future__ import annotations

import json
import logging
import math
import random
import re
import statistics
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .backend import Backend, PromptKind, PromptRequest, truncate_memory
from .dataset import Interaction
from .errors import BackendUnavailable, EvalPoolTooSmall, InvalidRank, MalformedResponse
from .memory import ItemAgent, SimState

logger = logging.getLogger(__name__)

N_DISTRACTORS = 9
METHODS = ("agent", "pop", "seqsim", "llmrank")


@dataclass(frozen=True)
class CandidateSet:
    ground_truth: str
    distractors: tuple[str, ...]
    presentation_order: tuple[str, ...]


@dataclass
class RankingResult:
    ordering: list[str]
    rank_of_truth: int
    degraded: bool = False

    @classmethod
    def from_ordering(cls, ordering: Sequence[str], truth: str, degraded: bool = False):
        ordering = list(ordering)
        return cls(ordering, ordering.index(truth) + 1, degraded)


def check_permutation(result: RankingResult, cs: CandidateSet) -> None:
    if sorted(result.ordering) != sorted(cs.presentation_order):
        raise AssertionError(f"ranking {result.ordering} is not a permutation of the candidates")
    if result.ordering[result.rank_of_truth - 1] != cs.ground_truth:
        raise AssertionError("rank_of_truth inconsistent with ordering")


# ----------------------------------------------------------------- metrics

def _check_rank(rank: int, n: int) -> None:
    if isinstance(rank, bool) or not isinstance(rank, (int, np.integer)) or not 1 <= rank <= n:
        raise InvalidRank(f"rank {rank!r} outside [1, {n}]")


def mrr(rank: int, n: int = N_DISTRACTORS + 1) -> float:
    _check_rank(rank, n)
    return 1.0 / rank


def ndcg(rank: int, n: int = N_DISTRACTORS + 1) -> float:
    """Single relevant item, binary gain: the ideal DCG is 1."""
    _check_rank(rank, n)
    return 1.0 / math.log2(rank + 1)


# -------------------------------------------------------------- candidates

def build_candidates(truth: str, items: Mapping[str, ItemAgent], interacted: set[str],
                     seed: int, n_distractors: int = N_DISTRACTORS) -> CandidateSet:
    """Ground truth plus ``n_distractors`` unseen same-domain items, shuffled."""
    domain = items[truth].domain
    eligible = sorted(iid for iid, it in items.items()
                      if it.domain == domain and iid != truth and iid not in interacted)
    if len(eligible) < n_distractors:
        raise EvalPoolTooSmall(f"{len(eligible)} eligible {domain} distractors, need {n_distractors}")
    rng = random.Random(seed)
    distractors = rng.sample(eligible, n_distractors)
    order = [truth, *distractors]
    rng.shuffle(order)
    return CandidateSet(truth, tuple(distractors), tuple(order))


def parse_ranking(text: str, ids: Sequence[str]) -> list[str] | None:
    """Order of first mention of each id; ``None`` unless every id appears."""
    first = {}
    for iid in ids:
        m = re.search(r"(?<![\w-])" + re.escape(iid) + r"(?![\w-])", text)
        if m is None:
            return None
        first[iid] = m.start()
    if len(set(first.values())) != len(ids):
        return None
    return sorted(ids, key=first.__getitem__)


def _candidate_block(cs: CandidateSet, items: Mapping[str, ItemAgent], budget: int,
                     use_memory: bool = True) -> str:
    lines = []
    for iid in cs.presentation_order:
        it = items[iid]
        text = truncate_memory(it.memory, budget) if use_memory else (it.title or it.side_info)
        lines.append(f"[{iid}] {text}")
    return "\n".join(lines)


def _ranked_completion(backend: Backend, template_id: str, slots: dict, cs: CandidateSet,
                       seed: int) -> RankingResult:
    for attempt in range(2):
        try:
            resp = backend.complete(PromptRequest(PromptKind.RANK_CANDIDATES, template_id, slots,
                                                  seed + attempt))
        except (MalformedResponse, BackendUnavailable) as exc:
            logger.warning("ranking call failed (%s)", exc)
            continue
        order = parse_ranking(resp.text, cs.presentation_order)
        if order is not None:
            return RankingResult.from_ordering(order, cs.ground_truth)
    return RankingResult.from_ordering(cs.presentation_order, cs.ground_truth, degraded=True)


def rank_with_agent(state: SimState, backend: Backend, user: str, cs: CandidateSet, d: str,
                    seed: int = 0, shared_view_size: int = 10, self_echo: bool = True,
                    budget: int = 2000) -> RankingResult:
    ctx = state.decision_context(user, d, shared_view_size, self_echo)
    slots = {
        "separated": truncate_memory(ctx.separated, budget) or "(empty)",
        "fused": truncate_memory(ctx.fused, budget) or "(empty)",
        "shared": ctx.shared_text(), "domain": d, "n": str(len(cs.presentation_order)),
        "candidates": _candidate_block(cs, state.items, budget),
    }
    return _ranked_completion(backend, "rank_candidates", slots, cs, seed)


def llmrank_baseline(backend: Backend, history: Sequence[str], cs: CandidateSet,
                     items: Mapping[str, ItemAgent], d: str, seed: int = 0) -> RankingResult:
    """Zero-shot ranking from raw history titles; no learned memories."""
    hist = "\n".join(f"- {items[i].title or items[i].side_info}" for i in history if i in items)
    slots = {"history": hist or "(none)", "domain": d, "n": str(len(cs.presentation_order)),
             "candidates": _candidate_block(cs, items, 0, use_memory=False)}
    return _ranked_completion(backend, "llmrank", slots, cs, seed)


def pop_baseline(cs: CandidateSet, train_counts: Mapping[str, int]) -> RankingResult:
    order = sorted(cs.presentation_order, key=lambda i: (-train_counts.get(i, 0), i))
    return RankingResult.from_ordering(order, cs.ground_truth)


def seqsim_baseline(cs: CandidateSet, history: Sequence[str],
                    vector_of: Callable[[str], np.ndarray]) -> RankingResult:
    """Score = max cosine between the candidate and any history item; ties by id."""
    if not history:
        return RankingResult.from_ordering(sorted(cs.presentation_order), cs.ground_truth,
                                           degraded=True)
    hist = np.array([vector_of(h) for h in history], dtype=np.float64)
    hist /= np.linalg.norm(hist, axis=1, keepdims=True)
    scores = {}
    for iid in cs.presentation_order:
        v = np.asarray(vector_of(iid), dtype=np.float64)
        # round so float noise cannot break exact ties
        scores[iid] = round(float((hist @ (v / np.linalg.norm(v))).max()), 12)
    order = sorted(cs.presentation_order, key=lambda i: (-scores[i], i))
    return RankingResult.from_ordering(order, cs.ground_truth)


# ------------------------------------------------------------- aggregation

@dataclass
class MetricReport:
    method: str
    dataset: str
    runs: int
    ndcg_runs: list[float]
    mrr_runs: list[float]
    ndcg_mean: float = 0.0
    ndcg_std: float = 0.0
    mrr_mean: float = 0.0
    mrr_std: float = 0.0
    degraded: int = 0
    skipped: int = 0


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single run)."""
    if not values:
        raise ValueError("need at least one run")
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


def make_report(method: str, dataset: str, ndcg_runs: Sequence[float],
                mrr_runs: Sequence[float], degraded: int = 0, skipped: int = 0) -> MetricReport:
    nm, ns = aggregate(ndcg_runs)
    mm, ms = aggregate(mrr_runs)
    return MetricReport(method, dataset, len(ndcg_runs), list(ndcg_runs), list(mrr_runs),
                        nm, ns, mm, ms, degraded, skipped)


@dataclass
class EvalConfig:
    runs: int = 5
    seed: int = 0
    methods: tuple[str, ...] = METHODS
    n_distractors: int = N_DISTRACTORS
    split: str = "test"


def _instance_seed(seed: int, run: int, index: int) -> int:
    return (seed * 1_000_003 + run) * 1_000_033 + index


def evaluate(state: SimState, backend: Backend, targets: Sequence[Interaction],
             interacted: Mapping[str, set[str]], train: Sequence[Interaction],
             cfg: EvalConfig, dataset: str = "", agent_label: str = "agent",
             shared_view_size: int = 10, self_echo: bool = True,
             budget: int = 2000) -> tuple[list[MetricReport], list[dict]]:
    """Evaluate every method on every target, ``cfg.runs`` times.

    Runs share the trained state; candidates and presentation order are
    re-sampled per (run, target).
    """
    counts = Counter(r.item for r in train)
    history: dict[str, list[str]] = {}
    for r in sorted(train, key=lambda r: r.timestamp):
        history.setdefault(r.user, []).append(r.item)
    vectors: dict[str, np.ndarray] = {}

    def vector_of(iid: str) -> np.ndarray:
        if iid not in vectors:
            vectors[iid] = backend.embed(state.items[iid].side_info)
        return vectors[iid]

    run_records = []
    per_method: dict[str, dict[str, list]] = {m: {"ndcg": [], "mrr": [], "degraded": 0, "skipped": 0}
                                             for m in cfg.methods}
    for run in range(cfg.runs):
        sums = {m: [0.0, 0.0, 0] for m in cfg.methods}
        for idx, t in enumerate(targets):
            if t.user not in state.users or t.item not in state.items:
                continue
            seed = _instance_seed(cfg.seed, run, idx)
            try:
                cs = build_candidates(t.item, state.items, interacted.get(t.user, set()), seed,
                                      cfg.n_distractors)
            except EvalPoolTooSmall as exc:
                logger.warning("skipping %s/%s: %s", t.user, t.item, exc)
                for m in cfg.methods:
                    per_method[m]["skipped"] += 1
                continue
            for m in cfg.methods:
                if m == "agent":
                    res = rank_with_agent(state, backend, t.user, cs, t.domain, seed,
                                          shared_view_size, self_echo, budget)
                elif m == "pop":
                    res = pop_baseline(cs, counts)
                elif m == "seqsim":
                    res = seqsim_baseline(cs, history.get(t.user, []), vector_of)
                elif m == "llmrank":
                    res = llmrank_baseline(backend, history.get(t.user, []), cs, state.items,
                                           t.domain, seed)
                else:
                    raise ValueError(f"unknown method {m!r}")
                check_permutation(res, cs)
                n = len(cs.presentation_order)
                sums[m][0] += ndcg(res.rank_of_truth, n)
                sums[m][1] += mrr(res.rank_of_truth, n)
                sums[m][2] += 1
                per_method[m]["degraded"] += int(res.degraded)
        for m in cfg.methods:
            s_ndcg, s_mrr, cnt = sums[m]
            nd, mr = (s_ndcg / cnt, s_mrr / cnt) if cnt else (0.0, 0.0)
            per_method[m]["ndcg"].append(nd)
            per_method[m]["mrr"].append(mr)
            label = agent_label if m == "agent" else m
            run_records.append({"record": "run", "method": label, "dataset": dataset, "run": run,
                                "ndcg": nd, "mrr": mr, "instances": cnt})
    reports = []
    for m in cfg.methods:
        pm = per_method[m]
        label = agent_label if m == "agent" else m
        reports.append(make_report(label, dataset, pm["ndcg"], pm["mrr"],
                                   pm["degraded"], pm["skipped"] // max(cfg.runs, 1)))
    return reports, run_records


# ------------------------------------------------------------------ output

def format_table(reports: Iterable[MetricReport]) -> str:
    rows = [("method", "dataset", "runs", "NDCG", "MRR")]
    for r in reports:
        rows.append((r.method, r.dataset, str(r.runs),
                     f"{r.ndcg_mean:.4f} ± {r.ndcg_std:.4f}", f"{r.mrr_mean:.4f} ± {r.mrr_std:.4f}"))
    widths = [max(len(row[c]) for row in rows) for c in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_report(out_dir: str | Path, reports: Sequence[MetricReport],
                 run_records: Sequence[dict]) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jsonl = out / "report.jsonl"
    with jsonl.open("w", encoding="utf-8") as fh:
        for rec in run_records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        for r in reports:
            fh.write(json.dumps({"record": "summary", **asdict(r)}, sort_keys=True) + "\n")
    txt = out / "report.txt"
    txt.write_text(format_table(reports), encoding="utf-8")
    return jsonl, txt


def read_summaries(path: str | Path) -> list[MetricReport]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.pop("record", None) == "summary":
                out.append(MetricReport(**rec))
    return out
