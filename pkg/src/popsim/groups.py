"""Interest-group segmentation: tag extraction, k-means, naming, assignment."""
from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .backend import Backend, PromptKind, PromptRequest, truncate_memory
from .errors import (
    BackendUnavailable,
    InvalidK,
    MalformedResponse,
    TagExtractionFailed,
)
from .memory import GroupSharedMemory, InterestGroup, SimState, UserAgent

logger = logging.getLogger(__name__)

MAX_TAG_WORDS = 5


@dataclass
class InterestTag:
    owner: str
    text: str
    vector: np.ndarray | None = None


@dataclass
class TagCluster:
    id: int
    centroid: np.ndarray
    members: list[InterestTag] = field(default_factory=list)


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    sse: float
    sse_history: list[float]  # winning restart: each Lloyd iteration, then the refinement
    iterations: int


# ------------------------------------------------------------------- k-means

def sse_of(points: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    diff = points - centroids[labels]
    return float(np.sum(diff * diff))


def _sq_dists(points, centroids):
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _plusplus_init(points, k, rng):
    n = len(points)
    centers = [points[rng.integers(n)]]
    for _ in range(1, k):
        d2 = _sq_dists(points, np.array(centers)).min(axis=1)
        total = d2.sum()
        if total <= 0:
            # only duplicates of existing centers left; k <= distinct guards against this
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(points[idx])
    return np.array(centers, dtype=np.float64)


def _lloyd(points, centroids, max_iter):
    k = len(centroids)
    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        new_labels = _sq_dists(points, centroids).argmin(axis=1)
        # repair empty clusters with the point farthest from its own centroid
        for c in range(k):
            if np.any(new_labels == c):
                continue
            counts = np.bincount(new_labels, minlength=k)
            own = ((points - centroids[new_labels]) ** 2).sum(axis=1)
            own[counts[new_labels] <= 1] = -1.0
            far = int(own.argmax())
            new_labels[far] = c
            centroids[c] = points[far]
        stable = labels is not None and np.array_equal(new_labels, labels)
        labels = new_labels
        centroids = np.array([points[labels == c].mean(axis=0) for c in range(k)])
        history.append(sse_of(points, labels, centroids))
        if stable:
            break
    return labels, centroids, history, it


def _hartigan(points, labels, k, max_passes=100):
    """Single-point moves that strictly lower SSE; escapes many Lloyd fixed points.

    Moving x from cluster a (size n_a) to b (size n_b) changes SSE by
    n_b/(n_b+1)*|x-c_b|^2 - n_a/(n_a-1)*|x-c_a|^2.
    """
    labels = labels.copy()
    any_move = False
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    centroids = np.array([points[labels == c].mean(axis=0) for c in range(k)])
    for _ in range(max_passes):
        moved = False
        for i, x in enumerate(points):
            a = labels[i]
            if counts[a] <= 1:
                continue
            d2 = ((centroids - x) ** 2).sum(axis=1)
            cost = counts / (counts + 1) * d2
            cost[a] = counts[a] / (counts[a] - 1) * d2[a]
            b = int(cost.argmin())
            if b == a or cost[b] >= cost[a] - 1e-12:
                continue
            centroids[a] = (centroids[a] * counts[a] - x) / (counts[a] - 1)
            centroids[b] = (centroids[b] * counts[b] + x) / (counts[b] + 1)
            counts[a] -= 1
            counts[b] += 1
            labels[i] = b
            moved = any_move = True
        if not moved:
            break
    # recompute exactly; incremental updates drift by rounding
    centroids = np.array([points[labels == c].mean(axis=0) for c in range(k)])
    return labels, centroids, any_move


def kmeans(vectors: Sequence[Sequence[float]] | np.ndarray, k: int, seed: int = 0,
           max_iter: int = 100, n_init: int = 10) -> KMeansResult:
    """Seeded k-means: k-means++ seeding, Lloyd iterations, best of ``n_init`` restarts.

    Lloyd stops when assignments are stable or after ``max_iter`` rounds. Each
    restart then gets a Hartigan point-move refinement; if it moves any point,
    the refined SSE is appended to the history.
    """
    points = np.asarray(vectors, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise InvalidK("kmeans needs a non-empty 2-d array of vectors")
    distinct = len(np.unique(points, axis=0))
    if not 1 <= k <= distinct:
        raise InvalidK(f"k={k} but only {distinct} distinct vectors")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        init = _plusplus_init(points, k, rng)
        labels, centroids, history, iters = _lloyd(points, init, max_iter)
        labels, centroids, moved = _hartigan(points, labels, k)
        if moved:
            history.append(sse_of(points, labels, centroids))
        sse = history[-1]
        if best is None or sse < best.sse - 1e-12:
            best = KMeansResult(labels, centroids, sse, history, iters)
    return best


def auto_k(n_tags: int, n_distinct: int) -> int:
    if n_distinct <= 1:
        return n_distinct
    return min(max(2, math.isqrt(n_tags)), n_distinct)


def l2_normalize(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    return vectors / norms


def cluster_tags(tags: Sequence[InterestTag], k: int, seed: int = 0,
                 max_iter: int = 100) -> list[TagCluster]:
    """Cluster embedded tags; every tag lands in exactly one cluster."""
    points = l2_normalize(np.array([t.vector for t in tags], dtype=np.float64))
    res = kmeans(points, k, seed=seed, max_iter=max_iter)
    clusters = [TagCluster(c, res.centroids[c]) for c in range(k)]
    for tag, label in zip(tags, res.labels):
        clusters[int(label)].members.append(tag)
    return clusters


# ------------------------------------------------------------- LLM-side steps

_BULLET = re.compile(r"^\s*(?:[-*•]+|\d+[.)])\s*")


def parse_tags(text: str, max_tags: int) -> list[str]:
    if ";" in text or "\n" in text.strip():
        parts = re.split(r"[;\n]", text)
    else:
        parts = text.split(",")
    seen = set()
    out = []
    for part in parts:
        tag = _BULLET.sub("", part).strip().strip("\"'`.").strip()
        if not tag:
            continue
        tag = " ".join(tag.split()[:MAX_TAG_WORDS])
        if tag.lower() in seen:
            continue
        seen.add(tag.lower())
        out.append(tag)
    return out[:max_tags]


def tag_source_text(state: SimState, u: UserAgent, budget: int) -> str:
    if state.dual_layer:
        parts = [f"{d}: {u.fused[d]}" for d in state.domains if u.fused[d].strip()]
    else:
        parts = [v for v in u.separated.values() if v.strip()]
    return truncate_memory("\n".join(parts), budget * max(1, len(parts)))


def extract_tags(u: UserAgent, backend: Backend, state: SimState, max_tags: int = 8,
                 seed: int = 0, budget: int = 2000) -> list[InterestTag]:
    source = tag_source_text(state, u, budget)
    if not source.strip():
        return []
    for attempt in range(2):
        try:
            resp = backend.complete(PromptRequest(
                PromptKind.EXTRACT_TAGS, "extract_tags",
                {"memory": source, "max_tags": str(max_tags)}, seed + attempt))
        except MalformedResponse:
            continue
        texts = parse_tags(resp.text, max_tags)
        if texts:
            return [InterestTag(u.id, t) for t in texts]
    raise TagExtractionFailed(f"no tags parsed for user {u.id}")


def name_cluster(c: TagCluster, backend: Backend, seed: int = 0) -> str:
    if not c.members:
        raise ValueError("cannot name an empty cluster")
    texts = [t.text for t in c.members]
    unique = list(dict.fromkeys(texts))
    try:
        resp = backend.complete(PromptRequest(PromptKind.NAME_GROUP, "name_group",
                                              {"tags": "; ".join(unique)}, seed))
        lines = [ln.strip() for ln in resp.text.splitlines() if ln.strip()]
        if lines:
            return lines[0].strip("\"'")
    except MalformedResponse:
        pass
    counts = Counter(texts)
    top = max(counts.values())
    return min(t for t, n in counts.items() if n == top)


def assign_groups(user_tags: Mapping[str, Sequence[InterestTag]], clusters: Sequence[TagCluster],
                  max_groups: int = 3) -> dict[str, list[int]]:
    """Per user: clusters ranked by how many of the user's tags they hold, top ``max_groups``."""
    where = {id(t): c.id for c in clusters for t in c.members}
    out = {}
    for user, tags in user_tags.items():
        counts = Counter(where[id(t)] for t in tags)
        ranked = sorted(counts, key=lambda cid: (-counts[cid], cid))
        out[user] = ranked[:max_groups]
    return out


# -------------------------------------------------------------- re-segmenting

@dataclass
class SegmentationConfig:
    max_tags: int = 8
    k: int = 0                 # 0 = auto: max(2, floor(sqrt(#tags)))
    max_groups: int = 3
    capacity: int = 20
    group_by: str = "interest"  # or "history"
    seed: int = 0
    budget: int = 2000
    max_iter: int = 100


def _history_tags(state: SimState) -> dict[str, list[InterestTag]]:
    out = {}
    for uid in sorted(state.users):
        u = state.users[uid]
        summaries = [state.items[i].summary() for i in u.history if i in state.items]
        out[uid] = [InterestTag(uid, "; ".join(summaries))] if summaries else []
    return out


def resegment(state: SimState, backend: Backend, cfg: SegmentationConfig,
              epoch: int) -> tuple[list[InterestGroup], list[dict]] | None:
    """Rebuild all interest groups. Returns ``None`` if the backend fails.

    New groups start with empty shared memories. A user whose tag extraction
    fails is clustered with the tags from their last successful extraction.
    """
    seed = cfg.seed + 1000 * epoch
    max_groups = cfg.max_groups
    try:
        if cfg.group_by == "history":
            user_tags = _history_tags(state)
            max_groups = 1
        else:
            user_tags = {}
            for uid in sorted(state.users):
                u = state.users[uid]
                try:
                    tags = extract_tags(u, backend, state, cfg.max_tags, seed, cfg.budget)
                    state.meta.setdefault("tags", {})[uid] = [t.text for t in tags]
                except TagExtractionFailed:
                    logger.warning("tag extraction failed for %s; reusing previous tags", uid)
                    tags = [InterestTag(uid, t) for t in state.meta.get("tags", {}).get(uid, [])]
                user_tags[uid] = tags
        all_tags = [t for uid in sorted(user_tags) for t in user_tags[uid]]
        if not all_tags:
            return [], []
        cache: dict[str, np.ndarray] = {}
        for t in all_tags:
            if t.text not in cache:
                cache[t.text] = backend.embed(t.text)
            t.vector = cache[t.text]
        normed = l2_normalize(np.array([t.vector for t in all_tags]))
        distinct = len(np.unique(normed, axis=0))
        k = min(cfg.k, distinct) if cfg.k > 0 else auto_k(len(all_tags), distinct)
        clusters = cluster_tags(all_tags, k, seed=seed, max_iter=cfg.max_iter)
        membership = assign_groups(user_tags, clusters, max_groups)
        groups = []
        report = []
        for c in clusters:
            members = {u for u, cids in membership.items() if c.id in cids}
            if not members or not c.members:
                continue
            name = name_cluster(c, backend, seed)
            top = [t for t, _ in Counter(m.text for m in c.members).most_common(5)]
            if cfg.group_by == "history":
                top = [t[:60] for t in top]
            g = InterestGroup(f"e{epoch}g{c.id}", name, members, GroupSharedMemory(cfg.capacity), top)
            groups.append(g)
            report.append({"epoch": epoch, "group": g.id, "name": name,
                           "members": len(members), "top_tags": top})
        return groups, report
    except BackendUnavailable as exc:
        logger.warning("resegmentation at epoch %d failed (%s); keeping previous groups", epoch, exc)
        return None
