"""Seeded synthetic review files for offline runs and tests.

Users hold one or two latent tastes. Each taste has items in every domain, so
preferences carry across domains. Late in the window a few "trending" items
are bought by many users regardless of taste, which is the signal that
group-shared memories can pick up.
"""
from __future__ import annotations

import json
import random
from pathlib import Path

import yaml

from .dataset import CROSS_PRESETS, _epoch

TASTES = ("fantasy", "science fiction", "jazz", "true crime", "cooking", "history")
_NOUNS = {"Books": "Novel", "CDs": "Album", "Movies": "Film", "Games": "Game"}


def synthetic_reviews(n_users: int = 120, items_per_domain: int = 30,
                      domains: list[str] | None = None, seed: int = 0,
                      start: str = "2021-10-01", end: str = "2022-04-01") -> list[dict]:
    domains = list(domains or CROSS_PRESETS["cross-5"])
    rng = random.Random(seed)
    t0, t1 = _epoch(start), _epoch(end)
    items = {}  # (domain, taste) -> [(id, title)]
    for d in domains:
        for k in range(items_per_domain):
            taste = TASTES[k % len(TASTES)]
            iid = f"{d[:2].lower()}{k:03d}"
            items.setdefault((d, taste), []).append((iid, f"{taste.title()} {_NOUNS.get(d, 'Item')} {k}"))
    trending = {d: items[(d, TASTES[0])][0] for d in domains}

    rows = []

    def add(user, d, taste, item, rating, ts):
        iid, title = item
        rows.append({"user_id": user, "item_id": iid, "domain": d, "rating": rating,
                     "timestamp": ts, "title": title, "category": taste})

    span = t1 - t0
    for n in range(n_users):
        user = f"user{n:04d}"
        tastes = rng.sample(TASTES, rng.choice([1, 2]))
        home = rng.sample(domains, rng.choice([2, min(3, len(domains))]))
        for _ in range(rng.randint(8, 16)):
            d = rng.choice(home)
            taste = rng.choice(tastes)
            add(user, d, taste, rng.choice(items[(d, taste)]), rng.choice([4, 4.5, 5, 5]),
                t0 + rng.randrange(int(span * 0.8)))
        if rng.random() < 0.5:  # late trend purchase
            d = rng.choice(home)
            add(user, d, TASTES[0], trending[d], 5, t0 + int(span * 0.8) + rng.randrange(int(span * 0.2)))
        for _ in range(rng.randint(0, 3)):  # noise the filters must drop
            d = rng.choice(domains)
            taste = rng.choice(TASTES)
            if rng.random() < 0.5:
                add(user, d, taste, rng.choice(items[(d, taste)]), rng.choice([1, 2, 3]),
                    t0 + rng.randrange(span))
            else:
                add(user, d, taste, rng.choice(items[(d, taste)]), 5, t1 + rng.randrange(86400 * 30))
    rows.sort(key=lambda r: (r["timestamp"], r["user_id"], r["item_id"]))
    return rows


def write_synthetic(out_dir: str | Path, name: str = "synthetic", preset: str = "cross-5",
                    n_users: int = 120, items_per_domain: int = 30, user_sample_size: int | None = 100,
                    seed: int = 0) -> Path:
    """Write ``raw.jsonl`` and a matching ``spec.yaml``; returns the spec path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = synthetic_reviews(n_users, items_per_domain, CROSS_PRESETS[preset], seed)
    with (out / "raw.jsonl").open("w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    spec = {"name": name, "input": "raw.jsonl", "preset": preset,
            "user_sample_size": user_sample_size, "seed": seed}
    path = out / "spec.yaml"
    path.write_text(yaml.safe_dump(spec, sort_keys=False), encoding="utf-8")
    return path
