"""Review ingestion, filtering, cross-domain dataset construction and splits.

Input records are JSON lines with fields ``user_id, item_id, domain, rating,
timestamp, title, category``. A prepared dataset is a bundle directory::

    train.jsonl  valid.jsonl  test.jsonl   # Interaction records
    items.jsonl                            # item catalog with side info
    spec.json                              # the DatasetSpec plus digests
"""
from __future__ import annotations

import json
import logging
import math
import os
import random
import shutil
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import yaml

from .backend import digest
from .errors import ConfigError, DatasetTooSmall, SplitDegenerateWarning

logger = logging.getLogger(__name__)

RAW_FIELDS = ("user_id", "item_id", "domain", "rating", "timestamp", "title", "category")

# Non-authoritative reconstruction: the five 3-or-4 subsets of the four domains.
CROSS_PRESETS = {
    "cross-1": ["Books", "CDs", "Movies"],
    "cross-2": ["Books", "CDs", "Games"],
    "cross-3": ["Books", "Movies", "Games"],
    "cross-4": ["CDs", "Movies", "Games"],
    "cross-5": ["Books", "CDs", "Movies", "Games"],
}


def _epoch(value) -> int:
    if isinstance(value, bool):
        raise ValueError("boolean is not a timestamp")
    if isinstance(value, (int, float)):
        return int(value)
    if isinstance(value, datetime):
        dt = value if value.tzinfo else value.replace(tzinfo=timezone.utc)
        return int(dt.timestamp())
    if isinstance(value, date):
        return int(datetime(value.year, value.month, value.day, tzinfo=timezone.utc).timestamp())
    text = str(value).strip()
    if text.lstrip("-").isdigit():
        return int(text)
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _clean(text) -> str:
    return " ".join(str(text or "").split())


@dataclass(frozen=True)
class RawReview:
    user_id: str
    item_id: str
    domain: str
    rating: float
    timestamp: int
    title: str = ""
    category: str = ""

    @classmethod
    def from_dict(cls, d: dict) -> "RawReview":
        rating = float(d["rating"])
        if not 1.0 <= rating <= 5.0:
            raise ValueError(f"rating {rating} outside [1, 5]")
        user, item, domain = _clean(d["user_id"]), _clean(d["item_id"]), _clean(d["domain"])
        if not (user and item and domain):
            raise ValueError("empty identifier")
        return cls(user, item, domain, rating, _epoch(d["timestamp"]),
                   _clean(d.get("title", "")), _clean(d.get("category", "")))


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    domain: str
    timestamp: int
    rating: float = 5.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CatalogItem:
    id: str
    domain: str
    title: str
    category: str


@dataclass
class DatasetSpec:
    name: str
    domains: list[str]
    input: str = ""
    start: int = _epoch("2021-10-01")
    end: int = _epoch("2022-04-01")  # exclusive
    min_rating: float = 4.0
    min_interactions: int = 10
    min_domains: int = 2
    user_sample_size: int | None = 100
    split_ratio: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_mode: str = "global"
    seed: int = 0

    def __post_init__(self):
        self.start, self.end = _epoch(self.start), _epoch(self.end)
        self.split_ratio = tuple(float(r) for r in self.split_ratio)
        self.validate()

    def validate(self) -> None:
        if not 3 <= len(self.domains) <= 4:
            raise ConfigError(f"dataset needs 3 or 4 domains, got {self.domains}")
        if len(set(self.domains)) != len(self.domains):
            raise ConfigError("duplicate domains")
        if len(self.split_ratio) != 3 or not math.isclose(sum(self.split_ratio), 1.0):
            raise ConfigError(f"split ratios must be three numbers summing to 1: {self.split_ratio}")
        if self.split_mode not in ("global", "per_user"):
            raise ConfigError(f"unknown split_mode {self.split_mode!r}")
        if self.start >= self.end:
            raise ConfigError("time window is empty")

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "DatasetSpec":
        data = dict(data)
        if "preset" in data:
            preset = data.pop("preset")
            if preset not in CROSS_PRESETS:
                raise ConfigError(f"unknown preset {preset!r}")
            data.setdefault("domains", CROSS_PRESETS[preset])
            data.setdefault("name", preset)
        if "window" in data:
            data["start"], data["end"] = data.pop("window")
        if "split" in data:
            data["split_ratio"] = data.pop("split")
        if base_dir is not None and data.get("input") and not os.path.isabs(data["input"]):
            data["input"] = str(base_dir / data["input"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"bad dataset spec: {exc}") from exc

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "DatasetSpec":
        path = Path(path)
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        return cls.from_dict(data, base_dir=path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratio"] = list(self.split_ratio)
        return d

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("input")  # location, not content
        return digest(d)


class IngestResult(list):
    """A list of RawReview that also reports how many lines were skipped."""

    skipped: int = 0


def ingest(path: str | os.PathLike) -> IngestResult:
    """Parse newline-delimited review records; malformed lines are skipped and counted."""
    out = IngestResult()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(RawReview.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                out.skipped += 1
                logger.debug("skipping line %d of %s: %s", lineno, path, exc)
    if out.skipped:
        logger.warning("%s: skipped %d malformed lines", path, out.skipped)
    return out


def filter_pipeline(reviews: Iterable[RawReview | Interaction], spec: DatasetSpec) -> list[Interaction]:
    """Rating, window and domain filters, then the multi-domain/activity rule, then user sampling.

    Output keeps input order. Accepts its own output, so applying it twice is
    the same as applying it once.
    """
    domains = set(spec.domains)
    kept = []
    for r in reviews:
        if isinstance(r, RawReview):
            r = Interaction(r.user_id, r.item_id, r.domain, r.timestamp, r.rating)
        if r.rating < spec.min_rating:
            continue
        if not spec.start <= r.timestamp < spec.end:
            continue
        if r.domain not in domains:
            continue
        kept.append(r)

    per_user: dict[str, list[Interaction]] = defaultdict(list)
    for r in kept:
        per_user[r.user].append(r)
    eligible = sorted(u for u, rs in per_user.items()
                      if len({r.domain for r in rs}) >= spec.min_domains
                      and len(rs) >= spec.min_interactions)
    if spec.user_sample_size is not None:
        if len(eligible) < spec.user_sample_size:
            raise DatasetTooSmall(
                f"{len(eligible)} eligible users, need {spec.user_sample_size}")
        chosen = set(random.Random(spec.seed).sample(eligible, spec.user_sample_size))
    else:
        chosen = set(eligible)
    return [r for r in kept if r.user in chosen]


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_sizes(n: int, ratio: Sequence[float] = (0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    n_train = min(n, round_half_up(ratio[0] * n))
    n_valid = min(n - n_train, round_half_up(ratio[1] * n))
    return n_train, n_valid, n - n_train - n_valid


def chronological(interactions: Sequence[Interaction]) -> list[Interaction]:
    # sorted() is stable, so equal timestamps keep input order
    return sorted(interactions, key=lambda r: r.timestamp)


def split(interactions: Sequence[Interaction], ratio: Sequence[float] = (0.8, 0.1, 0.1),
          mode: str = "global") -> tuple[list[Interaction], list[Interaction], list[Interaction]]:
    """Chronological train/valid/test split.

    ``global`` sorts all records and cuts prefix/middle/suffix. ``per_user``
    cuts every user's own sequence the same way and merges the pieces back in
    chronological order.
    """
    if not interactions:
        raise ValueError("cannot split an empty interaction list")
    if mode == "per_user":
        by_user: dict[str, list[Interaction]] = defaultdict(list)
        for r in interactions:
            by_user[r.user].append(r)
        parts: tuple[list, list, list] = ([], [], [])
        for u in sorted(by_user):
            for acc, piece in zip(parts, split(by_user[u], ratio, "global")):
                acc.extend(piece)
        return tuple(chronological(p) for p in parts)  # type: ignore[return-value]
    n = len(interactions)
    if n < 10:
        warnings.warn(f"splitting only {n} interactions", SplitDegenerateWarning, stacklevel=2)
    ordered = chronological(interactions)
    a, b, _ = split_sizes(n, ratio)
    return ordered[:a], ordered[a:a + b], ordered[a + b:]


def build_catalog(reviews: Iterable[RawReview], domains: Sequence[str]) -> dict[str, CatalogItem]:
    """Item side info from every review in the chosen domains, any rating or date."""
    wanted = set(domains)
    catalog: dict[str, CatalogItem] = {}
    for r in reviews:
        if r.domain not in wanted:
            continue
        prev = catalog.get(r.item_id)
        if prev is None:
            catalog[r.item_id] = CatalogItem(r.item_id, r.domain, r.title, r.category)
        elif not prev.title and r.title:
            catalog[r.item_id] = CatalogItem(r.item_id, prev.domain, r.title,
                                             prev.category or r.category)
    return catalog


# ------------------------------------------------------------------- bundles

@dataclass
class Bundle:
    spec: DatasetSpec
    train: list[Interaction]
    valid: list[Interaction]
    test: list[Interaction]
    items: dict[str, CatalogItem]
    path: Path | None = None
    manifest: dict = field(default_factory=dict)

    @property
    def all_interactions(self) -> list[Interaction]:
        return self.train + self.valid + self.test

    def digest(self) -> str:
        return digest({
            "spec": self.spec.digest(),
            "splits": [[r.to_dict() for r in part] for part in (self.train, self.valid, self.test)],
            "items": [asdict(self.items[k]) for k in sorted(self.items)],
        })


def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def _read_jsonl(path: Path) -> Iterator[dict]:
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def prepare(spec: DatasetSpec, reviews: Sequence[RawReview] | None = None) -> Bundle:
    if reviews is None:
        reviews = ingest(spec.input)
    interactions = filter_pipeline(reviews, spec)
    if not interactions:
        raise DatasetTooSmall("no interactions survive filtering")
    train, valid, test = split(interactions, spec.split_ratio, spec.split_mode)
    catalog = build_catalog(reviews, spec.domains)
    return Bundle(spec, train, valid, test, catalog)


def write_bundle(bundle: Bundle, out_dir: str | os.PathLike, force: bool = False) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} already exists; pass force=True to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", bundle.train), ("valid", bundle.valid), ("test", bundle.test)):
        _write_jsonl(out / f"{name}.jsonl", (r.to_dict() for r in part))
    _write_jsonl(out / "items.jsonl", (asdict(bundle.items[k]) for k in sorted(bundle.items)))
    manifest = {"spec": bundle.spec.to_dict(), "spec_digest": bundle.spec.digest(),
                "bundle_digest": bundle.digest(),
                "sizes": {"train": len(bundle.train), "valid": len(bundle.valid),
                          "test": len(bundle.test), "items": len(bundle.items),
                          "users": len({r.user for r in bundle.all_interactions})}}
    (out / "spec.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    bundle.path, bundle.manifest = out, manifest
    return out


def load_bundle(path: str | os.PathLike) -> Bundle:
    path = Path(path)
    manifest = json.loads((path / "spec.json").read_text(encoding="utf-8"))
    spec = DatasetSpec.from_dict(manifest["spec"])
    parts = [[Interaction(**row) for row in _read_jsonl(path / f"{name}.jsonl")]
             for name in ("train", "valid", "test")]
    items = {row["id"]: CatalogItem(**row) for row in _read_jsonl(path / "items.jsonl")}
    return Bundle(spec, *parts, items=items, path=path, manifest=manifest)


# ------------------------------------------------------------ Amazon adapter

def convert_amazon(reviews_path: str | os.PathLike, meta_path: str | os.PathLike,
                   domain: str) -> Iterator[dict]:
    """Map one category of the public Amazon review dump to the input schema.

    Expects the 2023 release layout: review lines with ``user_id``,
    ``parent_asin``, ``rating`` and millisecond ``timestamp``; metadata lines
    with ``parent_asin``, ``title`` and ``categories``.
    """
    meta = {}
    for row in _read_jsonl(Path(meta_path)):
        cats = row.get("categories") or []
        meta[row["parent_asin"]] = (row.get("title", ""),
                                    " > ".join(cats) if isinstance(cats, list) else str(cats))
    for row in _read_jsonl(Path(reviews_path)):
        asin = row.get("parent_asin") or row.get("asin")
        title, category = meta.get(asin, ("", ""))
        ts = int(row["timestamp"])
        if ts > 10**11:  # milliseconds
            ts //= 1000
        yield {"user_id": row["user_id"], "item_id": asin, "domain": domain,
               "rating": row["rating"], "timestamp": ts, "title": title, "category": category}
