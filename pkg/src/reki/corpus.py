"""Raw-table ingestion and sample construction.

Input files are UTF-8 CSV with one header row:

- interactions: ``user_id,item_id,rating,timestamp``
- items: ``item_id,title,category,attrs`` where attrs is ``|``-separated ``key=value``
- users: ``user_id`` followed by arbitrary profile columns (optional file)

Everything here is a pure function over immutable inputs; values are interned
into dense integer vocabularies with id 0 reserved for unknown/padding.
"""

from __future__ import annotations

import csv
import logging
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import CorpusError

log = logging.getLogger(__name__)

INTERACTION_HEADER = ("user_id", "item_id", "rating", "timestamp")
ITEM_HEADER = ("item_id", "title", "category", "attrs")


@dataclass(frozen=True)
class TableSchema:
    """Expected CSV headers; the users table lists its leading id column only
    because profile columns are free-form."""

    interactions: tuple[str, ...] = INTERACTION_HEADER
    items: tuple[str, ...] = ITEM_HEADER
    users_id_column: str = "user_id"


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    rating: int
    timestamp: int
    label: int | None = None  # filled by binarize


@dataclass(frozen=True)
class ItemInfo:
    item_id: str
    title: str
    category: str
    attrs: Mapping[str, str]


@dataclass(frozen=True)
class Sample:
    """One labeled impression with its causal history window.

    Integer ids index the embedding tables; the raw string keys ride along
    for knowledge-store lookups.
    """

    user_id: str
    user_features: tuple[tuple[str, int], ...]
    history: tuple[tuple[int, int, int], ...]  # (item id, category id, label)
    history_item_keys: tuple[str, ...]
    context: tuple[tuple[str, int], ...]
    target_item: tuple[int, int]
    target_item_key: str
    label: int
    timestamp: int


@dataclass
class DatasetSplit:
    train: list
    test: list
    user_partition: dict[str, str]


@dataclass
class TableBundle:
    interactions: list[InteractionRecord]
    items: dict[str, ItemInfo]
    users: dict[str, dict[str, str]]
    user_profile_fields: tuple[str, ...]  # profile columns after user_id; () without a users table
    malformed_rows: int


def _read_rows(path: Path, expected_header: Sequence[str] | None):
    if not path.exists():
        raise CorpusError(f"missing input file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CorpusError(f"empty file: {path}") from None
        if expected_header is not None and tuple(header) != tuple(expected_header):
            raise CorpusError(f"{path}: header {header} does not match {list(expected_header)}")
        yield header
        yield from reader


def load_tables(interactions_path, items_path, users_path=None,
                schema: TableSchema = TableSchema()) -> TableBundle:
    """Load and validate the three raw tables.

    Structurally malformed rows (wrong column count) are skipped and
    counted; bad ratings and duplicate (user, item, timestamp) keys are
    rejected outright with their row number.
    """
    interactions_path = Path(interactions_path)
    items_path = Path(items_path)
    malformed = 0

    interactions: list[InteractionRecord] = []
    seen: set[tuple[str, str, int]] = set()
    rows = _read_rows(interactions_path, schema.interactions)
    next(rows)
    for row_no, row in enumerate(rows, start=2):
        if len(row) != 4:
            malformed += 1
            continue
        user_id, item_id, rating_s, ts_s = row
        try:
            rating = int(rating_s)
            timestamp = int(ts_s)
        except ValueError:
            raise CorpusError(f"{interactions_path}:{row_no}: non-integer rating or timestamp") from None
        if not 1 <= rating <= 5:
            raise CorpusError(f"{interactions_path}:{row_no}: rating out of range: {rating}")
        key = (user_id, item_id, timestamp)
        if key in seen:
            raise CorpusError(f"{interactions_path}:{row_no}: duplicate interaction {key}")
        seen.add(key)
        interactions.append(InteractionRecord(user_id, item_id, rating, timestamp))

    items: dict[str, ItemInfo] = {}
    rows = _read_rows(items_path, schema.items)
    next(rows)
    for row_no, row in enumerate(rows, start=2):
        if len(row) != 4:
            malformed += 1
            continue
        item_id, title, category, attrs_s = row
        attrs = {}
        if attrs_s:
            for pair in attrs_s.split("|"):
                if "=" in pair:
                    k, v = pair.split("=", 1)
                    attrs[k] = v
        items[item_id] = ItemInfo(item_id, title, category, attrs)

    users: dict[str, dict[str, str]] = {}
    profile_fields: tuple[str, ...] = ()
    if users_path is not None:
        users_path = Path(users_path)
        rows = _read_rows(users_path, None)
        header = next(rows)
        if not header or header[0] != schema.users_id_column:
            raise CorpusError(f"{users_path}: first column must be {schema.users_id_column}, got {header}")
        profile_fields = tuple(header[1:])
        for row_no, row in enumerate(rows, start=2):
            if len(row) != len(header):
                malformed += 1
                continue
            users[row[0]] = dict(zip(header[1:], row[1:]))

    if malformed:
        log.warning("skipped %d structurally malformed rows", malformed)
    return TableBundle(interactions, items, users, profile_fields, malformed)


def binarize(records: Iterable[InteractionRecord], positive_threshold: int) -> list[InteractionRecord]:
    """Attach binary labels: 1 iff rating >= threshold. Ratings are kept."""
    if not 1 <= positive_threshold <= 5:
        raise CorpusError(f"positive threshold must be in [1, 5], got {positive_threshold}")
    return [replace(r, label=1 if r.rating >= positive_threshold else 0) for r in records]


def filter_min_interactions(records: Sequence[InteractionRecord],
                            min_count: int = 5) -> list[InteractionRecord]:
    """Drop records of users/items with fewer than min_count interactions (single pass)."""
    user_counts: dict[str, int] = {}
    item_counts: dict[str, int] = {}
    for r in records:
        user_counts[r.user_id] = user_counts.get(r.user_id, 0) + 1
        item_counts[r.item_id] = item_counts.get(r.item_id, 0) + 1
    return [r for r in records
            if user_counts[r.user_id] >= min_count and item_counts[r.item_id] >= min_count]


def split_by_user(records: Sequence[InteractionRecord], train_fraction: float,
                  seed: int) -> DatasetSplit:
    """Partition records user-wise: shuffle the user list with a seeded PRNG,
    assign the first round(n * fraction) users (clamped so both sides are
    non-empty) to train, and route every record after its user."""
    if not 0.0 < train_fraction < 1.0:
        raise CorpusError(f"train fraction must be in (0, 1), got {train_fraction}")
    users = sorted({r.user_id for r in records})
    if len(users) < 2:
        raise CorpusError(f"need at least 2 users to split, got {len(users)}")
    random.Random(seed).shuffle(users)
    n_train = min(max(int(round(len(users) * train_fraction)), 1), len(users) - 1)
    partition = {u: ("train" if i < n_train else "test") for i, u in enumerate(users)}
    train = [r for r in records if partition[r.user_id] == "train"]
    test = [r for r in records if partition[r.user_id] == "test"]
    return DatasetSplit(train, test, partition)


class FeatureVocab:
    """Per-field value-to-id maps; id 0 is reserved for unknown/pad."""

    def __init__(self, tables: dict[str, dict[str, int]]):
        self._tables = tables

    @classmethod
    def build(cls, records: Sequence[InteractionRecord], items: Mapping[str, ItemInfo],
              users: Mapping[str, Mapping[str, str]],
              user_profile_fields: Sequence[str]) -> "FeatureVocab":
        tables: dict[str, dict[str, int]] = {}
        user_ids = sorted({r.user_id for r in records} | set(users))
        tables["user_id"] = {v: i + 1 for i, v in enumerate(user_ids)}
        item_ids = sorted(set(items) | {r.item_id for r in records})
        tables["item_id"] = {v: i + 1 for i, v in enumerate(item_ids)}
        categories = sorted({info.category for info in items.values()})
        tables["category"] = {v: i + 1 for i, v in enumerate(categories)}
        for field_name in user_profile_fields:
            values = sorted({profile.get(field_name, "") for profile in users.values()})
            tables[field_name] = {v: i + 1 for i, v in enumerate(values)}
        return cls(tables)

    def encode(self, field_name: str, value: str) -> int:
        return self._tables.get(field_name, {}).get(value, 0)

    def size(self, field_name: str) -> int:
        return len(self._tables.get(field_name, {})) + 1  # +1 for the reserved 0

    def fields(self) -> list[str]:
        return list(self._tables)


def build_samples(records: Sequence[InteractionRecord], items: Mapping[str, ItemInfo],
                  users: Mapping[str, Mapping[str, str]],
                  user_profile_fields: Sequence[str], vocab: FeatureVocab,
                  max_history: int = 30) -> list[Sample]:
    """One sample per labeled interaction, with history = up to `max_history`
    most recent strictly-earlier interactions of the same user.

    Records are stably sorted by (user, timestamp) so equal timestamps keep
    input order. First interactions are kept with empty histories.
    """
    for r in records:
        if r.label is None:
            raise CorpusError("records must be binarized before sample construction")
    ordered = sorted(records, key=lambda r: (r.user_id, r.timestamp))

    def item_ids(item_key: str) -> tuple[int, int]:
        info = items.get(item_key)
        category = info.category if info is not None else ""
        return vocab.encode("item_id", item_key), vocab.encode("category", category)

    samples: list[Sample] = []
    current_user = None
    history: list[tuple[int, int, int]] = []
    history_keys: list[str] = []
    user_feats: tuple[tuple[str, int], ...] = ()
    for r in ordered:
        if r.user_id != current_user:
            current_user = r.user_id
            history = []
            history_keys = []
            feats = [("user_id", vocab.encode("user_id", r.user_id))]
            profile = users.get(r.user_id, {})
            for field_name in user_profile_fields:
                feats.append((field_name, vocab.encode(field_name, profile.get(field_name, ""))))
            user_feats = tuple(feats)
        iid, cid = item_ids(r.item_id)
        samples.append(Sample(
            user_id=r.user_id,
            user_features=user_feats,
            history=tuple(history[-max_history:]),
            history_item_keys=tuple(history_keys[-max_history:]),
            context=(),
            target_item=(iid, cid),
            target_item_key=r.item_id,
            label=r.label,
            timestamp=r.timestamp,
        ))
        history.append((iid, cid, r.label))
        history_keys.append(r.item_id)
    return samples


def user_histories(records: Sequence[InteractionRecord]) -> dict[str, list[str]]:
    """Chronological item-id history per user (full, unwindowed)."""
    ordered = sorted(records, key=lambda r: (r.user_id, r.timestamp))
    out: dict[str, list[str]] = {}
    for r in ordered:
        out.setdefault(r.user_id, []).append(r.item_id)
    return out
