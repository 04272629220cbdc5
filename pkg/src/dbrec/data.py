"""Dataset ingestion, implicit conversion, core filtering, splitting, sampling.

Raw rating/check-in files become an :class:`InteractionDataset` of dense
(user, item) indices with train/valid/test labels. Every random choice takes
an explicit seed or generator, so the whole pipeline is a pure function of
(input file, config, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

TRAIN, VALID, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "valid": VALID, "test": TEST}

DATASET_FORMAT_VERSION = 1

FORMATS = ("movielens", "amazon", "gowalla")


@dataclass
class RawRecord:
    user: str
    item: str
    rating: float
    timestamp: str | None = None


def load_raw(path, fmt: str) -> list[RawRecord]:
    """Parse a raw interaction file.

    movielens: ``user::item::rating[::timestamp]``
    amazon:    ``user,item,rating[,timestamp]``
    gowalla:   ``user<TAB>time<TAB>lat<TAB>lon<TAB>location`` (check-ins; rating 1)
    """
    if fmt not in FORMATS:
        raise ConfigError(f"unknown data format '{fmt}' (expected one of {FORMATS})")
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    records: list[RawRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            try:
                records.append(_parse_line(line, fmt))
            except (ValueError, IndexError):
                raise DataError(f"{path}: malformed {fmt} line {lineno}: {line!r}")
    if not records:
        raise DataError(f"{path}: no records found")
    return records


def _parse_line(line: str, fmt: str) -> RawRecord:
    if fmt == "movielens":
        fields = line.split("::")
        if len(fields) not in (3, 4):
            raise ValueError("field count")
        ts = fields[3] if len(fields) == 4 else None
        return RawRecord(fields[0], fields[1], float(fields[2]), ts)
    if fmt == "amazon":
        fields = line.split(",")
        if len(fields) not in (3, 4):
            raise ValueError("field count")
        ts = fields[3] if len(fields) == 4 else None
        return RawRecord(fields[0], fields[1], float(fields[2]), ts)
    # gowalla check-ins: user, time, latitude, longitude, location id
    fields = line.split("\t")
    if len(fields) != 5:
        raise ValueError("field count")
    float(fields[2]), float(fields[3])  # validate coordinates
    return RawRecord(fields[0], fields[4], 1.0, fields[1])


def count_raw(records: list[RawRecord]) -> tuple[int, int, int]:
    """(distinct users, distinct items, records) of a raw record list."""
    return len({r.user for r in records}), len({r.item for r in records}), len(records)


def to_implicit(records: list[RawRecord], fmt: str) -> set[tuple[str, str]]:
    """Convert raw records to deduplicated positive (user, item) pairs.

    Ratings strictly greater than 3 count as positive for movielens/amazon;
    every gowalla check-in is positive. Duplicates collapse to one pair.
    """
    if fmt == "gowalla":
        return {(r.user, r.item) for r in records}
    return {(r.user, r.item) for r in records if r.rating > 3.0}


def core_filter(
    pairs: set[tuple[str, str]],
    min_items_per_user: int = 5,
    min_users_per_item: int = 2,
    fixpoint: bool = False,
) -> set[tuple[str, str]]:
    """Drop items below the user-count floor, then users below the item floor.

    One pass of each by default; ``fixpoint=True`` repeats until stable.
    """
    current = set(pairs)
    while True:
        item_degree: dict[str, int] = {}
        for _, item in current:
            item_degree[item] = item_degree.get(item, 0) + 1
        current = {(u, v) for (u, v) in current if item_degree[v] >= min_users_per_item}
        user_degree: dict[str, int] = {}
        for user, _ in current:
            user_degree[user] = user_degree.get(user, 0) + 1
        filtered = {(u, v) for (u, v) in current if user_degree[u] >= min_items_per_user}
        if not fixpoint or filtered == current:
            current = filtered
            break
        current = filtered
    if not current:
        raise DataError(
            "core filtering removed every interaction; "
            "lower min_items_per_user / min_users_per_item"
        )
    return current


@dataclass
class InteractionDataset:
    """Deduplicated implicit-feedback pairs with dense indices and split labels.

    Immutable after construction; safe to share across threads. Samplers take
    an explicit generator per caller, so there is no shared mutable rng.
    """

    num_users: int
    num_items: int
    interactions: list[tuple[int, int, int]]  # (user, item, split), sorted by (user, item)
    user_ids: list[str]  # dense index -> raw id, lexicographically sorted
    item_ids: list[str]
    train_pos: list[set[int]] = field(repr=False, default_factory=list)
    all_pos: list[set[int]] = field(repr=False, default_factory=list)

    def __post_init__(self) -> None:
        if not self.train_pos:
            self._build_lookups()
        self._check_invariants()

    def _build_lookups(self) -> None:
        self.train_pos = [set() for _ in range(self.num_users)]
        self.all_pos = [set() for _ in range(self.num_users)]
        for u, v, s in self.interactions:
            self.all_pos[u].add(v)
            if s == TRAIN:
                self.train_pos[u].add(v)

    def _check_invariants(self) -> None:
        seen = set()
        item_in_train = np.zeros(self.num_items, dtype=bool)
        for u, v, s in self.interactions:
            if not (0 <= u < self.num_users and 0 <= v < self.num_items):
                raise DataError(f"interaction ({u}, {v}) outside dense index range")
            if (u, v) in seen:
                raise DataError(f"duplicate interaction ({u}, {v})")
            seen.add((u, v))
            if s == TRAIN:
                item_in_train[v] = True
        for u in range(self.num_users):
            if not self.train_pos[u]:
                raise DataError(f"user {u} has no training interaction")
        if not item_in_train.all():
            missing = int(np.flatnonzero(~item_in_train)[0])
            raise DataError(f"item {missing} has no training interaction")

    def pairs(self, split: str) -> list[tuple[int, int]]:
        s = SPLIT_NAMES[split]
        return [(u, v) for (u, v, lab) in self.interactions if lab == s]

    def counts(self) -> dict[str, int]:
        out = {"train": 0, "valid": 0, "test": 0}
        for _, _, s in self.interactions:
            if s == TRAIN:
                out["train"] += 1
            elif s == VALID:
                out["valid"] += 1
            else:
                out["test"] += 1
        return out

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        payload = {
            "version": DATASET_FORMAT_VERSION,
            "num_users": self.num_users,
            "num_items": self.num_items,
            "user_ids": self.user_ids,
            "item_ids": self.item_ids,
            "interactions": [[u, v, s] for (u, v, s) in self.interactions],
        }
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        Path(path).write_text(text, encoding="utf-8")

    @classmethod
    def load(cls, path) -> "InteractionDataset":
        path = Path(path)
        if not path.exists():
            raise DataError(f"dataset file not found: {path}")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            raise DataError(f"dataset file is not valid JSON: {path}")
        if payload.get("version") != DATASET_FORMAT_VERSION:
            raise DataError(
                f"dataset version {payload.get('version')} unsupported "
                f"(expected {DATASET_FORMAT_VERSION})"
            )
        return cls(
            num_users=payload["num_users"],
            num_items=payload["num_items"],
            interactions=[tuple(row) for row in payload["interactions"]],
            user_ids=payload["user_ids"],
            item_ids=payload["item_ids"],
        )


def split(
    pairs: set[tuple[str, str]],
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> InteractionDataset:
    """Assign pairs to train/valid/test and densify ids.

    Assignment is a seeded shuffle sliced at the ratio boundaries, then a
    repair pass moves one held-out interaction into train for any user or
    item that ended up with none.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    if not pairs:
        raise DataError("split: no pairs to split")

    user_ids = sorted({u for u, _ in pairs})
    item_ids = sorted({v for _, v in pairs})
    u_index = {raw: i for i, raw in enumerate(user_ids)}
    v_index = {raw: i for i, raw in enumerate(item_ids)}

    dense = sorted((u_index[u], v_index[v]) for u, v in pairs)
    n = len(dense)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = round(ratios[0] * n)
    n_valid = round(ratios[1] * n)
    labels = np.full(n, TEST, dtype=np.int64)
    labels[order[:n_train]] = TRAIN
    labels[order[n_train : n_train + n_valid]] = VALID

    # repair: every user and every item must keep at least one train interaction
    by_user: dict[int, list[int]] = {}
    by_item: dict[int, list[int]] = {}
    for idx, (u, v) in enumerate(dense):
        by_user.setdefault(u, []).append(idx)
        by_item.setdefault(v, []).append(idx)
    for u in range(len(user_ids)):
        rows = by_user[u]
        if not any(labels[i] == TRAIN for i in rows):
            labels[min(rows, key=lambda i: dense[i][1])] = TRAIN
    for v in range(len(item_ids)):
        rows = by_item[v]
        if not any(labels[i] == TRAIN for i in rows):
            labels[min(rows, key=lambda i: dense[i][0])] = TRAIN

    interactions = [(u, v, int(labels[i])) for i, (u, v) in enumerate(dense)]
    return InteractionDataset(
        num_users=len(user_ids),
        num_items=len(item_ids),
        interactions=interactions,
        user_ids=user_ids,
        item_ids=item_ids,
    )


def prepare(
    path,
    fmt: str,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
    min_items_per_user: int = 5,
    min_users_per_item: int = 2,
    filter_fixpoint: bool = False,
) -> InteractionDataset:
    """Full ingestion pipeline: load, threshold, filter, split."""
    records = load_raw(path, fmt)
    positives = to_implicit(records, fmt)
    if not positives:
        raise DataError("no positive interactions after implicit conversion")
    filtered = core_filter(
        positives,
        min_items_per_user=min_items_per_user,
        min_users_per_item=min_users_per_item,
        fixpoint=filter_fixpoint,
    )
    return split(filtered, ratios=ratios, seed=seed)


# ---------------------------------------------------------------------------
# sampling


def sample_cf_negatives(
    dataset: InteractionDataset,
    user: int,
    count: int,
    rng: np.random.Generator,
) -> list[int]:
    """Sample ``count`` distinct items outside the user's train-positive set."""
    positives = dataset.train_pos[user]
    n = dataset.num_items
    if count > n - len(positives):
        raise DataError(
            f"cannot sample {count} negatives for user {user}: "
            f"only {n - len(positives)} non-positive items exist"
        )
    chosen: list[int] = []
    seen: set[int] = set()
    while len(chosen) < count:
        draw = int(rng.integers(0, n))
        if draw in positives or draw in seen:
            continue
        seen.add(draw)
        chosen.append(draw)
    return chosen


def build_eval_candidates(
    dataset: InteractionDataset,
    test_pair: tuple[int, int],
    count: int = 99,
    rng: np.random.Generator | None = None,
    seed: int = 0,
) -> list[int]:
    """The held-out item plus ``count`` sampled non-positives, shuffled.

    Sampling excludes the user's positives across all splits. Without an
    explicit generator the draw is keyed by (seed, user, item), so candidate
    lists are fixed per pair.
    """
    user, test_item = test_pair
    if rng is None:
        rng = np.random.default_rng([seed, user, test_item])
    positives = dataset.all_pos[user]
    eligible = dataset.num_items - len(positives)
    if eligible < count:
        raise DataError(
            f"user {user} has only {eligible} non-positive items; need {count}"
        )
    chosen: list[int] = []
    seen: set[int] = set()
    while len(chosen) < count:
        draw = int(rng.integers(0, dataset.num_items))
        if draw in positives or draw in seen or draw == test_item:
            continue
        seen.add(draw)
        chosen.append(draw)
    candidates = chosen + [test_item]
    order = rng.permutation(len(candidates))
    return [candidates[i] for i in order]
