"""Ranking protocol and metrics: each held-out item against 99 sampled items.

Candidate lists are keyed by (seed, user, item), so evaluation is a pure
read-only function of (model snapshot, dataset, split, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionDataset, build_eval_candidates
from .errors import DataError, ProtocolError
from .model import DBRec

KS = tuple(range(1, 11))


@dataclass
class RankResult:
    """Position of one held-out item among its candidates (1 = best)."""

    user: int
    test_item: int
    rank: int

    def hit(self, k: int) -> bool:
        return self.rank <= k

    def gain(self, k: int) -> float:
        return 1.0 / math.log2(self.rank + 1) if self.rank <= k else 0.0


@dataclass
class MetricReport:
    label: str
    num_results: int
    hr: dict[int, float] = field(default_factory=dict)
    ndcg: dict[int, float] = field(default_factory=dict)


def rank_candidates(model: DBRec, user: int, test_item: int, candidates) -> RankResult:
    """Score all candidates and place the held-out item (ties count against it)."""
    candidates = list(candidates)
    if len(set(candidates)) != len(candidates):
        raise ProtocolError(f"duplicate candidates for user {user}")
    if candidates.count(test_item) != 1:
        raise ProtocolError(f"candidates must contain the test item exactly once (user {user})")
    users = np.full(len(candidates), user, dtype=np.intp)
    scores = model.score_values(users, np.asarray(candidates, dtype=np.intp))
    return RankResult(user=user, test_item=test_item, rank=_rank_of(scores, candidates.index(test_item)))


def _rank_of(scores: np.ndarray, test_pos: int) -> int:
    s = scores[test_pos]
    greater = int(np.sum(scores > s))
    tied_others = int(np.sum(scores == s)) - 1
    return 1 + greater + tied_others


def compute_metrics(results, ks=KS, label: str = "") -> MetricReport:
    """Hit ratio and NDCG at each cutoff; a miss past k contributes zero gain."""
    results = list(results)
    if not results:
        raise DataError("compute_metrics: no rank results")
    report = MetricReport(label=label, num_results=len(results))
    for k in ks:
        report.hr[k] = sum(r.hit(k) for r in results) / len(results)
        report.ndcg[k] = sum(r.gain(k) for r in results) / len(results)
    return report


def evaluate(
    model: DBRec,
    dataset: InteractionDataset,
    split: str = "test",
    seed: int = 0,
    count: int = 99,
    max_pairs: int = 0,
    chunk_pairs: int = 128,
    label: str | None = None,
) -> MetricReport:
    """Rank every held-out pair of the split against sampled candidates.

    Pairs are scored in chunks for throughput; the per-pair candidate draws
    do not depend on chunking. ``max_pairs`` > 0 truncates the split (in its
    deterministic order) for quick validation passes.
    """
    pairs = dataset.pairs(split)
    if not pairs:
        raise DataError(f"evaluate: split '{split}' is empty")
    if max_pairs:
        pairs = pairs[:max_pairs]

    results: list[RankResult] = []
    width = count + 1
    for start in range(0, len(pairs), chunk_pairs):
        chunk = pairs[start : start + chunk_pairs]
        all_candidates = []
        test_positions = []
        for user, item in chunk:
            candidates = build_eval_candidates(dataset, (user, item), count=count, seed=seed)
            all_candidates.append(candidates)
            test_positions.append(candidates.index(item))
        users = np.repeat([u for u, _ in chunk], width).astype(np.intp)
        items = np.array([v for cand in all_candidates for v in cand], dtype=np.intp)
        scores = model.score_values(users, items)
        for row, ((user, item), pos) in enumerate(zip(chunk, test_positions)):
            block = scores[row * width : (row + 1) * width]
            results.append(RankResult(user=user, test_item=item, rank=_rank_of(block, pos)))
    return compute_metrics(results, label=label if label is not None else split)


def export_embeddings(model: DBRec, path) -> int:
    """Write one CSV row per user, item, and group embedding.

    Columns: entity type, index, hard group label, then the embedding
    components (d for users/items, d_g for groups). Group rows carry their
    own index as the label. Returns the number of data rows.
    """
    p = model.params
    rows = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        user_labels = model.hard_labels(np.arange(p.num_users, dtype=np.intp), "user")
        for i in range(p.num_users):
            comps = ",".join(repr(float(x)) for x in p.user_emb.values[i])
            fh.write(f"user,{i},{int(user_labels[i])},{comps}\n")
            rows += 1
        item_labels = model.hard_labels(np.arange(p.num_items, dtype=np.intp), "item")
        for j in range(p.num_items):
            comps = ",".join(repr(float(x)) for x in p.item_emb.values[j])
            fh.write(f"item,{j},{int(item_labels[j])},{comps}\n")
            rows += 1
        for s in range(p.hp.k):
            comps = ",".join(repr(float(x)) for x in p.user_group_emb.values[s])
            fh.write(f"user-group,{s},{s},{comps}\n")
            rows += 1
        for s in range(p.hp.k):
            comps = ",".join(repr(float(x)) for x in p.item_group_emb.values[s])
            fh.write(f"item-group,{s},{s},{comps}\n")
            rows += 1
    return rows


def group_purity(labels: np.ndarray, planted: np.ndarray) -> float:
    """Cluster purity of discovered labels against planted block labels."""
    labels = np.asarray(labels)
    planted = np.asarray(planted)
    if labels.shape != planted.shape:
        raise DataError("group_purity: label arrays differ in length")
    total = 0
    for lab in np.unique(labels):
        members = planted[labels == lab]
        _, counts = np.unique(members, return_counts=True)
        total += counts.max()
    return total / len(labels)
