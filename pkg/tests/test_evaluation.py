import hashlib
import math

import numpy as np
import pytest

from dbrec.data import split
from dbrec.errors import DataError, ProtocolError
from dbrec.evaluation import (
    MetricReport,
    RankResult,
    compute_metrics,
    evaluate,
    export_embeddings,
    group_purity,
    rank_candidates,
)
from dbrec.model import DBRec, HyperParams, ModelParams, hard_assignment

from _synth import planted_blocks, dataset_from_pairs
from oracles import np_softmax


@pytest.fixture(scope="module")
def dataset():
    pairs, _, _ = planted_blocks(num_users=30, num_items=150, p_in=0.3, p_out=0.05, seed=2)
    return dataset_from_pairs(pairs, seed=2)


@pytest.fixture(scope="module")
def model(dataset):
    hp = HyperParams(d=8, d_g=4, k=3, hidden_uv=(16, 8), hidden_ug=(16, 8),
                     hidden_vg=(16, 8), hidden_hier=(16, 16), seed=4)
    params = ModelParams(dataset.num_users, dataset.num_items, hp)
    rng = np.random.default_rng(21)
    for p in params.all_parameters():
        p.values[...] = rng.uniform(-0.4, 0.4, size=p.shape)
    return DBRec(params)


def sort_oracle_rank(scores, test_pos):
    """Rank via explicit sort, ties resolved against the test item."""
    order = sorted(
        range(len(scores)),
        key=lambda i: (-scores[i], 0 if i != test_pos else 1),
    )
    return order.index(test_pos) + 1


class TestRankCandidates:
    def test_strictly_highest_is_rank_one(self, model, dataset):
        user, item = dataset.pairs("test")[0]
        candidates = [item] + [v for v in range(20) if v != item][:19]
        scores = model.score_values(np.full(20, user, dtype=np.intp),
                                    np.array(candidates, dtype=np.intp))
        best = candidates[int(np.argmax(scores))]
        result = rank_candidates(model, user, best, candidates)
        assert result.rank == 1

    def test_tie_counts_against_test_item(self):
        scores = np.array([0.4, 0.7, 0.7, 0.1])
        from dbrec.evaluation import _rank_of

        assert _rank_of(scores, 1) == 2
        assert _rank_of(scores, 2) == 2
        assert _rank_of(scores, 3) == 4

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_sort_oracle_on_ten_thousand_vectors(self, seed):
        rng = np.random.default_rng(seed)
        from dbrec.evaluation import _rank_of

        for _ in range(2000):
            scores = np.round(rng.random(100), 2)  # rounding forces ties
            pos = int(rng.integers(0, 100))
            assert _rank_of(scores, pos) == sort_oracle_rank(scores, pos)

    def test_duplicate_candidates_rejected(self, model):
        with pytest.raises(ProtocolError, match="duplicate"):
            rank_candidates(model, 0, 1, [1, 2, 2, 3])

    def test_missing_test_item_rejected(self, model):
        with pytest.raises(ProtocolError, match="exactly once"):
            rank_candidates(model, 0, 9, [1, 2, 3])


class TestComputeMetrics:
    def test_rank_one_gives_unit_metrics(self):
        report = compute_metrics([RankResult(0, 0, 1)])
        for k in range(1, 11):
            assert report.hr[k] == 1.0
            assert report.ndcg[k] == 1.0

    def test_rank_three_closed_forms(self):
        report = compute_metrics([RankResult(0, 0, 3)])
        assert report.ndcg[10] == pytest.approx(0.5, abs=1e-15)  # 1/log2(4)
        assert report.hr[2] == 0.0
        assert report.hr[3] == 1.0

    def test_matches_brute_force_on_random_ranks(self):
        rng = np.random.default_rng(30)
        ranks = rng.integers(1, 101, size=1000)
        results = [RankResult(i, 0, int(r)) for i, r in enumerate(ranks)]
        report = compute_metrics(results)
        for k in range(1, 11):
            hits = sum(1 for r in ranks if r <= k)
            gain = sum(1.0 / math.log2(r + 1) for r in ranks if r <= k)
            assert report.hr[k] == hits / 1000
            assert report.ndcg[k] == gain / 1000

    def test_monotone_in_k_and_ndcg_below_hr(self):
        rng = np.random.default_rng(31)
        results = [RankResult(i, 0, int(r)) for i, r in enumerate(rng.integers(1, 101, 500))]
        report = compute_metrics(results)
        for k in range(2, 11):
            assert report.hr[k] >= report.hr[k - 1]
            assert report.ndcg[k] >= report.ndcg[k - 1]
        for k in range(1, 11):
            assert report.ndcg[k] <= report.hr[k]

    def test_empty_results_rejected(self):
        with pytest.raises(DataError, match="no rank results"):
            compute_metrics([])


def _params_digest(params):
    h = hashlib.sha256()
    for p in params.all_parameters():
        h.update(p.values.tobytes())
        h.update(p.m.tobytes())
        h.update(p.v.tobytes())
    return h.hexdigest()


class TestEvaluate:
    def test_deterministic_per_seed(self, model, dataset):
        a = evaluate(model, dataset, "test", seed=3, count=50)
        b = evaluate(model, dataset, "test", seed=3, count=50)
        assert a.hr == b.hr and a.ndcg == b.ndcg
        c = evaluate(model, dataset, "test", seed=4, count=50)
        assert a.hr != c.hr or a.ndcg != c.ndcg

    def test_chunking_does_not_change_results(self, model, dataset):
        a = evaluate(model, dataset, "test", seed=3, count=50, chunk_pairs=7)
        b = evaluate(model, dataset, "test", seed=3, count=50, chunk_pairs=512)
        assert a.hr == b.hr and a.ndcg == b.ndcg

    def test_read_only(self, model, dataset):
        before = _params_digest(model.params)
        evaluate(model, dataset, "valid", seed=0, count=50)
        assert _params_digest(model.params) == before

    def test_empty_split_rejected(self):
        pairs = {(f"u{i}", f"v{j}") for i in range(8) for j in range(8)}
        train_only = split(pairs, ratios=(1.0, 0.0, 0.0), seed=0)
        hp = HyperParams(d=4, d_g=2, k=2, hidden_uv=(4,), hidden_ug=(4,),
                         hidden_vg=(4,), hidden_hier=(4,), seed=0)
        model = DBRec(ModelParams(8, 8, hp))
        with pytest.raises(DataError, match="empty"):
            evaluate(model, train_only, "test", seed=0, count=5)

    def test_max_pairs_truncates(self, model, dataset):
        full = evaluate(model, dataset, "test", seed=1, count=50)
        small = evaluate(model, dataset, "test", seed=1, count=50, max_pairs=10)
        assert small.num_results == 10
        assert full.num_results == len(dataset.pairs("test"))


class TestExport:
    def test_row_count_and_label_ranges(self, model, dataset, tmp_path):
        path = tmp_path / "emb.csv"
        rows = export_embeddings(model, path)
        p = model.params
        expected = p.num_users + p.num_items + 2 * p.hp.k
        lines = path.read_text().splitlines()
        assert rows == expected == len(lines)
        for line in lines:
            fields = line.split(",")
            assert fields[0] in ("user", "item", "user-group", "item-group")
            assert 0 <= int(fields[2]) < p.hp.k

    def test_reimport_reproduces_hard_labels(self, model, dataset, tmp_path):
        path = tmp_path / "emb.csv"
        export_embeddings(model, path)
        p = model.params
        for line in path.read_text().splitlines():
            fields = line.split(",")
            if fields[0] != "user":
                continue
            idx, label = int(fields[1]), int(fields[2])
            emb = np.array([float(x) for x in fields[3:]])
            assert emb.shape == (p.hp.d,)
            logits = p.group_proj_user_w.values @ emb + p.group_proj_user_b.values
            assert hard_assignment(np_softmax(logits)) == label

    def test_embedding_components_roundtrip_exactly(self, model, tmp_path):
        path = tmp_path / "emb.csv"
        export_embeddings(model, path)
        first = path.read_text().splitlines()[0].split(",")
        emb = np.array([float(x) for x in first[3:]])
        assert np.array_equal(emb, model.params.user_emb.values[0])


class TestGroupPurity:
    def test_perfect_and_chance(self):
        planted = np.array([0] * 50 + [1] * 50)
        assert group_purity(planted, planted) == 1.0
        assert group_purity(1 - planted, planted) == 1.0  # relabeling is free
        mixed = np.tile([0, 1], 50)
        assert group_purity(mixed, planted) == pytest.approx(0.5)
