import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from dcgen.retrieval_eval import (ItemIndex, RecommendationLog,
                                  aggregate_diversity, degree_histogram,
                                  hit_rate_at_k, mrr_at_k, multi_hit_rate_at_k,
                                  ndcg_at_k, popularity_index, top_k)


def plain_index(vectors):
    return ItemIndex(vectors=np.asarray(vectors, dtype=np.float64),
                     normalized=False)


class TestTopK:
    def test_inner_product_ordering(self):
        index = plain_index([[1.0, 0.0], [0.0, 1.0]])
        assert top_k(np.array([2.0, 1.0]), index, 2) == [0, 1]

    def test_full_k_is_permutation(self):
        rng = np.random.default_rng(3)
        index = plain_index(rng.normal(size=(12, 4)))
        got = top_k(rng.normal(size=4), index, 12)
        assert sorted(got) == list(range(12))

    def test_ties_break_to_lower_id(self):
        index = plain_index([[1.0], [1.0], [1.0]])
        assert top_k(np.array([1.0]), index, 3) == [0, 1, 2]

    def test_matches_naive_sort(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            vecs = rng.normal(size=(15, 3))
            u = rng.normal(size=3)
            index = plain_index(vecs)
            got = top_k(u, index, 15)
            scores = vecs @ u
            want = sorted(range(15), key=lambda i: (-scores[i], i))
            assert got == want

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            top_k(np.zeros(2), plain_index([[1.0, 0.0]]), 5)


class TestRankMetrics:
    def test_hit_at_top(self):
        assert hit_rate_at_k([7, 3, 5], target=7, k=1) == 1

    def test_miss_past_cutoff(self):
        ranked = list(range(60))
        assert hit_rate_at_k(ranked, target=50, k=50) == 0  # rank 51

    def test_random_ranking_baseline(self):
        rng = np.random.default_rng(5)
        hits = []
        for _ in range(3000):
            ranked = rng.permutation(100)
            hits.append(hit_rate_at_k(list(ranked), target=0, k=10))
        assert abs(np.mean(hits) - 0.10) <= 0.02

    def test_ndcg_closed_forms(self):
        assert ndcg_at_k([4], target=4, k=5) == 1.0
        got = ndcg_at_k([1, 4], target=4, k=5)
        assert got == pytest.approx(1.0 / np.log2(3), abs=1e-12)
        assert got == pytest.approx(0.63093, abs=1e-5)

    def test_mrr(self):
        assert mrr_at_k([4], target=4, k=5) == 1.0
        assert mrr_at_k([1, 2, 4], target=4, k=5) == pytest.approx(1 / 3)
        assert mrr_at_k([1, 2, 4], target=9, k=5) == 0.0

    def test_multi_hit_rate(self):
        assert multi_hit_rate_at_k([1, 2, 3], targets=[2, 9], k=3) == 0.5

    @given(st.lists(st.integers(0, 30), min_size=1, max_size=20,
                    unique=True),
           st.integers(0, 30), st.integers(1, 20))
    @settings(max_examples=100, deadline=None)
    def test_metric_orderings(self, ranked, target, k):
        hr = hit_rate_at_k(ranked, target, k)
        assert ndcg_at_k(ranked, target, k) <= hr
        assert mrr_at_k(ranked, target, k) <= hr
        if k < len(ranked):
            assert hr <= hit_rate_at_k(ranked, target, k + 1)


class TestAggregateDiversity:
    def test_union(self):
        log = RecommendationLog({1: [0, 1], 2: [1, 2]})
        assert aggregate_diversity(log) == 3

    def test_identical_lists(self):
        log = RecommendationLog({u: [3, 4, 5] for u in range(9)})
        assert aggregate_diversity(log) == 3

    def test_disjoint_lists(self):
        log = RecommendationLog({0: [0, 1], 1: [2, 3], 2: [4]})
        assert aggregate_diversity(log) == 5

    def test_duplicates_within_user_rejected(self):
        with pytest.raises(ValueError):
            RecommendationLog({0: [1, 1]})


class TestPopularityIndex:
    def test_most_popular_item_only(self):
        counts = np.array([5.0, 50.0, 1.0, 7.0])
        log = RecommendationLog({u: [1] for u in range(4)})
        assert popularity_index(log, counts) == 1.0

    def test_least_popular_item_only(self):
        counts = np.array([5.0, 50.0, 1.0, 7.0])
        log = RecommendationLog({u: [2] for u in range(4)})
        assert popularity_index(log, counts) == pytest.approx(1 / 4)

    def test_uniform_recommendations_centered(self):
        rng = np.random.default_rng(9)
        counts = rng.integers(1, 1000, size=200).astype(float)
        counts += rng.random(200)  # break ties
        log = RecommendationLog(
            {u: list(rng.choice(200, size=10, replace=False))
             for u in range(300)})
        assert abs(popularity_index(log, counts) - 0.5) <= 0.05

    @given(st.integers(2, 30), st.integers(1, 5))
    @settings(max_examples=40, deadline=None)
    def test_invariant_to_monotone_rescaling(self, n_items, k):
        rng = np.random.default_rng(n_items * 7 + k)
        counts = rng.integers(0, 50, size=n_items).astype(float)
        lists = {u: list(rng.choice(n_items, size=min(k, n_items),
                                    replace=False)) for u in range(5)}
        log = RecommendationLog(lists)
        base = popularity_index(log, counts)
        for transform in (lambda c: 3 * c + 7, np.exp, np.cbrt):
            assert popularity_index(log, transform(counts)) == \
                pytest.approx(base, abs=1e-12)


class TestDegreeHistogram:
    def test_single_degree_single_bucket(self):
        degrees = np.full(10, 17.0)
        log = RecommendationLog({0: [1, 2], 1: [3]})
        rows = degree_histogram(log, degrees, num_buckets=6)
        nonzero = [r for r in rows if r[2] > 0]
        assert len(nonzero) == 1
        assert nonzero[0][2] == 10 and nonzero[0][3] == 3

    def test_two_degree_groups_land_first_and_last(self):
        degrees = np.array([1.0] * 5 + [1000.0] * 5)
        log = RecommendationLog({0: [0, 5], 1: [1, 6]})
        rows = degree_histogram(log, degrees, num_buckets=8)
        occupied = [b for b, r in enumerate(rows) if r[2] > 0]
        assert occupied == [0, 7]
        assert rows[0][3] == 2 and rows[7][3] == 2

    def test_bucket_edges_cover_degrees(self):
        rng = np.random.default_rng(2)
        degrees = rng.integers(0, 500, size=50).astype(float)
        rows = degree_histogram(RecommendationLog({0: [0]}), degrees, 7)
        assert sum(r[2] for r in rows) == 50
        assert rows[0][0] == 0.0
        assert rows[-1][1] == pytest.approx(degrees.max(), rel=1e-9)
