import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcsi.datagen import BiasedDataset, GenConfig, generate_synthetic
from bcsi.influence import ScoreConfig, make_records
from bcsi.selection import (
    build_pivotal, detection_precision, intersect_runs, load_pivotal, pivotal_from_records,
    save_pivotal, topk_per_class,
)


def six_sample_ds():
    labels = np.array([0, 0, 0, 1, 1, 1])
    bias = np.array([0, 1, 0, 1, 0, 1])
    return BiasedDataset(np.array([10, 11, 12, 13, 14, 15]), np.zeros((6, 1)), labels, bias, 2, 2 / 6)


def recs(ds, scores):
    return make_records(ds, np.asarray(scores, dtype=float), "BCSI")


class TestTopK:
    def test_hand_built(self):
        ds = six_sample_ds()
        # class 0: ids 10,11,12 -> 0.2, 0.9, 0.5 ; class 1: ids 13,14,15 -> 0.1, 0.7, 0.7
        out = topk_per_class(recs(ds, [0.2, 0.9, 0.5, 0.1, 0.7, 0.7]), ds, 2)
        assert out == [[11, 12], [14, 15]]

    def test_saturation(self):
        ds = six_sample_ds()
        out = topk_per_class(recs(ds, np.arange(6)), ds, 10)
        assert sorted(out[0]) == [10, 11, 12] and sorted(out[1]) == [13, 14, 15]

    def test_all_equal_scores_take_lowest_ids(self):
        ds = six_sample_ds()
        assert topk_per_class(recs(ds, np.ones(6)), ds, 2) == [[10, 11], [13, 14]]

    def test_missing_score(self):
        ds = six_sample_ds()
        with pytest.raises(KeyError):
            topk_per_class(recs(ds, np.ones(6))[:-1], ds, 1)

    def test_bad_k(self):
        ds = six_sample_ds()
        with pytest.raises(ValueError):
            topk_per_class(recs(ds, np.ones(6)), ds, 0)

    @settings(max_examples=50)
    @given(st.lists(st.floats(-10, 10), min_size=6, max_size=6), st.integers(1, 4))
    def test_invariants(self, scores, k):
        ds = six_sample_ds()
        out = topk_per_class(recs(ds, scores), ds, k)
        for c, ids in enumerate(out):
            assert len(ids) == min(k, 3) == len(set(ids))
            assert all(ds.labels[ds.index_of([i])[0]] == c for i in ids)


class TestIntersection:
    def test_single_run_identity(self):
        ds = six_sample_ds()
        piv = pivotal_from_records([recs(ds, [3, 2, 1, 3, 2, 1])], ds, 2)
        assert piv.intersection == sorted(piv.run_ids(0))

    def test_intersection_and_shrinkage(self):
        runs = [[[1, 2], [5, 6]], [[2, 3], [6, 7]], [[2, 1], [6, 5]]]
        inter = intersect_runs(runs)
        assert inter == [2, 6]
        assert len(inter) <= min(len({i for c in r for i in c}) for r in runs)

    def test_empty_falls_back_to_two_runs(self):
        warnings = []
        inter = intersect_runs([[[1, 2]], [[2, 3]], [[4]]], warnings)
        assert inter == [2] and warnings

    def test_empty_result_is_valid(self):
        warnings = []
        assert intersect_runs([[[1]], [[2]]], warnings) == []
        assert warnings

    def test_duplicate_seeds_rejected(self):
        ds = generate_synthetic(GenConfig(n_per_class=20, seed=0))
        with pytest.raises(ValueError, match="distinct"):
            build_pivotal(ds, [10, 8, 5], k=3, num_runs=3, seeds=[1, 1, 2])

    def test_build_deterministic(self):
        ds = generate_synthetic(GenConfig(n_per_class=40, seed=1))
        kw = dict(k=5, num_runs=3, seeds=[4, 5, 6], cfg=ScoreConfig(epochs=2))
        a = build_pivotal(ds, [10, 16, 5], **kw)
        b = build_pivotal(ds, [10, 16, 5], **kw)
        assert a.per_run_sets == b.per_run_sets and a.intersection == b.intersection
        assert len(a.intersection) <= 5 * 5

    def test_parallel_matches_sequential(self):
        ds = generate_synthetic(GenConfig(n_per_class=40, seed=1))
        kw = dict(k=5, num_runs=2, seeds=[4, 5], cfg=ScoreConfig(epochs=2))
        assert build_pivotal(ds, [10, 16, 5], jobs=2, **kw).per_run_sets == build_pivotal(ds, [10, 16, 5], **kw).per_run_sets

    def test_json_round_trip(self, tmp_path):
        ds = six_sample_ds()
        piv = pivotal_from_records([recs(ds, [3, 2, 1, 3, 2, 1]), recs(ds, [3, 1, 2, 3, 1, 2])], ds, 2, seeds=[1, 2])
        save_pivotal(piv, tmp_path / "p.json", ds)
        doc = json.loads((tmp_path / "p.json").read_text())
        assert {"k", "num_runs", "seeds", "per_run", "intersection", "per_run_precision", "intersection_precision"} <= set(doc)
        back = load_pivotal(tmp_path / "p.json")
        assert back.intersection == piv.intersection and back.per_run_sets == piv.per_run_sets


class TestDetectionPrecision:
    def test_perfect(self):
        ds = six_sample_ds()
        conflicting = ds.ids[ds.is_conflicting]
        assert detection_precision(conflicting, ds) == 1.0

    def test_enumeration(self):
        labels = np.array([0, 0, 0, 0])
        bias = np.array([1, 0, 1, 1])  # a=0, c=2, d=3 conflicting
        ds = BiasedDataset(np.arange(4), np.zeros((4, 1)), labels, bias, 2, 0.75)
        assert detection_precision([0, 1, 2], ds) == pytest.approx(2 / 3)

    def test_empty(self):
        with pytest.raises(ValueError):
            detection_precision([], six_sample_ds())

    def test_ground_truth_count_mode(self):
        ds = six_sample_ds()
        oracle = ds.is_conflicting.astype(float)
        assert detection_precision(None, ds, "ground_truth_count", scores=oracle) == 1.0
        assert detection_precision(None, ds, "ground_truth_count", scores=-oracle) == 0.0

    def test_random_selection_baseline(self):
        ds = generate_synthetic(GenConfig(r=0.05, seed=8))
        rng = np.random.default_rng(0)
        n_sel = 200
        precs = [detection_precision(rng.choice(ds.ids, n_sel, replace=False), ds) for _ in range(50)]
        base = ds.is_conflicting.mean()
        # 3 standard errors of the 50-trial mean of hypergeometric-ish draws
        se = np.sqrt(base * (1 - base) / n_sel / 50)
        assert abs(np.mean(precs) - base) <= 3 * se
