"""Scoring deltas, ratio-test matching, and one-vs-many competitive matching."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patternid.annindex import DescriptorPool, build_forest
from patternid.features import EllipseKeypoint, FeatureSet
from patternid.geometry import AffineShape
from patternid.matching import (
    EPSILON,
    T_RATIO,
    InsufficientDatabaseError,
    MatchSet,
    PQBackend,
    delta,
    match_one_vs_many,
    match_one_vs_one,
)
from patternid.pqindex import encode_pool, train_codebooks


def make_fs(descriptors):
    descriptors = np.asarray(descriptors, dtype=np.float32).reshape(-1, 128)
    kps = [
        EllipseKeypoint(x=np.array([float(t), 0.0]), shape=AffineShape(1.0, 0.0, 1.0))
        for t in range(len(descriptors))
    ]
    return FeatureSet(
        keypoints=kps, descriptors=descriptors, roi_width=512, roi_height=512
    )


def unit_rows(*coords):
    """Rows with integer coordinates on the first few axes (exact distances)."""
    out = np.zeros((len(coords), 128), dtype=np.float32)
    for r, spec in enumerate(coords):
        for dim, val in spec:
            out[r, dim] = val
    return out


def make_pool(vectors, image_ids):
    vectors = np.asarray(vectors, dtype=np.float32)
    image_ids = np.asarray(image_ids, dtype=np.int64)
    local = np.zeros(len(vectors), dtype=np.int64)
    for img in np.unique(image_ids):
        sel = image_ids == img
        local[sel] = np.arange(sel.sum())
    return DescriptorPool(vectors=vectors, owner=np.column_stack([image_ids, local]))


class TestDelta:
    def test_equal_distances(self):
        assert delta("LNBNN", 2.0, 2.0) == 0.0
        assert delta("ratio", 2.0, 2.0) == 1.0
        assert delta("lnrat", 2.0, 2.0) == 0.0
        assert delta("count", 2.0, 2.0) == 1.0

    def test_one_four(self):
        assert delta("LNBNN", 1.0, 4.0) == 3.0
        assert delta("ratio", 1.0, 4.0) == 4.0
        assert delta("lnrat", 1.0, 4.0) == pytest.approx(np.log(4.0), rel=1e-12)
        assert delta("count", 1.0, 4.0) == 1.0

    def test_zero_distance_guard(self):
        r = delta("ratio", 0.0, 9.0)
        assert np.isfinite(r) and r == 9.0 / EPSILON
        ln = delta("lnrat", 0.0, 9.0)
        assert np.isfinite(ln) and ln == pytest.approx(np.log(9.0 / EPSILON))
        assert delta("ratio", 0.0, 0.0) == 1.0
        assert delta("lnrat", 0.0, 0.0) == 0.0

    def test_precondition_violations(self):
        with pytest.raises(ValueError):
            delta("LNBNN", -1.0, 4.0)
        with pytest.raises(ValueError):
            delta("ratio", 5.0, 4.0)
        with pytest.raises(ValueError):
            delta("nope", 1.0, 4.0)

    @given(
        st.floats(0.0, 1e6),
        st.floats(0.0, 1e6),
    )
    @settings(max_examples=200)
    def test_identities(self, a, b):
        p, norm = min(a, b), max(a, b)
        assert delta("LNBNN", p, norm) >= 0.0
        assert delta("ratio", p, norm) >= 1.0
        assert delta("lnrat", p, norm) >= 0.0
        assert delta("count", p, norm) == 1.0
        # exact identity: lnrat is the log of the very same quotient
        assert delta("lnrat", p, norm) == np.log(delta("ratio", p, norm))

    @given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.floats(0.1, 10.0))
    @settings(max_examples=100)
    def test_scale_behavior(self, a, b, c):
        p, norm = min(a, b), max(a, b)
        c2 = c * c
        assert delta("ratio", c2 * p, c2 * norm) == pytest.approx(
            delta("ratio", p, norm), rel=1e-9
        )
        assert delta("lnrat", c2 * p, c2 * norm) == pytest.approx(
            delta("lnrat", p, norm), abs=1e-9
        )
        assert delta("count", c2 * p, c2 * norm) == 1.0
        assert delta("LNBNN", c2 * p, c2 * norm) == pytest.approx(
            c2 * delta("LNBNN", p, norm), rel=1e-9
        )

    def test_vectorized(self):
        out = delta("LNBNN", np.array([1.0, 2.0]), np.array([4.0, 2.0]))
        assert np.array_equal(out, [3.0, 0.0])


class TestMatchSet:
    def test_duplicate_pairs_rejected(self):
        with pytest.raises(ValueError):
            MatchSet(image_id=0, i=[1, 1], j=[2, 2], scores=[1.0, 2.0])

    def test_triples_view(self):
        ms = MatchSet(image_id=3, i=[1], j=[2], scores=[4.5])
        assert ms.triples == [(1, 2, 4.5)]


class TestMatchOneVsOne:
    def test_kept_above_threshold(self):
        # db descriptor at squared distances (1, 4) from the two query rows
        query = make_fs(unit_rows([(0, 1.0)], [(0, 2.0)]))
        db = make_fs(unit_rows([]))  # zero vector
        ms = match_one_vs_one(db, query, image_id=5)
        assert ms.image_id == 5
        assert ms.triples == [(0, 0, 4.0)]

    def test_rejected_at_unity_ratio(self):
        # duplicate query descriptors: distances (1, 1) -> r = 1 <= 2.56
        query = make_fs(unit_rows([(0, 1.0)], [(1, 1.0)]))
        db = make_fs(unit_rows([]))
        ms = match_one_vs_one(db, query)
        assert len(ms) == 0

    def test_identical_images_all_self_match(self):
        rng = np.random.default_rng(0)
        desc = rng.random((25, 128), dtype=np.float32)
        fs = make_fs(desc)
        ms = match_one_vs_one(fs, fs)
        assert len(ms) == 25
        assert np.array_equal(ms.i, ms.j)
        assert np.all(ms.scores > T_RATIO)

    def test_tiny_query_empty(self):
        query = make_fs(unit_rows([(0, 1.0)]))
        db = make_fs(unit_rows([]))
        assert len(match_one_vs_one(db, query)) == 0

    def test_threshold_is_strict_exceeds(self):
        # r = 4 exactly: kept for t_ratio just below, dropped at equality
        query = make_fs(unit_rows([(0, 1.0)], [(0, 2.0)]))
        db = make_fs(unit_rows([]))
        assert len(match_one_vs_one(db, query, t_ratio=3.999)) == 1
        assert len(match_one_vs_one(db, query, t_ratio=4.0)) == 0


class TestMatchOneVsMany:
    def test_k1_ratio_analytic(self):
        pool = make_pool(unit_rows([(0, 1.0)], [(0, 2.0)]), [10, 20])
        forest = build_forest(pool, seed=0)
        query = make_fs(unit_rows([]))
        out = match_one_vs_many(query, forest, k=1, fn="ratio", max_checks=None)
        assert list(out) == [10]
        assert out[10].triples == [(0, 0, 4.0)]

    def test_k2_lnbnn_analytic(self):
        vecs = unit_rows([(0, 1.0)], [(0, 1.0), (1, 1.0)], [(0, 2.0), (1, 1.0)])
        pool = make_pool(vecs, [10, 20, 30])  # squared dists 1, 2, 5
        forest = build_forest(pool, seed=0)
        query = make_fs(unit_rows([]))
        out = match_one_vs_many(query, forest, k=2, fn="LNBNN", max_checks=None)
        assert sorted(out) == [10, 20]
        assert out[10].triples == [(0, 0, 4.0)]
        assert out[20].triples == [(0, 0, 3.0)]

    def test_same_image_neighbors_deduplicated(self):
        # both nearest neighbors belong to image 10; only the best survives
        vecs = unit_rows([(0, 1.0)], [(0, 1.0), (1, 1.0)], [(0, 2.0), (1, 1.0)])
        pool = make_pool(vecs, [10, 10, 30])
        forest = build_forest(pool, seed=0)
        query = make_fs(unit_rows([]))
        out = match_one_vs_many(query, forest, k=2, fn="ratio", max_checks=None)
        assert list(out) == [10]
        assert len(out[10]) == 1
        # nearest neighbor (d2=1) scores 5/1, the d2=2 one would score 5/2
        assert out[10].triples == [(0, 0, 5.0)]

    def test_insufficient_pool(self):
        pool = make_pool(unit_rows([(0, 1.0)]), [10])
        forest = build_forest(pool, seed=0)
        query = make_fs(unit_rows([]))
        with pytest.raises(InsufficientDatabaseError):
            match_one_vs_many(query, forest, k=1, fn="count")

    def test_insufficient_after_exclusion(self):
        pool = make_pool(unit_rows([(0, 1.0)], [(0, 2.0)]), [7, 7])
        forest = build_forest(pool, seed=0)
        query = make_fs(unit_rows([]))
        with pytest.raises(InsufficientDatabaseError):
            match_one_vs_many(query, forest, k=1, fn="count", exclude_image=7)

    def test_self_exclusion_forces_refetch(self):
        # five own vectors crowd the top; initial fetch (k+1+pad = 5) is all
        # self, so the search must refetch deeper to find foreign neighbors
        rng = np.random.default_rng(1)
        q = rng.random(128).astype(np.float32)
        own = np.tile(q, (5, 1)) + rng.normal(0, 1e-3, (5, 128)).astype(np.float32)
        foreign = rng.random((30, 128), dtype=np.float32)
        vecs = np.vstack([own, foreign]).astype(np.float32)
        ids = np.array([7] * 5 + [i % 3 for i in range(30)], dtype=np.int64)
        pool = make_pool(vecs, ids)
        forest = build_forest(pool, seed=0)
        query = make_fs(q)
        out = match_one_vs_many(
            query, forest, k=1, fn="LNBNN", exclude_image=7, max_checks=None
        )
        assert 7 not in out
        assert sum(len(ms) for ms in out.values()) == 1
        # oracle: the true nearest foreign vector decides owner and score
        d2 = ((foreign.astype(np.float64) - q.astype(np.float64)) ** 2).sum(axis=1)
        order = np.argsort(d2, kind="stable")
        want_img = ids[5 + order[0]]
        assert list(out) == [int(want_img)]
        want_score = d2[order[1]] - d2[order[0]]
        got = out[int(want_img)].scores[0]
        assert got == pytest.approx(want_score, rel=1e-9)

    def test_count_reduces_to_first_nn_histogram(self):
        rng = np.random.default_rng(2)
        vecs = rng.random((300, 128), dtype=np.float32)
        ids = rng.integers(0, 12, size=300).astype(np.int64)
        pool = make_pool(vecs, ids)
        forest = build_forest(pool, seed=3)
        qdesc = rng.random((40, 128), dtype=np.float32)
        query = make_fs(qdesc)
        out = match_one_vs_many(query, forest, k=1, fn="count", max_checks=None)
        # oracle: global 1-NN owner per query descriptor, by direct scan
        d2 = (
            (qdesc.astype(np.float64) ** 2).sum(axis=1, keepdims=True)
            - 2.0 * qdesc.astype(np.float64) @ vecs.astype(np.float64).T
            + (vecs.astype(np.float64) ** 2).sum(axis=1)
        )
        owners = ids[np.argmin(d2, axis=1)]
        want = {int(img): int(cnt) for img, cnt in zip(*np.unique(owners, return_counts=True))}
        got = {img: float(ms.scores.sum()) for img, ms in out.items()}
        assert got == want

    def test_one_image_database_mirrors_one_vs_one(self):
        rng = np.random.default_rng(4)
        a = make_fs(rng.random((60, 128), dtype=np.float32))
        b = make_fs(rng.random((45, 128), dtype=np.float32))
        # one-vs-one: iterate b's descriptors, 2-NN among a's
        ms_1v1 = match_one_vs_one(a, b, image_id=99)
        # one-vs-many with b as query over a pool holding only image 99 = a
        pool = DescriptorPool.from_feature_sets([(99, a)])
        forest = build_forest(pool, seed=0)
        out = match_one_vs_many(b, forest, k=1, fn="ratio", max_checks=None)
        ms_1vm = out[99]
        kept = ms_1vm.scores > T_RATIO
        got_pairs = set(zip(ms_1vm.j[kept], ms_1vm.i[kept]))
        want_pairs = set(zip(ms_1v1.i, ms_1v1.j))
        assert got_pairs == want_pairs
        got_scores = {(jj, ii): s for jj, ii, s in zip(ms_1vm.j[kept], ms_1vm.i[kept], ms_1vm.scores[kept])}
        for ii, jj, s in zip(ms_1v1.i, ms_1v1.j, ms_1v1.scores):
            assert got_scores[(ii, jj)] == pytest.approx(s, rel=1e-12)

    def test_pq_backend_accepted(self):
        rng = np.random.default_rng(5)
        vecs = rng.random((400, 128), dtype=np.float32)
        ids = rng.integers(0, 8, size=400).astype(np.int64)
        pool = make_pool(vecs, ids)
        cb = train_codebooks(pool, seed=0)
        backend = PQBackend(codebook=cb, codes=encode_pool(cb, vecs), owner=pool.owner)
        query = make_fs(rng.random((10, 128), dtype=np.float32))
        out = match_one_vs_many(query, backend, k=1, fn="lnrat")
        assert sum(len(ms) for ms in out.values()) == 10
        for ms in out.values():
            assert np.all(ms.scores >= 0)

    def test_deterministic_and_sorted(self):
        rng = np.random.default_rng(6)
        vecs = rng.random((200, 128), dtype=np.float32)
        ids = rng.integers(0, 9, size=200).astype(np.int64)
        pool = make_pool(vecs, ids)
        forest = build_forest(pool, seed=1)
        query = make_fs(rng.random((15, 128), dtype=np.float32))
        o1 = match_one_vs_many(query, forest, k=3, fn="lnrat")
        o2 = match_one_vs_many(query, forest, k=3, fn="lnrat")
        assert list(o1) == sorted(o1)
        assert list(o1) == list(o2)
        for img in o1:
            assert np.array_equal(o1[img].i, o2[img].i)
            assert np.array_equal(o1[img].scores, o2[img].scores)

    def test_no_duplicate_pairs_property(self):
        rng = np.random.default_rng(7)
        vecs = rng.random((150, 128), dtype=np.float32)
        ids = rng.integers(0, 5, size=150).astype(np.int64)
        forest = build_forest(make_pool(vecs, ids), seed=2)
        query = make_fs(rng.random((20, 128), dtype=np.float32))
        for k in (1, 2, 5):
            out = match_one_vs_many(query, forest, k=k, fn="LNBNN", max_checks=None)
            for ms in out.values():
                pairs = list(zip(ms.i, ms.j))
                assert len(set(pairs)) == len(pairs)
