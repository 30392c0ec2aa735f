from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from solidmark import metrics as mt
from solidmark.errors import (
    ConfigurationError,
    DegenerateInputError,
    DimensionError,
    DomainError,
    EmbedderError,
)

import oracles


def test_l2_examples():
    assert mt.l2_normalized(np.ones((3, 4, 4)), np.ones((3, 4, 4))) == 0.0
    assert mt.l2_normalized(np.ones(16), np.zeros(16)) == 1.0
    assert mt.l2_normalized(np.array([1.0, 0, 0, 0]), np.zeros(4)) == 0.5
    with pytest.raises(DimensionError):
        mt.l2_normalized(np.zeros(3), np.zeros(4))


unit = st.floats(0.0, 1.0, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 12), elements=unit))
def test_l2_is_a_metric(x):
    a, b, c = x
    dab = mt.l2_normalized(a, b)
    assert dab == mt.l2_normalized(b, a)
    assert 0.0 <= dab <= 1.0
    assert (dab == 0.0) == np.array_equal(a, b)
    assert dab <= mt.l2_normalized(a, c) + mt.l2_normalized(c, b) + 1e-12
    assert dab == pytest.approx(oracles.l2_scalar(a, b), abs=1e-12)


def test_nearest_neighbors_full_and_exact(rng):
    train = rng.random((100, 3, 6, 6))
    gen = rng.random((3, 6, 6))
    ids = [f"id{i:03d}" for i in range(100)]
    ns = mt.nearest_neighbors(gen, train, 100, ids=ids)
    full = sorted((oracles.l2_scalar(gen, t), i) for t, i in zip(train, ids))
    assert ns.ids == [i for _, i in full]
    assert np.allclose(ns.distances, [d for d, _ in full], atol=1e-12)
    assert np.all(np.diff(ns.distances) >= 0)
    top = mt.nearest_neighbors(gen, train, 7, ids=ids)
    assert top.ids == ns.ids[:7]


def test_nearest_neighbor_exact_copy_first(rng):
    train = rng.random((10, 3, 4, 4))
    ns = mt.nearest_neighbors(train[6], train, 3)
    assert ns.ids[0] == 6 and ns.distances[0] == 0.0


def test_neighbor_ties_by_id():
    ns = mt.rank_neighbors(np.array([0.5, 0.1, 0.5, 0.1]), ["d", "c", "b", "a"], 4)
    assert ns.ids == ["a", "c", "b", "d"]


def test_nearest_neighbors_n_too_large(rng):
    with pytest.raises(ConfigurationError):
        mt.nearest_neighbors(rng.random(4), rng.random((3, 4)), 4)


def test_modified_l2_arithmetic():
    # nearest 0.2, mean over the n nearest 0.4, alpha 0.5 -> 1.0
    assert mt.rescale_by_neighbors(np.array([0.2, 0.6, 0.4, 0.9]), 3, 0.5) == pytest.approx(1.0)
    assert mt.rescale_by_neighbors(np.array([0.0, 0.3, 0.4]), 3, 0.5) == 0.0
    with pytest.raises(DegenerateInputError):
        mt.rescale_by_neighbors(np.array([0.0, 0.0, 0.4]), 2, 0.5)


def test_modified_l2_matches_matrix_oracle(rng):
    train = rng.random((10, 3, 5, 5))
    for _ in range(5):
        gen = rng.random((3, 5, 5))
        assert mt.modified_l2(gen, train, n=4, alpha=0.5) == pytest.approx(
            oracles.modified_l2_matrix(gen, train, 4, 0.5), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), alpha=st.floats(0.05, 5.0))
def test_modified_l2_alpha_scaling(seed, alpha):
    r = np.random.default_rng(seed)
    train, gen = r.random((8, 12)), r.random(12)
    assert mt.modified_l2(gen, train, 5, 2 * alpha) == pytest.approx(mt.modified_l2(gen, train, 5, alpha) / 2,
                                                                     rel=1e-12)


def test_patch_layout():
    x = np.arange(3 * 32 * 32, dtype=float).reshape(3, 32, 32)
    p = mt.to_patches(x, 4)
    assert p.shape == (16, 3 * 8 * 8)
    assert np.array_equal(p[5].reshape(3, 8, 8), x[:, 8:16, 8:16])
    assert mt.to_patches(np.zeros((3, 34, 35)), 4).shape == (16, 3 * 8 * 8)


def test_patched_identical_is_zero(rng):
    x = rng.random((3, 8, 8))
    for reading in ("corresponding", "best_match"):
        assert mt.patched_distances(x, x[None], 4, reading)[0] == 0.0
    # every cross pair: zero only when all patches coincide
    assert mt.patched_distances(x, x[None], 4, "all_pairs")[0] > 0
    c = np.full((3, 8, 8), 0.3)
    assert mt.patched_distances(c, c[None], 4, "all_pairs")[0] == 0.0


def test_patched_reading_enumeration(rng):
    a = rng.random((3, 8, 8))
    b = a.copy()
    b[:, :2, :2] = 1 - b[:, :2, :2]
    pa, pb = mt.to_patches(a, 4), mt.to_patches(b, 4)
    pairs = [[oracles.l2_scalar(g, t) for t in pb] for g in pa]
    aligned = max(pairs[i][i] for i in range(16))
    cross = max(max(row) for row in pairs)
    best = max(min(row) for row in pairs)
    assert mt.patched_distances(a, b[None], 4, "corresponding")[0] == pytest.approx(aligned, abs=1e-12)
    assert mt.patched_distances(a, b[None], 4, "all_pairs")[0] == pytest.approx(cross, abs=1e-12)
    assert mt.patched_distances(a, b[None], 4, "best_match")[0] == pytest.approx(best, abs=1e-12)
    # one differing patch: the patch maximum dominates the whole-image l2
    assert aligned >= mt.l2_normalized(a, b)
    with pytest.raises(ConfigurationError):
        mt.patched_distances(a, b[None], 4, "mean")


def test_patched_modified_l2_runs(rng):
    train = rng.random((6, 3, 8, 8))
    v = mt.patched_modified_l2(train[0] * 0.9, train, 4, n=3, reading="best_match")
    assert v >= 0


def test_embedding_similarity(rng):
    emb = mt.ToyEmbedder(4)
    x = rng.random((3, 16, 16))
    assert mt.embedding_similarity(x, x, emb) == pytest.approx(1.0, abs=1e-6)
    e1, e2 = np.eye(4)[0], np.eye(4)[1]
    table = {0: e1, 1: e2}
    assert mt.embedding_similarity(0, 1, table.__getitem__) == 0.0
    y = rng.random((3, 16, 16))
    assert mt.embedding_similarity(x, y, emb) == pytest.approx(float(emb(x) @ emb(y)), abs=1e-15)
    assert np.linalg.norm(emb(y)) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(EmbedderError):
        mt.embedding_similarity(0, 1, lambda _: np.array([np.nan, 0.0]))
    with pytest.raises(EmbedderError):
        mt.embedding_similarity(0, 1, lambda _: np.array([2.0, 0.0]))


def test_key_distance_examples():
    assert mt.key_distance(0.3, 0.3) == 0.0
    assert mt.key_distance(0.4, 0.3) == pytest.approx(0.1)
    assert mt.key_distance((0, 0.5, 1), (0, 0, 1)) == pytest.approx(1 / 6)


@settings(max_examples=50, deadline=None)
@given(a=unit, b=unit)
def test_key_distance_range(a, b):
    assert 0.0 <= mt.key_distance(a, b) <= 1.0


def test_percentile_examples():
    v = np.round(np.arange(1, 101) / 100, 2)
    assert mt.score_percentile(v, 0.95) == 0.95
    assert mt.score_percentile([0.3] * 7, 0.95) == 0.3
    assert mt.score_max([0.42]) == 0.42
    with pytest.raises(DomainError):
        mt.score_percentile([])
    with pytest.raises(DomainError):
        mt.score_max([])


def test_percentile_and_max_sort_oracle():
    r = np.random.default_rng(7)
    for _ in range(10_000):
        v = r.random(int(r.integers(1, 40)))
        lv = v.tolist()
        assert mt.score_percentile(v, 0.95) == oracles.sort_percentile(lv, 0.95)
        assert mt.score_max(v) == max(lv)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=50))
def test_percentile_properties(vals):
    assert mt.score_percentile(vals, 1.0) == mt.score_max(vals)
    assert mt.score_max(vals) >= mt.score_percentile(vals, 0.95)


def test_eidetic_examples():
    assert mt.count_eidetic([0.0, 0.04, 0.2], 0.05) == 2
    assert mt.count_eidetic([0.0, 0.04, 0.2], 0.5) == 3


def test_eidetic_scan_oracle():
    r = np.random.default_rng(11)
    v = r.random(100_000)
    v[:1000] = np.round(v[:1000], 3)  # values sitting exactly on thresholds
    lv = v.tolist()
    counts = mt.eidetic_counts(v)
    for d in mt.DEFAULT_THRESHOLDS:
        assert mt.count_eidetic(v, d) == oracles.scan_count(lv, d) == counts[d]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=0, max_size=60),
       st.lists(st.floats(0.001, 0.999), min_size=1, max_size=5))
def test_eidetic_monotone(vals, ts):
    c = mt.eidetic_counts(vals, ts)
    keys = list(c)
    assert keys == sorted(keys, reverse=True)
    assert all(c[a] >= c[b] for a, b in zip(keys, keys[1:]))
    assert all(v <= len(vals) for v in c.values())


def test_threshold_validation():
    assert mt.validate_thresholds([0.005, 0.1, 0.05]) == (0.1, 0.05, 0.005)
    for bad in ([], [0.0], [1.0], [-0.1]):
        with pytest.raises(ConfigurationError):
            mt.validate_thresholds(bad)


def test_score_report_and_csv():
    recs = [mt.DistanceRecord(f"g{i}", "t0", v, "key_distance") for i, v in enumerate([0.0, 0.03, 0.2, 0.5])]
    rep = mt.ScoreReport.from_records(recs)
    assert rep.kind == "distance" and rep.sample_size == 4 and rep.maximum == 0.5
    assert rep.eidetic == {0.1: 2, 0.05: 2, 0.005: 1}
    sims = [mt.DistanceRecord("g", "t", v, "embedding_similarity") for v in (0.99, -0.2)]
    assert mt.ScoreReport.from_records(sims, [0.5]).eidetic == {0.5: 1}
    with pytest.raises(ConfigurationError):
        mt.ScoreReport.from_records(recs + sims)
    csv_text = mt.records_to_csv(recs)
    assert csv_text.splitlines()[0] == "generation_id,nearest_id,metric,value"
    assert "\r\n" in csv_text
    with pytest.raises(DomainError):
        mt.DistanceRecord("g", "t", float("nan"), "l2")
    assert '"metric": "key_distance"' in mt.reports_summary([rep])
