import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fakepcd.attribution import (
    UNKNOWN_ID,
    AnchorSet,
    AttributionError,
    LogitThreshold,
    assign,
    assign_ids,
    best_permutation_accuracy,
    build_anchor_set,
    evaluate,
    load_anchor_set,
    mean_source_distance,
    percentile,
    save_anchor_set,
    select_threshold,
    split_unknowns,
    threshold_sweep,
    tune_percentile,
)
from fakepcd.nnet import CheckpointError
from fakepcd.pointcloud import make_rng


def anchors_from(groups):
    return AnchorSet.from_embeddings(np.array(groups, dtype=float))


def nearest_rank(seq, p):
    s = sorted(seq)
    return s[max(1, math.ceil(p / 100 * len(s))) - 1]


def test_two_point_cluster():
    a = anchors_from([[[0.0, 0.0], [2.0, 0.0]]])
    np.testing.assert_array_equal(a.centroids[0], [1.0, 0.0])
    np.testing.assert_array_equal(a.intra_distances[0], [1.0, 1.0])


def test_anchor_selection_deterministic_and_centroids():
    rng = make_rng(0)
    emb = rng.normal(size=(300, 4))
    labels = np.repeat([0, 1, 2], 100)
    rng.shuffle(labels)
    a = build_anchor_set(emb, labels, 50, seed=11)
    b = build_anchor_set(emb, labels, 50, seed=11)
    np.testing.assert_array_equal(a.embeddings, b.embeddings)
    for k in range(3):
        manual = np.zeros(4)
        for row in a.embeddings[k]:
            manual += row
        np.testing.assert_allclose(a.centroids[k], manual / 50, atol=1e-12)
        assert a.intra_distances[k].shape == (50,)
        members = {tuple(r) for r in emb[labels == k]}
        assert all(tuple(r) in members for r in a.embeddings[k])


def test_anchor_set_needs_enough_samples():
    with pytest.raises(AttributionError):
        build_anchor_set(np.zeros((5, 2)), np.array([0, 0, 0, 1, 1]), 3)


def test_mean_distance_examples():
    a = anchors_from([[[0.0, 0.0], [0.0, 2.0]]])
    assert mean_source_distance(np.array([0.0, 1.0]), a)[0] == 1.0
    lone = anchors_from([[[3.0, 4.0]]])
    assert mean_source_distance(np.array([3.0, 4.0]), lone)[0] == 0.0


def test_mean_distance_matches_loop():
    rng = make_rng(2)
    a = AnchorSet.from_embeddings(rng.normal(size=(3, 7, 5)))
    q = rng.normal(size=(4, 5))
    d = mean_source_distance(q, a)
    for i in range(4):
        for k in range(3):
            manual = sum(math.sqrt(sum((q[i, j] - a.embeddings[k, n, j]) ** 2 for j in range(5))) for n in range(7)) / 7
            assert abs(d[i, k] - manual) < 1e-12


def test_percentile_examples():
    seq = list(range(1, 11))
    assert percentile(seq, 70) == 7
    assert percentile(seq, 100) == 10
    with pytest.raises(AttributionError):
        percentile([], 50)
    with pytest.raises(AttributionError):
        percentile(seq, 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40), st.floats(0.01, 100))
def test_percentile_nearest_rank_property(seq, p):
    r = percentile(seq, p)
    assert r in seq
    assert r == nearest_rank(seq, p)
    assert sum(v <= r for v in seq) >= p / 100 * len(seq) - 1e-9


def test_select_threshold_examples():
    a = AnchorSet(np.zeros((2, 3, 1)), ("a", "b"), np.zeros((2, 1)), np.array([[1.0, 2, 3], [10, 20, 30]]))
    assert select_threshold(a, 100).threshold == 3
    one = AnchorSet(np.zeros((1, 4, 1)), ("a",), np.zeros((1, 1)), np.array([[4.0, 1, 3, 2]]))
    assert select_threshold(one, 50).threshold == 2


def test_select_threshold_brute_force():
    rng = make_rng(5)
    intra = rng.exponential(size=(4, 100))
    a = AnchorSet(np.zeros((4, 100, 1)), tuple("abcd"), np.zeros((4, 1)), intra)
    for p in (5, 50, 70, 85, 95, 100):
        assert select_threshold(a, p).threshold == min(nearest_rank(list(row), p) for row in intra)


def test_assign_examples():
    np.testing.assert_array_equal(assign_ids(np.array([[0.5, 2.0], [1.5, 2.0]]), 1.0), [0, UNKNOWN_ID])
    # exactly at the threshold counts as known
    assert assign_ids(np.array([[1.0, 1.0]]), 1.0)[0] == 0
    a = anchors_from([[[0.0, 0.0], [0.0, 0.2]], [[5.0, 0.0], [5.0, 0.2]]])
    policy = select_threshold(a, 100)
    assert policy.threshold == pytest.approx(0.1)
    res = assign(np.array([0.0, 0.1]), a, policy)
    assert res.verdict.index == 0 and res.verdict.name == a.names[0]
    far = assign(np.array([2.5, 0.1]), a, policy)
    assert far.verdict.index is None and far.margin > 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100))
def test_assign_invariant_under_common_rescaling(seed, scale):
    d = make_rng(seed).uniform(0, 2, size=(20, 3))
    t = float(np.median(d))
    np.testing.assert_array_equal(assign_ids(d, t), assign_ids(d * scale, t * scale))


def test_sweep_monotone():
    rng = make_rng(9)
    d = rng.uniform(0, 2, size=(200, 4))
    truth = np.where(rng.uniform(size=200) < 0.3, UNKNOWN_ID, np.argmin(d, axis=1))
    evs = threshold_sweep(d, truth, np.linspace(0, 3, 61))
    ka = [e.known_accuracy for e in evs]
    ua = [e.unknown_accuracy for e in evs]
    assert all(b >= a for a, b in zip(ka, ka[1:]))
    assert all(b <= a for a, b in zip(ua, ua[1:]))
    assert ka[0] == 0 and ua[0] == 1 and ua[-1] == 0


def test_tune_percentile_tie_goes_to_smallest():
    a = anchors_from([[[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [0.1, 0.1]]])
    val = np.array([[0.05, 0.05], [9.0, 9.0]])
    p, curve = tune_percentile(a, val, [0, UNKNOWN_ID], grid=(70, 80, 90))
    assert p == 70
    assert len(curve) == 3


def test_tune_percentile_needs_both_kinds():
    a = anchors_from([[[0.0, 0.0], [1.0, 0.0]]])
    with pytest.raises(AttributionError):
        tune_percentile(a, np.zeros((2, 2)), [0, 0])


def test_evaluate_all_correct_and_f1():
    ev = evaluate([0, 1, UNKNOWN_ID], [0, 1, UNKNOWN_ID])
    assert ev.accuracy == 1 and ev.macro_f1 == 1 and ev.known_accuracy == 1 and ev.unknown_accuracy == 1


def test_evaluate_random_verdicts_near_chance():
    rng = make_rng(4)
    truth = rng.integers(0, 4, size=20000)
    pred = rng.integers(0, 4, size=20000)
    assert abs(evaluate(pred, truth).known_accuracy - 0.25) < 0.02


def test_evaluate_handcrafted_f1():
    ev = evaluate([0, 0, UNKNOWN_ID, UNKNOWN_ID], [0, UNKNOWN_ID, UNKNOWN_ID, 0])
    # class 0: tp=1 fp=1 fn=1 -> 0.5 ; unknown: same -> 0.5
    assert ev.macro_f1 == pytest.approx(0.5)
    assert ev.known_accuracy == 0.5 and ev.unknown_accuracy == 0.5


def test_logit_baseline_examples():
    rule = LogitThreshold.from_probabilities([0.99, 0.95, 0.97])
    assert rule.threshold == 0.95
    logits = np.log(np.array([[0.99, 0.005, 0.005], [0.5, 0.3, 0.2]]))
    np.testing.assert_array_equal(rule.predict(logits), [0, UNKNOWN_ID])


def test_logit_baseline_fit_uses_true_class():
    logits = np.log(np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]]))
    assert LogitThreshold.fit(logits, [0, 1, 0]).threshold == pytest.approx(0.6)


def test_gmm_separated_clusters():
    rng = make_rng(0)
    x = np.vstack([rng.normal(0, 1, size=(100, 3)), rng.normal(10, 1, size=(100, 3))])
    truth = np.repeat([0, 1], 100)
    res = split_unknowns(x, seed=1)
    assert best_permutation_accuracy(res.labels, truth) >= 0.99
    lls = res.log_likelihoods
    assert all(b >= a - 1e-9 for a, b in zip(lls, lls[1:]))


@pytest.mark.parametrize("cov", ["diag", "full"])
def test_gmm_monotone_on_random_data(cov):
    x = make_rng(3).normal(size=(80, 4))
    lls = split_unknowns(x, seed=2, covariance=cov).log_likelihoods
    assert all(b >= a - 1e-9 * max(1, abs(a)) for a, b in zip(lls, lls[1:]))


def test_gmm_identical_points_stay_finite():
    with pytest.warns(RuntimeWarning):
        res = split_unknowns(np.ones((20, 3)), seed=0)
    assert np.all(np.isfinite(res.means))
    assert all(np.isfinite(res.log_likelihoods))


def test_best_permutation_accuracy():
    assert best_permutation_accuracy([1, 1, 0, 0], [0, 0, 1, 1]) == 1.0
    assert best_permutation_accuracy([0, 0, 0, 0], [0, 0, 1, 1]) == 0.5


def test_anchor_set_round_trip(tmp_path):
    a = AnchorSet.from_embeddings(make_rng(1).normal(size=(3, 5, 4)), ["real", "lattice", "fuzzé"])
    p = tmp_path / "a.fpcd"
    save_anchor_set(a, p)
    b = load_anchor_set(p)
    assert b.names == a.names
    assert b.embeddings.tobytes() == a.embeddings.tobytes()
    data = p.read_bytes()
    (tmp_path / "cut.fpcd").write_bytes(data[:-9])
    with pytest.raises(CheckpointError):
        load_anchor_set(tmp_path / "cut.fpcd")
