from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bktlstm.profile import (
    AbilityModel,
    ClusteringError,
    assign_profile,
    cumulative_vectors,
    fit_kmeans,
    load_centroids,
    nearest_labels,
    performance_vector,
    profile_rows,
    profile_sequence,
    save_centroids,
    segment_intervals,
    training_vectors,
)

from conftest import make_dataset


def test_segments_45_attempts():
    assert segment_intervals(45, 20) == [(0, 20), (20, 40), (40, 45)]
    assert segment_intervals(0, 20) == []


def test_performance_vector_rates_and_unseen():
    v = performance_vector([0, 0, 0, 2], [1, 1, 0, 0], 3)
    assert v.values.tolist() == pytest.approx([2 / 3, 0.5, 0.0])


def test_cumulative_rows():
    skills = np.array([0] * 20 + [1] * 5)
    correct = np.array([1] * 10 + [0] * 10 + [1] * 5)
    rows = cumulative_vectors(skills, correct, 2, window=20)
    assert rows.tolist() == [[0.5, 0.5], [0.5, 1.0]]


def _exhaustive_labels(X, C):
    out = []
    for x in X:
        d = [float(((x - c) ** 2).sum()) for c in C]
        out.append(d.index(min(d)))
    return np.array(out)


def _blobs(seed, n=120, dim=4):
    rng = np.random.default_rng(seed)
    centers = rng.random((4, dim))
    return np.clip(centers[rng.integers(0, 4, n)] + 0.05 * rng.standard_normal((n, dim)), 0, 1)


@pytest.mark.parametrize("init", ["random", "farthest"])
@pytest.mark.parametrize("seed", range(8))
def test_kmeans_contract(seed, init):
    X = _blobs(seed)
    model = fit_kmeans(X, k=5, seed=seed, init=init)
    hist = np.array(model.objective_history)
    assert np.all(np.diff(hist) <= 1e-9 * max(1.0, hist[0]))
    labels = nearest_labels(model, X) - 2
    np.testing.assert_array_equal(labels, _exhaustive_labels(X, model.centroids))
    again = fit_kmeans(X, k=5, seed=seed, init=init)
    np.testing.assert_array_equal(model.centroids, again.centroids)


@given(
    st.lists(st.lists(st.floats(0, 1), min_size=3, max_size=3), min_size=4, max_size=40),
    st.integers(1, 4),
    st.integers(0, 50),
)
@settings(max_examples=60, deadline=None)
def test_kmeans_objective_never_increases(rows, k, seed):
    X = np.array(rows)
    if len(np.unique(X, axis=0)) < k:
        with pytest.raises(ClusteringError):
            fit_kmeans(X, k=k, seed=seed)
        return
    hist = np.array(fit_kmeans(X, k=k, seed=seed).objective_history)
    assert np.all(np.diff(hist) <= 1e-12 * max(1.0, hist[0]))


def test_k1_centroid_is_mean():
    X = _blobs(3)
    np.testing.assert_allclose(fit_kmeans(X, k=1).centroids[0], X.mean(axis=0), atol=1e-12)


def test_two_groups_brute_force():
    # 1-D, 8 points: the optimal 2-partition is found by trying every split of the sorted points
    X = np.array([[0.0], [0.1], [0.15], [0.2], [0.7], [0.8], [0.85], [1.0]])
    best = min(
        (((X[:i] - X[:i].mean()) ** 2).sum() + ((X[i:] - X[i:].mean()) ** 2).sum(), i) for i in range(1, len(X))
    )
    model = fit_kmeans(X, k=2, seed=0, init="farthest")
    assert model.objective_history[-1] == pytest.approx(best[0])


def test_permutation_invariance():
    X = _blobs(5)
    perm = np.random.default_rng(0).permutation(len(X))
    a = fit_kmeans(X, k=4, seed=11)
    b = fit_kmeans(X[perm], k=4, seed=11)
    np.testing.assert_array_equal(a.centroids, b.centroids)


def test_canonical_centroid_order():
    model = fit_kmeans(_blobs(2), k=4, seed=1)
    means = model.centroids.mean(axis=1)
    assert np.all(np.diff(means) >= 0)


def test_ties_go_to_lower_label():
    model = AbilityModel(centroids=np.array([[0.0], [1.0]]))
    assert nearest_labels(model, np.array([[0.5]])).tolist() == [2]


def test_too_few_distinct_vectors():
    with pytest.raises(ClusteringError):
        fit_kmeans(np.zeros((10, 2)), k=2)


def test_wrong_vector_length():
    model = AbilityModel(centroids=np.zeros((2, 3)))
    with pytest.raises(ClusteringError):
        nearest_labels(model, np.zeros((1, 2)))


def test_profile_sequence_uses_previous_interval():
    # 45 attempts on one skill: first 20 correct, next 20 wrong
    rows = [("u", f"p{i}", "A", int(i < 20), i) for i in range(45)]
    data = make_dataset(rows)
    model = AbilityModel(centroids=np.array([[0.0], [1.0]]))
    labels = profile_sequence(data, model, window=20)
    assert labels[:20].tolist() == [1] * 20
    assert labels[20:40].tolist() == [3] * 20  # through interval 1: rate 1.0
    assert labels[40:].tolist() == [2] * 5  # through interval 2: rate 0.5, tie -> lower label
    rows_out = profile_rows(data, model, window=20)
    assert [(r.interval_index, r.label) for r in rows_out] == [(1, 1), (2, 3), (3, 2)]


def test_profiles_are_causal(small_synth):
    model = fit_kmeans(training_vectors(small_synth), k=3, seed=0)
    base = profile_sequence(small_synth, model)
    flipped_correct = small_synth.correct.copy()
    sl = next(iter(small_synth.student_slices()))[1]
    flipped_correct[sl.start + 30 :] = 1 - flipped_correct[sl.start + 30 :]
    altered = replace(small_synth, correct=flipped_correct)
    after = profile_sequence(altered, model)
    # changes from attempt 30 on only reach intervals that start after attempt 40
    assert base[: sl.start + 40].tolist() == after[: sl.start + 40].tolist()


def test_assign_profile_and_round_trip(tmp_path):
    model = fit_kmeans(_blobs(4), k=3, seed=2)
    v = performance_vector([0, 1], [1, 0], 4, "s", 2)
    prof = assign_profile(model, v)
    assert prof.student_id == "s" and 2 <= prof.label <= 4
    path = tmp_path / "c.tsv"
    save_centroids(model, ["a", "b", "c", "d"], path)
    np.testing.assert_array_equal(load_centroids(path).centroids, model.centroids)


def test_profile_examples():
    assert segment_intervals(20, 20) == [(0, 20)]
    assert performance_vector([], [], 3).values.tolist() == [0.5, 0.5, 0.5]
    assert performance_vector([1, 1, 1, 1], [1, 1, 0, 1], 3).values.tolist() == [0.5, 0.75, 0.5]
    model = AbilityModel(centroids=np.array([[0.2, 0.2], [0.6, 0.9], [0.9, 0.9]]))
    assert nearest_labels(model, np.array([[0.6, 0.9]])).tolist() == [3]


def test_short_student_stays_initial():
    data = make_dataset([("u", f"p{i}", "A", i % 2, i) for i in range(15)])
    model = AbilityModel(centroids=np.array([[0.0], [1.0]]))
    assert set(profile_sequence(data, model).tolist()) == {1}


def test_forty_attempts_second_interval_uses_first():
    # first 20 attempts: 15 correct (0.75) -> nearest of {0.2, 0.7} is 0.7 -> label 3
    rows = [("u", f"p{i}", "A", int(i < 15), i) for i in range(40)]
    model = AbilityModel(centroids=np.array([[0.2], [0.7]]))
    labels = profile_sequence(make_dataset(rows), model)
    assert labels[:20].tolist() == [1] * 20 and labels[20:].tolist() == [3] * 20
