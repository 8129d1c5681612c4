import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2dpath import kmeans
from d2dpath.errors import InputError


def brute_assign(X, C):
    d = ((X[:, None, :] - C[None]) ** 2).sum(-1)
    return d.argmin(1)


@st.composite
def datasets(draw):
    n = draw(st.integers(1, 40))
    d = draw(st.integers(1, 4))
    k = draw(st.integers(1, n))
    seed = draw(st.integers(0, 2**31))
    X = np.random.default_rng(seed).normal(size=(n, d)) * draw(st.floats(0.1, 10))
    return X, k, seed


@settings(max_examples=60)
@given(datasets())
def test_inertia_monotone_and_assignment_exact(case):
    X, k, seed = case
    m = kmeans.fit(X, k, seed=seed)
    assert all(b <= a + 1e-9 * max(1.0, a) for a, b in zip(m.trace, m.trace[1:]))
    labels = kmeans.assign_many(X, m)
    assert np.array_equal(labels, brute_assign(X, m.centroids))
    assert m.inertia == pytest.approx(((X - m.centroids[labels]) ** 2).sum(), rel=1e-9, abs=1e-12)


def test_two_obvious_clusters():
    X = np.array([[0, 0], [0, 1], [10, 10], [10, 11]], dtype=float)
    m = kmeans.fit(X, 2, seed=0)
    labels = kmeans.assign_many(X, m)
    assert labels[0] == labels[1] != labels[2] == labels[3]
    assert sorted(map(tuple, m.centroids.round(6))) == [(0.0, 0.5), (10.0, 10.5)]


def test_k_equals_n_gives_zero_inertia():
    X = np.random.default_rng(0).normal(size=(6, 3))
    assert kmeans.fit(X, 6).inertia == pytest.approx(0.0, abs=1e-20)


def test_duplicate_points_no_empty_cluster():
    X = np.zeros((5, 2))
    m = kmeans.fit(X, 3, seed=1)
    assert np.all(np.isfinite(m.centroids))


def test_determinism_and_threads():
    X = np.random.default_rng(3).normal(size=(300, 5))
    a = kmeans.fit(X, 7, seed=11)
    b = kmeans.fit(X, 7, seed=11, threads=4)
    assert np.array_equal(a.centroids, b.centroids)
    assert a.to_json() == b.to_json()


def test_restarts_never_worse_than_first_run():
    X = np.random.default_rng(4).normal(size=(200, 3))
    single = kmeans.fit(X, 8, seed=5)
    multi = kmeans.fit(X, 8, seed=5, n_init=6)
    assert multi.inertia <= single.inertia


def test_assign_ties_go_to_lowest_index():
    m = kmeans.ClusterModel(np.array([[1.0], [-1.0]]))
    assert kmeans.assign([0.0], m) == 0


@pytest.mark.parametrize("bad", [
    dict(points=[[0.0], [1.0]], k=0),
    dict(points=[[0.0], [1.0]], k=3),
    dict(points=[], k=1),
    dict(points=[[0.0, 1.0], [1.0]], k=1),
])
def test_fit_rejects_bad_input(bad):
    with pytest.raises(InputError):
        kmeans.fit(**bad)


def test_assign_dimension_mismatch():
    m = kmeans.fit(np.eye(3), 2)
    with pytest.raises(InputError):
        kmeans.assign([1.0, 2.0], m)


def test_json_round_trip(tmp_path):
    m = kmeans.fit(np.random.default_rng(0).normal(size=(20, 2)), 3)
    kmeans.save(m, tmp_path / "c.json")
    back = kmeans.load(tmp_path / "c.json")
    assert np.array_equal(back.centroids, m.centroids)
    assert back.inertia == m.inertia
