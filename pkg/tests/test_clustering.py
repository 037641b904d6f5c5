import numpy as np
import pytest

from voxcomplete.clustering import ClusterResult, mean_shift
from voxcomplete.errors import DomainError


class TestValidation:
    def test_empty_input(self):
        with pytest.raises(DomainError):
            mean_shift(np.zeros((0, 3)), 1.0)

    def test_wrong_rank(self):
        with pytest.raises(DomainError):
            mean_shift(np.zeros(5), 1.0)

    def test_non_finite(self):
        pts = np.array([[0.0, 0.0], [np.nan, 1.0]])
        with pytest.raises(DomainError):
            mean_shift(pts, 1.0)

    def test_bad_bandwidth(self):
        pts = np.zeros((3, 2))
        with pytest.raises(DomainError):
            mean_shift(pts, 0.0)
        with pytest.raises(DomainError):
            mean_shift(pts, -1.0)


class TestDegenerate:
    def test_identical_points_single_mode(self):
        pts = np.ones((10, 4))
        res = mean_shift(pts, 0.5)
        assert res.n_modes == 1
        assert (res.labels == 0).all()
        assert np.allclose(res.modes[0], 1.0)

    def test_single_point(self):
        res = mean_shift(np.array([[2.0, 3.0]]), 1.0)
        assert res.n_modes == 1
        assert np.allclose(res.modes, [[2.0, 3.0]])


class TestSeparatedClusters:
    def test_two_far_groups(self):
        # Groups 10 bandwidths apart can never see each other.
        rng = np.random.default_rng(1)
        a = rng.normal(0.0, 0.05, (20, 3))
        b = rng.normal(0.0, 0.05, (20, 3)) + 10.0
        res = mean_shift(np.vstack([a, b]), bandwidth=1.0)
        assert res.n_modes == 2
        assert set(res.labels[:20].tolist()) == {res.labels[0]}
        assert set(res.labels[20:].tolist()) == {res.labels[20]}
        assert sorted(res.cluster_sizes().tolist()) == [20, 20]

    def test_modes_near_group_means(self):
        rng = np.random.default_rng(2)
        centers = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]])
        pts = np.vstack(
            [c + rng.normal(0.0, 0.1, (30, 2)) for c in centers]
        )
        res = mean_shift(pts, bandwidth=1.5)
        assert res.n_modes == 3
        for c in centers:
            nearest = res.modes[np.linalg.norm(res.modes - c, axis=1).argmin()]
            assert np.allclose(nearest, c, atol=0.2)

    def test_labels_follow_nearest_mode(self):
        pts = np.array([[0.0], [0.1], [5.0], [5.1]])
        res = mean_shift(pts, bandwidth=0.5)
        assert res.n_modes == 2
        assert res.labels[0] == res.labels[1]
        assert res.labels[2] == res.labels[3]
        assert res.labels[0] != res.labels[2]


class TestInvariants:
    def _random_case(self, seed):
        rng = np.random.default_rng(seed)
        k = rng.integers(1, 4)
        centers = rng.uniform(-5, 5, (k, 3))
        pts = np.vstack(
            [c + rng.normal(0, 0.2, (rng.integers(5, 15), 3)) for c in centers]
        )
        return pts

    def test_modes_pairwise_separated(self):
        # Merge radius bandwidth/2 guarantees mode separation.
        for seed in range(20):
            pts = self._random_case(seed)
            res = mean_shift(pts, bandwidth=1.0)
            for i in range(res.n_modes):
                for j in range(i + 1, res.n_modes):
                    gap = np.linalg.norm(res.modes[i] - res.modes[j])
                    assert gap > res.bandwidth / 2.0

    def test_every_point_labeled(self):
        for seed in range(20):
            pts = self._random_case(seed)
            res = mean_shift(pts, bandwidth=1.0)
            assert res.labels.shape == (len(pts),)
            assert res.labels.min() >= 0
            assert res.labels.max() < res.n_modes
            assert res.cluster_sizes().sum() == len(pts)
            assert (res.cluster_sizes() > 0).all()

    def test_deterministic(self):
        pts = self._random_case(7)
        r1 = mean_shift(pts, bandwidth=1.0)
        r2 = mean_shift(pts, bandwidth=1.0)
        assert np.array_equal(r1.modes, r2.modes)
        assert np.array_equal(r1.labels, r2.labels)

    def test_huge_bandwidth_collapses(self):
        pts = self._random_case(3)
        res = mean_shift(pts, bandwidth=1e3)
        assert res.n_modes == 1
        assert np.allclose(res.modes[0], pts.mean(axis=0), atol=1e-3)


class TestResultType:
    def test_cluster_sizes_counts_labels(self):
        res = ClusterResult(
            modes=np.zeros((2, 1)),
            labels=np.array([0, 0, 1]),
            bandwidth=1.0,
        )
        assert res.n_modes == 2
        assert res.cluster_sizes().tolist() == [2, 1]
