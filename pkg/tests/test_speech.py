import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unitext.corpus_io import FeatureMatrix
from unitext.errors import ConfigError, ContractError, DimensionError
from unitext.sequence import SPEECH, TEXT, TokenSequence
from unitext.speech import (Codebook, KMeansConfig, estimate_token_length_stats, kmeans_assign,
                            kmeans_train, nearest_centroid, pool_frames, read_codebook, run_lengths,
                            run_length_reduce, write_codebook)


def brute_nearest(x, c):
    out = []
    for row in x:
        best, arg = np.inf, -1
        for j, cent in enumerate(c):
            d = float(np.sum((row - cent) ** 2))
            if d < best:
                best, arg = d, j
        out.append(arg)
    return np.array(out)


def two_blobs(rng, n=200, sigma=0.01, sep=10.0):
    a = rng.normal(0.0, sigma, size=(n, 3))
    b = rng.normal(0.0, sigma, size=(n, 3)) + np.array([sep, 0, 0])
    return np.vstack([a, b]), np.repeat([0, 1], n)


class TestKMeans:
    def test_two_blobs_recovered(self, rng):
        x, truth = two_blobs(rng)
        book = kmeans_train(x, KMeansConfig(k=2, seed=4))
        labels, _ = nearest_centroid(x, book.centroids)
        # same partition up to label swap
        assert np.array_equal(labels, truth) or np.array_equal(labels, 1 - truth)
        centres = sorted(book.centroids.tolist())
        assert np.allclose(centres[0], [0, 0, 0], atol=0.1)
        assert np.allclose(centres[1], [10, 0, 0], atol=0.1)

    def test_exact_fit_when_k_equals_points(self, rng):
        x = rng.normal(size=(6, 2))
        book = kmeans_train(x, KMeansConfig(k=6))
        assert book.inertia == 0.0
        assert sorted(map(tuple, book.centroids)) == sorted(map(tuple, x))

    @pytest.mark.parametrize("seed", range(5))
    def test_inertia_non_increasing(self, seed):
        r = np.random.default_rng(seed)
        x = np.vstack([r.normal(m, 1.0, size=(80, 4)) for m in r.normal(0, 3, size=(6, 4))])
        book = kmeans_train(x, KMeansConfig(k=8, seed=seed, tol=0.0, max_iters=50))
        hist = np.array(book.inertia_history)
        assert (np.diff(hist) <= 1e-9 * hist[:-1]).all()
        assert len(set(map(tuple, book.centroids))) == 8

    def test_deterministic(self, rng):
        x = rng.normal(size=(300, 5))
        a = kmeans_train(x, KMeansConfig(k=7, seed=11))
        b = kmeans_train(x, KMeansConfig(k=7, seed=11))
        assert np.array_equal(a.centroids, b.centroids)

    def test_too_few_frames(self):
        with pytest.raises(ConfigError):
            kmeans_train(np.zeros((3, 2)), KMeansConfig(k=5))

    def test_empty_input(self):
        with pytest.raises(ConfigError):
            kmeans_train(np.zeros((0, 2)), KMeansConfig(k=1))

    def test_duplicate_points_cannot_fill_k(self):
        with pytest.raises(ConfigError):
            kmeans_train(np.ones((10, 2)), KMeansConfig(k=2))

    def test_default_k(self):
        assert KMeansConfig().k == 500


class TestAssign:
    def test_exact_centroid(self, rng):
        c = rng.normal(size=(10, 4))
        seq = kmeans_assign(Codebook(c), FeatureMatrix("u", c[[7]]))
        assert seq.ids.tolist() == [7] and seq.modality == SPEECH

    def test_tie_goes_to_lower_index(self):
        c = np.array([[9.0, 9.0], [5.0, 5.0], [1.0, 0.0], [7.0, 7.0], [3.0, 3.0], [-1.0, 0.0]])
        seq = kmeans_assign(Codebook(c), FeatureMatrix("u", np.array([[0.0, 0.0]])))
        assert seq.ids.tolist() == [2]

    def test_ties_with_awkward_values(self, rng):
        for _ in range(50):
            # integer coordinates keep x +- d exact, so the tie is genuine
            x = rng.integers(-10**6, 10**6, size=3).astype(np.float64)
            d = rng.integers(-50, 50, size=3).astype(np.float64) + 0.5
            c = np.vstack([x + 5 * d, x + d, x - d])
            labels, _ = nearest_centroid(x[None, :], c)
            assert labels[0] == 1

    def test_matches_brute_force_1k(self, rng):
        c = rng.normal(size=(16, 6))
        x = rng.normal(size=(1000, 6))
        labels, dist = nearest_centroid(x, c)
        assert np.array_equal(labels, brute_nearest(x, c))
        np.testing.assert_allclose(dist, ((x - c[labels]) ** 2).sum(axis=1))

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionError):
            kmeans_assign(Codebook(rng.normal(size=(4, 3))), FeatureMatrix("u", rng.normal(size=(2, 5))))

    def test_length_equals_frames(self, rng):
        book = Codebook(rng.normal(size=(4, 3)))
        for n in (0, 1, 17):
            assert len(kmeans_assign(book, FeatureMatrix("u", rng.normal(size=(n, 3))))) == n

    def test_codebook_round_trip(self, tmp_path, rng):
        c = rng.normal(size=(5, 3)).astype(np.float32)
        write_codebook(tmp_path / "c.tv2c", Codebook(c))
        assert np.array_equal(read_codebook(tmp_path / "c.tv2c").centroids, c)

    def test_pool_frames_stride(self, rng):
        feats = [FeatureMatrix("a", rng.normal(size=(5, 2))), FeatureMatrix("b", rng.normal(size=(4, 2)))]
        assert pool_frames(feats, 2).shape == (5, 2)
        with pytest.raises(DimensionError):
            pool_frames(feats + [FeatureMatrix("c", np.zeros((3, 7)))])


class TestRunLength:
    def test_example(self):
        seq = TokenSequence("u", SPEECH, [1, 1, 2, 2, 2, 3])
        assert run_length_reduce(seq).ids.tolist() == [1, 2, 3]

    def test_empty(self):
        assert len(run_length_reduce(TokenSequence("u", SPEECH, []))) == 0

    def test_text_rejected(self):
        with pytest.raises(ContractError):
            run_length_reduce(TokenSequence("u", TEXT, [1]))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 4), max_size=60))
    def test_reconstruction_and_idempotence(self, ids):
        seq = TokenSequence("u", SPEECH, ids)
        out = run_length_reduce(seq)
        assert not np.any(out.ids[1:] == out.ids[:-1])
        values, lengths = run_lengths(ids)
        assert np.repeat(values, lengths).tolist() == list(ids)
        assert run_length_reduce(out) == out


class TestLengthStats:
    def test_constant(self):
        s = estimate_token_length_stats([TokenSequence(f"u{i}", SPEECH, np.zeros(10)) for i in range(3)])
        assert s.mean == 10 and s.std == 0 and s.histogram == {10: 3}

    def test_zero_length(self):
        assert estimate_token_length_stats([TokenSequence("u", SPEECH, [])]).mean == 0

    def test_two_pass_oracle(self, rng):
        lengths = rng.integers(0, 300, size=1000)
        corpus = [TokenSequence(f"u{i}", SPEECH, np.zeros(n)) for i, n in enumerate(lengths)]
        s = estimate_token_length_stats(corpus)
        mean = sum(lengths) / len(lengths)
        var = sum((v - mean) ** 2 for v in lengths) / len(lengths)
        assert abs(s.mean - mean) < 1e-9 and abs(s.std - var ** 0.5) < 1e-9

    def test_empty_corpus(self):
        with pytest.raises(ConfigError):
            estimate_token_length_stats([])
