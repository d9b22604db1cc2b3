"""Speech tokenizer: k-means codebook over frame features and unit sequences."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus_io import FeatureMatrix, read_matrix_file, write_matrix_file
from .errors import ConfigError, ContractError, DimensionError
from .sequence import SPEECH, TokenSequence

log = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"TV2C"
_CHUNK = 4096


@dataclass
class KMeansConfig:
    k: int = 500
    max_iters: int = 100
    tol: float = 1e-4
    seed: int = 0


@dataclass
class Codebook:
    centroids: np.ndarray
    iterations: int = 0
    inertia: float = float("nan")
    inertia_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def feat_dim(self) -> int:
        return int(self.centroids.shape[1])


def write_codebook(path, codebook: Codebook) -> None:
    write_matrix_file(path, CODEBOOK_MAGIC, codebook.centroids)


def read_codebook(path) -> Codebook:
    return Codebook(read_matrix_file(path, CODEBOOK_MAGIC).astype(np.float64))


def _sq_norms(x: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", x, x)


def nearest_centroid(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of and squared distance to the closest centroid for each row of ``x``.

    Distances come from the expanded form ``|x|^2 - 2 x.c + |c|^2``; rows whose
    best and runner-up are within rounding of each other are re-scored with
    exact differences so equidistant ties go to the lowest centroid index.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != c.shape[1]:
        raise DimensionError(f"features {x.shape} do not match codebook {c.shape}")
    labels = np.empty(x.shape[0], dtype=np.int64)
    dist = np.empty(x.shape[0], dtype=np.float64)
    cn = _sq_norms(c)
    for lo in range(0, x.shape[0], _CHUNK):
        xb = x[lo:lo + _CHUNK]
        xn = _sq_norms(xb)
        d2 = xn[:, None] - 2.0 * (xb @ c.T) + cn[None, :]
        best = d2.min(axis=1)
        slack = 1e-9 * (xn + cn.max()) + 1e-300
        near = d2 <= (best + slack)[:, None]
        lab = np.argmax(near, axis=1)
        ambiguous = np.flatnonzero(near.sum(axis=1) > 1)
        for i in ambiguous:
            cand = np.flatnonzero(near[i])
            exact = ((c[cand] - xb[i]) ** 2).sum(axis=1)
            lab[i] = cand[np.argmin(exact)]
        labels[lo:lo + _CHUNK] = lab
        dist[lo:lo + _CHUNK] = ((xb - c[lab]) ** 2).sum(axis=1)
    return labels, dist


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise ConfigError(f"only {len(chosen)} distinct frames available for k={k}")
        idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        idx = min(idx, n - 1)
        while d2[idx] == 0:
            idx = (idx + 1) % n
        chosen.append(idx)
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return x[chosen].copy()


def kmeans_train(frames: np.ndarray, config: KMeansConfig | None = None) -> Codebook:
    """Lloyd's algorithm from a k-means++ start.

    Stops after ``max_iters`` updates or when the relative inertia improvement
    falls below ``tol``. Clusters that lose all their frames are re-seeded at
    the frame currently farthest from its own centroid.
    """
    config = config or KMeansConfig()
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigError("k-means needs a non-empty [frames x dim] matrix")
    k = config.k
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if x.shape[0] < k:
        raise ConfigError(f"k-means with k={k} needs at least {k} frames, got {x.shape[0]}")
    rng = np.random.default_rng(config.seed)
    centroids = _kmeans_pp(x, k, rng)
    labels, d2 = nearest_centroid(x, centroids)
    inertia = float(d2.sum())
    history = [inertia]
    iters = 0
    for iters in range(1, config.max_iters + 1):
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=k)
        filled = counts > 0
        centroids[filled] = sums[filled] / counts[filled, None]
        if not filled.all():
            far = d2.copy()
            for j in np.flatnonzero(~filled):
                i = int(np.argmax(far))
                centroids[j] = x[i]
                far[i] = -1.0
            log.debug("k-means iter %d: re-seeded %d empty clusters", iters, int((~filled).sum()))
        labels, d2 = nearest_centroid(x, centroids)
        new = float(d2.sum())
        if new > inertia * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means inertia increased at iteration {iters}: {inertia} -> {new}")
        history.append(new)
        improvement = inertia - new
        inertia = new
        log.debug("k-means iter %d inertia %.6g", iters, inertia)
        if inertia == 0 or improvement < config.tol * max(history[-2], 1e-300):
            break
    return Codebook(centroids, iterations=iters, inertia=inertia, inertia_history=history)


def pool_frames(features: Iterable[FeatureMatrix], stride: int = 1) -> np.ndarray:
    """Stack every ``stride``-th frame of each utterance for codebook training."""
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    chunks = [f.frames[::stride] for f in features if f.num_frames]
    if not chunks:
        return np.zeros((0, 0))
    dims = {c.shape[1] for c in chunks}
    if len(dims) > 1:
        raise DimensionError(f"feature dimension varies across the corpus: {sorted(dims)}")
    return np.concatenate(chunks, axis=0)


def kmeans_assign(codebook: Codebook, features: FeatureMatrix) -> TokenSequence:
    frames = features.frames
    if frames.shape[0] == 0:
        if frames.ndim == 2 and frames.shape[1] not in (0, codebook.feat_dim):
            raise DimensionError(f"features {frames.shape} do not match codebook {codebook.centroids.shape}")
        return TokenSequence(features.utt_id, SPEECH, np.zeros(0, np.int64), codebook.k)
    labels, _ = nearest_centroid(frames, codebook.centroids)
    return TokenSequence(features.utt_id, SPEECH, labels, codebook.k)


def run_lengths(ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Values and lengths of the maximal runs of equal adjacent ids."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return ids.copy(), np.zeros(0, dtype=np.int64)
    starts = np.flatnonzero(np.concatenate(([True], ids[1:] != ids[:-1])))
    lengths = np.diff(np.append(starts, ids.size))
    return ids[starts], lengths


def run_length_reduce(seq: TokenSequence) -> TokenSequence:
    if seq.modality != SPEECH:
        raise ContractError("run-length reduction applies to speech tokens only")
    values, _ = run_lengths(seq.ids)
    return seq.replace(values)


@dataclass
class LengthStats:
    mean: float
    std: float
    histogram: dict[int, int]
    count: int


def estimate_token_length_stats(corpus: Sequence[TokenSequence]) -> LengthStats:
    if not corpus:
        raise ConfigError("length statistics need at least one sequence")
    lengths = np.array([len(s) for s in corpus], dtype=np.float64)
    values, counts = np.unique(lengths.astype(np.int64), return_counts=True)
    return LengthStats(float(lengths.mean()), float(lengths.std()),
                       {int(v): int(c) for v, c in zip(values, counts)}, len(corpus))
