"""Geometry of the speech and text token embedding tables.

The mixing rate turns "the two modalities overlap more over training" into a
number: for every token, the share of its k nearest neighbours (cosine
distance, both vocabularies pooled) that belong to the other modality.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .model import JointModel
from .numeric import COSINE_NORM_FLOOR
from .sequence import SPEECH, TEXT


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), COSINE_NORM_FLOOR)


def mixing_rate(speech_rows: np.ndarray, text_rows: np.ndarray, k: int = 10) -> float:
    speech_rows = np.atleast_2d(np.asarray(speech_rows, dtype=np.float64))
    text_rows = np.atleast_2d(np.asarray(text_rows, dtype=np.float64))
    ns, nt = speech_rows.shape[0], text_rows.shape[0]
    if ns == 0 or nt == 0:
        raise ContractError("mixing rate needs tokens from both modalities")
    n = ns + nt
    if not 1 <= k < n:
        raise ConfigError(f"k must lie in [1, {n - 1}], got {k}")
    unit = _unit_rows(np.vstack([speech_rows, text_rows]))
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    neighbours = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    is_text = np.arange(n) >= ns
    other = is_text[neighbours] != is_text[:, None]
    return float(other.mean())


@dataclass
class Projection:
    coords: np.ndarray
    method: str
    components: np.ndarray | None = None
    explained_variance: np.ndarray | None = None


def _check_points(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ConfigError(f"projection needs at least 3 points, got shape {x.shape}")
    if np.allclose(x, x[0]):
        raise ContractError("all embeddings are identical; the projection is degenerate")
    return x


def pca_2d(x: np.ndarray) -> Projection:
    """Top-2 principal components; each axis is signed so its largest loading is positive."""
    x = _check_points(x)
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2].copy()
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros((2 - comps.shape[0], x.shape[1]))])
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    var = (s[:2] ** 2) / max(x.shape[0] - 1, 1)
    return Projection(centered @ comps.T, "pca", comps, var)


def tsne_2d(x: np.ndarray, seed: int = 0, perplexity: float = 30.0) -> Projection:
    from sklearn.manifold import TSNE

    x = _check_points(x)
    perplexity = min(perplexity, (x.shape[0] - 1) / 3.0)
    model = TSNE(n_components=2, method="exact", perplexity=perplexity, init="pca",
                 random_state=seed)
    return Projection(model.fit_transform(x), "tsne")


def project_2d(embeddings: np.ndarray, method: str = "pca", seed: int = 0) -> Projection:
    if method == "pca":
        return pca_2d(embeddings)
    if method == "tsne":
        return tsne_2d(embeddings, seed)
    raise ConfigError(f"unknown projection method {method!r}")


def token_tables(model: JointModel) -> tuple[np.ndarray, np.ndarray]:
    """Speech and text embedding rows without the mask-token rows."""
    cfg = model.config
    return (model["U"].data[:cfg.speech_vocab].astype(np.float64),
            model["V"].data[:cfg.text_vocab].astype(np.float64))


def _norm_summary(rows: np.ndarray) -> dict[str, float]:
    norms = np.linalg.norm(rows, axis=1)
    return {"mean": float(norms.mean()), "std": float(norms.std()),
            "min": float(norms.min()), "max": float(norms.max())}


@dataclass
class OverlapReport:
    step: int
    mixing_rate: float
    k: int
    method: str
    coords: np.ndarray
    labels: list[str]
    norms: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"step": self.step, "mixing_rate": self.mixing_rate, "k": self.k,
                "method": self.method, "norms": self.norms,
                "x": self.coords[:, 0].tolist(), "y": self.coords[:, 1].tolist(),
                "modality": self.labels}

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["token", "modality", "x", "y"])
            counts = {SPEECH: 0, TEXT: 0}
            for (x, y), label in zip(self.coords, self.labels):
                w.writerow([counts[label], label, repr(float(x)), repr(float(y))])
                counts[label] += 1


def overlap_report(model: JointModel, step: int = 0, k: int = 10, method: str = "pca",
                   seed: int = 0) -> OverlapReport:
    speech, text = token_tables(model)
    rate = mixing_rate(speech, text, k)
    proj = project_2d(np.vstack([speech, text]), method, seed)
    labels = [SPEECH] * len(speech) + [TEXT] * len(text)
    return OverlapReport(step, rate, k, method, proj.coords, labels,
                         {SPEECH: _norm_summary(speech), TEXT: _norm_summary(text)})
