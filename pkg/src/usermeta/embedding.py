"""Adapted user embeddings: collection, 2-D projection and cluster separation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import Samples
from .learners import EmbeddingLearner, Learner

log = logging.getLogger(__name__)


@dataclass
class EmbeddingRecord:
    user_id: int
    batch: int
    phi: np.ndarray
    point: np.ndarray | None = None


def collect_embeddings(learner: Learner, meta: Mapping[int, Samples], batches_per_user: int, batch_size: int,
                       seed: int) -> list[EmbeddingRecord]:
    """Initialize and adapt one embedding per sampled batch of every user."""
    if not isinstance(learner, EmbeddingLearner):
        raise TypeError(f"{learner.kind} has no user embedding")
    before = learner.snapshot()
    records = []
    for uid in sorted(meta):
        data = meta[uid]
        for b in range(batches_per_user):
            rng = np.random.default_rng([seed, uid, b])
            idx = rng.choice(len(data), size=batch_size, replace=len(data) < batch_size)
            _, phi = learner.adapted_embedding(data.take(idx))
            if not phi.is_finite():
                raise FloatingPointError(f"non-finite embedding for user {uid}, batch {b}")
            records.append(EmbeddingRecord(int(uid), b, phi.data.copy()))
    for k, v in learner.snapshot().items():
        assert v.tobytes() == before[k].tobytes(), f"embedding collection mutated theta[{k}]"
    return records


# -- projection -------------------------------------------------------------------------

def pca(x: np.ndarray, n_components: int = 2) -> np.ndarray:
    """Scores on the leading principal components, signs fixed so each axis's largest loading is positive."""
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        raise ValueError("pca needs at least 2 points")
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:n_components]
    signs = np.sign(comps[np.arange(len(comps)), np.argmax(np.abs(comps), axis=1)])
    comps = comps * signs[:, None]
    out = centered @ comps.T
    if out.shape[1] < n_components:  # fewer points/dims than requested components
        out = np.hstack([out, np.zeros((len(out), n_components - out.shape[1]))])
    return out


def _row_affinities(d2: np.ndarray, perplexity: float, tol: float = 1e-10, max_iter: int = 200):
    """Binary search on the Gaussian precision so each row's entropy is log(perplexity)."""
    n = len(d2)
    target = np.log(perplexity)
    P = np.zeros((n, n))
    betas = np.ones(n)
    for i in range(n):
        d = np.delete(d2[i], i)
        d = d - d.min()  # shift for stability; does not change the normalized row
        lo, hi, beta = 0.0, np.inf, 1.0
        for _ in range(max_iter):
            p = np.exp(-d * beta)
            s = p.sum()
            p /= s
            H = beta * float(d @ p) + np.log(s)
            if abs(H - target) < tol:
                break
            if H > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        P[i, np.arange(n) != i] = p
        betas[i] = beta
    return P, betas


def tsne_affinities(x: np.ndarray, perplexity: float = 30.0) -> tuple[np.ndarray, np.ndarray]:
    """Conditional affinities p_{j|i} (rows sum to 1) and the per-row Gaussian precisions."""
    x = np.asarray(x, dtype=float)
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0)
    return _row_affinities(d2, perplexity)


def row_perplexity(P: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        H = -np.sum(np.where(P > 0, P * np.log(P), 0.0), axis=1)
    return np.exp(H)


def tsne(x: np.ndarray, perplexity: float = 30.0, n_iter: int = 1000, learning_rate: float = 200.0,
         early_exaggeration: float = 12.0, exaggeration_iters: int = 250, seed: int = 0) -> np.ndarray:
    """Exact t-SNE with momentum and adaptive gains."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 3:
        raise ValueError("t-SNE needs at least 3 points")
    if np.allclose(x, x[0]):
        raise ValueError("t-SNE input points are all identical")
    perplexity = min(perplexity, (n - 1) / 3)
    P, _ = tsne_affinities(x, perplexity)
    P = (P + P.T) / (2 * n)
    P = np.maximum(P, 1e-12)
    rng = np.random.default_rng(seed)
    Y = rng.normal(0, 1e-4, (n, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    for it in range(n_iter):
        exag = early_exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < exaggeration_iters else 0.8
        sq = np.sum(Y * Y, axis=1)
        num = 1.0 / (1.0 + sq[:, None] + sq[None, :] - 2 * Y @ Y.T)
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (exag * P - Q) * num
        grad = 4 * (np.diag(W.sum(axis=1)) - W) @ Y
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        update = momentum * update - learning_rate * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
    return Y


def project(records: list[EmbeddingRecord], method: str = "tsne", seed: int = 0, **params) -> np.ndarray:
    x = np.stack([r.phi for r in records])
    if method == "pca":
        pts = pca(x)
    elif method == "tsne":
        pts = tsne(x, seed=seed, **params)
    else:
        raise ValueError(f"unknown projection {method!r}")
    for r, p in zip(records, pts):
        r.point = p
    return pts


# -- cluster separation ----------------------------------------------------------------

def silhouette(points: np.ndarray, labels) -> float:
    """Mean silhouette coefficient; points in singleton clusters score 0."""
    x = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least 2 labels")
    d = np.sqrt(np.maximum(np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1), 0.0))
    scores = np.zeros(len(x))
    for i in range(len(x)):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = d[i, own].sum() / (own.sum() - 1)
        b = min(d[i, labels == c].mean() for c in uniq if c != labels[i])
        m = max(a, b)
        scores[i] = 0.0 if m == 0 else (b - a) / m
    return float(scores.mean())


# -- files ------------------------------------------------------------------------------

def write_embeddings(path, records: list[EmbeddingRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        S = len(records[0].phi) if records else 0
        w.writerow(["user_id", "batch"] + [f"phi{i}" for i in range(S)])
        for r in records:
            w.writerow([r.user_id, r.batch, *(repr(float(v)) for v in r.phi)])


def read_embeddings(path) -> list[EmbeddingRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [EmbeddingRecord(int(r[0]), int(r[1]), np.array([float(v) for v in r[2:]])) for r in rows[1:]]


def write_points(path, records: list[EmbeddingRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "batch", "px", "py"])
        for r in records:
            if r.point is None:
                raise ValueError("record has no projection")
            w.writerow([r.user_id, r.batch, repr(float(r.point[0])), repr(float(r.point[1]))])
