"""Evaluation metrics: top-k accuracy, retrieval quality over cosine
similarity, and a convergence-round detector for metric series.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

_TINY = 1e-12


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Percentage of samples whose label is among the k highest logits."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ConfigError("logits must be (B, K) with matching labels")
    k = min(k, logits.shape[1])
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    hit = (top == labels[:, None]).any(axis=1)
    return float(100.0 * hit.mean())


def cosine_similarity_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), _TINY)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), _TINY)
    return an @ bn.T


def retrieval_metrics(query_emb: np.ndarray, query_labels: np.ndarray,
                      gallery_emb: np.ndarray, gallery_labels: np.ndarray) -> tuple[float, float]:
    """(mAP, CMC at rank 1), both in percent, under cosine similarity.

    Per query the gallery is ranked by descending similarity (stable order
    on ties); AP is the mean of precision-at-k over the positive ranks.
    Queries without any positive in the gallery are skipped.
    """
    if query_emb.shape[0] == 0 or gallery_emb.shape[0] == 0:
        raise ConfigError("retrieval needs non-empty query and gallery sets")
    sims = cosine_similarity_matrix(query_emb, gallery_emb)
    aps = []
    first_hits = []
    for i in range(sims.shape[0]):
        order = np.argsort(-sims[i], kind="stable")
        matches = (gallery_labels[order] == query_labels[i])
        n_rel = int(matches.sum())
        if n_rel == 0:
            continue
        ranks = np.flatnonzero(matches)
        precision_at = (np.arange(1, n_rel + 1)) / (ranks + 1)
        aps.append(precision_at.mean())
        first_hits.append(1.0 if matches[0] else 0.0)
    if not aps:
        raise ConfigError("no query has a positive gallery sample")
    return float(100.0 * np.mean(aps)), float(100.0 * np.mean(first_hits))


@dataclass(frozen=True)
class ConvergenceResult:
    r_star: int | None
    best_smoothed: float | None
    window: int


def detect_convergence(series: list[float], window: int = 5,
                       rel_tol: float = 0.01) -> ConvergenceResult:
    """First round (1-based) whose trailing-window moving average reaches
    (1 - rel_tol) of the best moving average over the series. Series
    shorter than the window have no defined answer."""
    if window < 1:
        raise ConfigError("window must be >= 1")
    n = len(series)
    if n < window:
        return ConvergenceResult(None, None, window)
    arr = np.asarray(series, dtype=np.float64)
    smoothed = np.convolve(arr, np.ones(window) / window, mode="valid")
    best = float(smoothed.max())
    threshold = (1.0 - rel_tol) * best
    hits = np.flatnonzero(smoothed >= threshold)
    # The best point itself always qualifies for non-negative series; for
    # a negative-valued series fall back to the argmax position.
    idx = int(hits[0]) if hits.size else int(np.argmax(smoothed))
    return ConvergenceResult(idx + window, best, window)
