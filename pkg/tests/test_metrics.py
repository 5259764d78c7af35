"""Metric definitions against brute-force counterparts."""

import numpy as np
import pytest

from fedcvu.errors import ConfigError
from fedcvu.metrics import (detect_convergence, retrieval_metrics, topk_accuracy)

from reference_impls import average_precision_ref


def test_topk_basic():
    logits = np.array([[0.1, 0.9, 0.0],
                       [0.8, 0.1, 0.1],
                       [0.3, 0.3, 0.4]])
    labels = np.array([1, 1, 2])
    assert topk_accuracy(logits, labels, 1) == pytest.approx(100.0 * 2 / 3)
    assert topk_accuracy(logits, labels, 2) == pytest.approx(100.0)
    assert topk_accuracy(logits, labels, 5) == pytest.approx(100.0)  # k clipped to K


def test_topk_tie_is_stable():
    # equal logits: argsort stable order prefers the lower class index
    logits = np.zeros((1, 3))
    assert topk_accuracy(logits, np.array([0]), 1) == 100.0
    assert topk_accuracy(logits, np.array([2]), 1) == 0.0


def test_topk_validation():
    with pytest.raises(ConfigError):
        topk_accuracy(np.zeros((2, 3)), np.zeros(2, dtype=int), 0)
    with pytest.raises(ConfigError):
        topk_accuracy(np.zeros((2, 3)), np.zeros(3, dtype=int), 1)


def test_retrieval_against_brute_force():
    rng = np.random.default_rng(21)
    q = rng.standard_normal((8, 6))
    g = rng.standard_normal((30, 6))
    qy = rng.integers(0, 4, size=8)
    gy = rng.integers(0, 4, size=30)
    mapp, cmc1 = retrieval_metrics(q, qy, g, gy)

    def unit(a):
        return a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)

    sims = unit(q) @ unit(g).T
    aps, firsts = [], []
    for i in range(8):
        order = np.argsort(-sims[i], kind="stable")
        rel = (gy[order] == qy[i]).astype(int).tolist()
        ap = average_precision_ref(rel)
        if ap is None:
            continue
        aps.append(ap)
        firsts.append(float(rel[0]))
    assert mapp == pytest.approx(100.0 * np.mean(aps), abs=1e-9)
    assert cmc1 == pytest.approx(100.0 * np.mean(firsts), abs=1e-9)


def test_retrieval_perfect_and_worst_case():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    g = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    qy = np.array([0, 1])
    gy = np.array([0, 1, 1])
    mapp, cmc1 = retrieval_metrics(q, qy, g, gy)
    # query 0: positive at rank 1 -> AP 1. query 1: positives at ranks 1, 3
    # -> AP (1 + 2/3)/2 = 5/6
    assert mapp == pytest.approx(100.0 * (1.0 + 5.0 / 6.0) / 2.0, abs=1e-9)
    assert cmc1 == pytest.approx(100.0)


def test_retrieval_skips_queries_without_positives():
    q = np.eye(2)
    g = np.array([[1.0, 0.0]])
    mapp, cmc1 = retrieval_metrics(q, np.array([0, 5]), g, np.array([0]))
    assert mapp == pytest.approx(100.0)
    with pytest.raises(ConfigError):
        retrieval_metrics(q, np.array([7, 8]), g, np.array([0]))


def test_convergence_detection():
    # climbs to 80, first window whose mean is within 1% of the best
    series = [10.0, 20.0, 79.0, 80.0, 80.0, 80.0, 80.0, 80.0]
    res = detect_convergence(series, window=3, rel_tol=0.01)
    # windows end at rounds 3..8 with means 36.3, 59.7, 79.7, 80, 80, 80;
    # best 80 -> threshold 79.2: first hit is the window ending at round 5
    assert res.r_star == 5
    assert res.best_smoothed == pytest.approx(80.0)


def test_convergence_short_series():
    res = detect_convergence([1.0, 2.0], window=5)
    assert res.r_star is None and res.best_smoothed is None


def test_convergence_flat_series():
    res = detect_convergence([50.0] * 6, window=3)
    assert res.r_star == 3  # the first full window already qualifies
