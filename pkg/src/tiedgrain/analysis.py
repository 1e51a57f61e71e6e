"""Representation analysis: linear CKA heatmaps and linear probing."""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .model import Network, forward, softmax_cross_entropy

log = logging.getLogger(__name__)


class UndefinedSimilarityError(NumericError):
    """CKA is undefined when one representation is constant across examples."""


def gram(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    X = X.reshape(X.shape[0], -1)
    return X @ X.T


def center_gram(K) -> np.ndarray:
    """``H K H`` with ``H = I - 11^T / m``."""
    K = np.asarray(K, dtype=np.float64)
    m = K.shape[0]
    H = np.eye(m) - np.full((m, m), 1.0 / m)
    return H @ K @ H


def linear_hsic(K, L) -> float:
    """vec(HKH) . vec(HLH) / (m - 1)^2 for two m x m Gram matrices."""
    K = np.asarray(K, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if K.shape != L.shape or K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise DimensionError(f"Gram matrices must be square and equal-sized, got {K.shape}, {L.shape}")
    m = K.shape[0]
    if m < 2:
        raise DimensionError("HSIC needs at least 2 examples")
    return float(np.sum(center_gram(K) * center_gram(L)) / (m - 1) ** 2)


def _cka_from_centered(Kc, Lc, what="representation"):
    kl = np.sum(Kc * Lc)
    kk = np.sum(Kc * Kc)
    ll = np.sum(Lc * Lc)
    if kk <= 0.0 or ll <= 0.0:
        raise UndefinedSimilarityError(f"{what} is constant across examples; CKA undefined")
    return float(min(max(kl / np.sqrt(kk * ll), 0.0), 1.0))


def _degenerate(Kc, K):
    # centering a constant representation leaves only rounding noise
    return np.sum(Kc * Kc) <= 1e-24 * max(np.sum(K * K), 1e-300)


def linear_cka(X, Y) -> float:
    """Linear CKA between two (m, ...) activation arrays."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] != Y.shape[0]:
        raise DimensionError(f"example counts differ: {X.shape[0]} vs {Y.shape[0]}")
    if X.shape[0] < 3:
        raise DimensionError("linear CKA needs at least 3 examples")
    K, L = gram(X), gram(Y)
    Kc, Lc = center_gram(K), center_gram(L)
    if _degenerate(Kc, K) or _degenerate(Lc, L):
        raise UndefinedSimilarityError("constant activations; CKA undefined")
    return _cka_from_centered(Kc, Lc)


@dataclass
class CKAHeatmap:
    values: np.ndarray
    labels: list

    def mean_offdiag(self, select=None) -> float:
        """Mean of off-diagonal cells among the labels accepted by ``select``."""
        idx = [i for i, lab in enumerate(self.labels) if select is None or select(lab)]
        sub = self.values[np.ix_(idx, idx)]
        off = ~np.eye(len(idx), dtype=bool)
        return float(np.nanmean(sub[off]))

    def tied_mean_offdiag(self) -> float:
        return self.mean_offdiag(lambda lab: lab.startswith("tied"))


def _threads() -> int:
    try:
        return max(0, int(os.environ.get("TIEDGRAIN_THREADS", "0")))
    except ValueError:
        return 0


def heatmap_from_activations(activations, labels) -> CKAHeatmap:
    m = activations[0].shape[0]
    if m < 32:
        warnings.warn(f"CKA on only {m} examples is noisy; use at least 32", stacklevel=2)
    grams = [gram(a) for a in activations]
    centered = [center_gram(k) for k in grams]
    bad = [_degenerate(c, k) for c, k in zip(centered, grams)]
    p = len(activations)
    values = np.full((p, p), np.nan)

    def cell(ij):
        i, j = ij
        if bad[i] or bad[j]:
            return ij, np.nan
        return ij, _cka_from_centered(centered[i], centered[j])

    pairs = [(i, j) for i in range(p) for j in range(i, p)]
    threads = _threads()
    if threads:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(cell, pairs))
    else:
        results = [cell(ij) for ij in pairs]
    for (i, j), v in results:
        values[i, j] = values[j, i] = v
    for i, flag in enumerate(bad):
        if flag:
            log.warning("layer %s has constant activations; CKA cells left missing", labels[i])
    return CKAHeatmap(values, list(labels))


def cka_heatmap(net: Network, batch, layers=None) -> CKAHeatmap:
    """Pairwise linear CKA over traced layer outputs of ``net`` on ``batch``.

    ``layers`` optionally restricts to a list of trace labels
    (``stem``, ``tied1``..``tiedK``, ``head``).
    """
    _, tr = forward(net, batch, trace=True)
    labels, acts = tr.labels, tr.activations
    if layers is not None:
        missing = set(layers) - set(labels)
        if missing:
            raise ConfigError(f"unknown layers {sorted(missing)}; have {labels}")
        keep = [i for i, lab in enumerate(labels) if lab in layers]
        labels = [labels[i] for i in keep]
        acts = [acts[i] for i in keep]
    return heatmap_from_activations(acts, labels)


# -- linear probing --------------------------------------------------------


def linear_probe(train_x, train_y, test_x, test_y, epochs=100, lr=0.1) -> float:
    """Fit a softmax classifier on frozen features; return test accuracy.

    Features are flattened and standardised with training statistics, then
    trained by full-batch gradient descent from zero weights.
    """
    train_x = np.asarray(train_x, dtype=np.float64).reshape(len(train_x), -1)
    test_x = np.asarray(test_x, dtype=np.float64).reshape(len(test_x), -1)
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    if np.unique(train_y).size < 2:
        raise ConfigError("linear probe needs at least two classes in the training labels")
    classes = int(max(train_y.max(), test_y.max())) + 1
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0)
    sd[sd == 0] = 1.0
    a = (train_x - mu) / sd
    b = (test_x - mu) / sd
    W = np.zeros((a.shape[1], classes))
    c = np.zeros(classes)
    for _ in range(epochs):
        _, d = softmax_cross_entropy(a @ W + c, train_y)
        W -= lr * (a.T @ d)
        c -= lr * d.sum(axis=0)
    return float(np.mean(np.argmax(b @ W + c, axis=1) == test_y))


@dataclass
class ProbeResult:
    accuracies: list
    layers: list


def probe_tied_layers(net: Network, train_x, train_y, test_x, test_y, epochs=100, lr=0.1):
    """Linear-probe accuracy after each tied layer (the backbone is untouched)."""
    _, tr_train = forward(net, train_x, trace=True)
    _, tr_test = forward(net, test_x, trace=True)
    accs = []
    for k, (a, b) in enumerate(zip(tr_train.tied.outputs, tr_test.tied.outputs)):
        accs.append(linear_probe(a, train_y, b, test_y, epochs, lr))
    return ProbeResult(accs, list(range(1, len(accs) + 1)))
