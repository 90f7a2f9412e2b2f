"""Latent-quality evaluation: kNN classification under k-fold cross
validation, plus accuracy, confusion matrices, and the adjusted Rand index.

Tie rules are fixed so every result is deterministic: distance ties resolve
toward the smaller training index, majority-vote ties toward the earlier
label in the vocabulary, and fold assignment comes from one seeded shuffle
split into contiguous near-equal chunks.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass
class LabeledEmbedding:
    codes: np.ndarray
    labels: list
    vocab: list = None

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        self.labels = list(self.labels)
        if self.codes.ndim != 2 or self.codes.shape[0] != len(self.labels):
            raise DataError("codes/labels size mismatch")
        if self.vocab is None:
            self.vocab = sorted(set(self.labels))
        else:
            self.vocab = list(self.vocab)
        missing = set(self.labels) - set(self.vocab)
        if missing:
            raise DataError(f"labels outside vocabulary: {sorted(missing)[:5]}")

    @property
    def n(self):
        return len(self.labels)


@dataclass
class CvReport:
    fold_accuracies: list
    mean: float
    std: float
    confusion: np.ndarray
    k: int
    folds: int
    vocab: list
    warnings: list = field(default_factory=list)
    oof_predictions: list = field(default_factory=list)  # out-of-fold label per index


def accuracy(y, y_hat) -> float:
    """Fraction of exact matches: (1/n) * sum of [y_hat_i == y_i]."""
    y = list(y)
    y_hat = list(y_hat)
    if len(y) != len(y_hat):
        raise DataError(f"length mismatch: {len(y)} vs {len(y_hat)}")
    if not y:
        raise DataError("empty input")
    return sum(1 for a, b in zip(y, y_hat) if a == b) / len(y)


def confusion_matrix(y, y_hat, vocab) -> np.ndarray:
    """Counts[i, j] = number of true class vocab[i] predicted as vocab[j]."""
    index = {label: i for i, label in enumerate(vocab)}
    out = np.zeros((len(vocab), len(vocab)), dtype=np.int64)
    for a, b in zip(y, y_hat):
        if a not in index or b not in index:
            raise DataError(f"label outside vocabulary: {a!r} or {b!r}")
        out[index[a], index[b]] += 1
    return out


def knn_predict(train: LabeledEmbedding, queries, k: int) -> list:
    """Majority label among the k nearest training rows (euclidean).

    dist(x, y) = sqrt(sum_i (x_i - y_i)^2); distance ties prefer the smaller
    training index, vote ties the earlier vocabulary label.
    """
    if k <= 0:
        raise DataError("k must be positive")
    if k > train.n:
        raise DataError(f"k={k} exceeds training size {train.n}")
    queries = np.asarray(queries, dtype=np.float64)
    d2 = ((queries[:, None, :] - train.codes[None, :, :]) ** 2).sum(axis=2)
    vocab_index = {label: i for i, label in enumerate(train.vocab)}
    train_idx = np.arange(train.n)
    out = []
    for row in d2:
        order = np.lexsort((train_idx, row))[:k]
        counts = np.zeros(len(train.vocab), dtype=np.int64)
        for j in order:
            counts[vocab_index[train.labels[j]]] += 1
        out.append(train.vocab[int(np.argmax(counts))])  # argmax takes the first max
    return out


def _fold_slices(n, folds, seed):
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(order, folds)]


def kfold_cv(e: LabeledEmbedding, k_neighbors: int, folds: int = 4, seed: int = 0,
             fold_indices=None) -> CvReport:
    """Seeded shuffle into ``folds`` near-equal groups; each group tested once.

    A class absent from some training split is recorded as a warning and the
    fold is still scored.
    """
    if folds < 2:
        raise DataError("folds must be >= 2")
    if e.n < folds:
        raise DataError(f"n={e.n} smaller than folds={folds}")
    if fold_indices is None:
        fold_indices = _fold_slices(e.n, folds, seed)
    accs, warnings = [], []
    oof = [None] * e.n
    confusion = np.zeros((len(e.vocab), len(e.vocab)), dtype=np.int64)
    for f, test_idx in enumerate(fold_indices):
        train_mask = np.ones(e.n, dtype=bool)
        train_mask[test_idx] = False
        train_idx = np.flatnonzero(train_mask)
        train = LabeledEmbedding(e.codes[train_idx], [e.labels[i] for i in train_idx],
                                 vocab=e.vocab)
        absent = set(e.vocab) - set(train.labels)
        if absent:
            warnings.append(f"fold {f}: classes absent from training split: {sorted(absent)}")
        y_true = [e.labels[i] for i in test_idx]
        y_hat = knn_predict(train, e.codes[test_idx], min(k_neighbors, train.n))
        for i, pred in zip(test_idx, y_hat):
            oof[i] = pred
        accs.append(accuracy(y_true, y_hat))
        confusion += confusion_matrix(y_true, y_hat, e.vocab)
    return CvReport(fold_accuracies=accs, mean=float(np.mean(accs)), std=float(np.std(accs)),
                    confusion=confusion, k=k_neighbors, folds=folds, vocab=list(e.vocab),
                    warnings=warnings, oof_predictions=oof)


def sweep_k(e: LabeledEmbedding, k_values, folds: int = 4, seed: int = 0) -> list:
    """kfold_cv per k, reusing one fold split so the runs are comparable."""
    k_values = list(k_values)
    if not k_values:
        raise DataError("empty k list")
    fold_indices = _fold_slices(e.n, folds, seed)
    return [(k, kfold_cv(e, k, folds=folds, seed=seed, fold_indices=fold_indices))
            for k in k_values]


def default_k_values(n_classes: int) -> list:
    """Small sweep around the class count (the usual accuracy peak)."""
    ks = sorted({1, 3, 5, n_classes, 2 * n_classes + 1})
    return [k for k in ks if k >= 1]


def holdout_accuracy(e: LabeledEmbedding, k_neighbors: int, fraction: float = 0.25,
                     seed: int = 0) -> float:
    """Single split: train on (1-fraction), test on fraction."""
    if not 0.0 < fraction < 1.0:
        raise DataError("holdout fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(e.n)
    n_test = max(1, int(round(e.n * fraction)))
    test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
    train = LabeledEmbedding(e.codes[train_idx], [e.labels[i] for i in train_idx], vocab=e.vocab)
    y_hat = knn_predict(train, e.codes[test_idx], min(k_neighbors, train.n))
    return accuracy([e.labels[i] for i in test_idx], y_hat)


def ari(a, b) -> float:
    """Adjusted Rand index via the pair-counting contingency formula.

    In the degenerate case where the maximum index equals the expected index
    (both partitions all-singletons or both one cluster), returns 1.0 when
    the partitions are identical and 0.0 otherwise.
    """
    a = list(a)
    b = list(b)
    if len(a) != len(b):
        raise DataError(f"length mismatch: {len(a)} vs {len(b)}")
    n = len(a)
    if n == 0:
        raise DataError("empty labelings")
    contingency = {}
    counts_a, counts_b = {}, {}
    for x, y in zip(a, b):
        contingency[(x, y)] = contingency.get((x, y), 0) + 1
        counts_a[x] = counts_a.get(x, 0) + 1
        counts_b[y] = counts_b.get(y, 0) + 1
    index = sum(math.comb(c, 2) for c in contingency.values())
    sum_a = sum(math.comb(c, 2) for c in counts_a.values())
    sum_b = sum(math.comb(c, 2) for c in counts_b.values())
    total_pairs = math.comb(n, 2)
    if total_pairs == 0:
        return 1.0 if _same_partition(a, b) else 0.0
    expected = sum_a * sum_b / total_pairs
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        return 1.0 if _same_partition(a, b) else 0.0
    return (index - expected) / (max_index - expected)


def _same_partition(a, b):
    """True when the two labelings induce the same partition (up to renaming)."""
    return _canonical(a) == _canonical(b)


def _canonical(labels):
    seen = {}
    out = []
    for x in labels:
        if x not in seen:
            seen[x] = len(seen)
        out.append(seen[x])
    return out
