"""Sparse TF-IDF vectors, cosine similarity, seeded k-means and a small
random-forest regressor.

All training and prediction here is deterministic under a fixed seed; the
test suite checks the numeric behaviour against independent brute-force
oracles, so keep the formulas exact:

    idf(t)    = ln((1 + N) / (1 + df(t))) + 1
    weight(t) = tf(t) * idf(t), then L2-normalized
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class EmptyCorpusError(ValueError):
    pass


class BadKError(ValueError):
    pass


class EmptyTrainingSetError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# TF-IDF
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VectorizerState:
    """Fitted vocabulary: term -> dense column id, plus smoothed IDF weights."""

    vocabulary: dict[str, int]
    idf: tuple[float, ...]
    doc_count: int


@dataclass(frozen=True)
class DocumentVector:
    """Sparse non-negative vector with a cached Euclidean norm."""

    weights: dict[int, float]
    norm: float

    @classmethod
    def from_weights(cls, weights: dict[int, float]) -> "DocumentVector":
        clean = {c: w for c, w in weights.items() if w != 0.0}
        return cls(clean, math.sqrt(sum(w * w for w in clean.values())))

    @property
    def is_zero(self) -> bool:
        return not self.weights


def fit_vocabulary(corpus: Sequence[Sequence[str]]) -> VectorizerState:
    """Fit a vocabulary and smoothed IDF over tokenized documents.

    Column ids are assigned in sorted term order so the fitted state does not
    depend on document order.
    """
    if len(corpus) == 0:
        raise EmptyCorpusError("cannot fit a vocabulary on an empty corpus")
    df: dict[str, int] = {}
    for doc in corpus:
        for term in set(doc):
            df[term] = df.get(term, 0) + 1
    vocabulary = {term: i for i, term in enumerate(sorted(df))}
    n = len(corpus)
    idf = [0.0] * len(vocabulary)
    for term, col in vocabulary.items():
        idf[col] = math.log((1 + n) / (1 + df[term])) + 1.0
    return VectorizerState(vocabulary, tuple(idf), n)


def vectorize(tokens: Sequence[str], state: VectorizerState) -> DocumentVector:
    """tf * idf over in-vocabulary terms, L2-normalized; OOV terms dropped.

    All-OOV (or empty) input yields the zero vector.
    """
    counts: dict[int, int] = {}
    for term in tokens:
        col = state.vocabulary.get(term)
        if col is not None:
            counts[col] = counts.get(col, 0) + 1
    if not counts:
        return DocumentVector({}, 0.0)
    weights = {col: tf * state.idf[col] for col, tf in counts.items()}
    norm = math.sqrt(sum(w * w for w in weights.values()))
    return DocumentVector({col: w / norm for col, w in weights.items()}, 1.0)


def cosine(a: DocumentVector, b: DocumentVector) -> float:
    """Cosine similarity in [0, 1]; 0 when either vector is zero."""
    if a.norm == 0.0 or b.norm == 0.0:
        return 0.0
    small, large = (a.weights, b.weights) if len(a.weights) <= len(b.weights) else (b.weights, a.weights)
    dot = sum(w * large[c] for c, w in small.items() if c in large)
    return min(1.0, max(0.0, dot / (a.norm * b.norm)))


# ---------------------------------------------------------------------------
# K-means
# ---------------------------------------------------------------------------


@dataclass
class Clustering:
    k: int
    centroids: np.ndarray  # shape (k, dim)
    assignment: dict[int, int]
    sse: float
    sse_history: list[float] = field(default_factory=list)


def _to_dense(vectors: Sequence[DocumentVector], dim: int | None = None) -> np.ndarray:
    if dim is None:
        dim = 0
        for v in vectors:
            if v.weights:
                dim = max(dim, max(v.weights) + 1)
        dim = max(dim, 1)
    x = np.zeros((len(vectors), dim))
    for i, v in enumerate(vectors):
        for col, w in v.weights.items():
            x[i, col] = w
    return x


def kmeans(
    vectors: Sequence[DocumentVector],
    k: int,
    seed: int = 0,
    max_iter: int = 100,
) -> Clustering:
    """Lloyd's algorithm with deterministic farthest-point initialization.

    The seed picks the first centroid; each further centroid is the point
    farthest from the chosen set (ties to the lowest index). Point-to-centroid
    ties break toward the lowest cluster id; an emptied cluster is re-seeded
    with the point currently farthest from its own centroid.
    """
    n = len(vectors)
    if not 1 <= k <= n:
        raise BadKError(f"k={k} out of range for {n} vectors")
    x = _to_dense(vectors)

    rng = random.Random(seed)
    chosen = [rng.randrange(n)]
    min_d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(min_d2))
        chosen.append(nxt)
        min_d2 = np.minimum(min_d2, ((x - x[nxt]) ** 2).sum(axis=1))
    centroids = x[chosen].copy()

    x_sq = (x * x).sum(axis=1)

    def distances(cents: np.ndarray) -> np.ndarray:
        # (n, k) squared Euclidean distances via the dot-product expansion
        d2 = x_sq[:, None] + (cents * cents).sum(axis=1)[None, :] - 2.0 * (x @ cents.T)
        return np.maximum(d2, 0.0)

    labels = np.full(n, -1)
    history: list[float] = []
    for it in range(max_iter):
        d2 = distances(centroids)
        new_labels = d2.argmin(axis=1)  # argmin takes the first (lowest id) on ties
        history.append(float(d2[np.arange(n), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        if it == max_iter - 1:
            break
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
        # Re-seed clusters that lost every member.
        for j in range(k):
            if (labels == j).any():
                continue
            point_d2 = ((x - centroids[labels]) ** 2).sum(axis=1)
            far = int(np.argmax(point_d2))
            centroids[j] = x[far]
            labels[far] = j

    d2 = distances(centroids)
    labels = d2.argmin(axis=1)
    sse = float(d2[np.arange(n), labels].sum())
    return Clustering(
        k=k,
        centroids=centroids,
        assignment={i: int(labels[i]) for i in range(n)},
        sse=sse,
        sse_history=history,
    )


def nearest_centroid(vector: DocumentVector, clustering: Clustering) -> int:
    """Cluster id whose centroid is Euclidean-closest to `vector`."""
    q = _to_dense([vector], dim=clustering.centroids.shape[1])[0]
    d2 = ((clustering.centroids - q) ** 2).sum(axis=1)
    return int(np.argmin(d2))


# ---------------------------------------------------------------------------
# Decision-forest regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 32
    max_depth: int = 6
    min_leaf: int = 2
    seed: int = 0
    # feature-subset size per split; None means ceil(sqrt(dim))
    n_features: int | None = None


@dataclass
class _TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "_TreeNode | None" = None
    right: "_TreeNode | None" = None
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class ForestModel:
    trees: list[_TreeNode]
    params: ForestParams
    dim: int

    def predict(self, row: Sequence[float]) -> float:
        return forest_predict(self, row)


def _best_split(x: np.ndarray, y: np.ndarray, features: list[int], min_leaf: int):
    """Split (feature, threshold) maximizing variance reduction, or None."""
    n = len(y)
    total_sum = y.sum()
    total_sq = (y * y).sum()
    parent_sse = total_sq - total_sum * total_sum / n
    best = None
    best_gain = 1e-12  # require strictly positive reduction
    for f in features:
        order = np.argsort(x[:, f], kind="stable")
        xf = x[order, f]
        ys = y[order]
        csum = np.cumsum(ys)
        csq = np.cumsum(ys * ys)
        for i in range(min_leaf, n - min_leaf + 1):  # i = left-side size
            if xf[i - 1] == xf[i]:
                continue  # cannot separate equal values
            left_sse = csq[i - 1] - csum[i - 1] ** 2 / i
            right_sum = total_sum - csum[i - 1]
            right_sse = (total_sq - csq[i - 1]) - right_sum**2 / (n - i)
            gain = parent_sse - left_sse - right_sse
            if gain > best_gain:
                best_gain = gain
                best = (f, (xf[i - 1] + xf[i]) / 2.0)
    return best


def _grow(x: np.ndarray, y: np.ndarray, depth: int, params: ForestParams, rng: random.Random, m: int) -> _TreeNode:
    node = _TreeNode(value=float(y.mean()))
    min_leaf = max(1, params.min_leaf)
    if depth >= params.max_depth or len(y) < 2 * min_leaf or np.ptp(y) == 0.0:
        return node
    features = sorted(rng.sample(range(x.shape[1]), m))
    split = _best_split(x, y, features, min_leaf)
    if split is None:
        return node
    f, thr = split
    mask = x[:, f] <= thr
    node.feature, node.threshold = f, thr
    node.left = _grow(x[mask], y[mask], depth + 1, params, rng, m)
    node.right = _grow(x[~mask], y[~mask], depth + 1, params, rng, m)
    return node


def forest_fit(
    rows: Sequence[Sequence[float]],
    targets: Sequence[float],
    params: ForestParams = ForestParams(),
) -> ForestModel:
    """Train `params.n_trees` regression trees on seeded bootstrap samples.

    Splits maximize variance reduction over a seeded random feature subset;
    leaves store the mean of their training targets.
    """
    if len(rows) == 0:
        raise EmptyTrainingSetError("forest_fit needs at least one row")
    if len(rows) != len(targets):
        raise DimensionMismatchError(f"{len(rows)} rows but {len(targets)} targets")
    dim = len(rows[0])
    if dim == 0:
        raise DimensionMismatchError("rows must have at least one feature")
    if any(len(r) != dim for r in rows):
        raise DimensionMismatchError("rows have unequal lengths")
    x = np.asarray(rows, dtype=float)
    y = np.asarray(targets, dtype=float)
    n = len(y)
    m = params.n_features if params.n_features is not None else math.isqrt(dim - 1) + 1
    m = min(max(m, 1), dim)

    seeder = random.Random(params.seed)
    tree_seeds = [seeder.randrange(2**32) for _ in range(params.n_trees)]
    trees = []
    for ts in tree_seeds:
        rng = random.Random(ts)
        idx = [rng.randrange(n) for _ in range(n)]
        trees.append(_grow(x[idx], y[idx], 0, params, rng, m))
    return ForestModel(trees=trees, params=params, dim=dim)


def forest_predict(model: ForestModel, row: Sequence[float]) -> float:
    """Mean of the per-tree leaf predictions."""
    if len(row) != model.dim:
        raise DimensionMismatchError(f"row has {len(row)} features, model expects {model.dim}")
    total = 0.0
    for tree in model.trees:
        node = tree
        while not node.is_leaf:
            node = node.left if row[node.feature] <= node.threshold else node.right
        total += node.value
    return total / len(model.trees)
