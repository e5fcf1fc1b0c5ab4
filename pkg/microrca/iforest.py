"""
Isolation Forest for low-dimensional numeric samples.

Anomalies take fewer random splits to isolate, so their average path
length across the forest is short and their score s(x) = 2^(-E[h(x)]/c(psi))
is close to 1.
"""

import math
from dataclasses import dataclass
from typing import List, Sequence, Union

import numpy as np

from .error import DimensionMismatch, NonFiniteInput, TooFewSamples

EULER_GAMMA = 0.5772156649
MIN_SAMPLES = 8

Vector = Union[float, Sequence[float]]


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    subsample_size: int = 256
    contamination: float = 0.01
    rng_seed: int = 42

    def __post_init__(self) -> None:
        if self.n_trees < 1 or self.subsample_size < 1:
            raise ValueError("n_trees and subsample_size must be positive")
        if not 0 < self.contamination <= 0.5:
            raise ValueError(f"contamination must be in (0, 0.5], got {self.contamination}")

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "subsample_size": self.subsample_size,
            "contamination": self.contamination,
            "rng_seed": self.rng_seed,
        }


def average_path_length(n: np.ndarray) -> np.ndarray:
    """c(n): expected path length of an unsuccessful BST search among n points."""
    n = np.asarray(n, dtype=float)
    out = np.zeros_like(n)
    two = n == 2
    big = n > 2
    out[two] = 1.0
    m = n[big]
    out[big] = 2.0 * (np.log(m - 1.0) + EULER_GAMMA) - 2.0 * (m - 1.0) / m
    return out


@dataclass
class IsolationTree:
    """Array-backed tree. Leaves have left == right == -1."""
    split_dim: np.ndarray
    split_value: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray

    @classmethod
    def grow(cls, X: np.ndarray, height_limit: int, rng: np.random.Generator) -> "IsolationTree":
        dims, values, lefts, rights, sizes = [], [], [], [], []

        def new_node() -> int:
            dims.append(-1)
            values.append(0.0)
            lefts.append(-1)
            rights.append(-1)
            sizes.append(0)
            return len(dims) - 1

        def build(rows: np.ndarray, height: int) -> int:
            node = new_node()
            sizes[node] = len(rows)
            if height >= height_limit or len(rows) <= 1:
                return node
            dim = int(rng.integers(X.shape[1]))
            col = X[rows, dim]
            lo, hi = float(col.min()), float(col.max())
            if lo == hi:
                return node
            value = float(rng.uniform(lo, hi))
            dims[node] = dim
            values[node] = value
            mask = col < value
            lefts[node] = build(rows[mask], height + 1)
            rights[node] = build(rows[~mask], height + 1)
            return node

        build(np.arange(X.shape[0]), 0)
        return cls(
            split_dim=np.array(dims, dtype=np.int64),
            split_value=np.array(values, dtype=float),
            left=np.array(lefts, dtype=np.int64),
            right=np.array(rights, dtype=np.int64),
            size=np.array(sizes, dtype=np.int64),
        )

    def path_lengths(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        depth = np.zeros(X.shape[0], dtype=float)
        while True:
            active = np.nonzero(self.left[node] >= 0)[0]
            if active.size == 0:
                break
            current = node[active]
            go_left = X[active, self.split_dim[current]] < self.split_value[current]
            node[active] = np.where(go_left, self.left[current], self.right[current])
            depth[active] += 1.0
        return depth + average_path_length(self.size[node])

    def to_dict(self) -> dict:
        return {
            "split_dim": self.split_dim.tolist(),
            "split_value": self.split_value.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "size": self.size.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IsolationTree":
        return cls(
            split_dim=np.array(d["split_dim"], dtype=np.int64),
            split_value=np.array(d["split_value"], dtype=float),
            left=np.array(d["left"], dtype=np.int64),
            right=np.array(d["right"], dtype=np.int64),
            size=np.array(d["size"], dtype=np.int64),
        )


@dataclass
class ForestModel:
    params: ForestParams
    trees: List[IsolationTree]
    subsample_size: int
    score_threshold: float
    train_mean: List[float]

    @property
    def dimension(self) -> int:
        return len(self.train_mean)

    def score_samples(self, X: np.ndarray) -> np.ndarray:
        X = _as_matrix(X, self.dimension)
        total = np.zeros(X.shape[0], dtype=float)
        for tree in self.trees:
            total += tree.path_lengths(X)
        mean_path = total / len(self.trees)
        norm = float(average_path_length(np.array([self.subsample_size]))[0])
        if norm == 0.0:
            return np.full(X.shape[0], 1.0)
        return np.power(2.0, -mean_path / norm)

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "subsample_size": self.subsample_size,
            "score_threshold": self.score_threshold,
            "train_mean": list(self.train_mean),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        return cls(
            params=ForestParams(**d["params"]),
            trees=[IsolationTree.from_dict(t) for t in d["trees"]],
            subsample_size=int(d["subsample_size"]),
            score_threshold=float(d["score_threshold"]),
            train_mean=[float(v) for v in d["train_mean"]],
        )


def _as_matrix(samples, dimension: int = None) -> np.ndarray:
    rows = [np.atleast_1d(np.asarray(s, dtype=float)) for s in samples] \
        if not isinstance(samples, np.ndarray) else None
    if rows is not None:
        widths = {r.shape for r in rows}
        if len(widths) > 1:
            raise DimensionMismatch(f"Samples have mixed dimensions: {sorted(widths)}")
        X = np.vstack(rows) if rows else np.empty((0, dimension or 1))
    else:
        X = samples.reshape(-1, 1) if samples.ndim == 1 else samples
        X = X.astype(float)
    if X.ndim != 2:
        raise DimensionMismatch(f"Expected vectors, got an array of shape {X.shape}")
    if dimension is not None and X.shape[1] != dimension:
        raise DimensionMismatch(f"Expected dimension {dimension}, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteInput("Samples contain NaN or infinite values")
    return X


def fit(samples: Sequence[Vector], params: ForestParams = None) -> ForestModel:
    params = params or ForestParams()
    X = _as_matrix(samples)
    n = X.shape[0]
    if n < MIN_SAMPLES:
        raise TooFewSamples(f"Need at least {MIN_SAMPLES} samples, got {n}")

    rng = np.random.default_rng(params.rng_seed)
    psi = min(params.subsample_size, n)
    height_limit = math.ceil(math.log2(psi))
    trees = [
        IsolationTree.grow(X[rng.choice(n, size=psi, replace=False)], height_limit, rng)
        for _ in range(params.n_trees)
    ]
    model = ForestModel(
        params=params,
        trees=trees,
        subsample_size=psi,
        score_threshold=0.0,
        train_mean=X.mean(axis=0).tolist(),
    )
    scores = model.score_samples(X)
    model.score_threshold = float(np.quantile(scores, 1.0 - params.contamination))
    return model


def score(model: ForestModel, x: Vector) -> float:
    return float(model.score_samples([x])[0])


def predict(model: ForestModel, x: Vector) -> int:
    """-1 for anomalies, +1 otherwise. Ties with the threshold are normal."""
    return -1 if score(model, x) > model.score_threshold else 1


def predict_samples(model: ForestModel, X: Sequence[Vector]) -> np.ndarray:
    scores = model.score_samples(_as_matrix(X, model.dimension))
    return np.where(scores > model.score_threshold, -1, 1)
