"""Lloyd's k-means with k-means++ seeding.

Used twice in the pipeline: discretizing GPS fixes into regions, and
grouping users into prototypes.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

# upper bound on chunk * k * dim elements held in memory during assignment
_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True, eq=False)
class ClusterModel:
    centroids: np.ndarray
    inertia: float = 0.0
    trace: tuple = field(default=(), compare=False)
    n_iter: int = field(default=0, compare=False)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def to_json(self) -> str:
        rows = ",".join(
            "[" + ",".join(format(float(v), ".17g") for v in row) + "]"
            for row in self.centroids
        )
        return (
            f'{{"k":{self.k},"dim":{self.dim},'
            f'"inertia":{format(float(self.inertia), ".17g")},"centroids":[{rows}]}}'
        )

    @classmethod
    def from_dict(cls, doc: dict) -> "ClusterModel":
        cents = np.asarray(doc["centroids"], dtype=np.float64)
        if cents.ndim != 2 or cents.shape[0] != doc["k"] or cents.shape[1] != doc["dim"]:
            raise InputError("centroid array does not match declared k/dim")
        return cls(cents, float(doc.get("inertia", 0.0)))

    @classmethod
    def from_json(cls, text: str) -> "ClusterModel":
        return cls.from_dict(json.loads(text))


def _as_points(points) -> np.ndarray:
    try:
        X = np.asarray(points, dtype=np.float64)
    except ValueError as exc:  # ragged input
        raise InputError("points must share one dimension") from exc
    if X.ndim != 2:
        raise InputError("points must be a non-empty list of equal-length vectors")
    if X.shape[0] == 0:
        raise InputError("points must be non-empty")
    return X


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _nearest(X, C, threads=1):
    """Index of and squared distance to the nearest centroid, lowest index on ties."""
    n = X.shape[0]
    step = max(1, _CHUNK_ELEMS // max(1, C.shape[0] * C.shape[1]))
    bounds = [(s, min(n, s + step)) for s in range(0, n, step)]

    def work(b):
        d = _sq_dists(X[b[0]:b[1]], C)
        idx = np.argmin(d, axis=1)
        return idx, d[np.arange(len(idx)), idx]

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _kmeanspp(X, k, rng):
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(X, X[chosen[0]][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # every point coincides with a chosen centre
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest)) if len(rest) else int(rng.integers(n))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(X, X[idx][None, :])[:, 0])
    return X[chosen].copy()


def _means(X, labels, k):
    sums = np.zeros((k, X.shape[1]))
    np.add.at(sums, labels, X)
    counts = np.bincount(labels, minlength=k)
    return sums, counts


def _repair_empty(X, labels, k):
    """Give every empty cluster the point farthest from its current centroid."""
    sums, counts = _means(X, labels, k)
    for j in np.flatnonzero(counts == 0):
        safe = np.maximum(counts, 1)[:, None]
        cents = sums / safe
        d = np.einsum("nd,nd->n", X - cents[labels], X - cents[labels])
        d[counts[labels] <= 1] = -1.0
        i = int(np.argmax(d))
        old = labels[i]
        labels[i] = j
        sums[old] -= X[i]
        counts[old] -= 1
        sums[j] += X[i]
        counts[j] += 1
    return sums / counts[:, None]


def fit(points, k: int, max_iter: int = 100, tol: float = 1e-6, seed: int = 0,
        threads: int = 1, n_init: int = 1) -> ClusterModel:
    """Cluster ``points`` into k groups.

    With ``n_init > 1`` the run is restarted from independent seedings and the
    lowest-inertia result is kept (earliest restart on ties). Restart 0 always
    uses ``seed`` directly, so ``n_init=1`` is the plain single run.
    """
    X = _as_points(points)
    if k <= 0:
        raise InputError("k must be positive")
    if k > X.shape[0]:
        raise InputError(f"k={k} exceeds number of points ({X.shape[0]})")
    if max_iter <= 0:
        raise InputError("max_iter must be positive")
    if n_init <= 0:
        raise InputError("n_init must be positive")
    best = None
    for r in range(n_init):
        rng = np.random.default_rng(seed if r == 0 else [seed, r])
        model = _lloyd(X, k, max_iter, tol, rng, threads)
        if best is None or model.inertia < best.inertia:
            best = model
    return best


def _lloyd(X, k, max_iter, tol, rng, threads) -> ClusterModel:
    C = _kmeanspp(X, k, rng)
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        labels, d = _nearest(X, C, threads)
        trace.append(float(d.sum()))
        new_c = _repair_empty(X, labels.copy(), k)
        shift = float(np.sqrt(np.max(np.sum((new_c - C) ** 2, axis=1))))
        C = new_c
        if shift <= tol:
            break
    _, d = _nearest(X, C, threads)
    inertia = float(d.sum())
    trace.append(inertia)
    return ClusterModel(C, inertia, tuple(trace), it)


def assign(point, model: ClusterModel) -> int:
    x = np.asarray(point, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.dim:
        raise InputError(f"point dimension {x.shape} does not match model dim {model.dim}")
    return int(_nearest(x[None, :], model.centroids)[0][0])


def assign_many(points, model: ClusterModel, threads: int = 1) -> np.ndarray:
    X = _as_points(points)
    if X.shape[1] != model.dim:
        raise InputError(f"point dimension {X.shape[1]} does not match model dim {model.dim}")
    return _nearest(X, model.centroids, threads)[0]


def distance(point, model: ClusterModel, j: int) -> float:
    """Euclidean distance from a point to centroid j (for reporting)."""
    return float(np.linalg.norm(np.asarray(point, dtype=np.float64) - model.centroids[j]))


def save(model: ClusterModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(model.to_json() + "\n")


def load(path) -> ClusterModel:
    with open(path) as fh:
        return ClusterModel.from_json(fh.read())
