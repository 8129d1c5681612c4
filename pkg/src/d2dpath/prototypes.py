"""Prototype users: k-means centroids in normalized social-feature space.

Class ids 0..k-1 are prototypes; id k is the terminal class ("shares to no
one further"), so every classifier downstream has k + 1 outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import kmeans
from .errors import InputError


@dataclass(frozen=True, eq=False)
class PrototypeModel:
    cluster: kmeans.ClusterModel

    @property
    def k(self) -> int:
        return self.cluster.k

    @property
    def terminal_class(self) -> int:
        return self.k

    @property
    def num_classes(self) -> int:
        return self.k + 1

    @property
    def dim(self) -> int:
        return self.cluster.dim

    @property
    def centroids(self) -> np.ndarray:
        return self.cluster.centroids

    def to_json(self) -> str:
        inner = self.cluster.to_json()
        return inner[:-1] + f',"terminal_class":{self.terminal_class}}}'

    @classmethod
    def from_json(cls, text: str) -> "PrototypeModel":
        doc = json.loads(text)
        model = cls(kmeans.ClusterModel.from_dict(doc))
        if doc.get("terminal_class", model.k) != model.k:
            raise InputError("terminal_class must equal k")
        return model


def build_prototypes(features, k: int, seed: int = 0, max_iter: int = 100,
                     tol: float = 1e-6, threads: int = 1, n_init: int = 10) -> PrototypeModel:
    F = np.asarray(features, dtype=np.float64)
    if k <= 0 or k > len(F):
        raise InputError(f"k={k} must be in [1, {len(F)}]")
    return PrototypeModel(kmeans.fit(F, k, max_iter=max_iter, tol=tol, seed=seed, threads=threads,
                                     n_init=n_init))


def map_user(feature, model: PrototypeModel) -> int:
    return kmeans.assign(feature, model.cluster)


def map_users(features, model: PrototypeModel, threads: int = 1) -> np.ndarray:
    return kmeans.assign_many(features, model.cluster, threads)


def prototype_feature(proto_id: int, model: PrototypeModel) -> np.ndarray:
    if not 0 <= proto_id < model.k:
        raise InputError(f"prototype id {proto_id} has no feature (valid range [0, {model.k}))")
    return model.centroids[proto_id].copy()


def save(model: PrototypeModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(model.to_json() + "\n")


def load(path) -> PrototypeModel:
    with open(path) as fh:
        return PrototypeModel.from_json(fh.read())
