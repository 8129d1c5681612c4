"""End-to-end glue: records -> regions -> features -> prototypes -> labelled trees."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import cascade, features, kmeans, prototypes
from .cascade import DiffusionTree, Node
from .errors import InputError
from .model import tree_arrays
from .training import Labelled

log = logging.getLogger(__name__)


@dataclass
class FeatureSet:
    gps_model: kmeans.ClusterModel
    norm: features.NormStats
    users: list
    matrix: np.ndarray        # normalized features, rows aligned with ``users``

    def by_user(self) -> dict:
        return dict(zip(self.users, self.matrix))


def cluster_gps(records, n_regions: int, seed: int = 0, threads: int = 1,
                max_iter: int = 100) -> kmeans.ClusterModel:
    pts = np.array([[r.lat, r.lon] for r in records])
    if len(pts) < n_regions:
        raise InputError(f"{len(pts)} GPS fixes cannot form {n_regions} regions")
    return kmeans.fit(pts, n_regions, max_iter=max_iter, seed=seed, threads=threads)


def featurize(records, gps_model: kmeans.ClusterModel, threads: int = 1) -> FeatureSet:
    raw = features.build_social_features(records, gps_model, threads)
    users = sorted(raw, key=_user_key)
    F = np.array([raw[u] for u in users])
    norm = features.fit_norm(F)
    return FeatureSet(gps_model, norm, users, features.normalize(F, norm))


def _user_key(u):
    # mixed int/str ids from hand-written logs still sort deterministically
    return (isinstance(u, str), u)


def label_trees(trees, user_proto: dict) -> list:
    """Copies of ``trees`` with each node's prototype set from its user."""
    out = []
    for t in trees:
        nodes = []
        for n in t.nodes:
            if n.user_id not in user_proto:
                raise InputError(f"user {n.user_id!r} has no social feature")
            nodes.append(Node(n.node_id, n.user_id, int(user_proto[n.user_id]), list(n.children)))
        out.append(DiffusionTree(t.content_category, nodes, t.root, t.content_id))
    return out


def user_prototypes(fs: FeatureSet, model: prototypes.PrototypeModel, threads: int = 1) -> dict:
    return dict(zip(fs.users, (int(p) for p in prototypes.map_users(fs.matrix, model, threads))))


def order_trees(trees) -> list:
    """Trees sorted by content id, the order the simulator produced them in."""
    return sorted(trees, key=lambda t: (t.content_id is None, _user_key(t.content_id)))


def to_labelled(split: cascade.DatasetSplit, model: prototypes.PrototypeModel,
                internal_terminal: bool = False) -> Labelled:
    term = model.terminal_class

    def arrays(ts):
        return [tree_arrays(t, term, internal_terminal) for t in ts]

    return Labelled(arrays(split.train), arrays(split.val), arrays(split.test), model.centroids)


@dataclass
class Prepared:
    """Everything downstream of a record log for a fixed prototype count."""
    features: FeatureSet
    prototypes: prototypes.PrototypeModel
    trees: list               # prototype-labelled, ordered by content id
    split: cascade.DatasetSplit
    data: Labelled


def prepare(records, n_regions: int, k: int, seed: int = 0, threads: int = 1,
            ratios=(0.8, 0.1, 0.1), internal_terminal: bool = False,
            gps_model: kmeans.ClusterModel | None = None, n_init: int = 10) -> Prepared:
    gps_model = gps_model or cluster_gps(records, n_regions, seed, threads)
    fs = featurize(records, gps_model, threads)
    trees = order_trees(cascade.build_trees(records))
    return prepare_from_features(fs, trees, k, seed, threads, ratios, internal_terminal, n_init)


def prepare_from_features(fs: FeatureSet, trees, k: int, seed: int = 0, threads: int = 1,
                          ratios=(0.8, 0.1, 0.1), internal_terminal: bool = False,
                          n_init: int = 10) -> Prepared:
    if k > len(fs.users):
        raise InputError(f"k={k} exceeds the number of users ({len(fs.users)})")
    pm = prototypes.build_prototypes(fs.matrix, k, seed=seed, threads=threads, n_init=n_init)
    labelled = label_trees(trees, user_prototypes(fs, pm, threads))
    sp = cascade.split(labelled, ratios, seed)
    return Prepared(fs, pm, labelled, sp, to_labelled(sp, pm, internal_terminal))


def planted_labelled(trees, fs: FeatureSet, user_proto: dict, k: int, seed: int = 0,
                     ratios=(0.8, 0.1, 0.1), internal_terminal: bool = False):
    """Labelled data using known (simulator) prototypes instead of k-means.

    Each prototype's model input is the mean normalized feature of its users.
    Returns (split, Labelled).
    """
    protos = np.array([user_proto[u] for u in fs.users])
    cents = np.zeros((k, fs.matrix.shape[1]))
    for p in range(k):
        if np.any(protos == p):
            cents[p] = fs.matrix[protos == p].mean(axis=0)
    sp = cascade.split(order_trees(trees), ratios, seed)

    def arrays(ts):
        return [tree_arrays(t, k, internal_terminal) for t in ts]

    return sp, Labelled(arrays(sp.train), arrays(sp.val), arrays(sp.test), cents)
