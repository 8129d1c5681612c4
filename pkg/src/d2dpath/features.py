"""Per-user social features and per-item content features.

A social feature is the concatenation

    type histogram (48) | shares, receives (2) | hour histogram (24) | region histogram (G)

where only send events feed the type and hour blocks, and both sends and
receives feed the region block.
"""

from __future__ import annotations

import gzip
import json
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import kmeans
from .errors import InputError, ParseError

N_CATEGORIES = 48
N_HOURS = 24
TYPE_OFFSET = 0
SHARE_OFFSET = 48
HOUR_OFFSET = 50
REGION_OFFSET = 74
DEFAULT_REGIONS = 1000


def feature_dim(n_regions: int) -> int:
    return REGION_OFFSET + n_regions


@dataclass(frozen=True)
class FeatureLayout:
    n_regions: int = DEFAULT_REGIONS

    @property
    def dim(self) -> int:
        return feature_dim(self.n_regions)

    type_slice = slice(TYPE_OFFSET, SHARE_OFFSET)
    share_slice = slice(SHARE_OFFSET, HOUR_OFFSET)
    hour_slice = slice(HOUR_OFFSET, REGION_OFFSET)

    @property
    def region_slice(self) -> slice:
        return slice(REGION_OFFSET, REGION_OFFSET + self.n_regions)


@dataclass(frozen=True)
class TransferRecord:
    sender: object
    receiver: object
    content: object
    category: int
    ts: float
    lat: float
    lon: float

    def __post_init__(self):
        if not isinstance(self.category, (int, np.integer)) or not 0 <= self.category < N_CATEGORIES:
            raise InputError(f"category {self.category!r} outside [0, {N_CATEGORIES})")
        if not (-90.0 <= self.lat <= 90.0 and -180.0 <= self.lon <= 180.0):
            raise InputError(f"invalid GPS fix ({self.lat}, {self.lon})")

    @property
    def is_self(self) -> bool:
        return self.sender == self.receiver

    @property
    def hour(self) -> int:
        return int(self.ts // 3600) % 24

    def to_dict(self) -> dict:
        return {"sender": self.sender, "receiver": self.receiver, "content": self.content,
                "category": int(self.category), "ts": self.ts, "lat": self.lat, "lon": self.lon}

    @classmethod
    def from_dict(cls, d: dict) -> "TransferRecord":
        return cls(d["sender"], d["receiver"], d["content"], d["category"], d["ts"],
                   float(d["lat"]), float(d["lon"]))


def open_text(path, mode="rt"):
    """Open a text file, transparently gzip-compressed when the name ends in .gz."""
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, mode, encoding="utf-8")
    return open(path, mode.replace("t", ""), encoding="utf-8")


def read_records(path) -> list[TransferRecord]:
    out = []
    with open_text(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(TransferRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, InputError) as exc:
                raise ParseError(f"bad transfer record: {exc}", lineno) from exc
    return out


def write_records(path, records) -> None:
    with open_text(path, "wt") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), separators=(",", ":")) + "\n")


def _count_feature(records, user_id, regions, n_regions) -> np.ndarray:
    vec = np.zeros(feature_dim(n_regions))
    for rec, g in zip(records, regions):
        if rec.is_self:
            continue
        if rec.sender == user_id:
            vec[TYPE_OFFSET + rec.category] += 1
            vec[SHARE_OFFSET] += 1
            vec[HOUR_OFFSET + rec.hour] += 1
            vec[REGION_OFFSET + g] += 1
        elif rec.receiver == user_id:
            vec[SHARE_OFFSET + 1] += 1
            vec[REGION_OFFSET + g] += 1
        else:
            raise InputError(f"record {rec} does not involve user {user_id!r}")
    return vec


def _regions(records, gps_model, threads=1):
    if gps_model.dim != 2:
        raise InputError("GPS model must be two-dimensional")
    if not records:
        return np.zeros(0, dtype=int)
    pts = np.array([[r.lat, r.lon] for r in records])
    return kmeans.assign_many(pts, gps_model, threads)


def build_social_feature(records, user_id, gps_model: kmeans.ClusterModel) -> np.ndarray:
    """Raw (unnormalized) social feature of one user.

    Self-transfers (sender == receiver) mark where an item originated and are
    not counted as shares or receipts.
    """
    records = list(records)
    for r in records:
        if not 0 <= r.category < N_CATEGORIES:
            raise InputError(f"invalid category {r.category}")
    return _count_feature(records, user_id, _regions(records, gps_model), gps_model.k)


def build_social_features(records, gps_model: kmeans.ClusterModel, threads: int = 1) -> dict:
    """Raw features for every user that appears in ``records``."""
    regions = _regions(records, gps_model, threads)
    by_user = defaultdict(lambda: ([], []))
    for rec, g in zip(records, regions):
        users = (rec.sender,) if rec.is_self else (rec.sender, rec.receiver)
        for u in users:
            by_user[u][0].append(rec)
            by_user[u][1].append(g)
    return {u: _count_feature(recs, u, gs, gps_model.k) for u, (recs, gs) in by_user.items()}


@dataclass(frozen=True, eq=False)
class NormStats:
    per_dim_max: np.ndarray

    def to_dict(self) -> dict:
        return {"per_dim_max": [float(v) for v in self.per_dim_max]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["per_dim_max"], dtype=np.float64))


def fit_norm(features) -> NormStats:
    if len(features) == 0:
        raise InputError("cannot fit normalization on an empty feature list")
    try:
        F = np.asarray(features, dtype=np.float64)
    except ValueError as exc:
        raise InputError("features have inconsistent dimensions") from exc
    if F.ndim != 2:
        raise InputError("features have inconsistent dimensions")
    m = F.max(axis=0)
    m[m <= 0] = 1.0
    return NormStats(m)


def normalize(feature, stats: NormStats) -> np.ndarray:
    f = np.asarray(feature, dtype=np.float64)
    if f.shape[-1] != stats.per_dim_max.shape[0]:
        raise InputError(f"feature dim {f.shape[-1]} != stats dim {stats.per_dim_max.shape[0]}")
    return np.minimum(f / stats.per_dim_max, 1.0)


def content_feature(category: int) -> np.ndarray:
    if not isinstance(category, (int, np.integer)) or not 0 <= category < N_CATEGORIES:
        raise InputError(f"category {category!r} outside [0, {N_CATEGORIES})")
    v = np.zeros(N_CATEGORIES)
    v[category] = 1.0
    return v


def write_features(path, features: dict) -> None:
    with open_text(path, "wt") as fh:
        for user, vec in features.items():
            fh.write(json.dumps({"user": user, "vec": [float(x) for x in vec]},
                                separators=(",", ":")) + "\n")


def read_features(path) -> dict:
    out = {}
    with open_text(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out[d["user"]] = np.asarray(d["vec"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"bad feature line: {exc}", lineno) from exc
    return out
