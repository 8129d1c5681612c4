"""Planted branching-process simulator for device-to-device share cascades.

Every node of prototype ``p`` sharing an item of category ``c`` draws
children i.i.d. from a row over k prototypes plus the terminal class until
terminal comes up, ``b_max`` children exist, or the node sits at
``max_depth``. The row is

    (1 - w[p]) * T[c, p] + w[p] * T[c, grandparent]

so prototypes with ``w[p] > 0`` pass items on partly the way their own
parent would have. Roots use ``T[c, p]`` unchanged.

The simulator emits transfer records whose hours, GPS fixes and categories
come from per-prototype profiles, so that feature building and k-means can
recover the prototypes from the log alone.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cascade import DiffusionTree, Node
from .errors import InputError
from .features import N_CATEGORIES, N_HOURS, TransferRecord

# 2016-02-01T00:00:00Z
EPOCH_START = 1454284800
# a handful of well-separated population centres (lat, lon)
_CITY_GRID = [(28.6, 77.2), (19.1, 72.9), (13.0, 77.6), (22.6, 88.4), (17.4, 78.5),
              (26.9, 75.8), (23.0, 72.6), (18.5, 73.9), (21.2, 81.6), (25.6, 85.1),
              (11.0, 77.0), (9.9, 76.3), (30.7, 76.8), (15.3, 75.1), (20.3, 85.8)]
NEIGHBOURHOOD_OFFSET = 0.3  # degrees between a city centre and each prototype's home


@dataclass(eq=False)
class GeneratorConfig:
    transition: np.ndarray          # [48, k, k+1]
    history_weight: np.ndarray      # [k]
    root_dist: np.ndarray           # [k]
    category_profile: np.ndarray    # [k, 48]
    hour_profile: np.ndarray        # [k, 24]
    region_center: np.ndarray       # [k, 2]
    gps_spread: float = 0.05
    users_per_prototype: object = 50   # one count for all prototypes, or one per prototype
    b_max: int = 4
    max_depth: int = 6
    seed: int = 0
    params: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.transition.shape[1]

    @property
    def terminal(self) -> int:
        return self.k

    @property
    def user_counts(self) -> np.ndarray:
        u = np.asarray(self.users_per_prototype, dtype=np.int64)
        return np.full(self.k, int(u)) if u.ndim == 0 else u

    @property
    def user_offsets(self) -> np.ndarray:
        """Users of prototype p are the ids in [offsets[p], offsets[p+1])."""
        return np.concatenate([[0], np.cumsum(self.user_counts)])

    @property
    def n_users(self) -> int:
        return int(self.user_counts.sum())

    def user_prototype(self, user) -> int:
        return int(np.searchsorted(self.user_offsets, int(user), side="right")) - 1

    def validate(self) -> None:
        T = self.transition
        k = T.shape[1] if T.ndim == 3 else -1
        if T.ndim != 3 or T.shape != (N_CATEGORIES, k, k + 1):
            raise InputError(f"transition must have shape (48, k, k+1), got {T.shape}")
        if np.any(T < 0) or np.any(np.abs(T.sum(axis=2) - 1.0) > 1e-9):
            raise InputError("every transition row must be a probability distribution")
        w = self.history_weight
        if w.shape != (k,) or np.any(w < 0) or np.any(w > 1):
            raise InputError("history_weight must be k values in [0, 1]")
        for name, arr, width in (("root_dist", self.root_dist[None, :], k),
                                 ("category_profile", self.category_profile, N_CATEGORIES),
                                 ("hour_profile", self.hour_profile, N_HOURS)):
            if arr.shape[-1] != width or np.any(arr < 0) or np.any(np.abs(arr.sum(-1) - 1) > 1e-9):
                raise InputError(f"{name} rows must be distributions of width {width}")
        if self.category_profile.shape[0] != k or self.hour_profile.shape[0] != k:
            raise InputError("profiles need one row per prototype")
        if self.region_center.shape != (k, 2):
            raise InputError("region_center must be k x 2")
        counts = np.asarray(self.users_per_prototype)
        if counts.ndim > 1 or (counts.ndim == 1 and counts.shape != (k,)):
            raise InputError("users_per_prototype must be one count or k counts")
        if self.b_max < 1 or self.max_depth < 0 or np.any(counts < 1):
            raise InputError("b_max >= 1, max_depth >= 0, users_per_prototype >= 1 required")

    def row(self, category: int, proto: int, grandparent=None) -> np.ndarray:
        base = self.transition[category, proto]
        w = self.history_weight[proto]
        if grandparent is None or w == 0:
            return base
        return (1.0 - w) * base + w * self.transition[category, grandparent]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "transition": self.transition.tolist(),
            "history_weight": self.history_weight.tolist(),
            "root_dist": self.root_dist.tolist(),
            "category_profile": self.category_profile.tolist(),
            "hour_profile": self.hour_profile.tolist(),
            "region_center": self.region_center.tolist(),
            "gps_spread": self.gps_spread,
            "users_per_prototype": self.user_counts.tolist()
            if np.ndim(self.users_per_prototype) else int(self.users_per_prototype),
            "b_max": self.b_max,
            "max_depth": self.max_depth,
            "seed": self.seed,
            "params": self.params,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        arr = lambda key: np.asarray(d[key], dtype=np.float64)  # noqa: E731
        cfg = cls(arr("transition"), arr("history_weight"), arr("root_dist"),
                  arr("category_profile"), arr("hour_profile"), arr("region_center"),
                  float(d["gps_spread"]), _counts(d["users_per_prototype"]), int(d["b_max"]),
                  int(d["max_depth"]), int(d["seed"]), dict(d.get("params", {})))
        cfg.validate()
        return cfg

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "GeneratorConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _counts(v):
    return [int(x) for x in v] if isinstance(v, (list, tuple)) else int(v)


def default_profiles(k: int, n_styles: int = 4, seed: int = 0, focus: float = 0.8,
                     cats_per_style: int | None = None):
    """Per-prototype category, hour and location profiles.

    Prototype ``p`` has style ``p % n_styles`` (which fixes its favourite
    categories and active hours) and region ``p // n_styles`` (which fixes
    its home location). Two prototypes of the same style differ only in
    where they live. A style's favourites are the first ``cats_per_style``
    categories of its block of 48 / n_styles (default: the whole block);
    ``focus`` is the probability mass on favourites and active hours.
    """
    rng = np.random.default_rng([seed, 7])
    styles = np.arange(k) % n_styles
    regions = np.arange(k) // n_styles
    cat = np.full((k, N_CATEGORIES), (1 - focus) / N_CATEGORIES)
    block = N_CATEGORIES // n_styles
    hour = np.full((k, N_HOURS), (1 - focus) / N_HOURS)
    hwin = max(1, N_HOURS // n_styles)
    for p in range(k):
        s = styles[p]
        n_fav = block if cats_per_style is None else min(block, cats_per_style)
        cat[p, s * block:s * block + n_fav] += focus / n_fav
        hours = (np.arange(hwin) + s * hwin) % N_HOURS
        hour[p, hours] += focus / hwin
    n_regions = int(regions.max()) + 1
    if n_regions <= len(_CITY_GRID):
        cities = np.array(_CITY_GRID[:n_regions])
    else:
        cities = np.column_stack([rng.uniform(8, 32, n_regions), rng.uniform(70, 90, n_regions)])
    # each prototype gets its own neighbourhood around its city's centre
    angle = 2 * np.pi * styles / n_styles
    homes = cities[regions] + NEIGHBOURHOOD_OFFSET * np.column_stack([np.cos(angle), np.sin(angle)])
    return cat / cat.sum(1, keepdims=True), hour / hour.sum(1, keepdims=True), homes


def from_transition(transition, history_weight=None, root_dist=None, seed: int = 0,
                    b_max: int = 4, max_depth: int = 6, users_per_prototype: int = 50,
                    n_styles: int = 4, gps_spread: float = 0.05) -> GeneratorConfig:
    """Wrap a transition tensor (or a single [k, k+1] matrix shared by all categories)."""
    T = np.asarray(transition, dtype=np.float64)
    if T.ndim == 2:
        T = np.broadcast_to(T, (N_CATEGORIES,) + T.shape).copy()
    k = T.shape[1]
    w = np.zeros(k) if history_weight is None else np.asarray(history_weight, dtype=np.float64)
    rd = np.full(k, 1.0 / k) if root_dist is None else np.asarray(root_dist, dtype=np.float64)
    cat, hour, centres = default_profiles(k, n_styles, seed)
    cfg = GeneratorConfig(T, w, rd, cat, hour, centres, gps_spread, users_per_prototype,
                          b_max, max_depth, seed)
    cfg.validate()
    return cfg


def planted_config(k: int = 20, n_styles: int = 4, peak: float = 0.7, sink_rate: float = 0.5,
                   relay_target_rate: float = 0.5, residual_terminal: float = 0.8,
                   history: float = 0.3, locality: float = 0.7, n_content_groups: int = 4,
                   users_per_prototype: int = 50, b_max: int = 4, max_depth: int = 6,
                   gps_spread: float = 0.05, focus: float = 0.8,
                   cats_per_style: int | None = None, seed: int = 0) -> GeneratorConfig:
    """Planted desk-scale world.

    Categories fall into ``n_content_groups`` groups (``c % n_content_groups``)
    sharing one transition matrix. Within a group each prototype is a sink
    (peak on terminal) with probability ``sink_rate``, otherwise a spreader
    whose peak child is a relay (probability ``relay_target_rate``) or a
    sink, preferring its own region with probability ``locality``.

    ``history`` is the mean grandparent mixing weight over prototypes. It is
    concentrated on ``round(history * k)`` relay prototypes with weight 1
    rather than spread as a uniform weight, because a uniform mix of 0.3
    cannot move the argmax of a row peaked at 0.7 and would leave nothing for
    memory to learn. Relays forward items the way their parent would have.
    """
    rng = np.random.default_rng([seed, 1])
    n_relay = int(round(history * k))
    relays = sorted(int(r) for r in rng.choice(k, n_relay, replace=False)) if n_relay else []
    region = np.arange(k) // n_styles
    T_groups = np.zeros((n_content_groups, k, k + 1))

    def row(target):
        v = np.full(k + 1, (1 - peak) * (1 - residual_terminal) / k)
        v[k] = (1 - peak) * residual_terminal
        v[target] += peak
        return v / v.sum()

    for g in range(n_content_groups):
        sinks = [p for p in range(k) if rng.random() < sink_rate]
        for p in range(k):
            if p in sinks:
                T_groups[g, p] = row(k)
                continue
            to_relay = p not in relays and rng.random() < relay_target_rate
            cand = [r for r in relays if r != p] if to_relay else [q for q in sinks if q != p]
            if not cand:
                cand = [q for q in sinks if q != p] or [k]
            local = [q for q in cand if q < k and region[q] == region[p]]
            pool = local if (local and rng.random() < locality) else cand
            T_groups[g, p] = row(int(pool[int(rng.integers(len(pool)))]))
    T = T_groups[np.arange(N_CATEGORIES) % n_content_groups]
    w = np.zeros(k)
    w[relays] = 1.0
    cat, hour, centres = default_profiles(k, n_styles, seed, focus, cats_per_style)
    params = dict(k=k, n_styles=n_styles, peak=peak, sink_rate=sink_rate,
                  relay_target_rate=relay_target_rate, residual_terminal=residual_terminal,
                  history=history, locality=locality, n_content_groups=n_content_groups,
                  focus=focus, cats_per_style=cats_per_style, relays=relays)
    cfg = GeneratorConfig(T, w, np.full(k, 1.0 / k), cat, hour, centres, gps_spread,
                          users_per_prototype, b_max, max_depth, seed, params)
    cfg.validate()
    return cfg


def _next_time(last_ts: int, hour: int, rng) -> int:
    day = last_ts - last_ts % 86400
    t = day + hour * 3600 + int(rng.integers(3600))
    while t <= last_ts:
        t += 86400
    return t


def _generate_one(cfg: GeneratorConfig, index: int):
    rng = np.random.default_rng([cfg.seed, index])
    k, offsets = cfg.k, cfg.user_offsets
    used = set()

    def draw_user(p):
        free = [u for u in range(int(offsets[p]), int(offsets[p + 1])) if u not in used]
        if not free:
            return None
        u = free[int(rng.integers(len(free)))]
        used.add(u)
        return u

    def gps(p):
        return tuple(float(round(v, 6)) for v in cfg.region_center[p] + rng.normal(0, cfg.gps_spread, 2))

    root_p = int(rng.choice(k, p=cfg.root_dist))
    cat = int(rng.choice(N_CATEGORIES, p=cfg.category_profile[root_p]))
    root_user = draw_user(root_p)
    nodes = [Node(0, root_user, root_p)]
    parent_of = {0: None}
    depth = {0: 0}
    ts = EPOCH_START + int(rng.integers(28 * 86400))
    lat, lon = gps(root_p)
    records = [TransferRecord(root_user, root_user, index, cat, ts, lat, lon)]
    i = 0
    while i < len(nodes):
        node = nodes[i]
        p = node.prototype_id
        if depth[i] < cfg.max_depth:
            gp = parent_of[i]
            r = cfg.row(cat, p, None if gp is None else nodes[gp].prototype_id)
            for _ in range(cfg.b_max):
                c = int(rng.choice(k + 1, p=r))
                if c == k:
                    break
                user = draw_user(c)
                if user is None:  # prototype's user pool exhausted within this tree
                    break
                j = len(nodes)
                nodes.append(Node(j, user, c))
                node.children.append(j)
                parent_of[j] = i
                depth[j] = depth[i] + 1
        i += 1
    # timestamps follow node order so log replay reproduces node numbering;
    # a transfer happens in the receiver's neighbourhood
    for j in range(1, len(nodes)):
        sender = nodes[parent_of[j]]
        hour = int(rng.choice(N_HOURS, p=cfg.hour_profile[sender.prototype_id]))
        ts = _next_time(ts, hour, rng)
        lat, lon = gps(nodes[j].prototype_id)
        records.append(TransferRecord(sender.user_id, nodes[j].user_id, index, cat, ts, lat, lon))
    return DiffusionTree(cat, nodes, 0, index), records


def generate(cfg: GeneratorConfig, n_trees: int, threads: int = 1):
    """Return (trees, records); tree ``i`` uses the RNG stream (seed, i)."""
    cfg.validate()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda i: _generate_one(cfg, i), range(n_trees)))
    else:
        parts = [_generate_one(cfg, i) for i in range(n_trees)]
    trees = [t for t, _ in parts]
    records = [r for _, rs in parts for r in rs]
    return trees, records


def supervision_pairs(tree: DiffusionTree, terminal: int, internal_terminal: bool = False):
    """(node, label) pairs: one per child edge, plus terminal for every leaf."""
    out = []
    for n in tree.bfs():
        for c in n.children:
            out.append((n, tree.node(c).prototype_id))
        if not n.children or internal_terminal:
            out.append((n, terminal))
    return out


def bayes_accuracy(cfg: GeneratorConfig, trees, internal_terminal: bool = False) -> float:
    """Accuracy of predicting the argmax of each node's true generating row."""
    k = cfg.k
    hits = total = 0
    for t in trees:
        if not 0 <= t.content_category < N_CATEGORIES:
            raise InputError(f"tree category {t.content_category} out of range")
        parents = t.parents()
        for n, label in supervision_pairs(t, k, internal_terminal):
            p = n.prototype_id
            if p is None or not 0 <= p < k or not 0 <= label <= k:
                raise InputError(f"prototype labels do not match a k={k} generator")
            gp = parents.get(n.node_id)
            gp_proto = None if gp is None else t.node(gp).prototype_id
            pred = int(np.argmax(cfg.row(t.content_category, p, gp_proto)))
            hits += pred == label
            total += 1
    if total == 0:
        raise InputError("no supervision pairs in dataset")
    return hits / total
