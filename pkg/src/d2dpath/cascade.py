"""Diffusion trees: data model, reconstruction from transfer logs, JSON Lines I/O."""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ParseError
from .features import open_text

log = logging.getLogger(__name__)


@dataclass
class Node:
    node_id: int
    user_id: object = None
    prototype_id: int | None = None
    children: list = field(default_factory=list)


@dataclass
class DiffusionTree:
    content_category: int
    nodes: list
    root: int = 0
    content_id: object = None

    def __post_init__(self):
        self._index = None

    def node(self, node_id) -> Node:
        if self._index is None or len(self._index) != len(self.nodes):
            self._index = {n.node_id: n for n in self.nodes}
        return self._index[node_id]

    def __eq__(self, other):
        if not isinstance(other, DiffusionTree):
            return NotImplemented
        return (self.content_category == other.content_category and self.root == other.root
                and self.content_id == other.content_id and self.nodes == other.nodes)

    def __len__(self):
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return sum(len(n.children) for n in self.nodes)

    def bfs(self) -> list:
        """Nodes in breadth-first order, children in stored order."""
        out, queue = [], deque([self.root])
        while queue:
            n = self.node(queue.popleft())
            out.append(n)
            queue.extend(n.children)
        return out

    def depths(self) -> dict:
        d = {self.root: 0}
        for n in self.bfs():
            for c in n.children:
                d[c] = d[n.node_id] + 1
        return d

    def parents(self) -> dict:
        return {c: n.node_id for n in self.nodes for c in n.children}

    def leaves(self) -> list:
        return [n for n in self.nodes if not n.children]

    def validate(self) -> None:
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise InputError("duplicate node ids")
        idset = set(ids)
        if self.root not in idset:
            raise InputError(f"root {self.root} not among nodes")
        parent_count = dict.fromkeys(ids, 0)
        for n in self.nodes:
            for c in n.children:
                if c not in idset:
                    raise InputError(f"node {n.node_id} has dangling child {c}")
                parent_count[c] += 1
        if parent_count[self.root]:
            raise InputError("root has a parent")
        orphans = [i for i, c in parent_count.items() if c == 0 and i != self.root]
        if orphans:
            raise InputError(f"multiple roots: {[self.root] + orphans}")
        multi = [i for i, c in parent_count.items() if c > 1]
        if multi:
            raise InputError(f"nodes with several parents: {multi}")
        seen, queue = set(), deque([self.root])
        while queue:
            i = queue.popleft()
            if i in seen:
                raise InputError("cycle detected")
            seen.add(i)
            queue.extend(self.node(i).children)
        if seen != idset:
            raise InputError("nodes unreachable from root (cycle)")


def serialize_tree(tree: DiffusionTree) -> str:
    doc = {"cat": int(tree.content_category), "root": tree.root}
    if tree.content_id is not None:
        doc["content"] = tree.content_id
    doc["nodes"] = [{"id": n.node_id, "user": n.user_id, "proto": n.prototype_id,
                     "children": list(n.children)} for n in tree.nodes]
    return json.dumps(doc, separators=(",", ":"))


def parse_tree(line: str, lineno=None) -> DiffusionTree:
    try:
        doc = json.loads(line)
        nodes = [Node(int(d["id"]), d.get("user"), d.get("proto"), [int(c) for c in d["children"]])
                 for d in doc["nodes"]]
        tree = DiffusionTree(int(doc["cat"]), nodes, int(doc["root"]), doc.get("content"))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed tree: {exc}", lineno) from exc
    try:
        tree.validate()
    except InputError as exc:
        raise ParseError(str(exc), lineno) from exc
    return tree


def read_trees(path) -> list:
    with open_text(path) as fh:
        return [parse_tree(line, i) for i, line in enumerate(fh, 1) if line.strip()]


def write_trees(path, trees) -> None:
    with open_text(path, "wt") as fh:
        for t in trees:
            fh.write(serialize_tree(t) + "\n")


@dataclass
class BuildReport:
    self_transfers: int = 0
    duplicate_receipts: int = 0
    category_conflicts: int = 0


def build_trees_report(records) -> tuple:
    """Reconstruct diffusion trees from transfer records.

    Records are processed in (ts, sender, receiver) order. A user's first
    receipt of an item fixes its parent; any later transfer to a user who
    already holds the item is dropped. A sender who never received the item
    roots a new tree. A self-transfer is dropped as an edge but still marks its
    user as holding the item, which is how single-node trees are represented.
    """
    report = BuildReport()
    ordered = sorted(records, key=lambda r: (r.ts, r.sender, r.receiver))
    holders = {}      # (content, user) -> (tree, node)
    trees = []
    cats = {}

    def new_root(content, user, category):
        t = DiffusionTree(category, [Node(0, user)], 0, content)
        trees.append(t)
        holders[(content, user)] = (t, t.nodes[0])

    for r in ordered:
        if r.content in cats and cats[r.content] != r.category:
            report.category_conflicts += 1
        cats.setdefault(r.content, r.category)
        cat = cats[r.content]
        if (r.content, r.sender) not in holders:
            new_root(r.content, r.sender, cat)
        if r.is_self:
            report.self_transfers += 1
            continue
        if (r.content, r.receiver) in holders:
            report.duplicate_receipts += 1
            continue
        tree, parent = holders[(r.content, r.sender)]
        child = Node(len(tree.nodes), r.receiver)
        tree.nodes.append(child)
        parent.children.append(child.node_id)
        holders[(r.content, r.receiver)] = (tree, child)
    if report.self_transfers or report.duplicate_receipts:
        log.info("tree build dropped %d self-transfers, %d duplicate receipts",
                 report.self_transfers, report.duplicate_receipts)
    return trees, report


def build_trees(records) -> list:
    return build_trees_report(records)[0]


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list


def _largest_remainder(n, ratios):
    raw = [r * n for r in ratios]
    sizes = [int(np.floor(x)) for x in raw]
    rem = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:rem]:
        sizes[i] += 1
    return sizes


def split(trees, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    if len(trees) < 3:
        raise InputError("need at least 3 trees to split")
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InputError(f"ratios {ratios} must be three positive numbers summing to 1")
    perm = np.random.default_rng(seed).permutation(len(trees))
    n_tr, n_va, _ = _largest_remainder(len(trees), ratios)
    pick = [trees[i] for i in perm]
    return DatasetSplit(pick[:n_tr], pick[n_tr:n_tr + n_va], pick[n_tr + n_va:])


def random_tree(rng, n_nodes: int, k: int, category=None, max_children=None) -> DiffusionTree:
    """Random recursive tree with random prototype labels in [0, k)."""
    nodes = [Node(0, None, int(rng.integers(k)))]
    for i in range(1, n_nodes):
        cands = [n for n in nodes if max_children is None or len(n.children) < max_children]
        parent = cands[int(rng.integers(len(cands)))]
        nodes.append(Node(i, None, int(rng.integers(k))))
        parent.children.append(i)
    cat = int(rng.integers(48)) if category is None else category
    return DiffusionTree(cat, nodes, 0)


def path_tree(protos, category=0) -> DiffusionTree:
    nodes = [Node(i, None, int(p), [i + 1] if i + 1 < len(protos) else []) for i, p in enumerate(protos)]
    return DiffusionTree(category, nodes, 0)
