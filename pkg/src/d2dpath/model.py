"""Top-down tree LSTM.

State flows from a parent to each of its children: a child's gates read the
child's own input and its parent's hidden state, and its memory mixes in the
parent's memory cell. The root starts from h0 = 0 and a memory c0 projected
from the item's content one-hot. Every node's head predicts the prototype of
each of its children (or the terminal class for a leaf).

Trees are processed in batches ("forests") level by level so every depth is a
single matrix product; the backward pass walks levels deepest first and
scatter-adds each child's dh/dc into its parent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .cascade import DiffusionTree
from .errors import InputError
from .features import N_CATEGORIES

GATES = ("i", "f", "o", "u")
FORGET_BIAS = 1.0


@dataclass
class CellParams:
    """Gate weights stacked in i, f, o, u order: W (4,H,D), U (4,H,H), b (4,H)."""
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.W.ndim != 3 or self.W.shape[0] != 4:
            raise InputError("W must have shape (4, hidden, input)")
        H = self.W.shape[1]
        if self.U.shape != (4, H, H) or self.b.shape != (4, H):
            raise InputError("U/b shapes do not match W")


@dataclass
class CellState:
    h: np.ndarray
    c: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    u: np.ndarray


def _cell(X, hp, cp, W, U, b, self_loop_candidate=False):
    """Batched cell. X (n,D), hp/cp (n,H). Returns h, c and the backward cache."""
    H = b.shape[1]
    z = X @ W.reshape(4 * H, -1).T + b.reshape(-1)
    Uh = hp @ U.reshape(4 * H, H).T
    if self_loop_candidate:
        # literal reading of the candidate equation: U_u multiplies the node's own
        # (not yet defined) h, substituted by zero
        Uh[:, 3 * H:] = 0.0
    z += Uh
    i, f, o = (nn.sigmoid(z[:, g * H:(g + 1) * H]) for g in range(3))
    u = np.tanh(z[:, 3 * H:])
    c = i * u + f * cp
    tc = np.tanh(c)
    h = o * tc
    return h, c, (X, hp, cp, i, f, o, u, tc)


def _cell_backward(dh, dc, cache, W, U, self_loop_candidate=False):
    """Returns (dX, dhp, dcp, dW, dU, db) for a batch of cells."""
    X, hp, cp, i, f, o, u, tc = cache
    H = i.shape[1]
    dct = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate([
        dct * u * i * (1.0 - i),
        dct * cp * f * (1.0 - f),
        dh * tc * o * (1.0 - o),
        dct * i * (1.0 - u * u),
    ], axis=1)
    dzU = dz
    if self_loop_candidate:
        dzU = dz.copy()
        dzU[:, 3 * H:] = 0.0
    dW = (dz.T @ X).reshape(W.shape)
    dU = (dzU.T @ hp).reshape(U.shape)
    db = dz.sum(axis=0).reshape(4, H)
    dX = dz @ W.reshape(4 * H, -1)
    dhp = dzU @ U.reshape(4 * H, H)
    return dX, dhp, dct * f, dW, dU, db


def cell_forward(x, h_pt, c_pt, params: CellParams, self_loop_candidate: bool = False) -> CellState:
    x = np.asarray(x, dtype=np.float64)
    H, D = params.W.shape[1], params.W.shape[2]
    if x.shape != (D,) or np.shape(h_pt) != (H,) or np.shape(c_pt) != (H,):
        raise InputError(f"cell expects x of length {D} and parent state of length {H}")
    h, c, cache = _cell(x[None], np.asarray(h_pt)[None], np.asarray(c_pt)[None],
                        params.W, params.U, params.b, self_loop_candidate)
    _, _, _, i, f, o, u, _ = cache
    return CellState(h[0], c[0], i[0], f[0], o[0], u[0])


# head --------------------------------------------------------------------------

def head_forward(p, h, rates, train, rng):
    """logits = Wout . drop2(tanh(Wfc . drop1(h) + bfc)) + bout."""
    a1, m1 = nn.dropout(h, rates[0], train, rng)
    g = np.tanh(a1 @ p["Wfc"].value.T + p["bfc"].value)
    a2, m2 = nn.dropout(g, rates[1], train, rng)
    logits = a2 @ p["Wout"].value.T + p["bout"].value
    return logits, (a1, m1, g, a2, m2)


def head_backward(p, dlogits, cache, grads):
    a1, m1, g, a2, m2 = cache
    grads["Wout"] += dlogits.T @ a2
    grads["bout"] += dlogits.sum(axis=0)
    dg = dlogits @ p["Wout"].value
    if m2 is not None:
        dg = dg * m2
    dz = dg * (1.0 - g * g)
    grads["Wfc"] += dz.T @ a1
    grads["bfc"] += dz.sum(axis=0)
    dh = dz @ p["Wfc"].value
    if m1 is not None:
        dh = dh * m1
    return dh


def init_recurrent_params(input_dim: int, hidden: int, k: int, seed: int = 0) -> dict:
    """Parameters shared by the tree LSTM and the chain LSTM."""
    rng = np.random.default_rng(seed)
    H, D, N = hidden, input_dim, k + 1
    W = np.stack([nn.xavier_uniform(rng, H, D) for _ in GATES])
    U = np.stack([nn.xavier_uniform(rng, H, H) for _ in GATES])
    b = np.zeros((4, H))
    b[1] = FORGET_BIAS
    values = {
        "W": W, "U": U, "b": b,
        "Wc": nn.xavier_uniform(rng, H, N_CATEGORIES), "bc": np.zeros(H),
        "Wfc": nn.xavier_uniform(rng, H, H), "bfc": np.zeros(H),
        "Wout": nn.xavier_uniform(rng, N, H), "bout": np.zeros(N),
    }
    return {name: nn.Param(name, v) for name, v in values.items()}


# batched trees -----------------------------------------------------------------

@dataclass
class TreeArrays:
    """A tree flattened in BFS order with its supervision pairs."""
    node_ids: np.ndarray
    parent: np.ndarray       # local index of the parent, -1 for the root
    depth: np.ndarray
    proto: np.ndarray
    category: int
    pair_node: np.ndarray    # local node index of each (node, label) pair
    pair_label: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)


def tree_arrays(tree: DiffusionTree, terminal: int, internal_terminal: bool = False,
                labelled: bool = True) -> TreeArrays:
    order = tree.bfs()
    pos = {n.node_id: j for j, n in enumerate(order)}
    parent = np.full(len(order), -1, dtype=np.int64)
    depth = np.zeros(len(order), dtype=np.int64)
    pair_node, pair_label = [], []
    for j, n in enumerate(order):
        for c in n.children:
            parent[pos[c]] = j
            depth[pos[c]] = depth[j] + 1
            if labelled:
                pair_node.append(j)
                pair_label.append(tree.node(c).prototype_id)
        if labelled and (not n.children or internal_terminal):
            pair_node.append(j)
            pair_label.append(terminal)
    protos = [-1 if n.prototype_id is None else n.prototype_id for n in order]
    if labelled and any(p is None or p < 0 for p in protos):
        raise InputError("tree has nodes without a prototype label")
    return TreeArrays(np.array([n.node_id for n in order]), parent, depth,
                      np.array(protos, dtype=np.int64), int(tree.content_category),
                      np.array(pair_node, dtype=np.int64), np.array(pair_label, dtype=np.int64))


@dataclass
class Forest:
    """Several trees stacked node-wise for batched level-order evaluation."""
    X: np.ndarray             # (n, D) node inputs
    parent: np.ndarray        # global parent index, -1 for roots
    levels: list              # node index arrays by depth
    root_tree: np.ndarray     # tree index of each root, aligned with levels[0]
    content: np.ndarray       # (n_trees, 48)
    tree_of: np.ndarray       # tree index of every node
    pair_node: np.ndarray
    pair_label: np.ndarray
    pair_weight: np.ndarray   # 1 / (pairs in the pair's tree): a per-tree mean
    offsets: np.ndarray = field(default=None)

    @property
    def n_trees(self) -> int:
        return len(self.content)

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    @classmethod
    def build(cls, arrays, inputs, content_mask: bool = True) -> "Forest":
        """``inputs`` is either a (k, D) table indexed by prototype or a list of
        per-tree (n_nodes, D) arrays aligned with BFS order."""
        offsets = np.cumsum([0] + [a.n_nodes for a in arrays])
        parent = np.concatenate([np.where(a.parent >= 0, a.parent + o, -1)
                                 for a, o in zip(arrays, offsets)])
        depth = np.concatenate([a.depth for a in arrays])
        tree_of = np.repeat(np.arange(len(arrays)), [a.n_nodes for a in arrays])
        if isinstance(inputs, np.ndarray) and inputs.ndim == 2:
            X = inputs[np.concatenate([a.proto for a in arrays])]
        else:
            X = np.concatenate([np.asarray(x, dtype=np.float64) for x in inputs])
        levels = [np.flatnonzero(depth == d) for d in range(int(depth.max()) + 1)]
        content = np.zeros((len(arrays), N_CATEGORIES))
        if content_mask:
            content[np.arange(len(arrays)), [a.category for a in arrays]] = 1.0
        pair_node = np.concatenate([a.pair_node + o for a, o in zip(arrays, offsets)])
        pair_label = np.concatenate([a.pair_label for a in arrays])
        pair_weight = np.concatenate([np.full(len(a.pair_node), 1.0 / max(1, len(a.pair_node)))
                                      for a in arrays])
        return cls(X, parent, levels, tree_of[levels[0]], content, tree_of,
                   pair_node.astype(np.int64), pair_label.astype(np.int64), pair_weight, offsets)


@dataclass
class ForwardCache:
    h: np.ndarray
    c: np.ndarray
    logits: np.ndarray
    cells: list
    head: tuple


class D2DLSTM:
    """Top-down tree LSTM with an FC + softmax head over k + 1 classes."""

    kind = "d2d"

    def __init__(self, input_dim: int, hidden: int, k: int, dropout=(0.5, 0.5), seed: int = 0,
                 self_loop_candidate: bool = False):
        if hidden <= 0 or input_dim <= 0 or k <= 0:
            raise InputError("input_dim, hidden and k must be positive")
        self.input_dim, self.hidden, self.k = input_dim, hidden, k
        self.dropout = tuple(float(r) for r in dropout)
        self.self_loop_candidate = self_loop_candidate
        self.params = init_recurrent_params(input_dim, hidden, k, seed)

    @property
    def num_classes(self) -> int:
        return self.k + 1

    @property
    def terminal(self) -> int:
        return self.k

    def header(self) -> dict:
        return {"kind": self.kind, "input_dim": self.input_dim, "hidden": self.hidden, "k": self.k,
                "dropout": list(self.dropout), "self_loop_candidate": self.self_loop_candidate}

    def cell_params(self) -> CellParams:
        p = self.params
        return CellParams(p["W"].value, p["U"].value, p["b"].value)

    def forward(self, forest: Forest, train: bool = False, rng=None) -> ForwardCache:
        if forest.X.shape[1] != self.input_dim:
            raise InputError(f"node inputs have dim {forest.X.shape[1]}, model expects {self.input_dim}")
        p = self.params
        W, U, b = p["W"].value, p["U"].value, p["b"].value
        n, H = forest.n_nodes, self.hidden
        h = np.zeros((n, H))
        c = np.zeros((n, H))
        cells = []
        for d, idx in enumerate(forest.levels):
            if d == 0:
                hp = np.zeros((len(idx), H))
                cp = forest.content[forest.root_tree] @ p["Wc"].value.T + p["bc"].value
            else:
                par = forest.parent[idx]
                hp, cp = h[par], c[par]
            h[idx], c[idx], cache = _cell(forest.X[idx], hp, cp, W, U, b, self.self_loop_candidate)
            cells.append(cache)
        logits, head = head_forward(p, h, self.dropout, train, rng)
        return ForwardCache(h, c, logits, cells, head)

    def logits(self, forest: Forest) -> np.ndarray:
        return self.forward(forest, train=False).logits

    def backward(self, forest: Forest, cache: ForwardCache, dlogits):
        """Gradients for every parameter plus each node's total dh and dc.

        A node's total dh is its own head gradient plus the sum of the dh
        every child sends back through U; dc likewise collects f * dc from
        each child.
        """
        if cache is None:
            raise RuntimeError("backward called without a forward cache")
        p = self.params
        grads = {name: np.zeros_like(q.value) for name, q in p.items()}
        dh = head_backward(p, np.asarray(dlogits), cache.head, grads)
        dc = np.zeros_like(dh)
        node_dh = np.zeros_like(dh)
        node_dc = np.zeros_like(dh)
        W, U = p["W"].value, p["U"].value
        for d in range(len(forest.levels) - 1, -1, -1):
            idx = forest.levels[d]
            node_dh[idx], node_dc[idx] = dh[idx], dc[idx]
            _, dhp, dcp, dW, dU, db = _cell_backward(dh[idx], dc[idx], cache.cells[d], W, U,
                                                     self.self_loop_candidate)
            grads["W"] += dW
            grads["U"] += dU
            grads["b"] += db
            if d == 0:
                grads["Wc"] += dcp.T @ forest.content[forest.root_tree]
                grads["bc"] += dcp.sum(axis=0)
            else:
                par = forest.parent[idx]
                np.add.at(dh, par, dhp)
                np.add.at(dc, par, dcp)
        return grads, node_dh, node_dc

    def loss_and_grads(self, forest: Forest, scale: float = 1.0, train: bool = False, rng=None,
                       weights=None):
        cache = self.forward(forest, train, rng)
        w = forest.pair_weight if weights is None else weights
        loss, dlogits = nn.weighted_xent(cache.logits, forest.pair_node, forest.pair_label, w * scale)
        grads, _, _ = self.backward(forest, cache, dlogits)
        return loss, grads


def predict_children_distribution(logits) -> np.ndarray:
    return nn.softmax(logits)


def tree_forward(tree: DiffusionTree, x_of, content, model: D2DLSTM, train: bool = False,
                 rng=None, internal_terminal: bool = False):
    """Run one tree. ``x_of(node)`` gives a node's input vector and ``content``
    the item's 48-dim content vector. Returns (logits by node id, forest, cache)."""
    arr = tree_arrays(tree, model.terminal, internal_terminal,
                      labelled=all(n.prototype_id is not None for n in tree.nodes))
    X = np.array([np.asarray(x_of(tree.node(int(i))), dtype=np.float64) for i in arr.node_ids])
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise InputError(f"node inputs must have length {model.input_dim}")
    forest = Forest.build([arr], [X])
    forest.content[0] = np.asarray(content, dtype=np.float64)
    cache = model.forward(forest, train, rng)
    return {int(i): cache.logits[j] for j, i in enumerate(arr.node_ids)}, forest, cache


def tree_backward(model: D2DLSTM, forest: Forest, cache: ForwardCache, weights=None):
    """Gradients of the mean pair loss of a single-tree forest (see tree_forward)."""
    w = forest.pair_weight if weights is None else weights
    loss, dlogits = nn.weighted_xent(cache.logits, forest.pair_node, forest.pair_label, w)
    grads, node_dh, node_dc = model.backward(forest, cache, dlogits)
    return loss, grads, node_dh, node_dc


def gradcheck_random_trees(n_trees: int = 10, hidden: int = 8, k: int = 5, input_dim: int = 6,
                           max_nodes: int = 10, seed: int = 0, dropout=(0.5, 0.5),
                           h: float = 1e-5, tol: float = 1e-4) -> nn.GradCheckReport:
    """Central-difference check of every parameter entry on random labelled
    trees with random node inputs. Dropout masks are frozen per tree by
    re-seeding the mask stream on every loss evaluation."""
    from .cascade import random_tree

    rng = np.random.default_rng(seed)
    worst, n_checked = [], 0
    for i in range(n_trees):
        tree = random_tree(rng, int(rng.integers(1, max_nodes + 1)), k,
                           category=int(rng.integers(N_CATEGORIES)))
        arr = tree_arrays(tree, k)
        forest = Forest.build([arr], [rng.normal(size=(arr.n_nodes, input_dim))])
        model = D2DLSTM(input_dim, hidden, k, dropout, seed=seed + i)
        for p in model.params.values():
            p.value += 0.1 * rng.normal(size=p.shape)
        mask_seed = [seed, i]

        def loss_fn():
            logits = model.forward(forest, True, np.random.default_rng(mask_seed)).logits
            return nn.weighted_xent(logits, forest.pair_node, forest.pair_label, forest.pair_weight)[0]

        _, grads = model.loss_and_grads(forest, train=True, rng=np.random.default_rng(mask_seed))
        rep = nn.grad_check(loss_fn, {n: p.value for n, p in model.params.items()}, grads, h, tol)
        n_checked += rep.n_checked
        worst.extend(rep.worst)
    worst.sort(key=lambda r: -r[0])
    return nn.GradCheckReport(worst[0][0] if worst else 0.0, n_checked, tol, worst[:5])
