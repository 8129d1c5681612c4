"""Comparison models and feature-block masks.

* ``FCModel``: three dense layers on concat(content one-hot, social feature);
  no memory, so each node is classified from its own input alone.
* ``ChainLSTM``: the same cell as the tree model run over root-to-leaf paths,
  one path at a time, sharing its parameter layout with ``D2DLSTM`` so
  weights can be copied across.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .errors import InputError
from .features import (HOUR_OFFSET, N_CATEGORIES, REGION_OFFSET, SHARE_OFFSET, TYPE_OFFSET)
from .model import (D2DLSTM, TreeArrays, _cell, _cell_backward, head_backward, head_forward,
                    init_recurrent_params)


@dataclass(frozen=True)
class FeatureMask:
    use_content: bool = True
    use_type: bool = True
    use_share: bool = True
    use_time: bool = True
    use_region: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    def label(self) -> str:
        names = [("content", self.use_content), ("type", self.use_type), ("share", self.use_share),
                 ("time", self.use_time), ("region", self.use_region)]
        return "+".join(n for n, on in names if on) or "none"


FULL_MASK = FeatureMask()


def apply_mask(x, mask: FeatureMask) -> np.ndarray:
    """Zero the disabled blocks of a social feature (or a batch of them)."""
    x = np.array(x, dtype=np.float64)
    if x.shape[-1] < REGION_OFFSET:
        raise InputError(f"social feature of dim {x.shape[-1]} is shorter than the fixed blocks")
    if not mask.use_type:
        x[..., TYPE_OFFSET:SHARE_OFFSET] = 0.0
    if not mask.use_share:
        x[..., SHARE_OFFSET:HOUR_OFFSET] = 0.0
    if not mask.use_time:
        x[..., HOUR_OFFSET:REGION_OFFSET] = 0.0
    if not mask.use_region:
        x[..., REGION_OFFSET:] = 0.0
    return x


@dataclass(frozen=True)
class GridRow:
    model: str
    mask: FeatureMask

    @property
    def memory(self) -> bool:
        return self.model != "fc"


# rows of the ablation table, in report order
ABLATION_ROWS = (
    GridRow("fc", FULL_MASK),
    GridRow("lstm", FULL_MASK),
    GridRow("d2d", FeatureMask(use_time=False, use_region=False)),
    GridRow("d2d", FeatureMask(use_region=False)),
    GridRow("d2d", FeatureMask(use_time=False)),
    GridRow("d2d", FULL_MASK),
)


# FC ------------------------------------------------------------------------------

class FCModel:
    """Dense classifier: two tanh + dropout layers and a linear output."""

    kind = "fc"

    def __init__(self, input_dim: int, k: int, widths=(128, 128), dropout=(0.5, 0.5), seed: int = 0):
        self.input_dim, self.k = input_dim, k
        self.widths = tuple(int(w) for w in widths)
        self.dropout = tuple(float(r) for r in dropout)
        rng = np.random.default_rng(seed)
        dims = [N_CATEGORIES + input_dim, *self.widths, k + 1]
        self.params = {}
        for layer, (a, b) in enumerate(zip(dims[:-1], dims[1:]), 1):
            self.params[f"W{layer}"] = nn.Param(f"W{layer}", nn.xavier_uniform(rng, b, a))
            self.params[f"b{layer}"] = nn.Param(f"b{layer}", np.zeros(b))

    @property
    def terminal(self) -> int:
        return self.k

    def header(self) -> dict:
        return {"kind": self.kind, "input_dim": self.input_dim, "k": self.k,
                "widths": list(self.widths), "dropout": list(self.dropout)}

    def forward(self, x, train: bool = False, rng=None):
        p = self.params
        acts = []
        a = np.asarray(x, dtype=np.float64)
        for layer in (1, 2):
            z, _ = nn.dense_forward(a, p[f"W{layer}"].value, p[f"b{layer}"].value)
            g = np.tanh(z)
            d, m = nn.dropout(g, self.dropout[layer - 1], train, rng)
            acts.append((a, g, m))
            a = d
        logits, _ = nn.dense_forward(a, p["W3"].value, p["b3"].value)
        return logits, (acts, a)

    def backward(self, cache, dlogits) -> dict:
        p = self.params
        acts, a3 = cache
        grads = {}
        da, grads["W3"], grads["b3"] = nn.dense_backward((a3, p["W3"].value), dlogits)
        for layer in (2, 1):
            a, g, m = acts[layer - 1]
            if m is not None:
                da = da * m
            dz = da * (1.0 - g * g)
            da, grads[f"W{layer}"], grads[f"b{layer}"] = nn.dense_backward((a, p[f"W{layer}"].value), dz)
        return grads

    def node_inputs(self, arrays, table, content_mask=True):
        """(n_nodes, 48 + D) inputs for a list of TreeArrays."""
        rows = []
        for a in arrays:
            content = np.zeros((a.n_nodes, N_CATEGORIES))
            if content_mask:
                content[:, a.category] = 1.0
            rows.append(np.hstack([content, table[a.proto]]))
        return np.vstack(rows)


# chain LSTM ------------------------------------------------------------------------

def tree_paths(arr: TreeArrays, terminal: int):
    """Root-to-leaf paths of a flattened tree.

    Each path is (node indices, step labels): step t predicts the next node's
    prototype and the last step predicts ``terminal``.
    """
    children = [[] for _ in range(arr.n_nodes)]
    for j, pa in enumerate(arr.parent):
        if pa >= 0:
            children[pa].append(j)
    paths = []
    stack = [[0]]
    while stack:
        path = stack.pop()
        kids = children[path[-1]]
        if not kids:
            labels = [int(arr.proto[j]) for j in path[1:]] + [terminal]
            paths.append((np.array(path), np.array(labels)))
        else:
            stack.extend(path + [c] for c in reversed(kids))
    return paths


@dataclass
class PathBatch:
    """Paths padded to a common length, stored time-major."""
    X: np.ndarray           # (T, P, D)
    valid: np.ndarray       # (T, P) bool
    labels: np.ndarray      # (T, P), -1 where padded
    weights: np.ndarray     # (T, P)
    content: np.ndarray     # (P, 48)
    node: np.ndarray        # (T, P) global node index (for de-duplicated evaluation), -1 padded

    @property
    def n_paths(self) -> int:
        return self.X.shape[1]

    @classmethod
    def build(cls, arrays, table, terminal: int, content_mask: bool = True) -> "PathBatch":
        """Paths of every tree. Step weights give each tree a mean over all of
        its path steps, matching the tree model's per-tree mean."""
        items = []
        offset = 0
        for a in arrays:
            paths = tree_paths(a, terminal)
            n_steps = sum(len(p) for p, _ in paths)
            for p, lab in paths:
                items.append((a, p, lab, 1.0 / n_steps, offset))
            offset += a.n_nodes
        return cls.from_items(items, table, content_mask)

    @classmethod
    def from_items(cls, items, table, content_mask=True):
        T = max(len(p) for _, p, _, _, _ in items)
        P = len(items)
        D = table.shape[1]
        X = np.zeros((T, P, D))
        valid = np.zeros((T, P), dtype=bool)
        labels = np.full((T, P), -1, dtype=np.int64)
        weights = np.zeros((T, P))
        node = np.full((T, P), -1, dtype=np.int64)
        content = np.zeros((P, N_CATEGORIES))
        for j, (a, p, lab, w, off) in enumerate(items):
            n = len(p)
            X[:n, j] = table[a.proto[p]]
            valid[:n, j] = True
            labels[:n, j] = lab
            weights[:n, j] = w
            node[:n, j] = p + off
            if content_mask:
                content[j, a.category] = 1.0
        return cls(X, valid, labels, weights, content, node)


class ChainLSTM:
    """Chain LSTM over root-to-leaf paths, sharing the tree model's parameter names."""

    kind = "lstm"

    def __init__(self, input_dim: int, hidden: int, k: int, dropout=(0.5, 0.5), seed: int = 0):
        if hidden <= 0 or input_dim <= 0 or k <= 0:
            raise InputError("input_dim, hidden and k must be positive")
        self.input_dim, self.hidden, self.k = input_dim, hidden, k
        self.dropout = tuple(float(r) for r in dropout)
        self.params = init_recurrent_params(input_dim, hidden, k, seed)

    @property
    def terminal(self) -> int:
        return self.k

    def header(self) -> dict:
        return {"kind": self.kind, "input_dim": self.input_dim, "hidden": self.hidden, "k": self.k,
                "dropout": list(self.dropout)}

    @classmethod
    def from_tree_model(cls, model: D2DLSTM) -> "ChainLSTM":
        m = cls(model.input_dim, model.hidden, model.k, model.dropout)
        for name, p in model.params.items():
            m.params[name].value = p.value.copy()
        return m

    def forward(self, batch: PathBatch, train: bool = False, rng=None):
        """Returns (logits (T, P, k+1), cache). Padding follows each path's last
        step, so padded logits are ignored and send no gradient back."""
        if batch.X.shape[2] != self.input_dim:
            raise InputError(f"path inputs have dim {batch.X.shape[2]}, model expects {self.input_dim}")
        p = self.params
        W, U, b = p["W"].value, p["U"].value, p["b"].value
        T, P = batch.valid.shape
        h = np.zeros((P, self.hidden))
        c = batch.content @ p["Wc"].value.T + p["bc"].value
        steps, hs = [], np.zeros((T, P, self.hidden))
        for t in range(T):
            h, c, cache = _cell(batch.X[t], h, c, W, U, b)
            steps.append(cache)
            hs[t] = h
        logits, head = head_forward(p, hs.reshape(T * P, -1), self.dropout, train, rng)
        return logits.reshape(T, P, -1), (steps, head)

    def loss_and_dlogits(self, batch: PathBatch, logits, scale: float = 1.0):
        T, P, N = logits.shape
        t_idx, p_idx = np.nonzero(batch.valid)
        rows = t_idx * P + p_idx
        loss, d = nn.weighted_xent(logits.reshape(T * P, N), rows, batch.labels[t_idx, p_idx],
                                   batch.weights[t_idx, p_idx] * scale)
        return loss, d.reshape(T, P, N)

    def backward(self, batch: PathBatch, cache, dlogits) -> dict:
        """Backpropagation through time over every path in the batch."""
        steps, head = cache
        p = self.params
        grads = {name: np.zeros_like(q.value) for name, q in p.items()}
        T, P, N = dlogits.shape
        dh_head = head_backward(p, dlogits.reshape(T * P, N), head, grads).reshape(T, P, -1)
        W, U = p["W"].value, p["U"].value
        dh = np.zeros((P, self.hidden))
        dc = np.zeros((P, self.hidden))
        for t in range(T - 1, -1, -1):
            _, dh, dc, dW, dU, db = _cell_backward(dh + dh_head[t], dc, steps[t], W, U)
            grads["W"] += dW
            grads["U"] += dU
            grads["b"] += db
        grads["Wc"] += dc.T @ batch.content
        grads["bc"] += dc.sum(axis=0)
        return grads

    def loss_and_grads(self, batch: PathBatch, scale: float = 1.0, train: bool = False, rng=None):
        logits, cache = self.forward(batch, train, rng)
        loss, d = self.loss_and_dlogits(batch, logits, scale)
        return loss, self.backward(batch, cache, d)
