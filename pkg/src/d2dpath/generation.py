"""Tree generation from a trained model and node-level comparison with real trees."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .cascade import DiffusionTree, Node
from .errors import InputError
from .features import content_feature
from .model import _cell, head_forward

MODES = ("greedy", "sample")


@dataclass
class GenConfig:
    mode: str = "sample"
    max_depth: int = 6
    b_max: int = 4
    temperature: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_depth < 1 or self.b_max < 1:
            raise InputError("max_depth and b_max must be >= 1")
        if not self.temperature > 0:
            raise InputError("temperature must be > 0")

    def to_dict(self) -> dict:
        return dict(mode=self.mode, max_depth=self.max_depth, b_max=self.b_max,
                    temperature=self.temperature, seed=self.seed)


def max_nodes(cfg: GenConfig) -> int:
    return sum(cfg.b_max ** d for d in range(cfg.max_depth + 1))


def _check_model(model, table):
    params = getattr(model, "params", None)
    if not params or any(n not in params for n in ("W", "U", "b", "Wc", "bc", "Wout")):
        raise InputError("generation needs a fitted recurrent model")
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.shape != (model.k, model.input_dim):
        raise InputError(f"prototype table must have shape ({model.k}, {model.input_dim})")
    return table


def _children(logits, cfg: GenConfig, terminal: int, rng) -> list:
    if cfg.mode == "greedy":
        top = int(np.argmax(logits))
        return [] if top == terminal else [top]
    probs = nn.softmax(logits / cfg.temperature)
    out = []
    while len(out) < cfg.b_max:
        draw = int(rng.choice(len(probs), p=probs))
        if draw == terminal:
            break
        out.append(draw)
    return out


def generate_tree(model, root_prototype: int, content_category: int, cfg: GenConfig, table,
                  rng=None, content_mask: bool = True) -> DiffusionTree:
    """Grow a tree top-down from one root. Every node's input is its
    prototype's row of ``table``; nodes are numbered breadth-first."""
    cfg.validate()
    table = _check_model(model, table)
    if not 0 <= root_prototype < model.k:
        raise InputError(f"root prototype {root_prototype} outside [0, {model.k})")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    p = model.params
    W, U, b = p["W"].value, p["U"].value, p["b"].value
    self_loop = getattr(model, "self_loop_candidate", False)
    content = content_feature(content_category) if content_mask else np.zeros(p["Wc"].value.shape[1])

    nodes = [Node(0, None, int(root_prototype))]
    level = [0]
    hp = np.zeros((1, model.hidden))
    cp = (p["Wc"].value @ content + p["bc"].value)[None]
    for depth in range(cfg.max_depth + 1):
        X = table[[nodes[i].prototype_id for i in level]]
        h, c, _ = _cell(X, hp, cp, W, U, b, self_loop)
        if depth == cfg.max_depth:
            break
        logits, _ = head_forward(p, h, model.dropout, False, None)
        nxt, rows = [], []
        for j, i in enumerate(level):
            for proto in _children(logits[j], cfg, model.k, rng):
                child = len(nodes)
                nodes.append(Node(child, None, proto))
                nodes[i].children.append(child)
                nxt.append(child)
                rows.append(j)
        if not nxt:
            break
        level, hp, cp = nxt, h[rows], c[rows]
    return DiffusionTree(int(content_category), nodes, 0)


def generate_many(model, roots, cfg: GenConfig, table, content_mask: bool = True) -> list:
    """One tree per (root_prototype, content_category) request, request i
    drawing from its own stream (seed, i)."""
    return [generate_tree(model, int(r), int(c), cfg, table,
                          np.random.default_rng([cfg.seed, i]), content_mask)
            for i, (r, c) in enumerate(roots)]


# comparison ----------------------------------------------------------------------

CORRECT, WRONG, MISSING, EXTRA = "correct", "wrong", "missing", "extra"
COLOURS = {CORRECT: "green", WRONG: "red", MISSING: "gray", EXTRA: "orange"}


@dataclass
class TreeDiff:
    correct: int = 0
    wrong: int = 0
    missing: int = 0
    extra: int = 0
    pred_tags: dict = field(default_factory=dict)
    truth_tags: dict = field(default_factory=dict)
    matches: dict = field(default_factory=dict)

    @property
    def matched(self) -> int:
        return self.correct + self.wrong

    def to_dict(self) -> dict:
        return dict(correct=self.correct, wrong=self.wrong, missing=self.missing, extra=self.extra)


def _tag_subtree(tree, node_id, tag, tags) -> int:
    stack, n = [node_id], 0
    while stack:
        i = stack.pop()
        tags[i] = tag
        n += 1
        stack.extend(tree.node(i).children)
    return n


def compare_trees(pred: DiffusionTree, truth: DiffusionTree) -> TreeDiff:
    """Level-order matching. Roots pair up; under each matched pair, children
    with equal labels pair first (multiset intersection, as correct), leftovers
    pair by position (as wrong). Unpaired truth subtrees are missing and
    unpaired predicted subtrees extra."""
    diff = TreeDiff()
    queue = [(pred.root, truth.root)]
    while queue:
        nxt = []
        for pi, ti in queue:
            pn, tn = pred.node(pi), truth.node(ti)
            tag = CORRECT if pn.prototype_id == tn.prototype_id else WRONG
            diff.pred_tags[pi] = diff.truth_tags[ti] = tag
            diff.matches[pi] = ti
            if tag == CORRECT:
                diff.correct += 1
            else:
                diff.wrong += 1
            p_left = list(pn.children)
            t_left = list(tn.children)
            for c in list(p_left):
                lab = pred.node(c).prototype_id
                hit = next((t for t in t_left if truth.node(t).prototype_id == lab), None)
                if hit is not None:
                    nxt.append((c, hit))
                    p_left.remove(c)
                    t_left.remove(hit)
            nxt.extend(zip(p_left, t_left))
            for c in p_left[len(t_left):]:
                diff.extra += _tag_subtree(pred, c, EXTRA, diff.pred_tags)
            for t in t_left[len(p_left):]:
                diff.missing += _tag_subtree(truth, t, MISSING, diff.truth_tags)
        queue = nxt
    return diff


def diff_to_dot(pred: DiffusionTree, truth: DiffusionTree, diff: TreeDiff, name: str = "diff") -> str:
    """Overlay of both trees: predicted nodes coloured by tag, missing truth
    nodes in dotted gray under their nearest matched ancestor."""
    lines = [f"digraph {name} {{", "  node [shape=circle];"]
    back = {t: p for p, t in diff.matches.items()}
    for n in pred.nodes:
        tag = diff.pred_tags[n.node_id]
        label = str(n.prototype_id)
        if tag == WRONG:
            label += f"/{truth.node(diff.matches[n.node_id]).prototype_id}"
        lines.append(f'  p{n.node_id} [label="{label}", color={COLOURS[tag]}];')
        for c in n.children:
            lines.append(f"  p{n.node_id} -> p{c} [color={COLOURS[diff.pred_tags[c]]}];")
    tpar = truth.parents()
    for n in truth.nodes:
        if diff.truth_tags[n.node_id] != MISSING:
            continue
        lines.append(f'  t{n.node_id} [label="{n.prototype_id}", color=gray, style=dotted];')
        par = tpar[n.node_id]
        src = f"p{back[par]}" if par in back else f"t{par}"
        lines.append(f"  {src} -> t{n.node_id} [color=gray, style=dotted];")
    lines.append("}")
    return "\n".join(lines) + "\n"
