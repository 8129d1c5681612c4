"""Small dense-network toolkit: activations, dropout, softmax cross-entropy,
Adam, Xavier init, finite-difference gradient checking and JSON checkpoints.

Everything is float64; shapes follow the row-vector convention ``y = x @ W.T + b``
so that a batch of inputs is an ``(n, in)`` array.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

CHECKPOINT_VERSION = 1


class Param:
    """A trainable tensor with its gradient and Adam moment buffers."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


def sigmoid(v):
    # tanh form never overflows, unlike 1 / (1 + exp(-v)) for v << 0
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(v, dtype=np.float64)))


def tanh(v):
    return np.tanh(v)


def xavier_uniform(rng, fan_out: int, fan_in: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_out, fan_in))


def dense_forward(x, W, b):
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise InputError(f"dense shapes disagree: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W.T + b, (x, W)


def dense_backward(cache, dy):
    x, W = cache
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape[-1] != W.shape[0]:
        raise InputError(f"upstream grad {dy.shape} does not match output width {W.shape[0]}")
    if x.ndim == 1:
        return dy @ W, np.outer(dy, x), dy.copy()
    return dy @ W, dy.T @ x, dy.sum(axis=0)


def dropout(v, rate: float, train: bool, rng=None):
    """Inverted dropout. Returns (output, mask); the mask is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise InputError(f"dropout rate {rate} must be in [0, 1)")
    v = np.asarray(v, dtype=np.float64)
    if not train or rate == 0.0:
        return v, None
    if rng is None:
        raise InputError("train-mode dropout needs an rng")
    mask = (rng.random(v.shape) >= rate) / (1.0 - rate)
    return v * mask, mask


def logsumexp(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    return x - np.expand_dims(logsumexp(x, axis), axis)


def softmax_xent(logits, target: int):
    """Cross-entropy of one logit vector: (loss, probs, dlogits)."""
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1:
        raise InputError("softmax_xent expects a single logit vector")
    if not isinstance(target, (int, np.integer)) or not 0 <= target < x.shape[0]:
        raise InputError(f"target {target!r} outside [0, {x.shape[0]})")
    loss = float(-x[target] + logsumexp(x))
    probs = softmax(x)
    d = probs.copy()
    d[target] -= 1.0
    return loss, probs, d


def weighted_xent(logits, rows, targets, weights):
    """Sum of weights[j] * xent(logits[rows[j]], targets[j]).

    Several pairs may share a row. Returns (loss, dlogits) with dlogits the
    same shape as ``logits``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    n_cls = logits.shape[1]
    if len(targets) and (targets.min() < 0 or targets.max() >= n_cls):
        raise InputError(f"targets must lie in [0, {n_cls})")
    lse = logsumexp(logits)
    loss = float(np.sum(weights * (lse[rows] - logits[rows, targets])))
    row_w = np.zeros(len(logits))
    np.add.at(row_w, rows, weights)
    d = softmax(logits) * row_w[:, None]
    np.add.at(d, (rows, targets), -weights)
    return loss, d


@dataclass
class Adam:
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    def step(self, params) -> None:
        self.t += 1
        adam_step(params, self.lr, self.beta1, self.beta2, self.eps, self.t)


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, t: int = 1) -> None:
    """Bias-corrected Adam update, in place on each Param's value and moments."""
    if lr <= 0:
        raise InputError("learning rate must be positive")
    if t < 1:
        raise InputError("Adam step counter starts at 1")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * p.grad
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * p.grad * p.grad
        p.value -= lr * (p.adam_m / c1) / (np.sqrt(p.adam_v / c2) + eps)


# gradient checking -----------------------------------------------------------

# Entries whose analytic and numeric gradients are both below this magnitude
# are compared on an absolute scale; central differences cannot resolve them.
GRAD_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    tol: float
    worst: list = field(default_factory=list)   # (rel_err, name, index, analytic, numeric)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def to_dict(self) -> dict:
        return {"max_rel_err": self.max_rel_err, "n_checked": self.n_checked, "tol": self.tol,
                "passed": self.passed,
                "worst": [{"rel_err": e, "param": n, "index": list(i), "analytic": a, "numeric": m}
                          for e, n, i, a, m in self.worst]}


def rel_error(a, n, floor: float = GRAD_FLOOR):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(loss_fn, params, grads, h: float = 1e-5, tol: float = 1e-6,
               max_entries: int | None = None, rng=None, n_worst: int = 5) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``params`` maps name -> array (perturbed in place and restored),
    ``grads`` maps name -> analytic gradient and ``loss_fn()`` evaluates the
    scalar loss at the current parameter values. With ``max_entries`` each
    tensor larger than that is checked on a random subsample of entries.
    """
    rng = rng or np.random.default_rng(0)
    results = []
    for name, value in params.items():
        flat_idx = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            flat_idx = np.sort(rng.choice(value.size, max_entries, replace=False))
        for fi in flat_idx:
            idx = np.unravel_index(fi, value.shape)
            old = value[idx]
            value[idx] = old + h
            fp = loss_fn()
            value[idx] = old - h
            fm = loss_fn()
            value[idx] = old
            num = (fp - fm) / (2 * h)
            ana = float(grads[name][idx])
            results.append((float(rel_error(ana, num)), name, tuple(int(i) for i in idx), ana, num))
    results.sort(key=lambda r: -r[0])
    worst = results[:n_worst]
    return GradCheckReport(worst[0][0] if worst else 0.0, len(results), tol, worst)


# checkpoints -----------------------------------------------------------------

def save_checkpoint(path, params, header: dict) -> None:
    doc = {"version": CHECKPOINT_VERSION, "header": header,
           "params": {name: {"shape": list(v.shape), "values": [float(x) for x in v.ravel()]}
                      for name, v in params.items()}}
    with open(path, "w") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path):
    """Return (header, {name: array})."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: not a checkpoint ({exc})") from exc
    if doc.get("version") != CHECKPOINT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    params = {}
    for name, d in doc["params"].items():
        arr = np.asarray(d["values"], dtype=np.float64)
        if arr.size != int(np.prod(d["shape"])):
            raise InputError(f"{path}: parameter {name} has wrong size")
        params[name] = arr.reshape(d["shape"])
    return doc["header"], params
