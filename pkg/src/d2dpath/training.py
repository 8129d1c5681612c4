"""Training loop, evaluation, convergence measure and the experiment grids.

Batches are fixed-size chunks of trees. Each chunk's gradient is computed
independently (possibly on a worker thread) with its own dropout stream
seeded by (seed, step, chunk) and the chunk gradients are summed in chunk
order, so results do not depend on the number of threads.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .baselines import FULL_MASK, ABLATION_ROWS, ChainLSTM, FCModel, FeatureMask, PathBatch, apply_mask
from .errors import InputError, TrainingError
from .model import D2DLSTM, Forest

log = logging.getLogger(__name__)

MODEL_KINDS = ("d2d", "lstm", "fc")
WEIGHTINGS = ("tree", "pair")


@dataclass
class TrainConfig:
    model: str = "d2d"
    lr_initial: float = 0.1
    lr_reduced: float = 0.01
    plateau_patience: int = 3
    min_rel_improvement: float = 1e-3
    epochs: int = 60
    batch_size: int = 32
    hidden: int = 256
    fc_widths: tuple = (128, 128)
    dropout: tuple = (0.5, 0.5)
    seed: int = 0
    mask: FeatureMask = FULL_MASK
    chunk_size: int = 8
    threads: int = 1
    val_every: int = 1
    internal_terminal: bool = False
    self_loop_candidate: bool = False
    # "tree": mean over each tree's pairs, then over trees; "pair": one mean over
    # every pair in the batch (the chain model counts path steps)
    loss_weighting: str = "tree"

    def validate(self) -> None:
        if self.model not in MODEL_KINDS:
            raise InputError(f"unknown model kind {self.model!r}; choose from {MODEL_KINDS}")
        if not self.lr_initial > self.lr_reduced > 0:
            raise InputError("need lr_initial > lr_reduced > 0")
        if self.epochs < 1 or self.batch_size < 1 or self.chunk_size < 1 or self.val_every < 1:
            raise InputError("epochs, batch_size, chunk_size and val_every must be positive")
        if self.plateau_patience < 1:
            raise InputError("plateau_patience must be positive")
        if self.loss_weighting not in WEIGHTINGS:
            raise InputError(f"loss_weighting must be one of {WEIGHTINGS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fc_widths"] = list(self.fc_widths)
        d["dropout"] = list(self.dropout)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "mask" in d and isinstance(d["mask"], dict):
            d["mask"] = FeatureMask(**d["mask"])
        for key in ("fc_widths", "dropout"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown train settings: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetricsHistory:
    step_loss: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)     # (step, val loss)
    epochs: list = field(default_factory=list)        # dicts, one per epoch
    lr_drop_epoch: int | None = None
    convergence_step: int = 0

    @property
    def total_steps(self) -> int:
        return len(self.step_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "split", "loss", "accuracy"])
        for s, loss in enumerate(self.step_loss, 1):
            w.writerow([s, "train_batch", _fmt(loss), ""])
        for s, loss in self.val_curve:
            w.writerow([s, "val_step", _fmt(loss), ""])
        for e in self.epochs:
            for split in ("train", "val", "test"):
                if f"{split}_loss" in e:
                    w.writerow([e["step"], split, _fmt(e[f"{split}_loss"]), _fmt(e[f"{split}_acc"])])
        return buf.getvalue()

    def summary(self) -> dict:
        last = self.epochs[-1] if self.epochs else {}
        out = {"steps": self.total_steps, "epochs": len(self.epochs),
               "convergence_step": self.convergence_step, "lr_drop_epoch": self.lr_drop_epoch}
        for key in ("train_loss", "train_acc", "val_loss", "val_acc", "test_loss", "test_acc"):
            if key in last:
                out[key] = last[key]
        return out


def _fmt(x) -> str:
    return format(float(x), ".10g")


# model adapters --------------------------------------------------------------------

def make_model(cfg: TrainConfig, input_dim: int, k: int):
    cfg.validate()
    if cfg.model == "d2d":
        return D2DLSTM(input_dim, cfg.hidden, k, cfg.dropout, cfg.seed, cfg.self_loop_candidate)
    if cfg.model == "lstm":
        return ChainLSTM(input_dim, cfg.hidden, k, cfg.dropout, cfg.seed)
    return FCModel(input_dim, k, cfg.fc_widths, cfg.dropout, cfg.seed)


def _make_batch(model, arrays, table, content_mask, weighting="tree"):
    if isinstance(model, ChainLSTM):
        batch = PathBatch.build(arrays, table, model.terminal, content_mask)
        if weighting == "pair":
            batch.weights = batch.valid.astype(np.float64)
        return batch
    batch = Forest.build(arrays, table, content_mask)
    if weighting == "pair":
        batch.pair_weight = np.ones_like(batch.pair_weight)
    return batch


def _weight_total(batch) -> float:
    return float(batch.weights.sum() if isinstance(batch, PathBatch) else batch.pair_weight.sum())


def _loss_and_grads(model, batch, scale, train, rng):
    if isinstance(model, FCModel):
        x = np.hstack([batch.content[batch.tree_of], batch.X])
        logits, cache = model.forward(x, train, rng)
        loss, d = nn.weighted_xent(logits, batch.pair_node, batch.pair_label, batch.pair_weight * scale)
        return loss, model.backward(cache, d)
    return model.loss_and_grads(batch, scale, train, rng)


def pair_logits(model, arrays, table, content_mask=True):
    """Eval-mode logits and labels for every (node, label) pair of ``arrays``.

    Pairs are one per edge plus one per leaf; the chain model's path steps
    are de-duplicated back to those pairs.
    """
    batch = _make_batch(model, arrays, table, content_mask)
    if isinstance(model, ChainLSTM):
        logits, _ = model.forward(batch)
        T, P = batch.valid.shape
        nxt = np.full((T, P), -1, dtype=np.int64)
        nxt[:-1] = np.where(batch.valid[1:], batch.node[1:], -1)
        t_idx, p_idx = np.nonzero(batch.valid)
        keys = np.stack([batch.node[t_idx, p_idx], nxt[t_idx, p_idx]], axis=1)
        _, first = np.unique(keys, axis=0, return_index=True)
        first = np.sort(first)
        return logits[t_idx[first], p_idx[first]], batch.labels[t_idx[first], p_idx[first]]
    if isinstance(model, FCModel):
        x = np.hstack([batch.content[batch.tree_of], batch.X])
        logits = model.forward(x)[0]
    else:
        logits = model.logits(batch)
    return logits[batch.pair_node], batch.pair_label


def evaluate(model, arrays, table, content_mask: bool = True):
    """(mean cross-entropy, accuracy) pooled over all pairs of ``arrays``."""
    if not arrays:
        return float("nan"), float("nan")
    logits, labels = pair_logits(model, arrays, table, content_mask)
    lp = nn.log_softmax(logits)
    loss = float(-np.mean(lp[np.arange(len(labels)), labels]))
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return loss, acc


def model_table(centroids, mask: FeatureMask) -> np.ndarray:
    """Per-prototype model inputs: masked prototype centroids."""
    return apply_mask(centroids, mask)


# training ----------------------------------------------------------------------------

def _param_norms(model) -> dict:
    return {n: float(np.linalg.norm(p.value)) for n, p in model.params.items()}


def train(cfg: TrainConfig, train_arrays, val_arrays, table, k: int, model=None,
          test_arrays=None, checkpoint_dir=None):
    """Fit a model; returns (model, MetricsHistory)."""
    cfg.validate()
    if not train_arrays:
        raise InputError("no training trees")
    table = np.asarray(table, dtype=np.float64)
    if table.shape[0] != k:
        raise InputError(f"input table has {table.shape[0]} rows, expected k={k}")
    model = model or make_model(cfg, table.shape[1], k)
    content = cfg.mask.use_content
    params = list(model.params.values())
    opt = nn.Adam(lr=cfg.lr_initial)
    history = MetricsHistory()
    shuffle = np.random.default_rng([cfg.seed, 1])
    val_batch = _make_batch(model, val_arrays, table, content, cfg.loss_weighting) if val_arrays else None
    best_val, bad_epochs = math.inf, 0
    step = 0
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            perm = shuffle.permutation(len(train_arrays))
            for start in range(0, len(perm), cfg.batch_size):
                ids = perm[start:start + cfg.batch_size]
                step += 1
                chunks = [ids[i:i + cfg.chunk_size] for i in range(0, len(ids), cfg.chunk_size)]

                def work(ci, step=step, chunks=chunks):
                    rng = np.random.default_rng([cfg.seed, step, ci])
                    batch = _make_batch(model, [train_arrays[i] for i in chunks[ci]], table, content,
                                        cfg.loss_weighting)
                    return _loss_and_grads(model, batch, 1.0, True, rng) + (_weight_total(batch),)

                parts = list(pool.map(work, range(len(chunks)))) if pool else \
                    [work(ci) for ci in range(len(chunks))]
                loss = 0.0
                for p in params:
                    p.zero_grad()
                for part_loss, grads, _ in parts:
                    loss += part_loss
                    for p in params:
                        p.grad += grads[p.name]
                # per-tree weights total one per tree, so "tree" divides by the batch size
                total = sum(w for _, _, w in parts)
                loss /= total
                for p in params:
                    p.grad /= total
                if not math.isfinite(loss) or not all(np.all(np.isfinite(p.grad)) for p in params):
                    raise TrainingError(f"non-finite loss at step {step}; parameter norms "
                                        f"{_param_norms(model)}")
                opt.step(params)
                history.step_loss.append(loss)
                if val_batch is not None and step % cfg.val_every == 0:
                    history.val_curve.append((step, _batch_loss(model, val_batch)))
            row = {"epoch": epoch, "step": step, "lr": opt.lr}
            row["train_loss"], row["train_acc"] = evaluate(model, train_arrays, table, content)
            if val_arrays:
                row["val_loss"], row["val_acc"] = evaluate(model, val_arrays, table, content)
            if test_arrays:
                row["test_loss"], row["test_acc"] = evaluate(model, test_arrays, table, content)
            history.epochs.append(row)
            log.info("epoch %d step %d lr %g train %.4f val %s", epoch, step, opt.lr,
                     row["train_loss"], row.get("val_loss"))
            monitor = row.get("val_loss", row["train_loss"])
            improved = monitor < best_val * (1.0 - cfg.min_rel_improvement) if math.isfinite(best_val) \
                else True
            if improved:
                best_val, bad_epochs = monitor, 0
            else:
                bad_epochs += 1
            if checkpoint_dir is not None:
                nn.save_checkpoint(f"{checkpoint_dir}/last.json", _named(model), _header(model, cfg))
                if improved:
                    nn.save_checkpoint(f"{checkpoint_dir}/best.json", _named(model), _header(model, cfg))
            if history.lr_drop_epoch is None and bad_epochs >= cfg.plateau_patience:
                opt.lr = cfg.lr_reduced
                history.lr_drop_epoch = epoch
    finally:
        if pool:
            pool.shutdown()
    curve = [v for _, v in history.val_curve] or history.step_loss
    steps = [s for s, _ in history.val_curve] or list(range(1, step + 1))
    history.convergence_step = convergence_step(curve, steps=steps, total_steps=step)
    return model, history


def _batch_loss(model, batch) -> float:
    """Objective on a prebuilt batch: mean over trees of the per-tree mean pair loss."""
    if isinstance(model, ChainLSTM):
        logits, _ = model.forward(batch)
        return model.loss_and_dlogits(batch, logits)[0] / batch.weights.sum()
    if isinstance(model, FCModel):
        logits = model.forward(np.hstack([batch.content[batch.tree_of], batch.X]))[0]
    else:
        logits = model.logits(batch)
    loss, _ = nn.weighted_xent(logits, batch.pair_node, batch.pair_label, batch.pair_weight)
    return loss / batch.pair_weight.sum()


def _named(model) -> dict:
    return {n: p.value for n, p in model.params.items()}


def _header(model, cfg: TrainConfig) -> dict:
    return {**model.header(), "mask": cfg.mask.to_dict(), "seed": cfg.seed}


def save_model(model, path, cfg: TrainConfig | None = None) -> None:
    header = _header(model, cfg) if cfg else model.header()
    nn.save_checkpoint(path, _named(model), header)


def load_model(path):
    """Rebuild a model (any kind) from a checkpoint; returns (model, header)."""
    header, values = nn.load_checkpoint(path)
    kind = header.get("kind")
    if kind == "d2d":
        model = D2DLSTM(header["input_dim"], header["hidden"], header["k"], header["dropout"],
                        self_loop_candidate=header.get("self_loop_candidate", False))
    elif kind == "lstm":
        model = ChainLSTM(header["input_dim"], header["hidden"], header["k"], header["dropout"])
    elif kind == "fc":
        model = FCModel(header["input_dim"], header["k"], header["widths"], header["dropout"])
    else:
        raise InputError(f"{path}: unknown model kind {kind!r}")
    for name, p in model.params.items():
        if name not in values or values[name].shape != p.shape:
            raise InputError(f"{path}: parameter {name} missing or mis-shaped")
        p.value = values[name].copy()
    return model, header


def convergence_step(values, window: int = 20, tol: float = 0.02, steps=None,
                     total_steps: int | None = None) -> int:
    """First step after which the trailing moving average of ``values`` stays
    within ``tol`` (relative) of its final value.

    ``steps`` gives the optimizer step of each value (default 1, 2, ...). The
    average over the first few points uses however many are available. With
    fewer than ``window`` values the total step count is returned.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise InputError("empty history")
    steps = list(range(1, len(v) + 1)) if steps is None else list(steps)
    total = total_steps if total_steps is not None else steps[-1]
    if len(v) < window:
        return int(total)
    csum = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(len(v))
    lo = np.maximum(0, idx - window + 1)
    ma = (csum[idx + 1] - csum[lo]) / (idx + 1 - lo)
    band = tol * abs(ma[-1])
    outside = np.flatnonzero(np.abs(ma - ma[-1]) > band)
    first = 0 if outside.size == 0 else int(outside[-1]) + 1
    return int(steps[first])


# experiment grids -----------------------------------------------------------------------

@dataclass
class Labelled:
    """Prototype-labelled tree arrays split three ways plus the prototype centroids."""
    train: list
    val: list
    test: list
    centroids: np.ndarray

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


ABLATION_COLUMNS = ["model", "content", "type", "share", "time", "region", "train_acc", "test_acc",
                    "train_loss", "test_loss", "memory", "convergence_step"]


def run_one(cfg: TrainConfig, data: Labelled):
    table = model_table(data.centroids, cfg.mask)
    model, hist = train(cfg, data.train, data.val, table, data.k, test_arrays=data.test)
    return model, hist


def ablation_grid(base: TrainConfig, data: Labelled, rows=ABLATION_ROWS) -> list:
    out = []
    for row in rows:
        cfg = replace(base, model=row.model, mask=row.mask)
        _, hist = run_one(cfg, data)
        last = hist.epochs[-1]
        m = row.mask
        out.append({"model": {"fc": "FC", "lstm": "LSTM", "d2d": "D2D-LSTM"}[row.model],
                    "content": m.use_content, "type": m.use_type, "share": m.use_share,
                    "time": m.use_time, "region": m.use_region,
                    "train_acc": last["train_acc"], "test_acc": last["test_acc"],
                    "train_loss": last["train_loss"], "test_loss": last["test_loss"],
                    "memory": row.memory, "convergence_step": hist.convergence_step})
        log.info("ablation %s %s test acc %.4f", row.model, m.label(), last["test_acc"])
    return out


def prototype_sweep(k_values, relabel, base: TrainConfig) -> list:
    """Re-cluster, re-label and re-train for every k.

    ``relabel(k)`` returns a ``Labelled`` for that prototype count or None
    when k cannot be used (too few users); such k are skipped.
    """
    out = []
    for k in k_values:
        data = relabel(int(k))
        if data is None:
            log.warning("k=%d exceeds the number of users; skipped", k)
            continue
        _, hist = run_one(replace(base, model="d2d"), data)
        last = hist.epochs[-1]
        out.append({"k": int(k), "train_acc": last["train_acc"], "test_acc": last["test_acc"],
                    "test_loss": last["test_loss"], "convergence_step": hist.convergence_step})
    return out


# reports --------------------------------------------------------------------------------

def _cell(v) -> str:
    if isinstance(v, bool):
        return "Yes" if v else "No"
    if isinstance(v, float):
        return format(v, ".4f")
    return str(v)


def text_table(rows, columns) -> str:
    cells = [[_cell(r[c]) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def csv_table(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def json_rows(rows) -> str:
    return json.dumps(rows, indent=1, sort_keys=True) + "\n"
