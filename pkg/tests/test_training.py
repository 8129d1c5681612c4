import math

import numpy as np
import pytest

from d2dpath import cascade
from d2dpath import synthcascade as sc
from d2dpath import training as tr
from d2dpath.baselines import FCModel
from d2dpath.errors import InputError, TrainingError
from d2dpath.model import D2DLSTM, tree_arrays

K = 5


def chain_arrays(n_trees=40, k=K, seed=0):
    T = np.zeros((k, k + 1))
    for p in range(k - 1):
        T[p, p + 1] = 1.0
    T[k - 1, k] = 1.0
    cfg = sc.from_transition(T, root_dist=np.eye(k)[0], b_max=1, seed=seed)
    trees, _ = sc.generate(cfg, n_trees)
    return [tree_arrays(t, k) for t in trees], cfg, trees


def small_random(n=30, seed=0):
    rng = np.random.default_rng(seed)
    return [tree_arrays(cascade.random_tree(rng, int(rng.integers(1, 8)), K), K) for _ in range(n)]


def test_deterministic_chain_reaches_full_accuracy():
    arrays, cfg, trees = chain_arrays()
    assert sc.bayes_accuracy(cfg, trees) == 1.0
    run = tr.TrainConfig(epochs=20, hidden=16, batch_size=8)
    model, hist = tr.train(run, arrays, arrays[:5], np.eye(K), K)
    assert hist.epochs[-1]["train_acc"] == 1.0
    loss, acc = tr.evaluate(model, arrays, np.eye(K))
    assert acc == 1.0 and loss < 0.05


def test_lr_drops_once_after_plateau():
    arrays = small_random()
    # an unreachable improvement threshold makes every epoch after the first a bad one
    run = tr.TrainConfig(epochs=7, hidden=4, plateau_patience=2, min_rel_improvement=1.0)
    _, hist = tr.train(run, arrays, arrays[:5], np.eye(K), K)
    assert hist.lr_drop_epoch == 3
    assert [e["lr"] for e in hist.epochs] == [0.1] * 3 + [0.01] * 4


def test_same_seed_same_history_and_thread_independence():
    arrays = small_random(40)
    run = tr.TrainConfig(epochs=2, hidden=6, batch_size=16, chunk_size=4, seed=3)
    _, a = tr.train(run, arrays, arrays[:6], np.eye(K), K)
    _, b = tr.train(run, arrays, arrays[:6], np.eye(K), K)
    _, c = tr.train(tr.TrainConfig(**{**run.__dict__, "threads": 4}), arrays, arrays[:6], np.eye(K), K)
    assert a.to_csv() == b.to_csv() == c.to_csv()
    assert a.epochs == c.epochs


@pytest.mark.parametrize("kind", tr.MODEL_KINDS)
def test_single_batch_loss_descends(kind):
    arrays = small_random(8, seed=1)
    run = tr.TrainConfig(model=kind, epochs=50, hidden=8, fc_widths=(16, 16), batch_size=8,
                         dropout=(0.0, 0.0), lr_initial=0.01, lr_reduced=0.001, plateau_patience=100)
    _, hist = tr.train(run, arrays, [], np.eye(K), K)
    assert hist.step_loss[-1] < 0.7 * hist.step_loss[0]


@pytest.mark.parametrize("weighting", tr.WEIGHTINGS)
def test_step_loss_is_weighted_mean(weighting):
    arrays = small_random(6, seed=2)
    run = tr.TrainConfig(epochs=1, hidden=5, batch_size=6, chunk_size=2, dropout=(0.0, 0.0),
                         loss_weighting=weighting)
    model = D2DLSTM(K, 5, K, dropout=(0.0, 0.0), seed=run.seed)
    before = tr._batch_loss(model, tr._make_batch(model, arrays, np.eye(K), True, weighting))
    # recompute by hand from per-pair losses
    logits, labels = tr.pair_logits(model, arrays, np.eye(K))
    lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    nll = -lp[np.arange(len(labels)), labels]
    if weighting == "pair":
        expected = nll.mean()
    else:
        sizes = [len(a.pair_node) for a in arrays]
        expected = np.mean([seg.mean() for seg in np.split(nll, np.cumsum(sizes)[:-1])])
    assert before == pytest.approx(expected, rel=1e-12)
    # one batch holds every tree, so the first step sees the untrained model on all of them
    _, hist = tr.train(run, arrays, [], np.eye(K), K, model=model)
    assert hist.step_loss[0] == pytest.approx(expected, rel=1e-12)


def test_uniform_predictor():
    arrays = small_random(20)
    model = D2DLSTM(K, 4, K)
    model.params["Wout"].value[:] = 0.0
    model.params["bout"].value[:] = 0.0
    loss, acc = tr.evaluate(model, arrays, np.eye(K))
    labels = np.concatenate([a.pair_label for a in arrays])
    assert loss == pytest.approx(math.log(K + 1), abs=1e-12)
    # ties resolve to class 0
    assert acc == pytest.approx(np.mean(labels == 0))


def test_evaluate_is_pure_and_counts_pairs():
    arrays = small_random(10)
    model = D2DLSTM(K, 4, K)
    assert tr.evaluate(model, arrays, np.eye(K)) == tr.evaluate(model, arrays, np.eye(K))
    logits, labels = tr.pair_logits(model, arrays, np.eye(K))
    assert len(labels) == sum(len(a.pair_node) for a in arrays)


def test_non_finite_loss_aborts_with_norms():
    arrays = small_random(8)
    model = D2DLSTM(K, 4, K)
    model.params["W"].value[0, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="parameter norms"):
        tr.train(tr.TrainConfig(epochs=1, hidden=4), arrays, [], np.eye(K), K, model=model)


def test_checkpoints_written(tmp_path):
    arrays = small_random(8)
    tr.train(tr.TrainConfig(epochs=2, hidden=4), arrays, arrays[:2], np.eye(K), K,
             checkpoint_dir=tmp_path)
    assert (tmp_path / "last.json").exists() and (tmp_path / "best.json").exists()
    model, header = tr.load_model(tmp_path / "best.json")
    assert header["kind"] == "d2d" and header["mask"]["use_region"]


def test_fc_checkpoint_round_trip(tmp_path):
    m = FCModel(6, K, widths=(5, 4), seed=2)
    tr.save_model(m, tmp_path / "fc.json")
    back, _ = tr.load_model(tmp_path / "fc.json")
    assert back.widths == (5, 4)
    assert all(np.array_equal(p.value, back.params[n].value) for n, p in m.params.items())


def test_config_validation_and_round_trip():
    for bad in [dict(lr_initial=0.01, lr_reduced=0.1), dict(epochs=0), dict(model="rnn"),
                dict(loss_weighting="node")]:
        with pytest.raises(InputError):
            tr.TrainConfig(**bad).validate()
    cfg = tr.TrainConfig(hidden=7, dropout=(0.1, 0.2))
    assert tr.TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InputError):
        tr.TrainConfig.from_dict({"hiden": 3})


def test_train_input_errors():
    with pytest.raises(InputError):
        tr.train(tr.TrainConfig(), [], [], np.eye(K), K)
    with pytest.raises(InputError):
        tr.train(tr.TrainConfig(), small_random(2), [], np.eye(K + 1), K)


# convergence step ----------------------------------------------------------------

def test_convergence_constant_history():
    assert tr.convergence_step([1.0] * 50) == 1


def test_convergence_decreasing_then_flat():
    v = np.concatenate([np.linspace(5.0, 1.0, 100), np.ones(200)])
    s = tr.convergence_step(v)
    assert 95 <= s <= 120


def test_convergence_short_history_returns_total():
    assert tr.convergence_step([3.0, 2.0, 1.0], total_steps=30) == 30
    with pytest.raises(InputError):
        tr.convergence_step([])


def test_convergence_uses_given_steps():
    v = [5.0] * 10 + [1.0] * 40
    assert tr.convergence_step(v, window=5, steps=range(10, 510, 10)) == 150


# grids -----------------------------------------------------------------------------

def tiny_labelled():
    arrays = small_random(24, seed=4)
    cents = np.random.default_rng(0).uniform(size=(K, 84))
    return tr.Labelled(arrays[:16], arrays[16:20], arrays[20:], cents)


def test_ablation_grid_has_six_rows_and_columns():
    rows = tr.ablation_grid(tr.TrainConfig(epochs=1, hidden=4, fc_widths=(6, 6)), tiny_labelled())
    assert len(rows) == 6
    assert [r["model"] for r in rows] == ["FC", "LSTM"] + ["D2D-LSTM"] * 4
    assert all(set(tr.ABLATION_COLUMNS) <= set(r) for r in rows)
    text = tr.text_table(rows, tr.ABLATION_COLUMNS)
    assert len(text.splitlines()) == 8 and "Yes" in text and "No" in text
    assert tr.csv_table(rows, tr.ABLATION_COLUMNS).count("\n") == 7


def test_sweep_skips_unusable_k():
    data = tiny_labelled()
    rows = tr.prototype_sweep([5, 1000], lambda k: data if k <= 50 else None,
                              tr.TrainConfig(epochs=1, hidden=4))
    assert [r["k"] for r in rows] == [5]
