import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facestutter.layers import Dense, Flatten, Model
from facestutter.models import ModelConfig
from facestutter.rng import stream
from facestutter.training import (MetricsReport, PlateauController, TrainConfig, TrainingDiverged, _loss_acc,
                                  cross_validate, evaluate, shuffled_labels, simulate_schedule, stratified_split,
                                  train_model)


def check_partition(plan, y):
    non_test = plan.non_test()
    assert np.intersect1d(plan.test, non_test).size == 0
    assert np.array_equal(np.sort(np.concatenate([plan.test, non_test])), np.arange(y.size))
    vals = [v for _, v in plan.folds]
    for i in range(len(vals)):
        for j in range(i + 1, len(vals)):
            assert np.intersect1d(vals[i], vals[j]).size == 0
    for train, val in plan.folds:
        assert np.intersect1d(train, val).size == 0
        assert np.intersect1d(train, plan.test).size == 0
        assert np.sum(y[train] == 0) == np.sum(y[train] == 1)


def test_table_sizes_on_balanced_dataset():
    y = np.array([0, 1] * 1852)
    plan = stratified_split(y, TrainConfig())
    assert plan.test.size == 741
    for (train, val), pool in zip(plan.folds, plan.pools):
        assert abs(val.size - 593) <= 1
        assert abs(pool.size - 2370) <= 1
        assert train.size >= 2368
    check_partition(plan, y)


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 400), st.floats(0.1, 0.9), st.integers(0, 2**31), st.integers(2, 6))
def test_split_partition_properties(n, frac, seed, folds):
    y = (stream(seed, "labels").random(n) < frac).astype(int)
    if min(np.sum(y == 0), np.sum(y == 1)) < folds + 2:
        return
    plan = stratified_split(y, TrainConfig(folds=folds, seed=seed))
    check_partition(plan, y)
    assert len(plan.folds) == folds


def test_test_set_stratified():
    y = np.array([0] * 700 + [1] * 300)
    plan = stratified_split(y, TrainConfig())
    assert plan.test.size == 200
    assert np.sum(y[plan.test]) == 60


def test_split_rejects_missing_class():
    with pytest.raises(ValueError, match="class 1"):
        stratified_split(np.zeros(50, dtype=int), TrainConfig())


def test_split_rejects_too_few_per_class():
    with pytest.raises(ValueError):
        stratified_split(np.array([0] * 30 + [1] * 3), TrainConfig())


def test_split_is_seeded():
    y = np.array([0, 1] * 100)
    a, b = stratified_split(y, TrainConfig(seed=4)), stratified_split(y, TrainConfig(seed=4))
    c = stratified_split(y, TrainConfig(seed=5))
    assert np.array_equal(a.test, b.test)
    assert not np.array_equal(a.test, c.test)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr0=1e-7, lr_min=1e-6)
    with pytest.raises(ValueError):
        TrainConfig(lr_patience=0)
    with pytest.raises(ValueError):
        TrainConfig(test_fraction=1.0)


def test_flat_loss_trace():
    lrs, stop = simulate_schedule([1.0] * 100, TrainConfig(), initial_loss=1.0)
    assert lrs == [0.01] * 15 + [0.005] * 15
    assert stop == 30


def test_improvement_resets_both_counters():
    losses = [1.0] * 10 + [0.5] + [0.5] * 40
    lrs, stop = simulate_schedule(losses, TrainConfig(), initial_loss=1.0)
    # improvement at epoch 11; waits restart there
    assert stop == 41
    assert lrs[:26] == [0.01] * 26 and lrs[26:] == [0.005] * 15


def test_sub_threshold_change_is_not_improvement():
    # dips of 5e-7 below the best never count, so the run stalls as if flat
    lrs, stop = simulate_schedule([1.0 - 5e-7 * (k % 2) for k in range(1, 60)], TrainConfig(), initial_loss=1.0)
    assert stop == 30


def test_lr_floor():
    cfg = TrainConfig(lr0=0.01, lr_min=0.004, lr_patience=1, early_stop_patience=10)
    lrs, stop = simulate_schedule([1.0] * 20, cfg, initial_loss=1.0)
    assert lrs == [0.01, 0.005] + [0.004] * 8
    assert stop == 10


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.0, 2.0, allow_nan=False), min_size=1, max_size=200),
       st.integers(1, 20), st.integers(1, 40))
def test_lr_trace_non_increasing_and_floored(losses, lr_pat, stop_pat):
    cfg = TrainConfig(lr_patience=lr_pat, early_stop_patience=stop_pat, lr_min=1e-3)
    lrs, stop = simulate_schedule(losses, cfg)
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert all(lr >= cfg.lr_min for lr in lrs)
    if stop is not None:
        assert stop == len(lrs)


def toy_separable(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, 17, 87))
    y = (X[:, 3, 10] > 0.5).astype(float)
    X[:, 3, 10] = np.where(y == 1, 0.9, 0.1)
    return X, y


def linear_model(seed=0):
    return Model([Flatten(), Dense(17 * 87, 1, rng=stream(seed, "toy"))], (1, 17, 87))


def test_linearly_separable_toy_converges():
    X, y = toy_separable()
    cfg = TrainConfig(max_epochs=100, batch_size=32, lr0=0.5, early_stop_patience=100, lr_patience=100)
    model, hist = train_model(linear_model(), X, y, X, y, cfg, seed=0)
    assert hist.train_acc[-1] >= 0.99 or max(hist.train_acc) >= 0.99
    assert model.trained


def test_same_seed_same_history():
    X, y = toy_separable(80)
    cfg = TrainConfig(max_epochs=5, batch_size=16)
    _, h1 = train_model(linear_model(), X, y, X[:20], y[:20], cfg, seed=3)
    _, h2 = train_model(linear_model(), X, y, X[:20], y[:20], cfg, seed=3)
    assert h1 == h2


def test_best_weights_restored_and_best_is_minimum():
    X, yt = toy_separable(120, seed=2)
    cfg = TrainConfig(max_epochs=15, batch_size=16, lr0=2.0, lr_patience=3, early_stop_patience=6)
    model, hist = train_model(linear_model(1), X[:80], yt[:80], X[80:], yt[80:], cfg, seed=1)
    assert hist.best_val_loss <= min(hist.val_loss)
    assert hist.best_val_loss <= hist.initial_val_loss
    assert _loss_acc(model, X[80:], yt[80:])[0] == pytest.approx(hist.best_val_loss, abs=1e-12)


def test_small_cnn_training_improves(trained_cnn_a):
    model, Xn, y = trained_cnn_a
    assert model.trained
    assert np.isfinite(model.predict_proba(Xn[320:])).all()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch():
    X, y = toy_separable(40)
    model = linear_model()
    model.layers[1].params["w"][:] = np.inf
    with pytest.raises(TrainingDiverged) as err:
        train_model(model, X, y, X, y, TrainConfig(max_epochs=3, batch_size=8), seed=0)
    assert err.value.epoch == 1


def test_empty_split_rejected():
    X, y = toy_separable(10)
    with pytest.raises(ValueError):
        train_model(linear_model(), X, y, X[:0], y[:0], TrainConfig(), seed=0)


def test_metrics_report_csv_and_text():
    rep = MetricsReport([{"accuracy": 0.5, "auc_roc": 0.6, "f1": 0.4}, {"accuracy": 0.7, "auc_roc": 0.8, "f1": 0.6}])
    rows = rep.to_csv().strip().splitlines()
    assert rows[0] == "fold,accuracy,auc_roc,f1"
    assert len(rows) == 5 and rows[3].startswith("mean,") and rows[4].startswith("std,")
    assert rep.mean("accuracy") == pytest.approx(0.6)
    assert rep.std("accuracy") == pytest.approx(0.1)
    assert "aggregate" in rep.to_text()


def test_identical_folds_have_zero_std():
    fold = {"accuracy": 0.5, "auc_roc": 0.6, "f1": 0.4}
    rep = MetricsReport([dict(fold) for _ in range(5)])
    assert all(rep.std(m) == 0.0 for m in ("accuracy", "auc_roc", "f1"))


def test_evaluate_ranges():
    rng = np.random.default_rng(0)
    m = evaluate(rng.random(50), np.arange(50) % 2)
    assert all(0.0 <= v <= 1.0 for v in m.values())


def test_shuffled_labels_is_a_permutation():
    y = np.array([0] * 30 + [1] * 70)
    s = shuffled_labels(y, seed=2)
    assert np.sort(s).tolist() == np.sort(y).tolist()
    assert not np.array_equal(s, y)
    assert np.array_equal(s, shuffled_labels(y, seed=2))


def test_cross_validate_random_forest(small_synth):
    from facestutter.data import stack
    trials, oracle = small_synth
    X, y = stack(trials)
    res = cross_validate(X, y, ModelConfig(architecture="RF", rf_trees=20, seed=1), TrainConfig(folds=3))
    assert len(res.report.per_fold) == 3
    assert res.report.mean("auc_roc") > 0.55
    assert res.report.std("auc_roc") >= 0.0


def test_plateau_controller_start_sets_baseline():
    ctl = PlateauController(TrainConfig())
    ctl.start(0.7)
    assert ctl.best == 0.7
    assert ctl.update(0.6) is False and ctl.best == 0.6
