"""Training loop, metrics, and the selection harness."""

import numpy as np
import pytest

from roarsel.data import SplitTriple, Task, TensorDataset, default_schema
from roarsel.engine import DTYPE, Graph
from roarsel.errors import TrainingDiverged, TrainingError
from roarsel.models import Architecture, Head, Model, ModelSpec, build
from roarsel.training import (
    MetricKind,
    TrainConfig,
    default_grid,
    evaluate,
    resolve_workers,
    select_model,
    split_loss,
    train,
)

CLS2 = Head(task=Task.CLASSIFICATION, n_classes=2)
REG = Head(task=Task.REGRESSION)
SMALL = dict(width=8, channels=6, dense_size=16, hidden_size=8)


def regression_dataset(values, targets, t=1, b=1):
    n = len(targets)
    schema = default_schema(n_timesteps=t, n_bands=b, task=Task.REGRESSION)
    return TensorDataset(
        schema=schema,
        values=np.asarray(values, dtype=DTYPE).reshape(n, t, b),
        targets=np.asarray(targets, dtype=DTYPE),
        years=np.full(n, 2020, dtype=np.int64),
    )


def separable_splits(n=64, t=2, b=3, seed=0):
    """Class 1 iff the first feature is positive, with a wide margin."""
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, t, b)).astype(DTYPE)
    y = (r.random(n) < 0.5).astype(np.int64)
    x[:, 0, 0] = np.where(y == 1, 2.0, -2.0) + r.normal(scale=0.1, size=n)
    schema = default_schema(t, b, Task.CLASSIFICATION, n_classes=2)
    years = np.full(n, 2020, dtype=np.int64)
    half = n // 2
    d = TensorDataset(schema, x, y, years)
    return d.take(np.arange(half)), d.take(np.arange(half, n))


def passthrough_model() -> Model:
    """Regression model whose prediction is exactly its single input value."""
    g = Graph(input_shape=(1, 1))
    w = g.param("w", np.eye(1))
    out = g.matmul(g.flatten(g.input_node), w)
    g.mark_output(out)
    g.mean_squared_error(out)
    spec = ModelSpec(Architecture.MLP, REG)
    return Model(spec=spec, graph=g, input_shape=(1, 1))


# -- evaluate ----------------------------------------------------------------


def test_r2_perfect_fit_is_one():
    d = regression_dataset([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    metric = evaluate(passthrough_model(), d)
    assert metric.kind is MetricKind.R2
    assert metric.value == pytest.approx(1.0)


def test_r2_mean_predictor_is_zero():
    d = regression_dataset([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])
    assert evaluate(passthrough_model(), d).value == pytest.approx(0.0)


def test_r2_hand_case_is_half():
    # SSres = 1, SStot = 2
    d = regression_dataset([1.0, 2.0, 4.0], [1.0, 2.0, 3.0])
    assert evaluate(passthrough_model(), d).value == pytest.approx(0.5)


def test_r2_constant_targets_rejected():
    d = regression_dataset([1.0, 2.0, 3.0], [2.0, 2.0, 2.0])
    with pytest.raises(TrainingError, match="constant targets"):
        evaluate(passthrough_model(), d)


def test_accuracy_counts_correct_argmax():
    g = Graph(input_shape=(1, 2))
    w = g.param("w", np.eye(2))
    out = g.matmul(g.flatten(g.input_node), w)
    g.mark_output(out)
    g.softmax_cross_entropy(out)
    model = Model(spec=ModelSpec(Architecture.MLP, CLS2), graph=g, input_shape=(1, 2))
    schema = default_schema(1, 2, Task.CLASSIFICATION, n_classes=2)
    values = np.array([[[2.0, 1.0]], [[1.0, 2.0]], [[3.0, 0.0]], [[0.0, 3.0]]], dtype=DTYPE)
    targets = np.array([0, 1, 1, 1], dtype=np.int64)  # third sample is wrong
    d = TensorDataset(schema, values, targets, np.full(4, 2020, dtype=np.int64))
    metric = evaluate(model, d)
    assert metric.kind is MetricKind.ACCURACY
    assert metric.value == pytest.approx(0.75)


def test_evaluate_is_order_independent():
    train_split, _ = separable_splits()
    m = build(ModelSpec(Architecture.MLP, CLS2, **SMALL), 2, 3, seed=0)
    direct = evaluate(m, train_split)
    perm = np.random.default_rng(1).permutation(train_split.n_samples)
    shuffled = evaluate(m, train_split.take(perm))
    assert direct.value == pytest.approx(shuffled.value)


# -- train -------------------------------------------------------------------


def test_separable_toy_reaches_full_training_accuracy():
    train_split, val_split = separable_splits()
    m = build(ModelSpec(Architecture.MLP, CLS2, **SMALL), 2, 3, seed=1)
    m, report = train(m, train_split, val_split, TrainConfig(seed=1))
    assert evaluate(m, train_split).value == 1.0
    assert report.epochs_run <= 100


def test_patience_rule_monotone_val_loss_stops_at_eleven():
    """Val targets oppose train targets, so val loss rises every epoch."""
    r = np.random.default_rng(0)
    x = np.ones((32, 1, 1), dtype=DTYPE) + r.normal(scale=0.01, size=(32, 1, 1)).astype(DTYPE)
    train_split = regression_dataset(x, 5.0 + r.normal(scale=0.01, size=32))
    val_split = regression_dataset(x, -5.0 + r.normal(scale=0.01, size=32))
    m = build(ModelSpec(Architecture.MLP, REG, **SMALL), 1, 1, seed=2)
    m, report = train(m, train_split, val_split, TrainConfig(patience=10, seed=2))
    diffs = np.diff(report.val_loss)
    assert (diffs > 0).all(), "scenario must produce monotone increasing val loss"
    assert report.epochs_run == 11
    assert report.best_epoch == 1


def test_same_seed_bit_identical_weights():
    train_split, val_split = separable_splits()
    outs = []
    for _ in range(2):
        m = build(ModelSpec(Architecture.MLP, CLS2, **SMALL), 2, 3, seed=3)
        m, report = train(m, train_split, val_split,
                          TrainConfig(max_epochs=12, patience=5, seed=3))
        outs.append((m, report))
    a, b = outs
    for name in a[0].graph.params:
        assert a[0].graph.params[name].tobytes() == b[0].graph.params[name].tobytes()
    assert a[1].val_loss == b[1].val_loss


def test_best_epoch_weights_reproduce_best_val_loss():
    train_split, val_split = separable_splits(seed=4)
    m = build(ModelSpec(Architecture.MLP, CLS2, **SMALL), 2, 3, seed=4)
    cfg = TrainConfig(max_epochs=15, patience=5, seed=4)
    m, report = train(m, train_split, val_split, cfg)
    best = min(report.val_loss)
    assert report.val_loss[report.best_epoch - 1] == best
    recomputed = split_loss(m, val_split, cfg.batch_size)
    assert recomputed == pytest.approx(best, rel=1e-6)


def test_training_with_dropout_is_deterministic():
    train_split, val_split = separable_splits(seed=5)
    losses = []
    for _ in range(2):
        m = build(ModelSpec(Architecture.MLP, CLS2, dropout=0.3, **SMALL), 2, 3, seed=5)
        _, report = train(m, train_split, val_split,
                          TrainConfig(max_epochs=8, patience=4, seed=5))
        losses.append(report.train_loss)
    assert losses[0] == losses[1]


def test_divergence_aborts_with_diagnostic():
    train_split, val_split = separable_splits(seed=6)
    m = build(ModelSpec(Architecture.MLP, CLS2, **SMALL), 2, 3, seed=6)
    with pytest.raises(TrainingDiverged, match="epoch"):
        train(m, train_split, val_split,
              TrainConfig(learning_rate=1e22, max_epochs=30, patience=5, seed=6))


def test_split_shape_mismatch_rejected():
    train_split, val_split = separable_splits()
    m = build(ModelSpec(Architecture.MLP, CLS2, **SMALL), 4, 3, seed=0)
    with pytest.raises(TrainingError, match="does not match model"):
        train(m, train_split, val_split, TrainConfig())


def test_config_validation():
    with pytest.raises(TrainingError, match="patience"):
        TrainConfig(max_epochs=10, patience=10)
    with pytest.raises(TrainingError, match="positive"):
        TrainConfig(batch_size=0)
    with pytest.raises(TrainingError, match="learning rate"):
        TrainConfig(learning_rate=0.0)


# -- selection ---------------------------------------------------------------


def three_way_splits(seed=0):
    a, b = separable_splits(n=96, seed=seed)
    half = b.n_samples // 2
    return SplitTriple(
        train=a,
        validation=b.take(np.arange(half)),
        test=b.take(np.arange(half, b.n_samples)),
    )


def quick_cfg(seed=0, lr=3e-3):
    return TrainConfig(max_epochs=60, patience=20, batch_size=16, seed=seed,
                       learning_rate=lr)


def test_grid_of_one_wins():
    splits = three_way_splits()
    spec = ModelSpec(Architecture.MLP, CLS2, **SMALL)
    model, report = select_model([(spec, quick_cfg())], splits)
    assert report.best_index == 0
    assert report.ranking[0].val_metric is not None
    assert report.test_metric is not None


def test_metric_tie_keeps_earlier_grid_index():
    # both candidates solve the task exactly, so the tie rule decides
    splits = three_way_splits()
    spec = ModelSpec(Architecture.MLP, CLS2, **SMALL)
    grid = [(spec, quick_cfg(seed=1)), (spec, quick_cfg(seed=2))]
    _, report = select_model(grid, splits)
    assert report.ranking[0].val_metric.value == report.ranking[1].val_metric.value
    assert report.best_index == 0


def test_failing_candidate_recorded_and_grid_continues():
    splits = three_way_splits()
    bad = ModelSpec(Architecture.TEMPCNN, CLS2, **SMALL)  # kernel 5 > T = 2
    good = ModelSpec(Architecture.MLP, CLS2, **SMALL)
    _, report = select_model([(bad, quick_cfg()), (good, quick_cfg())], splits)
    assert report.best_index == 1
    failed = [c for c in report.ranking if c.error is not None]
    assert len(failed) == 1 and "kernel" in failed[0].error


def test_all_candidates_failing_is_an_error():
    splits = three_way_splits()
    bad = ModelSpec(Architecture.TEMPCNN, CLS2, **SMALL)
    with pytest.raises(TrainingError, match="every candidate failed"):
        select_model([(bad, quick_cfg())], splits)


def test_parallel_selection_matches_sequential():
    splits = three_way_splits(seed=7)
    spec_a = ModelSpec(Architecture.MLP, CLS2, **SMALL)
    spec_b = ModelSpec(Architecture.RNN, CLS2, **SMALL)
    grid = [(spec_a, quick_cfg(seed=1)), (spec_b, quick_cfg(seed=2))]
    m1, r1 = select_model(grid, splits, workers=1)
    m2, r2 = select_model(grid, splits, workers=2)
    assert r1.best_index == r2.best_index
    assert [c.index for c in r1.ranking] == [c.index for c in r2.ranking]
    for name in m1.graph.params:
        assert m1.graph.params[name].tobytes() == m2.graph.params[name].tobytes()


class _PoisonedSplit:
    """Stands in for the test split; reading anything but the schema fails."""

    def __init__(self, schema):
        self.schema = schema

    def __getattr__(self, name):
        raise AssertionError(f"test split was read (attribute {name!r})")


def test_ranking_never_reads_test_split():
    base = three_way_splits()
    splits = SplitTriple(train=base.train, validation=base.validation,
                         test=_PoisonedSplit(base.train.schema))
    spec = ModelSpec(Architecture.MLP, CLS2, **SMALL)
    grid = [(spec, quick_cfg(seed=1)), (spec, quick_cfg(seed=2))]
    model, report = select_model(grid, splits, include_test_metrics=False)
    assert report.test_metric is None
    assert report.best_index == 0


def test_default_grid_covers_architectures_and_rates():
    grid = default_grid(CLS2, seed=9)
    assert len(grid) == 10
    archs = {spec.architecture for spec, _ in grid}
    assert archs == set(Architecture)
    rates = {cfg.learning_rate for _, cfg in grid}
    assert rates == {1e-3, 1e-4}
    assert all(cfg.seed == 9 for _, cfg in grid)


# -- worker resolution -------------------------------------------------------


def test_resolve_workers_explicit_wins(monkeypatch):
    monkeypatch.setenv("ROARSEL_WORKERS", "7")
    assert resolve_workers(3) == 3


def test_resolve_workers_env(monkeypatch):
    monkeypatch.setenv("ROARSEL_WORKERS", "5")
    assert resolve_workers() == 5
    monkeypatch.delenv("ROARSEL_WORKERS")
    assert resolve_workers() == 1


def test_resolve_workers_rejects_garbage(monkeypatch):
    monkeypatch.setenv("ROARSEL_WORKERS", "many")
    with pytest.raises(TrainingError, match="integer"):
        resolve_workers()
    monkeypatch.setenv("ROARSEL_WORKERS", "0")
    with pytest.raises(TrainingError, match="positive"):
        resolve_workers()
