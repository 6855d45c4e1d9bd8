"""Mini-batch training with early stopping, metrics, and model selection.

The optimizer is the adaptive-moment method with canonical defaults
(beta1 0.9, beta2 0.999, eps 1e-8). Training is bit-deterministic per seed:
batch shuffles, dropout masks, and parameter initialization all derive from
fixed streams. Early stopping keeps the weights of the epoch with the lowest
validation loss (ties keep the earlier epoch) and stops after ``patience``
epochs without improvement.

Selection trains every grid candidate, ranks by the validation metric, and
reports test metrics for the winner only after ranking; the test split never
influences the choice.
"""

from __future__ import annotations

import concurrent.futures
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .data import SplitTriple, Task, TensorDataset
from .errors import BuildError, TrainingDiverged, TrainingError
from .models import Model, ModelSpec, build, dropout_masks
from .engine import DTYPE


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if min(self.max_epochs, self.patience, self.batch_size) < 1:
            raise TrainingError("epochs, patience, and batch size must be positive")
        if self.patience >= self.max_epochs:
            raise TrainingError("patience must be smaller than max_epochs")
        if self.learning_rate <= 0:
            raise TrainingError("learning rate must be positive")

    def to_dict(self) -> dict:
        return {
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class MetricKind(str, Enum):
    ACCURACY = "accuracy"
    R2 = "r2"
    LOSS = "loss"


@dataclass(frozen=True)
class MetricValue:
    kind: MetricKind
    value: float

    def __post_init__(self):
        if self.kind is MetricKind.ACCURACY and not 0.0 <= self.value <= 1.0:
            raise TrainingError(f"accuracy out of range: {self.value}")
        if self.kind is MetricKind.R2 and self.value > 1.0 + 1e-6:
            raise TrainingError(f"r2 above 1: {self.value}")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "value": self.value}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricValue":
        return cls(MetricKind(d["kind"]), float(d["value"]))


@dataclass
class TrainReport:
    best_epoch: int
    epochs_run: int
    train_loss: list[float]
    val_loss: list[float]
    val_metric: MetricValue

    def __post_init__(self):
        if self.best_epoch > self.epochs_run:
            raise TrainingError("best_epoch cannot exceed epochs_run")

    def to_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_metric": self.val_metric.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        return cls(
            best_epoch=int(d["best_epoch"]),
            epochs_run=int(d["epochs_run"]),
            train_loss=[float(v) for v in d["train_loss"]],
            val_loss=[float(v) for v in d["val_loss"]],
            val_metric=MetricValue.from_dict(d["val_metric"]),
        )


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        c = self.cfg
        b1t = 1.0 - c.beta1 ** self.t
        b2t = 1.0 - c.beta2 ** self.t
        for name, g in grads.items():
            m = self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            v = self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * (g * g)
            update = (c.learning_rate * (m / b1t)
                      / (np.sqrt(v / b2t) + c.eps)).astype(DTYPE)
            params[name] = params[name] - update


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train(
    model: Model,
    train_split: TensorDataset,
    val_split: TensorDataset,
    cfg: TrainConfig,
) -> tuple[Model, TrainReport]:
    """Fit in place and return the model restored to its best epoch.

    Divergence (non-finite training or validation loss) aborts with a
    diagnostic naming the epoch and batch.
    """
    t, b = model.input_shape
    for split, label in ((train_split, "train"), (val_split, "validation")):
        if split.shape[1:] != (t, b):
            raise TrainingError(
                f"{label} split shape {split.shape[1:]} does not match model ({t}, {b})"
            )
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 1]))
    opt = _Adam(model.graph.params, cfg)
    graph = model.graph
    best_val = np.inf
    best_epoch = 0
    best_params: dict[str, np.ndarray] = {}
    train_hist: list[float] = []
    val_hist: list[float] = []
    since_best = 0
    epochs_run = 0

    for epoch in range(1, cfg.max_epochs + 1):
        epochs_run = epoch
        epoch_loss = 0.0
        for bi, idx in enumerate(_batches(train_split.n_samples, cfg.batch_size, rng)):
            xb = train_split.values[idx]
            yb = train_split.targets[idx]
            masks = dropout_masks(model, len(idx), rng)
            loss = graph.forward_loss(xb, yb, masks=masks)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite training loss {loss} at epoch {epoch}, batch {bi}"
                )
            grads = graph.backward("loss")
            opt.step(graph.params, grads.params)
            epoch_loss += loss * len(idx)
        train_hist.append(epoch_loss / train_split.n_samples)

        val_loss = split_loss(model, val_split, cfg.batch_size)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        val_hist.append(val_loss)

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in graph.params.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    for name, arr in best_params.items():
        graph.params[name] = arr
    report = TrainReport(
        best_epoch=best_epoch,
        epochs_run=epochs_run,
        train_loss=train_hist,
        val_loss=val_hist,
        val_metric=evaluate(model, val_split),
    )
    return model, report


def split_loss(model: Model, split: TensorDataset, batch_size: int = 256) -> float:
    """Sample-weighted mean loss over a split, evaluation mode."""
    total = 0.0
    for start in range(0, split.n_samples, batch_size):
        stop = min(start + batch_size, split.n_samples)
        loss = model.graph.forward_loss(
            split.values[start:stop], split.targets[start:stop]
        )
        total += loss * (stop - start)
    return total / split.n_samples


def predict(model: Model, split: TensorDataset, batch_size: int = 256) -> np.ndarray:
    """Class labels (classification) or point predictions (regression)."""
    outs = []
    for start in range(0, split.n_samples, batch_size):
        out = model.forward(split.values[start:start + batch_size])
        outs.append(out)
    out = np.concatenate(outs, axis=0)
    if model.spec.head.task is Task.CLASSIFICATION:
        return out.argmax(axis=1)
    return out.reshape(-1)


def evaluate(model: Model, split: TensorDataset) -> MetricValue:
    """Accuracy for classification; R^2 about the split's target mean."""
    preds = predict(model, split)
    if model.spec.head.task is Task.CLASSIFICATION:
        value = float(np.mean(preds == split.targets))
        return MetricValue(MetricKind.ACCURACY, value)
    targets = split.targets.astype(np.float64)
    ss_tot = float(np.sum((targets - targets.mean()) ** 2))
    if ss_tot == 0.0:
        raise TrainingError("constant targets")
    ss_res = float(np.sum((targets - preds.astype(np.float64)) ** 2))
    return MetricValue(MetricKind.R2, 1.0 - ss_res / ss_tot)


# ---------------------------------------------------------------------------
# selection harness


@dataclass
class CandidateResult:
    index: int
    spec: ModelSpec
    cfg: TrainConfig
    val_metric: Optional[MetricValue]
    report: Optional[TrainReport]
    error: Optional[str] = None
    test_metric: Optional[MetricValue] = None


@dataclass
class SelectionReport:
    ranking: list[CandidateResult]  # best first; failed candidates last
    best_index: int
    test_metric: Optional[MetricValue]

    def to_dict(self) -> dict:
        rows = []
        for c in self.ranking:
            rows.append({
                "index": c.index,
                "architecture": c.spec.architecture.value,
                "learning_rate": c.cfg.learning_rate,
                "val_metric": None if c.val_metric is None else c.val_metric.value,
                "test_metric": None if c.test_metric is None else c.test_metric.value,
                "error": c.error,
            })
        return {
            "ranking": rows,
            "best_index": self.best_index,
            "test_metric": None if self.test_metric is None else self.test_metric.value,
        }


def _train_candidate(args):
    index, spec, cfg, train_split, val_split = args
    _, t, b = train_split.shape
    model = build(spec, t, b, seed=cfg.seed)
    model, report = train(model, train_split, val_split, cfg)
    return index, model, report


def select_model(
    grid: Sequence[tuple[ModelSpec, TrainConfig]],
    splits: SplitTriple,
    workers: int = 1,
    include_test_metrics: bool = True,
    on_candidate: Optional[Callable[[CandidateResult], None]] = None,
) -> tuple[Model, SelectionReport]:
    """Train every candidate and pick the best validation metric.

    Ties keep the earlier grid index. Per-candidate training errors are
    recorded and the grid continues; all candidates failing is an error.
    The test split is consulted only after ranking, and only when
    ``include_test_metrics`` is set; it never influences the ranking.
    """
    if not grid:
        raise TrainingError("empty selection grid")
    jobs = [(i, spec, cfg, splits.train, splits.validation)
            for i, (spec, cfg) in enumerate(grid)]
    results: dict[int, CandidateResult] = {}
    models: dict[int, Model] = {}

    def record(index, model=None, report=None, error=None):
        spec, cfg = grid[index]
        if error is None:
            models[index] = model
            results[index] = CandidateResult(
                index, spec, cfg, report.val_metric, report
            )
        else:
            results[index] = CandidateResult(index, spec, cfg, None, None, error)
        if on_candidate is not None:
            on_candidate(results[index])

    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_train_candidate, job): job[0] for job in jobs}
            for fut in concurrent.futures.as_completed(futures):
                index = futures[fut]
                try:
                    _, model, report = fut.result()
                    record(index, model, report)
                except (TrainingError, BuildError) as exc:
                    record(index, error=str(exc))
    else:
        for job in jobs:
            try:
                _, model, report = _train_candidate(job)
                record(job[0], model, report)
            except (TrainingError, BuildError) as exc:
                record(job[0], error=str(exc))

    ok = [results[i] for i in sorted(results) if results[i].error is None]
    failed = [results[i] for i in sorted(results) if results[i].error is not None]
    if not ok:
        raise TrainingError("every candidate failed: " + "; ".join(
            f"#{c.index}: {c.error}" for c in failed
        ))
    # stable sort keeps the earlier grid index on metric ties
    ranked = sorted(ok, key=lambda c: -c.val_metric.value) + failed
    best = ranked[0]
    test_metric = None
    if include_test_metrics:
        for c in ranked:
            if c.error is None:
                c.test_metric = evaluate(models[c.index], splits.test)
        test_metric = ranked[0].test_metric
    report = SelectionReport(
        ranking=ranked, best_index=best.index, test_metric=test_metric
    )
    return models[best.index], report


def default_grid(
    head, seed: int = 0, train_overrides: Optional[dict] = None
) -> list[tuple[ModelSpec, TrainConfig]]:
    """Five architectures crossed with the learning-rate grid {1e-3, 1e-4}."""
    from .models import Architecture

    overrides = train_overrides or {}
    grid = []
    for arch in Architecture:
        for lr in (1e-3, 1e-4):
            spec = ModelSpec(architecture=arch, head=head)
            cfg = TrainConfig(learning_rate=lr, seed=seed, **overrides)
            grid.append((spec, cfg))
    return grid


def resolve_workers(explicit: Optional[int] = None) -> int:
    """Worker count: explicit argument, else ROARSEL_WORKERS, else 1."""
    if explicit is not None:
        if explicit < 1:
            raise TrainingError("workers must be positive")
        return explicit
    env = os.environ.get("ROARSEL_WORKERS", "").strip()
    if not env:
        return 1
    try:
        value = int(env)
    except ValueError as exc:
        raise TrainingError(f"ROARSEL_WORKERS must be an integer, got {env!r}") from exc
    if value < 1:
        raise TrainingError("ROARSEL_WORKERS must be positive")
    return value
