"""Builders for the compared architectures and the structural-resize rule.

Five families over inputs of shape [T, B]: a flattening MLP, three recurrent
readers (plain RNN, LSTM, GRU) that consume the series step by step with the
bands as per-step features, and a 1-D temporal CNN. Heads are a dense layer
producing class logits (softmax cross-entropy) or a single regression output
(mean squared error).

``build`` refuses a convolution kernel longer than the input; the resize path
used between deletion cycles instead clamps the kernel to the new length and
records a note. Resizing always constructs a fresh model: the retraining
protocol forbids warm starts, which would leak information about deleted
features.

All parameters, biases included, draw from a seeded uniform He-style scheme
U(-sqrt(6/fan_in), +sqrt(6/fan_in)), so two different seeds give models that
differ in every tensor.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .data import FeatureSchema, Task
from .engine import DTYPE, Graph, load_tensors, save_tensors
from .errors import BuildError


class Architecture(str, Enum):
    MLP = "mlp"
    RNN = "rnn"
    LSTM = "lstm"
    GRU = "gru"
    TEMPCNN = "tempcnn"


_DEFAULT_DEPTH = {
    Architecture.MLP: 2,       # hidden layers
    Architecture.RNN: 1,       # stacked recurrent layers
    Architecture.LSTM: 1,
    Architecture.GRU: 1,
    Architecture.TEMPCNN: 3,   # convolution blocks
}


@dataclass(frozen=True)
class Head:
    task: Task
    n_classes: Optional[int] = None

    def __post_init__(self):
        if self.task is Task.CLASSIFICATION:
            if self.n_classes is None or self.n_classes < 2:
                raise BuildError("classification head needs n_classes >= 2")
        elif self.n_classes is not None:
            raise BuildError("regression head takes no n_classes")

    @property
    def out_dim(self) -> int:
        return self.n_classes if self.task is Task.CLASSIFICATION else 1

    @classmethod
    def for_schema(cls, schema: FeatureSchema) -> "Head":
        return cls(task=schema.task, n_classes=schema.n_classes)

    def to_dict(self) -> dict:
        return {"task": self.task.value, "n_classes": self.n_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "Head":
        return cls(task=Task(d["task"]), n_classes=d.get("n_classes"))


@dataclass(frozen=True)
class ModelSpec:
    """Architecture family plus hyperparameters; sizes must be positive.

    ``depth`` of None resolves per family: 2 hidden layers for the MLP,
    3 convolution blocks for the temporal CNN, 1 stacked layer otherwise.
    """

    architecture: Architecture
    head: Head
    width: int = 128
    depth: Optional[int] = None
    kernel_size: int = 5
    channels: int = 64
    dense_size: int = 256
    hidden_size: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        sizes = {
            "width": self.width,
            "kernel_size": self.kernel_size,
            "channels": self.channels,
            "dense_size": self.dense_size,
            "hidden_size": self.hidden_size,
        }
        for name, value in sizes.items():
            if value < 1:
                raise BuildError(f"{name} must be positive, got {value}")
        if self.depth is not None and self.depth < 1:
            raise BuildError(f"depth must be positive, got {self.depth}")
        if not 0.0 <= self.dropout < 1.0:
            raise BuildError(f"dropout rate must lie in [0, 1), got {self.dropout}")

    @property
    def resolved_depth(self) -> int:
        return self.depth if self.depth is not None else _DEFAULT_DEPTH[self.architecture]

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture.value,
            "head": self.head.to_dict(),
            "width": self.width,
            "depth": self.depth,
            "kernel_size": self.kernel_size,
            "channels": self.channels,
            "dense_size": self.dense_size,
            "hidden_size": self.hidden_size,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["architecture"] = Architecture(d["architecture"])
        d["head"] = Head.from_dict(d["head"])
        return cls(**d)


@dataclass
class Model:
    spec: ModelSpec
    graph: Graph
    input_shape: tuple[int, int]
    notes: list[str] = field(default_factory=list)

    def forward(self, x, masks=None):
        return self.graph.forward(x, masks=masks)

    def forward_loss(self, x, target, masks=None) -> float:
        return self.graph.forward_loss(x, target, masks=masks)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.graph.params.values())

    def clone(self) -> "Model":
        return Model(self.spec, self.graph.clone(), self.input_shape, list(self.notes))


# ---------------------------------------------------------------------------
# construction


def build(spec: ModelSpec, t: int, b: int, seed: int) -> Model:
    """Seeded construction; errors when the kernel exceeds the input length."""
    if t < 1 or b < 1:
        raise BuildError(f"input dims must be positive, got T={t}, B={b}")
    if spec.architecture is Architecture.TEMPCNN and spec.kernel_size > t:
        raise BuildError(
            f"kernel {spec.kernel_size} larger than input length {t}"
        )
    return _construct(spec, t, b, seed, notes=[])


def resize_for_input(spec: ModelSpec, t: int, b: int, seed: int) -> Model:
    """Fresh model for shrunken data; no weight reuse from any prior model.

    A kernel longer than the new length is clamped to it, with a warning and
    a note on the model for the cycle log.
    """
    if t < 1 or b < 1:
        raise BuildError(f"input dims must be positive, got T={t}, B={b}")
    notes: list[str] = []
    if spec.architecture is Architecture.TEMPCNN and spec.kernel_size > t:
        note = f"kernel clamped from {spec.kernel_size} to {t} for input length {t}"
        warnings.warn(note, stacklevel=2)
        notes.append(note)
        spec = replace(spec, kernel_size=t)
    return _construct(spec, t, b, seed, notes=notes)


def _construct(spec: ModelSpec, t: int, b: int, seed: int, notes: list[str]) -> Model:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    g = Graph(input_shape=(t, b))
    arch = spec.architecture
    if arch is Architecture.MLP:
        last, fan = _mlp_body(g, spec, t, b, rng)
    elif arch is Architecture.TEMPCNN:
        last, fan = _tempcnn_body(g, spec, t, b, rng)
    else:
        last, fan = _recurrent_body(g, spec, t, b, rng)
    _attach_head(g, spec, last, fan, rng)
    return Model(spec=spec, graph=g, input_shape=(t, b), notes=notes)


def _init(rng, shape, fan_in):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


def _dense(g, rng, x, fan_in, fan_out, name):
    w = g.param(f"{name}/w", _init(rng, (fan_in, fan_out), fan_in))
    bias = g.param(f"{name}/b", _init(rng, (fan_out,), fan_in))
    return g.add(g.matmul(x, w), bias)


def _mlp_body(g, spec, t, b, rng):
    h = g.flatten(g.input_node)
    fan = t * b
    for i in range(spec.resolved_depth):
        h = g.relu(_dense(g, rng, h, fan, spec.width, f"layer{i}"))
        h = g.mul(h, g.mask_input(f"drop{i}", (spec.width,)))
        fan = spec.width
    return h, fan


def _tempcnn_body(g, spec, t, b, rng):
    h = g.input_node
    length, c_in = t, b
    for i in range(spec.resolved_depth):
        k = min(spec.kernel_size, length)
        pad = (k - 1) // 2
        w = g.param(f"conv{i}/w", _init(rng, (k, c_in, spec.channels), k * c_in))
        bias = g.param(f"conv{i}/b", _init(rng, (spec.channels,), k * c_in))
        h = g.relu(g.add(g.conv1d(h, w, stride=1, padding=pad), bias))
        length = length + 2 * pad - k + 1
        c_in = spec.channels
    h = g.flatten(h)
    fan = length * spec.channels
    h = g.relu(_dense(g, rng, h, fan, spec.dense_size, "dense"))
    h = g.mul(h, g.mask_input("drop0", (spec.dense_size,)))
    return h, spec.dense_size


def _recurrent_body(g, spec, t, b, rng):
    seq = [g.slice_time(g.input_node, ti) for ti in range(t)]
    in_dim = b
    hid = spec.hidden_size
    step = {
        Architecture.RNN: _rnn_step,
        Architecture.LSTM: _lstm_step,
        Architecture.GRU: _gru_step,
    }[spec.architecture]
    for layer in range(spec.resolved_depth):
        params = _cell_params(g, rng, spec.architecture, in_dim, hid, f"cell{layer}")
        state = None
        outs = []
        for x_node in seq:
            state = step(g, x_node, state, params)
            outs.append(state[0])
        seq = outs
        in_dim = hid
    final = g.mul(seq[-1], g.mask_input("drop0", (hid,)))
    return final, hid


def _cell_params(g, rng, arch, in_dim, hid, prefix):
    gates = {"rnn": ("h",), "lstm": ("i", "f", "g", "o"), "gru": ("z", "r", "n")}[arch.value]
    params = {}
    for gate in gates:
        params[f"wx_{gate}"] = g.param(f"{prefix}/wx_{gate}", _init(rng, (in_dim, hid), in_dim))
        params[f"wh_{gate}"] = g.param(f"{prefix}/wh_{gate}", _init(rng, (hid, hid), hid))
        params[f"b_{gate}"] = g.param(f"{prefix}/b_{gate}", _init(rng, (hid,), in_dim))
    return params


def _gate(g, x, h_prev, params, gate):
    pre = g.matmul(x, params[f"wx_{gate}"])
    if h_prev is not None:
        pre = g.add(pre, g.matmul(h_prev, params[f"wh_{gate}"]))
    return g.add(pre, params[f"b_{gate}"])


def _rnn_step(g, x, state, params):
    h_prev = state[0] if state else None
    return (g.tanh(_gate(g, x, h_prev, params, "h")),)


def _lstm_step(g, x, state, params):
    h_prev, c_prev = state if state else (None, None)
    i = g.sigmoid(_gate(g, x, h_prev, params, "i"))
    o = g.sigmoid(_gate(g, x, h_prev, params, "o"))
    cand = g.tanh(_gate(g, x, h_prev, params, "g"))
    write = g.mul(i, cand)
    if c_prev is None:
        c = write
    else:
        f = g.sigmoid(_gate(g, x, h_prev, params, "f"))
        c = g.add(g.mul(f, c_prev), write)
    return g.mul(o, g.tanh(c)), c


def _gru_step(g, x, state, params):
    # h' = (1 - z) h + z n, with n = tanh(Wx x + r (Wh h) + b)
    h_prev = state[0] if state else None
    z = g.sigmoid(_gate(g, x, h_prev, params, "z"))
    if h_prev is None:
        n = g.tanh(_gate(g, x, None, params, "n"))
        return (g.mul(z, n),)
    r = g.sigmoid(_gate(g, x, h_prev, params, "r"))
    n_pre = g.add(g.matmul(x, params["wx_n"]), g.mul(r, g.matmul(h_prev, params["wh_n"])))
    n = g.tanh(g.add(n_pre, params["b_n"]))
    keep = g.mul(g.affine(z, scale=-1.0, shift=1.0), h_prev)
    return (g.add(keep, g.mul(z, n)),)


def _attach_head(g, spec, last, fan, rng):
    out = _dense(g, rng, last, fan, spec.head.out_dim, "head")
    g.mark_output(out)
    if spec.head.task is Task.CLASSIFICATION:
        g.softmax_cross_entropy(out)
    else:
        g.mean_squared_error(out)


# ---------------------------------------------------------------------------
# dropout masks and checkpoints


def dropout_masks(model: Model, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Inverted-dropout masks for every slot; empty dict when rate is zero."""
    rate = model.spec.dropout
    if rate <= 0.0:
        return {}
    keep = 1.0 - rate
    masks = {}
    for name, shape in model.graph.mask_shapes.items():
        bern = rng.random(size=(n, *shape)) < keep
        masks[name] = (bern.astype(DTYPE) / DTYPE(keep)).astype(DTYPE)
    return masks


def save_model_params(model: Model, path: str | Path) -> None:
    save_tensors(model.graph.params, path)


def load_model_params(model: Model, path: str | Path) -> None:
    """Load a checkpoint into a structurally matching model."""
    tensors = load_tensors(path)
    if sorted(tensors) != sorted(model.graph.params):
        raise BuildError("checkpoint tensors do not match model parameters")
    for name, arr in tensors.items():
        if arr.shape != model.graph.params[name].shape:
            raise BuildError(
                f"checkpoint tensor {name!r} has shape {arr.shape}, "
                f"model expects {model.graph.params[name].shape}"
            )
        model.graph.params[name] = arr
