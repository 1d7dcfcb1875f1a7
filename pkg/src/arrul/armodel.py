"""Multi-input autoregressive HI network.

Vibration block ``x`` [B, 2k, S] goes through five conv blocks
(conv3 -> batchnorm -> relu -> maxpool). The window of recent HI values
``x2`` [B, k] goes through a 1x1 conv. Both feature vectors are flattened,
concatenated and mapped to one HI value per row by linear -> relu ->
dropout -> linear.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import parse_kv_text
from .errors import ConfigError, ContractViolation, StateError
from .numcore import (BatchNorm1d, Conv1d, Dropout, Linear, MaxPool1d, ReLU,
                      load_checkpoint, save_checkpoint)

BASE_CHANNELS = (32, 32, 64, 128)
POOL_PLAN = (2, 2, 4, 2, 2)
LENGTH_DIVISOR = int(np.prod(POOL_PLAN))  # 64
WEIGHTS_FILE = "weights.arrul"
MANIFEST_FILE = "model.txt"


@dataclass(frozen=True)
class ModelConfig:
    k: int
    points: int = 2560
    channel_scale: float = 1.0
    label_branch_channels: int = 8
    fusion_hidden: int = 256
    dropout_rate: float = 0.2

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.points % LENGTH_DIVISOR:
            raise ConfigError(f"points per acquisition ({self.points}) must be divisible by {LENGTH_DIVISOR}")
        if not 0.0 < self.channel_scale <= 1.0:
            raise ConfigError(f"channel_scale must be in (0, 1], got {self.channel_scale}")

    @property
    def channels(self) -> tuple[int, ...]:
        plan = [*BASE_CHANNELS, 18 * self.k]
        return tuple(max(1, int(round(c * self.channel_scale))) for c in plan)

    @property
    def backbone_length(self) -> int:
        return self.points // LENGTH_DIVISOR

    @property
    def fusion_input(self) -> int:
        return self.backbone_length * self.channels[-1] + self.k * self.label_branch_channels


class ARModel:
    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None) -> None:
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        c_in = 2 * config.k
        self.blocks: list[tuple[Conv1d, BatchNorm1d, ReLU, MaxPool1d]] = []
        for c_out, pool in zip(config.channels, POOL_PLAN):
            self.blocks.append((Conv1d(c_in, c_out, 3, 1, 1, rng=rng), BatchNorm1d(c_out),
                                ReLU(), MaxPool1d(pool, pool)))
            c_in = c_out
        self.label_branch = Conv1d(1, config.label_branch_channels, 1, 1, 0, rng=rng)
        self.fc1 = Linear(config.fusion_input, config.fusion_hidden, rng=rng)
        self.act = ReLU()
        self.drop = Dropout(config.dropout_rate)
        self.fc2 = Linear(config.fusion_hidden, 1, rng=rng)
        self._split = None

    # -- parameter plumbing -------------------------------------------------

    def _named_layers(self):
        for i, (conv, bn, _, _) in enumerate(self.blocks):
            yield f"backbone.{i}.conv", conv
            yield f"backbone.{i}.bn", bn
        yield "label_branch", self.label_branch
        yield "head.fc1", self.fc1
        yield "head.fc2", self.fc2

    def parameters(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((f"{ln}.{pn}", p) for ln, layer in self._named_layers()
                           for pn, p in layer.params.items())

    def gradients(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((f"{ln}.{pn}", layer.grads[pn]) for ln, layer in self._named_layers()
                           for pn in layer.params)

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters plus batchnorm running statistics, in a fixed order."""
        out = self.parameters()
        for ln, layer in self._named_layers():
            for bn_name, buf in layer.buffers.items():
                out[f"{ln}.{bn_name}"] = buf
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for ln, layer in self._named_layers():
            for store in (layer.params, layer.buffers):
                for name in store:
                    key = f"{ln}.{name}"
                    if key not in arrays:
                        raise ContractViolation(f"state is missing {key}")
                    if arrays[key].shape != store[name].shape:
                        raise ContractViolation(
                            f"{key}: shape {arrays[key].shape} does not match model {store[name].shape}")
                    store[name] = np.array(arrays[key], dtype=np.float64)
        for _, layer in self._named_layers():
            layer.zero_grad()

    def zero_grad(self) -> None:
        for _, layer in self._named_layers():
            layer.zero_grad()

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, x2: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        cfg = self.config
        if x.ndim != 3 or x.shape[1:] != (2 * cfg.k, cfg.points):
            raise ContractViolation(f"x must be [B, {2 * cfg.k}, {cfg.points}], got {list(x.shape)}")
        B = x.shape[0]
        if x2.shape != (B, cfg.k):
            raise ContractViolation(f"x2 must be [{B}, {cfg.k}], got {list(x2.shape)}")
        h = x
        for conv, bn, relu, pool in self.blocks:
            h = pool.forward(relu.forward(bn.forward(conv.forward(h, training), training), training), training)
        vib = h.reshape(B, -1)
        lab = self.label_branch.forward(x2[:, None, :], training).reshape(B, -1)
        z = np.concatenate([vib, lab], axis=1)
        if training:
            self._split = (vib.shape[1], h.shape, lab.shape[1])
        z = self.drop.forward(self.act.forward(self.fc1.forward(z, training), training), training, rng)
        return self.fc2.forward(z, training)[:, 0]

    def backward(self, grad_y: np.ndarray) -> "OrderedDict[str, np.ndarray]":
        """Backpropagate ``dL/dy`` and return fresh parameter gradients.

        ``x2`` is data, so no gradient is produced for it.
        """
        if self._split is None:
            raise StateError("backward without a training-mode forward")
        n_vib, h_shape, _ = self._split
        self._split = None
        self.zero_grad()
        g = self.fc2.backward(np.asarray(grad_y, dtype=np.float64)[:, None])[0]
        g = self.fc1.backward(self.act.backward(self.drop.backward(g)))[0]
        self.label_branch.backward(g[:, n_vib:].reshape(g.shape[0], self.config.label_branch_channels, -1),
                                   input_grad=False)
        g = g[:, :n_vib].reshape(h_shape)
        for i, (conv, bn, relu, pool) in reversed(list(enumerate(self.blocks))):
            g = conv.backward(bn.backward(relu.backward(pool.backward(g)))[0], input_grad=i > 0)[0]
        return self.gradients()


def build_model(config: ModelConfig, rng: np.random.Generator | None = None) -> ARModel:
    return ARModel(config, rng)


def shift_update(x2: np.ndarray, y_pred: np.ndarray) -> np.ndarray:
    """Drop the oldest HI value and append the newest prediction (returns a new array)."""
    x2 = np.asarray(x2, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if y_pred.shape[0] != x2.shape[0]:
        raise ContractViolation(f"{y_pred.shape[0]} predictions for {x2.shape[0]} rows")
    return np.concatenate([x2[:, 1:], y_pred[:, None]], axis=1)


INIT_MODES = ("teacher", "ones", "carryover")


def init_x2(mode: str, k: int, batch: int = 1, label_windows: np.ndarray | None = None,
            previous: np.ndarray | None = None) -> np.ndarray:
    """Initial HI window.

    ``teacher`` copies true labels, ``ones`` is the healthy prior and
    ``carryover`` takes the last ``k`` predictions of the previous segment
    (``previous`` is [B, >=k]).
    """
    if mode == "teacher":
        if label_windows is None or np.shape(label_windows) != (batch, k):
            raise ContractViolation(f"teacher init needs label windows of shape [{batch}, {k}]")
        return np.array(label_windows, dtype=np.float64)
    if mode == "ones":
        return np.ones((batch, k))
    if mode == "carryover":
        prev = None if previous is None else np.atleast_2d(np.asarray(previous, dtype=np.float64))
        if prev is None or prev.shape[0] != batch or prev.shape[1] < k:
            raise ContractViolation(f"carryover init needs at least {k} previous predictions per row")
        return prev[:, -k:].copy()
    raise ContractViolation(f"unknown x2 init mode {mode!r}; expected one of {INIT_MODES}")


# -- persistence ------------------------------------------------------------

def save_model(model: ARModel, directory: str | Path, weights_name: str = WEIGHTS_FILE) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(directory / weights_name, model.state_arrays())
    lines = [f"{k} = {v!r}" for k, v in asdict(model.config).items()]
    (directory / MANIFEST_FILE).write_text("\n".join(lines) + "\n")
    return directory / weights_name


def read_model_config(directory: str | Path) -> ModelConfig:
    path = Path(directory) / MANIFEST_FILE
    values = parse_kv_text(path.read_text(), str(path))
    return ModelConfig(**values)


def load_model(directory: str | Path, weights_name: str = WEIGHTS_FILE) -> ARModel:
    directory = Path(directory)
    model = ARModel(read_model_config(directory))
    model.load_state(load_checkpoint(directory / weights_name))
    return model
