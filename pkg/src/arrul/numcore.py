"""Minimal differentiable kernels for the 1-D CNN.

Tensors are plain ``numpy.ndarray`` objects in float64. Each layer caches
what its backward pass needs during a training-mode forward, and the cache
is consumed by ``backward``. There is no autodiff tape: networks call the
layer backwards in reverse order by hand.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolation, FormatError, StateError

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def assert_finite(x: np.ndarray, what: str = "tensor") -> None:
    """Debug assertion: raise if ``x`` holds NaN or Inf."""
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Layer:
    """Base class: ``params``/``grads`` are name -> array, ``buffers`` hold non-learned state."""

    kind = "layer"

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def zero_grad(self) -> None:
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called without a cached training-mode forward")
        cache, self._cache = self._cache, None
        return cache

    @property
    def has_cache(self) -> bool:
        return self._cache is not None


class Conv1d(Layer):
    kind = "conv1d"

    def __init__(self, c_in: int, c_out: int, kernel_size: int, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None) -> None:
        super().__init__()
        if stride < 1:
            raise ContractViolation(f"conv1d stride must be >= 1, got {stride}")
        self.c_in, self.c_out = c_in, c_out
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = c_in * kernel_size
        self.params["weight"] = fan_in_uniform(rng, (c_out, c_in, kernel_size), fan_in)
        self.params["bias"] = fan_in_uniform(rng, (c_out,), fan_in)
        self.zero_grad()

    def output_length(self, length: int) -> int:
        return (length + 2 * self.padding - self.kernel_size) // self.stride + 1

    def _columns(self, x: np.ndarray) -> tuple[np.ndarray, int]:
        B, C, L = x.shape
        if C != self.c_in:
            raise ContractViolation(f"conv1d expects {self.c_in} input channels, got {C}")
        if L + 2 * self.padding < self.kernel_size:
            raise ContractViolation(
                f"conv1d input length {L} (+2*{self.padding} padding) shorter than kernel {self.kernel_size}")
        xp = np.pad(x, ((0, 0), (0, 0), (self.padding, self.padding))) if self.padding else x
        win = sliding_window_view(xp, self.kernel_size, axis=2)[:, :, :: self.stride, :]
        L_out = win.shape[2]
        # [B, L', C, K] -> rows of length C*K
        cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * L_out, C * self.kernel_size)
        return cols, L_out

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        B = x.shape[0]
        cols, L_out = self._columns(x)
        w = self.params["weight"].reshape(self.c_out, -1)
        out = cols @ w.T + self.params["bias"]
        if training:
            self._cache = (cols, x.shape)
        return np.ascontiguousarray(out.reshape(B, L_out, self.c_out).transpose(0, 2, 1))

    def backward(self, grad_out: np.ndarray, input_grad: bool = True):
        cols, (B, C, L) = self._take_cache()
        K, s, p = self.kernel_size, self.stride, self.padding
        L_out = grad_out.shape[2]
        g = np.ascontiguousarray(grad_out.transpose(0, 2, 1)).reshape(B * L_out, self.c_out)
        w = self.params["weight"].reshape(self.c_out, -1)
        grad_w = (g.T @ cols).reshape(self.c_out, C, K)
        grad_b = grad_out.sum(axis=(0, 2))
        self.grads["weight"] += grad_w
        self.grads["bias"] += grad_b
        if not input_grad:
            return None, grad_w, grad_b
        gcols = (g @ w).reshape(B, L_out, C, K)
        gxp = np.zeros((B, C, L + 2 * p), dtype=DTYPE)
        for t in range(K):
            gxp[:, :, t: t + s * (L_out - 1) + 1: s] += gcols[:, :, :, t].transpose(0, 2, 1)
        grad_in = gxp[:, :, p: p + L] if p else gxp
        return np.ascontiguousarray(grad_in), grad_w, grad_b


class BatchNorm1d(Layer):
    """Per-channel normalisation over batch and length axes.

    In eval mode the running statistics are used; they start at mean 0 and
    variance 1, so eval before any training pass is the identity affine map.
    """

    kind = "batchnorm1d"

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1) -> None:
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["gamma"] = np.ones(channels, dtype=DTYPE)
        self.params["beta"] = np.zeros(channels, dtype=DTYPE)
        self.buffers["running_mean"] = np.zeros(channels, dtype=DTYPE)
        self.buffers["running_var"] = np.ones(channels, dtype=DTYPE)
        self.zero_grad()

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        B, C, L = x.shape
        if C != self.channels:
            raise ContractViolation(f"batchnorm expects {self.channels} channels, got {C}")
        gamma = self.params["gamma"][None, :, None]
        beta = self.params["beta"][None, :, None]
        if not training:
            mu = self.buffers["running_mean"][None, :, None]
            var = self.buffers["running_var"][None, :, None]
            return gamma * (x - mu) / np.sqrt(var + self.eps) + beta
        n = B * L
        if n < 2:
            raise ContractViolation("batchnorm training mode needs at least 2 values per channel")
        mu = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu[None, :, None]) * inv[None, :, None]
        m = self.momentum
        self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mu
        self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * var * n / (n - 1)
        self._cache = (xhat, inv)
        return gamma * xhat + beta

    def backward(self, grad_out: np.ndarray):
        xhat, inv = self._take_cache()
        B, C, L = grad_out.shape
        n = B * L
        grad_gamma = (grad_out * xhat).sum(axis=(0, 2))
        grad_beta = grad_out.sum(axis=(0, 2))
        dxhat = grad_out * self.params["gamma"][None, :, None]
        grad_in = (inv[None, :, None] / n) * (
            n * dxhat
            - dxhat.sum(axis=(0, 2))[None, :, None]
            - xhat * (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
        )
        self.grads["gamma"] += grad_gamma
        self.grads["beta"] += grad_beta
        return grad_in, grad_gamma, grad_beta


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        if training:
            self._cache = x > 0
        return np.maximum(x, 0.0)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        mask = self._take_cache()
        return grad_out * mask


class MaxPool1d(Layer):
    """Window max; ties resolve to the lowest index in the window."""

    kind = "maxpool1d"

    def __init__(self, kernel_size: int, stride: int | None = None) -> None:
        super().__init__()
        self.kernel_size = kernel_size
        self.stride = stride if stride is not None else kernel_size

    def output_length(self, length: int) -> int:
        return (length - self.kernel_size) // self.stride + 1

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        L = x.shape[2]
        if self.kernel_size > L:
            raise ContractViolation(f"maxpool kernel {self.kernel_size} longer than input {L}")
        win = sliding_window_view(x, self.kernel_size, axis=2)[:, :, :: self.stride, :]
        arg = win.argmax(axis=3)  # first occurrence on ties
        out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
        if training:
            idx = arg + self.stride * np.arange(win.shape[2])[None, None, :]
            self._cache = (idx, x.shape)
        return np.ascontiguousarray(out)

    @property
    def indices(self) -> np.ndarray:
        if self._cache is None:
            raise StateError("maxpool1d: no cached indices")
        return self._cache[0]

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        idx, shape = self._take_cache()
        grad_in = np.zeros(shape, dtype=DTYPE)
        if self.stride >= self.kernel_size:
            np.put_along_axis(grad_in, idx, grad_out, axis=2)
        else:
            B, C, _ = shape
            bi = np.arange(B)[:, None, None]
            ci = np.arange(C)[None, :, None]
            np.add.at(grad_in, (bi, ci, idx), grad_out)
        return grad_in


class Linear(Layer):
    kind = "linear"

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None) -> None:
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = fan_in_uniform(rng, (d_out, d_in), d_in)
        self.params["bias"] = fan_in_uniform(rng, (d_out,), d_in)
        self.zero_grad()

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ContractViolation(f"linear expects [B, {self.d_in}], got {list(x.shape)}")
        if training:
            self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad_out: np.ndarray):
        x = self._take_cache()
        grad_w = grad_out.T @ x
        grad_b = grad_out.sum(axis=0)
        self.grads["weight"] += grad_w
        self.grads["bias"] += grad_b
        return grad_out @ self.params["weight"], grad_w, grad_b


class Dropout(Layer):
    """Inverted dropout: kept entries are scaled by 1/(1-rate) during training."""

    kind = "dropout"

    def __init__(self, rate: float) -> None:
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ContractViolation(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x: np.ndarray, training: bool = True,
                rng: np.random.Generator | None = None) -> np.ndarray:
        if not training or self.rate == 0.0:
            return x
        if rng is None:
            raise ContractViolation("dropout in training mode needs an rng")
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        self._cache = mask
        return x * mask

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self.rate == 0.0:
            return grad_out
        return grad_out * self._take_cache()


def dropout(x: np.ndarray, rate: float, training: bool, rng: np.random.Generator | None = None):
    """Functional dropout. Returns ``(output, mask)``; mask is None when it is the identity."""
    layer = Dropout(rate)
    out = layer.forward(x, training=training, rng=rng)
    return out, layer._cache


def mse_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None):
    """Mean squared error and its gradient w.r.t. ``pred``.

    With ``mask`` the mean runs over the selected rows only and the
    gradient is zero elsewhere; an empty mask gives loss 0.
    """
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ContractViolation(f"mse_loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    if mask is None:
        n = diff.size
        return float(np.mean(diff ** 2)), 2.0 * diff / n
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(diff)
    diff = np.where(mask, diff, 0.0)
    return float(np.sum(diff ** 2) / n), 2.0 * diff / n


@dataclass
class AdamW:
    """AdamW with decoupled weight decay (decay applied to the weights, not the gradient)."""

    lr: float = 0.0008
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamW) -> AdamW:
    state.step(params, grads)
    return state


# -- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float
    checked: dict[str, int]

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.max_rel_error.items() if not e < self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(loss_fn: Callable[[], float], arrays: Mapping[str, np.ndarray],
                   analytic: Mapping[str, np.ndarray], tolerance: float, h: float = 1e-5,
                   max_entries: int | None = None, rng: np.random.Generator | None = None,
                   floor: float = 1e-6) -> GradCheckReport:
    """Compare ``analytic`` gradients against central differences of ``loss_fn``.

    ``arrays`` are perturbed in place and restored. ``loss_fn`` must read
    them afresh on every call. With ``max_entries`` a random subset of each
    block is checked.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    errors: dict[str, float] = {}
    checked: dict[str, int] = {}
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        idx: Iterable[int] = range(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        ga = np.asarray(analytic[name]).reshape(-1)
        worst, count = 0.0, 0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn()
            flat[i] = orig - h
            fm = loss_fn()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            worst = max(worst, relative_error(float(ga[i]), num, floor))
            count += 1
        errors[name] = worst
        checked[name] = count
    return GradCheckReport(errors, tolerance, checked)


# -- checkpoint container ---------------------------------------------------

MAGIC = b"ARRUL1"


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write ``arrays`` to the ARRUL1 container (layout in docs/checkpoint_format.md)."""
    chunks = [MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise FormatError(f"{path}: not an ARRUL1 checkpoint")
    pos = len(MAGIC)

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = data[pos: pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        if pos + 8 * n > len(data):
            raise FormatError(f"{path}: truncated data for {name}")
        out[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(DTYPE).reshape(shape)
        pos += 8 * n
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return out
