"""Minimal numpy layer kit: parameters, linear layers, activations, dropout,
and a decoupled-weight-decay adaptive optimizer.

Everything is single-threaded numpy with explicit forward caches and
hand-derived backward passes, so training is deterministic down to the byte
for a fixed seed and gradients can be checked against finite differences.
Parameters are float32 (the serialization dtype); modules accept a ``dtype``
so gradient checks can run in float64.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .archive import tensor_bytes
from .errors import ShapeError


class Param:
    """One tensor of trainable state plus its gradient accumulator.

    ``frozen`` parameters keep their bytes through any number of optimizer
    steps; gradients routed at them are discarded.
    """

    def __init__(self, value: np.ndarray, name: str, frozen: bool = False):
        self.value = np.array(value, copy=True)
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.frozen = frozen

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


class Module:
    """Base for layers: owns parameters, caches one forward for backward()."""

    def params(self) -> list[Param]:
        raise NotImplementedError

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def state_tensors(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + p.name: p.value for p in self.params()}

    def load_state(self, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
        for p in self.params():
            key = prefix + p.name
            src = np.asarray(tensors[key])
            if src.shape != p.value.shape:
                raise ShapeError(f"tensor '{key}': stored {src.shape}, expected {p.value.shape}")
            p.value[...] = src.astype(p.value.dtype)

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.state_tensors().items()):
            h.update(name.encode())
            h.update(tensor_bytes(arr))
        return h.hexdigest()

    def set_frozen(self, flag: bool):
        for p in self.params():
            p.frozen = flag
        return self


class Linear(Module):
    """y = x @ W.T + b, batched over leading axes."""

    def __init__(self, in_dim, out_dim, rng=None, name="linear", dtype=np.float32,
                 init="uniform", bound=None):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        if init == "identity":
            w = np.eye(self.out_dim, self.in_dim, dtype=dtype)
            b = np.zeros(self.out_dim, dtype=dtype)
        elif init == "zeros":
            w = np.zeros((self.out_dim, self.in_dim), dtype=dtype)
            b = np.zeros(self.out_dim, dtype=dtype)
        elif init == "uniform":
            if rng is None:
                raise ShapeError("uniform init requires an rng")
            if bound is None:
                bound = 1.0 / np.sqrt(self.in_dim)
            w = rng.uniform(-bound, bound, size=(self.out_dim, self.in_dim)).astype(dtype)
            b = rng.uniform(-bound, bound, size=self.out_dim).astype(dtype)
        else:
            raise ShapeError(f"unknown init scheme '{init}'")
        self.weight = Param(w, f"{name}.weight")
        self.bias = Param(b, f"{name}.bias")
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"linear expects last dim {self.in_dim}, got {x.shape[-1]}")
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x = self._x
        flat_x = x.reshape(-1, self.in_dim)
        flat_d = dout.reshape(-1, self.out_dim)
        self.weight.grad += flat_d.T @ flat_x
        self.bias.grad += flat_d.sum(axis=0)
        return dout @ self.weight.value


def relu(x):
    return np.maximum(x, 0.0)


def tanh(x):
    return np.tanh(x)


def sigmoid(x):
    # Stable on both tails.
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def quick_gelu(x):
    return x * sigmoid(1.702 * x)


_ACTIVATIONS = {
    "relu": (relu, lambda x, y: (x > 0).astype(y.dtype)),
    "tanh": (tanh, lambda x, y: 1.0 - y * y),
    "identity": (lambda x: x, lambda x, y: np.ones_like(y)),
    "quick_gelu": (
        quick_gelu,
        lambda x, y: sigmoid(1.702 * x) + 1.702 * x * sigmoid(1.702 * x) * (1.0 - sigmoid(1.702 * x)),
    ),
}


class Activation(Module):
    def __init__(self, kind: str = "relu"):
        if kind not in _ACTIVATIONS:
            raise ShapeError(f"unknown activation '{kind}'")
        self.kind = kind
        self._x = None
        self._y = None

    def params(self):
        return []

    def forward(self, x):
        fn, _ = _ACTIVATIONS[self.kind]
        self._x = x
        self._y = fn(x)
        return self._y

    def backward(self, dout):
        _, dfn = _ACTIVATIONS[self.kind]
        return dout * dfn(self._x, self._y)


class Dropout(Module):
    """Inverted dropout; identity when ``train`` is False or rate is 0.

    The mask generator is injected per run so two same-seed runs draw
    identical masks.
    """

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)
        self._mask = None

    def params(self):
        return []

    def forward(self, x, train: bool = False, rng=None):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ShapeError("dropout in training mode needs an rng")
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, dout):
        if self._mask is None:
            return dout
        return dout * self._mask


class AdamW:
    """Decoupled-weight-decay adaptive moment estimation.

    Moment state exists only for parameters that were unfrozen when first
    seen; freezing later simply skips the update (and the stale state is
    dropped). Gradients are globally norm-clipped before the step.
    """

    def __init__(self, params: list[Param], lr=1e-4, weight_decay=1e-4,
                 betas=(0.9, 0.999), eps=1e-8, clip_norm=1.0):
        self.all_params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.clip_norm = clip_norm
        self.step_count = 0
        self.state: dict[int, dict] = {}

    def zero_grad(self):
        for p in self.all_params:
            p.zero_grad()

    def _clip(self, active: list[Param]):
        if self.clip_norm is None:
            return
        total = 0.0
        for p in active:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
        norm = np.sqrt(total)
        if norm > self.clip_norm:
            scale = self.clip_norm / norm
            for p in active:
                p.grad *= scale

    def step(self):
        active = [p for p in self.all_params if not p.frozen]
        for key in list(self.state):
            if not any(id(p) == key for p in active):
                del self.state[key]
        self._clip(active)
        self.step_count += 1
        t = self.step_count
        for p in active:
            st = self.state.get(id(p))
            if st is None:
                st = {"m": np.zeros_like(p.value), "v": np.zeros_like(p.value)}
                self.state[id(p)] = st
            g = p.grad
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * g * g
            m_hat = st["m"] / (1.0 - self.beta1 ** t)
            v_hat = st["v"] / (1.0 - self.beta2 ** t)
            update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.value
            p.value -= (self.lr * update).astype(p.value.dtype)


def derive_seed(base_seed: int, label: str) -> int:
    """Stable 32-bit stream seed for a named purpose under one run seed."""
    digest = hashlib.sha256(f"{base_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def derived_rng(base_seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base_seed, label))
