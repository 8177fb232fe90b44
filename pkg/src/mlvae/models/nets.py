"""Feed-forward building blocks, context windows and the optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "relu": ad.relu,
}


@dataclass(frozen=True)
class NetSpec:
    """Trunk configuration: an MLP over a +-``context_window`` frame window."""

    context_window: int = 5
    hidden: tuple = (64, 64)
    activation: str = "tanh"

    def __post_init__(self):
        if self.context_window < 0:
            raise ValueError("context_window must be >= 0")
        if any(int(h) < 1 for h in self.hidden):
            raise ValueError("hidden layer sizes must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


# Reference architecture sizes (recurrent stacks); not used by the desk-scale trunks.
PAPER_NET_SIZES = {
    "boundary_detector": {"lstm": (512, 512), "fc": (128, 128), "fc_activation": "relu"},
    "phoneme_estimator": {"lstm": (512, 512), "fc": (128, 128), "fc_activation": "relu"},
    "speech_encoder": {"fc": (32, 32, 32), "lstm": (512, 512, 512, 512), "gmm_fc": 512},
    "speech_decoder": {"bi_sru": (512, 512, 512, 512), "fc": (120, 120)},
    "selector_rho": {"fc": (128, 128), "activation": "sigmoid"},
    "selector_variant": {"fc": (128, 128, 128)},
}


def context_windows(X: np.ndarray, w: int) -> np.ndarray:
    """Stack frames t-w..t+w for each t (edges repeat the boundary frame)."""
    if w == 0:
        return X
    padded = np.pad(X, ((w, w), (0, 0)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, 2 * w + 1, axis=0)
    # (T, D, 2w+1) -> (T, 2w+1, D) -> (T, (2w+1) D)
    return np.ascontiguousarray(win.transpose(0, 2, 1)).reshape(X.shape[0], -1)


class Module:
    """Holds named parameters and child modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield from m.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.data.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.data.shape}")
            p.data = value.astype(p.data.dtype, copy=True)

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32, zero: bool = False):
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = np.zeros((n_in, n_out)) if zero else rng.uniform(-limit, limit, size=(n_in, n_out))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return x @ self.weight + self.bias


class MLP(Module):
    """Hidden layers with a shared activation; the output layer is linear."""

    def __init__(self, n_in: int, hidden, n_out: int, rng, activation: str = "tanh",
                 dtype=np.float32, zero_output: bool = False):
        sizes = [n_in, *hidden]
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(sizes[:-1], sizes[1:])]
        self.out = Linear(sizes[-1], n_out, rng, dtype, zero=zero_output)
        self.activation = activation

    def features(self, x) -> Tensor:
        act = ACTIVATIONS[self.activation]
        h = x
        for layer in self.layers:
            h = act(layer(h))
        return h

    def __call__(self, x) -> Tensor:
        return self.out(self.features(x))


class Adam:
    """Adam with global-norm gradient clipping."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip_norm: float = 5.0):
        self.params = params
        self.lr, self.betas, self.eps, self.clip_norm = lr, betas, eps, clip_norm
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> float:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
        if not np.isfinite(norm):
            raise FloatingPointError("non-finite gradient norm")
        scale = min(1.0, self.clip_norm / norm) if norm > 0 else 1.0
        self.t += 1
        b1, b2 = self.betas
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = (p.data - self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)).astype(p.data.dtype)
            p.grad = None
        return norm

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.t], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        self.t = int(state["t"][0])
        for i in range(len(self.params)):
            self.m[i] = np.asarray(state[f"m.{i}"]).astype(self.m[i].dtype, copy=True)
            self.v[i] = np.asarray(state[f"v.{i}"]).astype(self.v[i].dtype, copy=True)


def clone_params(module: Module) -> dict[str, np.ndarray]:
    return module.state_dict()


@dataclass
class FeatureNormalizer:
    mean: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.float32))
    std: np.ndarray = field(default_factory=lambda: np.ones(1, dtype=np.float32))

    @classmethod
    def fit(cls, arrays) -> "FeatureNormalizer":
        stacked = np.concatenate([np.asarray(a, dtype=np.float64) for a in arrays], axis=0)
        std = stacked.std(axis=0)
        return cls(stacked.mean(axis=0).astype(np.float32),
                   np.where(std > 1e-6, std, 1.0).astype(np.float32))

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return ((np.asarray(X, dtype=np.float32) - self.mean) / self.std).astype(np.float32)
