"""Layer catalogue on top of the autograd engine.

Modules hold their parameters as attributes; ``parameters()`` walks the
attribute tree (including lists of submodules) and returns a flat
name -> Tensor mapping with deterministic ordering, which is also the
checkpoint naming scheme.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, attention, conv1d, gelu, layer_norm, parameter


class Module:
    """Base class with recursive parameter discovery."""

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                params[key] = value
            elif isinstance(value, Module):
                params.update(value.parameters(key))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.parameters(f"{key}.{i}"))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        params[f"{key}.{i}"] = item
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise ValueError(f"state dict mismatch: missing={sorted(missing)}, unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 zero_init: bool = False, bias: bool = True):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = _kaiming(rng, (d_in, d_out), d_in)
        self.w = parameter(w)
        self.b = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.w
        if self.b is not None:
            out = out + self.b
        return out


class Conv1d(Module):
    """Strided, zero-padded 1-D convolution over (B, C, L) activations."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, zero_init: bool = False,
                 init_scale: float = 1.0):
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding
        if zero_init:
            w = np.zeros((c_out, c_in, kernel))
        else:
            w = init_scale * _kaiming(rng, (c_out, c_in, kernel), c_in * kernel)
        self.w = parameter(w)
        self.b = parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, affine: bool = True, eps: float = 1e-10):
        self.eps = eps
        self.gain = parameter(np.ones(dim)) if affine else None
        self.bias = parameter(np.zeros(dim)) if affine else None

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, eps=self.eps)


class ChannelNorm(Module):
    """LayerNorm over the channel axis of (B, C, L) activations."""

    def __init__(self, channels: int, eps: float = 1e-10):
        self.norm = LayerNorm(channels, eps=eps)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(x.swapaxes(1, 2)).swapaxes(1, 2)


class SelfAttention(Module):
    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator,
                 zero_init_out: bool = False):
        self.n_heads = n_heads
        self.wq = parameter(_kaiming(rng, (dim, dim), dim))
        self.wk = parameter(_kaiming(rng, (dim, dim), dim))
        self.wv = parameter(_kaiming(rng, (dim, dim), dim))
        self.wo = parameter(np.zeros((dim, dim)) if zero_init_out
                            else _kaiming(rng, (dim, dim), dim))

    def __call__(self, x: Tensor) -> Tensor:
        return attention(x, self.wq, self.wk, self.wv, self.wo, self.n_heads)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator,
                 zero_init_out: bool = False):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng, zero_init=zero_init_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


def sinusoid_features(values: np.ndarray, dim: int, max_period: float = 1e4) -> np.ndarray:
    """Sinusoidal features of scalar values (used for time embedding).

    Returns an array of shape (len(values), dim).
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half - 1, 1))
    angles = values[:, None] * freqs[None, :] * max_period
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal positions, shape (length, dim)."""
    pos = np.arange(length, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(1e4) * np.arange(half) / max(half - 1, 1))
    angles = pos[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
