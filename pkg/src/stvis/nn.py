"""Parameter containers and the small layers the model is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as tn
from .tensor import Tensor


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Walks attributes to find parameters; lists of modules are supported."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        wrong = sorted(n for n in set(own) & set(state) if own[n].shape != tuple(np.shape(state[n])))
        if missing or unexpected or wrong:
            parts = []
            if missing:
                parts.append(f"missing: {', '.join(missing)}")
            if unexpected:
                parts.append(f"unexpected: {', '.join(unexpected)}")
            if wrong:
                parts.append("shape mismatch: " + ", ".join(
                    f"{n} {own[n].shape} vs {tuple(np.shape(state[n]))}" for n in wrong))
            raise ValueError("parameter mismatch; " + "; ".join(parts))
        for name, p in own.items():
            p.data[...] = state[name]


class Linear(Module):
    """y = x @ weight + bias, weight stored [in, out]."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False, bias: bool = True):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            limit = np.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-limit, limit, size=(d_in, d_out))
        self.weight = param(w)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        x = tn.as_tensor(x)
        if x.ndim == 1:
            return self(x.reshape(1, -1)).reshape(-1)
        y = tn.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))

    def __call__(self, x) -> Tensor:
        return tn.layer_norm(x, self.gamma, self.beta)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x) -> Tensor:
        return self.fc2(tn.gelu(self.fc1(x)))


class MLP(Module):
    def __init__(self, dims: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = tn.gelu(x)
        return x


class MultiheadAttention(Module):
    """Dense multi-head attention over the second-to-last axis of [B, S, C]."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, s, c = x.shape
        return x.reshape(b, s, self.n_heads, c // self.n_heads).transpose(0, 2, 1, 3)

    def attention_weights(self, x, pos=None) -> Tensor:
        """Row-stochastic [B, heads, S, S] attention matrix."""
        qk_in = x if pos is None else x + pos
        q = self._split(self.q_proj(qk_in))
        k = self._split(self.k_proj(qk_in))
        scale = 1.0 / np.sqrt(q.shape[-1])
        return tn.softmax(tn.matmul(q, tn.swapaxes(k, -1, -2)) * scale, axis=-1)

    def __call__(self, x, pos=None) -> Tensor:
        x = tn.as_tensor(x)
        weights = self.attention_weights(x, pos)
        v = self._split(self.v_proj(x))
        out = tn.matmul(weights, v).transpose(0, 2, 1, 3)
        b, s, c = x.shape
        return self.out_proj(out.reshape(b, s, c))
