"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    eps: float = 1e-8
    step: int = 0
    exp_avg: list[np.ndarray] = field(default_factory=list)
    exp_avg_sq: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: list[Tensor], grads: list[np.ndarray | None], state: OptimizerState) -> None:
    """Update ``params`` in place and advance ``state`` by one step."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if not state.exp_avg:
        state.exp_avg = [np.zeros_like(p.data) for p in params]
        state.exp_avg_sq = [np.zeros_like(p.data) for p in params]
    if len(state.exp_avg) != len(params):
        raise ValueError("optimizer state was built for a different parameter list")

    state.step += 1
    beta1, beta2 = state.betas
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} does not match param shape {p.shape}")
        p.data *= 1.0 - state.lr * state.weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        denom = np.sqrt(v / bias2) + state.eps
        p.data -= state.lr * (m / bias1) / denom


def clip_grad_norm(grads: list[np.ndarray | None], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads if g is not None)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            if g is not None:
                g *= scale
    return total
