"""Finite-difference checks of the autodiff rules and of every model parameter group."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tn
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .losses import LossWeights, total_loss
from .model import VideoModel
from .sampling import sample_maps
from .synthclip import generate_clip, ground_truth
from .tensor import Tape, Tensor

OP_TOLERANCE = 1e-6
GROUP_TOLERANCE = 1e-4
# loss values near 30 leave ~1e-9 of roundoff in a difference quotient at eps=1e-5
GROUP_FLOOR = 1e-3


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Normwise relative error max|a - f| / max(max|a|, max|f|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(f).max(initial=0.0), floor)
    return float(np.abs(a - f).max(initial=0.0) / scale)


def numeric_gradient(fn: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. every entry of ``x`` (modified in place, then restored)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = fn()
        flat[i] = old - eps
        lo = fn()
        flat[i] = old
        grad.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return grad


def autodiff_gradients(fn: Callable[..., Tensor], arrays: list[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
    tape.backward(out, leaves)
    return [leaf.grad for leaf in leaves]


def check_function(fn: Callable[..., Tensor], arrays: list[np.ndarray], eps: float = 1e-6) -> float:
    """Max normwise relative error over all inputs of a scalar-valued ``fn``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    analytic = autodiff_gradients(fn, arrays)
    errors = []
    for x, a in zip(arrays, analytic):
        numeric = numeric_gradient(lambda: float(fn(*[Tensor(v) for v in arrays]).data), x, eps)
        errors.append(relative_error(a, numeric))
    return max(errors)


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[np.ndarray]]]:
    """(name, scalar fn, inputs); a random projection makes every output entry matter."""
    def proj(shape):
        w = rng.normal(size=shape)
        return lambda t: (t * w).sum()

    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    row = rng.normal(size=(4,))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    apart = a + np.sign(a - b + 1e-3) * 0.3   # keeps max/min away from ties
    p34 = proj((3, 4))
    p234 = proj((2, 3, 4))
    p235 = proj((2, 3, 5))
    p253 = proj((2, 5, 3))
    p26 = proj((2, 6))
    p314 = proj((3, 1, 4))
    p32 = proj((3, 2))
    p324 = proj((3, 2, 4))
    p33 = proj((3, 3))
    p3 = proj((3,))
    p43 = proj((4, 3))
    p4 = proj((4,))
    p64 = proj((6, 4))
    xy = rng.uniform(-0.8, 3.8, size=(2, 5, 2))
    xy = np.floor(xy) + 0.1 + 0.8 * (xy - np.floor(xy))   # avoid integer kinks
    cases = [
        ("add", lambda x, y: p34(x + y), [a, row]),
        ("sub", lambda x, y: p34(x - y), [a, row]),
        ("mul", lambda x, y: p34(x * y), [a, row]),
        ("div", lambda x, y: p34(x / y), [a, pos]),
        ("maximum", lambda x, y: p34(tn.maximum(x, y)), [apart, b]),
        ("minimum", lambda x, y: p34(tn.minimum(x, y)), [apart, b]),
        ("neg", lambda x: p34(-x), [a]),
        ("power", lambda x: p34(x ** 3.0), [a]),
        ("power_frac", lambda x: p34(x ** 1.5), [pos]),
        ("exp", lambda x: p34(tn.exp(x)), [a]),
        ("log", lambda x: p34(tn.log(x)), [pos]),
        ("sqrt", lambda x: p34(tn.sqrt(x)), [pos]),
        ("abs", lambda x: p34(tn.abs_(x)), [_away_from_zero(rng, (3, 4))]),
        ("sigmoid", lambda x: p34(tn.sigmoid(x)), [a]),
        ("softplus", lambda x: p34(tn.softplus(x)), [a]),
        ("relu", lambda x: p34(tn.relu(x)), [_away_from_zero(rng, (3, 4))]),
        ("gelu", lambda x: p34(tn.gelu(x)), [a]),
        ("sum_axis", lambda x: p3(x.sum(axis=1)), [a]),
        ("mean_axis", lambda x: p4(x.mean(axis=0)), [a]),
        ("reshape", lambda x: p26(x.reshape(2, 6)), [a]),
        ("transpose", lambda x: p43(x.transpose()), [a]),
        ("swapaxes", lambda x: p43(tn.swapaxes(x, 0, 1)), [a]),
        ("expand_dims", lambda x: p314(tn.expand_dims(x, 1)), [a]),
        ("broadcast_to", lambda x: p234(tn.broadcast_to(x, (2, 3, 4))), [a]),
        ("getitem", lambda x: p32(x[:, [0, 2]]) + x[np.array([0, 0, 1]), np.array([1, 1, 3])].sum(), [a]),
        ("concat", lambda x, y: p64(tn.concat([x, y], axis=0)), [a, b]),
        ("stack", lambda x, y: p324(tn.stack([x, y], axis=1)), [a, b]),
        ("matmul", lambda x, y: p33(tn.matmul(x, y)), [a, rng.normal(size=(4, 3))]),
        ("matmul_batched", lambda x, y: p235(tn.matmul(x, y)),
         [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))]),
        ("softmax", lambda x: p34(tn.softmax(x, axis=-1)), [a]),
        ("log_softmax", lambda x: p34(tn.log_softmax(x, axis=0)), [a]),
        ("layer_norm", lambda x, g, c: p34(tn.layer_norm(x, g, c)), [a, row, rng.normal(size=4)]),
        ("l2_normalize", lambda x: p34(tn.l2_normalize(x, axis=-1)), [a]),
        ("sample_maps", lambda v, p: p253(sample_maps(v, p)), [rng.normal(size=(2, 3, 4, 3)), xy]),
    ]
    return cases


def op_checks(seed: int = 0) -> list[tuple[str, float]]:
    rng = np.random.default_rng(seed)
    return [(name, check_function(fn, arrays)) for name, fn, arrays in _op_cases(rng)]


# model-level check


def tiny_configs() -> tuple[EncoderConfig, DecoderConfig]:
    enc = EncoderConfig(hidden_dim=16, n_levels=2, n_heads=2, k_intra=2, k_inter=2, window=1,
                        n_layers=2, ffn_dim=32)
    dec = DecoderConfig(n_queries=4, n_layers=2, n_heads=2, n_points=2, ffn_dim=32, mask_dim=8)
    return enc, dec


def parameter_groups(model) -> dict[str, list[tuple[str, Tensor]]]:
    groups: dict[str, list[tuple[str, Tensor]]] = {}
    for name, p in model.named_parameters():
        groups.setdefault(name.rsplit(".", 1)[0], []).append((name, p))
    return groups


@dataclass
class GroupResult:
    group: str
    n_params: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


@dataclass
class GradcheckReport:
    ops: list[tuple[str, float]] = field(default_factory=list)
    groups: list[GroupResult] = field(default_factory=list)
    op_tolerance: float = OP_TOLERANCE

    @property
    def failed_ops(self) -> list[str]:
        return [n for n, e in self.ops if not e < self.op_tolerance]

    @property
    def failed_groups(self) -> list[str]:
        return [g.group for g in self.groups if not g.passed]

    @property
    def passed(self) -> bool:
        return not self.failed_ops and not self.failed_groups

    def table(self) -> str:
        lines = [f"{'check':<48} {'size':>6} {'max rel err':>12}  status"]
        for name, err in self.ops:
            ok = err < self.op_tolerance
            lines.append(f"{'op:' + name:<48} {'':>6} {err:12.3e}  {'pass' if ok else 'FAIL'}")
        for g in self.groups:
            lines.append(f"{g.group:<48} {g.n_params:6d} {g.max_rel_error:12.3e}  {'pass' if g.passed else 'FAIL'}")
        lines.append(f"overall: {'pass' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def _model_loss_fn(seed: int, jitter: float):
    enc, dec = tiny_configs()
    model = VideoModel(enc, dec, seed=seed, contrastive=True)
    rng = np.random.default_rng(seed + 1)
    # zero-initialized offsets put samples exactly on bilinear kinks; a small jitter moves them off
    for p in model.parameters():
        p.data += rng.normal(0.0, jitter, size=p.shape)
    clip = generate_clip(seed, "plain", n_frames=3, height=16, width=16, n_instances=2)
    gt = ground_truth(clip)
    weights = LossWeights()
    _, report = total_loss(model(clip.frames), gt, weights)
    matches = report.matches   # frozen so the loss stays smooth in the parameters

    def loss() -> Tensor:
        return total_loss(model(clip.frames), gt, weights, matches)[0]

    return model, loss


def group_checks(seed: int = 0, eps: float = 1e-5, n_coords: int = 3, jitter: float = 0.01,
                 tolerance: float = GROUP_TOLERANCE) -> list[GroupResult]:
    """Per group: derivative along the group's gradient direction plus its largest coordinates."""
    model, loss = _model_loss_fn(seed, jitter)
    params = model.parameters()
    with Tape() as tape:
        out = loss()
    tape.backward(out, params)
    grads = {id(p): p.grad.copy() for p in params}

    def value() -> float:
        return float(loss().data)

    results = []
    for group, members in parameter_groups(model).items():
        g_all = np.concatenate([grads[id(p)].ravel() for _, p in members])
        norm = np.linalg.norm(g_all)
        errors = []
        if norm > 0:
            dirs = [grads[id(p)] / norm for _, p in members]
            for p, d in zip((p for _, p in members), dirs):
                p.data += eps * d
            hi = value()
            for p, d in zip((p for _, p in members), dirs):
                p.data -= 2 * eps * d
            lo = value()
            for p, d in zip((p for _, p in members), dirs):
                p.data += eps * d
            errors.append(relative_error(norm, (hi - lo) / (2 * eps), GROUP_FLOOR))
        # largest-magnitude coordinates individually
        flat_index = []
        for _, p in members:
            flat_index.extend((p, i) for i in range(p.size))
        for k in np.argsort(-np.abs(g_all))[:n_coords]:
            p, i = flat_index[k]
            flat = p.data.reshape(-1)
            old = flat[i]
            flat[i] = old + eps
            hi = value()
            flat[i] = old - eps
            lo = value()
            flat[i] = old
            errors.append(relative_error(g_all[k], (hi - lo) / (2 * eps), GROUP_FLOOR))
        results.append(GroupResult(group, int(g_all.size), max(errors) if errors else 0.0, tolerance))
    return results


def run_gradcheck(seed: int = 0) -> GradcheckReport:
    return GradcheckReport(ops=op_checks(seed), groups=group_checks(seed))
