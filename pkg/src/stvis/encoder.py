"""Spatio-temporal deformable encoder.

Feature maps are kept channel-last, ``[T, H_l, W_l, C]`` per level, so a frame's
level-``l`` map is ``levels[l][t]``. Query tokens of a frame are the pixels of
all levels flattened level by level, giving ``[T, N, C]`` with
``N = sum(H_l * W_l)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .nn import FeedForward, LayerNorm, Linear, Module, param
from .sampling import sample_maps
from .tensor import Tensor

FUSION_MODES = ("dynamic", "add", "concat")


@dataclass(frozen=True)
class EncoderConfig:
    n_heads: int = 2
    n_levels: int = 2
    k_intra: int = 2
    k_inter: int = 2
    window: int = 1
    hidden_dim: int = 32
    n_layers: int = 2
    fusion_mode: str = "dynamic"
    ffn_dim: int = 64
    daf_reduction: int = 4
    daf_pooling: str = "token"
    temporal: bool = True
    in_channels: int = 3

    @classmethod
    def paper_scale(cls) -> "EncoderConfig":
        return cls(n_heads=8, n_levels=4, k_intra=4, k_inter=4, window=2,
                   hidden_dim=256, n_layers=6, ffn_dim=1024)

    def validate(self) -> None:
        for name in ("n_heads", "n_levels", "k_intra", "k_inter", "window", "hidden_dim", "ffn_dim",
                     "daf_reduction", "in_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"encoder.{name} must be >= 1, got {getattr(self, name)}")
        if self.n_layers < 0:
            raise ValueError(f"encoder.n_layers must be >= 0, got {self.n_layers}")
        if self.n_levels > 4:
            raise ValueError(f"encoder.n_levels must be <= 4, got {self.n_levels}")
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"encoder.hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.hidden_dim % 4:
            raise ValueError(f"encoder.hidden_dim must be a multiple of 4 for the sine encodings, got {self.hidden_dim}")
        if self.hidden_dim % self.daf_reduction:
            raise ValueError(f"encoder.hidden_dim {self.hidden_dim} not divisible by daf_reduction {self.daf_reduction}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"encoder.fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.daf_pooling not in ("token", "global"):
            raise ValueError(f"encoder.daf_pooling must be 'token' or 'global', got {self.daf_pooling!r}")


@dataclass
class FeaturePyramidClip:
    levels: list[Tensor]

    @property
    def n_frames(self) -> int:
        return self.levels[0].shape[0]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [(lvl.shape[1], lvl.shape[2]) for lvl in self.levels]

    @property
    def channels(self) -> int:
        return self.levels[0].shape[-1]

    def frame(self, t: int, level: int) -> np.ndarray:
        """One map as ``[C, H, W]``."""
        return np.transpose(self.levels[level].data[t], (2, 0, 1))

    def tokens(self) -> Tensor:
        t = self.n_frames
        return tn.concat([lvl.reshape(t, -1, lvl.shape[-1]) for lvl in self.levels], axis=1)

    @classmethod
    def from_tokens(cls, z: Tensor, shapes) -> "FeaturePyramidClip":
        return cls(split_levels(z, shapes))


def split_levels(z: Tensor, shapes) -> list[Tensor]:
    t, _, c = z.shape
    out = []
    start = 0
    for h, w in shapes:
        out.append(z[:, start:start + h * w].reshape(t, h, w, c))
        start += h * w
    return out


def token_reference_points(shapes) -> np.ndarray:
    """Normalized (u, v) pixel centers of every token, [N, 2]."""
    refs = []
    for h, w in shapes:
        v, u = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        refs.append(np.stack([u.ravel(), v.ravel()], axis=-1))
    return np.concatenate(refs, axis=0)


def token_level_index(shapes) -> np.ndarray:
    return np.concatenate([np.full(h * w, l) for l, (h, w) in enumerate(shapes)])


def rescale_ref(ref, shape) -> tuple[float, float]:
    """Map normalized (u, v) to level pixel units with pixel centers at integers."""
    u, v = ref
    h, w = shape
    if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
        raise ValueError(f"reference point must lie in [0,1]^2, got {(u, v)}")
    return u * w - 0.5, v * h - 0.5


# positional encodings


def temporal_encoding(n_frames: int, dim: int, temperature: float = 10000.0) -> np.ndarray:
    k = np.arange(dim)
    angle = np.arange(n_frames)[:, None] / temperature ** (2 * (k // 2) / dim)
    return np.where(k % 2 == 0, np.sin(angle), np.cos(angle))


def spatial_encoding(height: int, width: int, dim: int, temperature: float = 10000.0) -> np.ndarray:
    if dim % 4:
        raise ValueError(f"spatial encoding needs dim divisible by 4, got {dim}")
    half = dim // 2
    k = np.arange(half)
    freq = temperature ** (2 * (k // 2) / half)
    ys = (np.arange(height) + 0.5) / height * 2 * np.pi
    xs = (np.arange(width) + 0.5) / width * 2 * np.pi
    pe_y = np.where(k % 2 == 0, np.sin(ys[:, None] / freq), np.cos(ys[:, None] / freq))
    pe_x = np.where(k % 2 == 0, np.sin(xs[:, None] / freq), np.cos(xs[:, None] / freq))
    return np.concatenate([
        np.broadcast_to(pe_y[:, None, :], (height, width, half)),
        np.broadcast_to(pe_x[None, :, :], (height, width, half)),
    ], axis=-1)


def st_pos_encoding(n_frames: int, shapes, dim: int) -> list[np.ndarray]:
    """Per level ``[T, H, W, C]`` sum of the temporal and spatial sine encodings."""
    if dim % 2:
        raise ValueError(f"positional encoding needs an even dim, got {dim}")
    e_t = temporal_encoding(n_frames, dim)
    return [e_t[:, None, None, :] + spatial_encoding(h, w, dim)[None] for h, w in shapes]


# deformable attention


def _circle_offsets(n_heads: int, n_sources: int, n_points: int) -> np.ndarray:
    """Initial sampling offsets: head m points along angle 2*pi*m/M, point k at radius k+1."""
    theta = np.arange(n_heads) * 2.0 * np.pi / n_heads
    grid = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    grid = grid / np.abs(grid).max(axis=-1, keepdims=True)
    out = np.tile(grid[:, None, None, :], (1, n_sources, n_points, 1))
    out *= np.arange(1, n_points + 1)[None, None, :, None]
    return out


def deformable_attend(values, ref_uv, offsets, weights, n_heads: int) -> Tensor:
    """Weighted deformable sampling over a list of source maps.

    values: list of S projected maps ``[B, H_s, W_s, C]``; ref_uv: ``[N, 2]`` or
    ``[B, N, 2]`` normalized; offsets: ``[B, N, M, S, K, 2]`` in source pixels;
    weights: ``[B, N, M, S, K]``. Returns the concatenated head outputs ``[B, N, C]``.
    """
    ref_uv = tn.as_tensor(ref_uv)
    b, n, m, _, k, _ = offsets.shape
    out = None
    for s, value in enumerate(values):
        _, h, w, c = value.shape
        ch = c // m
        heads = value.reshape(b, h, w, m, ch).transpose(0, 3, 1, 2, 4).reshape(b * m, h, w, ch)
        ref_px = ref_uv * np.array([w, h], dtype=np.float64) - 0.5
        ref_px = ref_px.reshape(*ref_uv.shape[:-1], 1, 1, 2)
        loc = (ref_px + offsets[:, :, :, s]).transpose(0, 2, 1, 3, 4).reshape(b * m, n * k, 2)
        sampled = sample_maps(heads, loc).reshape(b, m, n, k, ch)
        wts = weights[:, :, :, s].transpose(0, 2, 1, 3).reshape(b, m, n, k, 1)
        contrib = (sampled * wts).sum(axis=3)
        out = contrib if out is None else out + contrib
    return out.transpose(0, 2, 1, 3).reshape(b, n, m * (out.shape[-1]))


class DeformableAttention(Module):
    """Multi-scale deformable attention within one frame (used by encoder and decoder)."""

    def __init__(self, dim: int, n_heads: int, n_levels: int, n_points: int, rng: np.random.Generator):
        self.n_heads, self.n_levels, self.n_points = n_heads, n_levels, n_points
        self.value_proj = Linear(dim, dim, rng)
        self.offset_proj = Linear(dim, n_heads * n_levels * n_points * 2, rng, zero=True)
        self.offset_proj.bias.data[:] = _circle_offsets(n_heads, n_levels, n_points).ravel()
        self.attn_proj = Linear(dim, n_heads * n_levels * n_points, rng, zero=True)
        self.output_proj = Linear(dim, dim, rng)

    def sampling_params(self, query) -> tuple[Tensor, Tensor]:
        """Offsets ``[B, N, M, L, K, 2]`` and weights ``[B, N, M, L, K]``."""
        b, n, _ = query.shape
        m, lv, k = self.n_heads, self.n_levels, self.n_points
        offsets = self.offset_proj(query).reshape(b, n, m, lv, k, 2)
        logits = self.attn_proj(query).reshape(b, n, m, lv * k)
        weights = tn.softmax(logits, axis=-1).reshape(b, n, m, lv, k)
        return offsets, weights

    def __call__(self, query, ref_uv, value_levels) -> Tensor:
        """query ``[B, N, C]``; value_levels: L maps ``[B, H_l, W_l, C]``, batch b sampling map b."""
        if len(value_levels) != self.n_levels:
            raise ValueError(f"expected {self.n_levels} levels, got {len(value_levels)}")
        offsets, weights = self.sampling_params(query)
        values = [self.value_proj(v) for v in value_levels]
        return self.output_proj(deformable_attend(values, ref_uv, offsets, weights, self.n_heads))


class TemporalDeformableAttention(Module):
    """Deformable attention into the neighbor frames within ``window`` of the query frame."""

    def __init__(self, dim: int, n_heads: int, n_levels: int, n_points: int, window: int,
                 rng: np.random.Generator):
        self.n_heads, self.n_levels, self.n_points = n_heads, n_levels, n_points
        self.slots = [dt for dt in range(-window, window + 1) if dt != 0]
        n_slots = len(self.slots)
        self.value_proj = Linear(dim, dim, rng)
        self.offset_proj = Linear(dim, n_heads * n_slots * n_levels * n_points * 2, rng, zero=True)
        self.offset_proj.bias.data[:] = _circle_offsets(n_heads, n_slots * n_levels, n_points).ravel()
        self.attn_proj = Linear(dim, n_heads * n_slots * n_levels * n_points, rng, zero=True)
        self.output_proj = Linear(dim, dim, rng)

    def neighbors(self, t: int, n_frames: int) -> list[tuple[int, int]]:
        """(slot index, frame index) pairs of the in-clip neighbors of frame ``t``."""
        return [(i, t + dt) for i, dt in enumerate(self.slots) if 0 <= t + dt < n_frames]

    def sampling_params(self, query_t, t: int, n_frames: int) -> tuple[Tensor, Tensor]:
        """For frame ``t``: offsets ``[N, M, S', L, K, 2]`` and weights ``[N, M, S', L, K]``
        over the S' valid neighbors; weights normalize over (neighbor, level, point)."""
        nb = self.neighbors(t, n_frames)
        if not nb:
            raise ValueError(f"frame {t} of a {n_frames}-frame clip has no temporal neighbors")
        idx = np.array([i for i, _ in nb])
        n = query_t.shape[0]
        m, s, lv, k = self.n_heads, len(self.slots), self.n_levels, self.n_points
        offsets = self.offset_proj(query_t).reshape(n, m, s, lv, k, 2)[:, :, idx]
        logits = self.attn_proj(query_t).reshape(n, m, s, lv * k)[:, :, idx]
        weights = tn.softmax(logits.reshape(n, m, len(nb) * lv * k), axis=-1)
        return offsets, weights.reshape(n, m, len(nb), lv, k)

    def attend_frame(self, query_t, ref_uv, projected_levels, t: int) -> Tensor:
        """Head outputs ``[N, C]`` (before the output projection) for frame ``t``."""
        n_frames = projected_levels[0].shape[0]
        offsets, weights = self.sampling_params(query_t, t, n_frames)
        nb = self.neighbors(t, n_frames)
        sources = [projected_levels[l][tp:tp + 1] for _, tp in nb for l in range(self.n_levels)]
        n, m = offsets.shape[:2]
        k = self.n_points
        offs = offsets.reshape(1, n, m, len(sources), k, 2)
        wts = weights.reshape(1, n, m, len(sources), k)
        return deformable_attend(sources, ref_uv, offs, wts, self.n_heads).reshape(n, -1)

    def __call__(self, query, ref_uv, value_levels) -> Tensor:
        """query ``[T, N, C]``; value_levels: L maps ``[T, H_l, W_l, C]``."""
        n_frames = query.shape[0]
        if n_frames < 2:
            raise ValueError("temporal attention needs a clip of at least 2 frames")
        values = [self.value_proj(v) for v in value_levels]
        outs = [self.attend_frame(query[t], ref_uv, values, t) for t in range(n_frames)]
        return self.output_proj(tn.stack(outs, axis=0))


def s_msda(z_q, ref, frame_levels, attn: DeformableAttention) -> Tensor:
    """Spatial attention output ``[C]`` for one query on one frame's maps ``[H_l, W_l, C]``."""
    z_q = tn.as_tensor(z_q)
    c = z_q.shape[-1]
    levels = [tn.as_tensor(lvl).reshape(1, *lvl.shape) for lvl in frame_levels]
    return attn(z_q.reshape(1, 1, c), np.asarray(ref, dtype=np.float64).reshape(1, 2), levels).reshape(c)


def t_msda(z_q, ref, clip_levels, t: int, attn: TemporalDeformableAttention) -> Tensor:
    """Temporal attention output ``[C]`` for one query of frame ``t``; clip_levels are ``[T, H_l, W_l, C]``."""
    z_q = tn.as_tensor(z_q)
    c = z_q.shape[-1]
    n_frames = clip_levels[0].shape[0]
    if n_frames < 2:
        raise ValueError("temporal attention needs a clip of at least 2 frames")
    values = [attn.value_proj(tn.as_tensor(v)) for v in clip_levels]
    heads = attn.attend_frame(z_q.reshape(1, c), np.asarray(ref, dtype=np.float64).reshape(1, 2), values, t)
    return attn.output_proj(heads).reshape(c)


# fusion


class DynamicFusion(Module):
    """Channel-wise two-way softmax gating between spatial and temporal outputs."""

    def __init__(self, dim: int, reduction: int, rng: np.random.Generator, pooling: str = "token"):
        self.pooling = pooling
        self.select = Linear(dim, dim // reduction, rng)
        self.gate1 = Linear(dim // reduction, dim, rng)
        self.gate2 = Linear(dim // reduction, dim, rng)

    def gate_weights(self, e_intra, e_inter) -> tuple[Tensor, Tensor]:
        summed = tn.add(e_intra, e_inter)
        if self.pooling == "global":
            summed = summed.mean(axis=-2, keepdims=True)
        hidden = tn.gelu(self.select(summed))
        gates = tn.stack([self.gate1(hidden), self.gate2(hidden)], axis=0)
        w = tn.softmax(gates, axis=0)
        return w[0], w[1]

    def __call__(self, e_intra, e_inter) -> Tensor:
        w1, w2 = self.gate_weights(e_intra, e_inter)
        return e_intra * w1 + e_inter * w2


def daf_fuse(e_intra, e_inter, fusion: DynamicFusion) -> Tensor:
    e_intra, e_inter = tn.as_tensor(e_intra), tn.as_tensor(e_inter)
    if e_intra.shape != e_inter.shape:
        raise ValueError(f"fusion inputs differ in shape: {e_intra.shape} vs {e_inter.shape}")
    return fusion(e_intra, e_inter)


class Fusion(Module):
    def __init__(self, mode: str, dim: int, reduction: int, rng: np.random.Generator, pooling: str = "token"):
        self.mode = mode
        self.daf = DynamicFusion(dim, reduction, rng, pooling) if mode == "dynamic" else None
        self.proj = Linear(2 * dim, dim, rng) if mode == "concat" else None

    def __call__(self, e_intra, e_inter) -> Tensor:
        if self.mode == "dynamic":
            return daf_fuse(e_intra, e_inter, self.daf)
        if self.mode == "add":
            return tn.add(e_intra, e_inter)
        return self.proj(tn.concat([e_intra, e_inter], axis=-1))


# layers


class TinyBackbone(Module):
    """Non-overlapping strided convolutions: a 4x4 stem, then 2x2 downsampling per extra level."""

    def __init__(self, in_channels: int, dim: int, n_levels: int, rng: np.random.Generator):
        self.n_levels = n_levels
        self.stem = Linear(in_channels * 16, dim, rng)
        self.downs = [Linear(4 * dim, dim, rng) for _ in range(n_levels - 1)]

    def __call__(self, frames) -> FeaturePyramidClip:
        frames = np.asarray(frames, dtype=np.float64)
        t, c, h, w = frames.shape
        stride = 2 ** (self.n_levels + 1)
        if h % stride or w % stride:
            raise ValueError(f"frame size {h}x{w} not divisible by {stride} for {self.n_levels} levels")
        patches = frames.reshape(t, c, h // 4, 4, w // 4, 4).transpose(0, 2, 4, 1, 3, 5)
        x = tn.gelu(self.stem(patches.reshape(t, h // 4, w // 4, c * 16)))
        levels = [x]
        for down in self.downs:
            _, hh, ww, d = x.shape
            x = x.reshape(t, hh // 2, 2, ww // 2, 2, d).transpose(0, 1, 3, 2, 4, 5)
            x = tn.gelu(down(x.reshape(t, hh // 2, ww // 2, 4 * d)))
            levels.append(x)
        return FeaturePyramidClip(levels)


def tiny_backbone(clip, backbone: TinyBackbone) -> FeaturePyramidClip:
    return backbone(clip)


class EncoderLayer(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        c = cfg.hidden_dim
        self.spatial = DeformableAttention(c, cfg.n_heads, cfg.n_levels, cfg.k_intra, rng)
        if cfg.temporal:
            self.temporal = TemporalDeformableAttention(c, cfg.n_heads, cfg.n_levels, cfg.k_inter, cfg.window, rng)
            self.fusion = Fusion(cfg.fusion_mode, c, cfg.daf_reduction, rng, cfg.daf_pooling)
        else:
            self.temporal = None
            self.fusion = None
        self.norm1 = LayerNorm(c)
        self.ffn = FeedForward(c, cfg.ffn_dim, rng)
        self.norm2 = LayerNorm(c)

    def __call__(self, z, pos, ref_uv, shapes) -> Tensor:
        """z ``[T, N, C]`` tokens; pos added to the attention queries only."""
        query = z if pos is None else z + pos
        levels = split_levels(z, shapes)
        e_intra = self.spatial(query, ref_uv, levels)
        if self.temporal is not None:
            e_inter = self.temporal(query, ref_uv, levels)
            fused = self.fusion(e_intra, e_inter)
        else:
            fused = e_intra
        z = self.norm1(z + fused)
        return self.norm2(z + self.ffn(z))


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.backbone = TinyBackbone(cfg.in_channels, cfg.hidden_dim, cfg.n_levels, rng)
        self.level_embed = param(rng.normal(0.0, 0.1, size=(cfg.n_levels, cfg.hidden_dim)))
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]

    def positional(self, n_frames: int, shapes) -> Tensor:
        pe = st_pos_encoding(n_frames, shapes, self.cfg.hidden_dim)
        flat = np.concatenate([p.reshape(n_frames, -1, self.cfg.hidden_dim) for p in pe], axis=1)
        return flat + self.level_embed[token_level_index(shapes)]

    def encode(self, pyramid: FeaturePyramidClip) -> FeaturePyramidClip:
        shapes = pyramid.shapes
        z = pyramid.tokens()
        pos = self.positional(pyramid.n_frames, shapes)
        ref = token_reference_points(shapes)
        for layer in self.layers:
            z = layer(z, pos, ref, shapes)
        return FeaturePyramidClip.from_tokens(z, shapes)

    def __call__(self, frames) -> FeaturePyramidClip:
        return self.encode(self.backbone(frames))


def stj_msda_layer(pyramid: FeaturePyramidClip, layer: EncoderLayer, pos=None) -> FeaturePyramidClip:
    shapes = pyramid.shapes
    z = layer(pyramid.tokens(), pos, token_reference_points(shapes), shapes)
    return FeaturePyramidClip.from_tokens(z, shapes)


def encoder_forward(clip, encoder: Encoder) -> FeaturePyramidClip:
    return encoder(clip)


def attention_maps(pyramid: FeaturePyramidClip) -> np.ndarray:
    """Channel mean of the finest level per frame, ``[T, H/4, W/4]``."""
    return pyramid.levels[0].data.mean(axis=-1)
