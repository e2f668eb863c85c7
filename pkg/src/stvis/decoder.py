"""Query-decomposed decoder with temporal self-attention over box queries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .encoder import DeformableAttention, FeaturePyramidClip, temporal_encoding
from .nn import MLP, FeedForward, LayerNorm, Linear, Module, MultiheadAttention, param
from .tensor import Tensor


@dataclass(frozen=True)
class DecoderConfig:
    n_queries: int = 8
    n_layers: int = 2
    num_classes: int = 3
    n_heads: int = 2
    n_points: int = 2
    ffn_dim: int = 64
    mask_dim: int = 16
    tsa: bool = True
    tsa_pos: bool = True

    def validate(self) -> None:
        for name in ("n_queries", "n_layers", "num_classes", "n_heads", "n_points", "ffn_dim", "mask_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"decoder.{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class LayerPrediction:
    """Everything one decoder layer emits for a clip."""

    box_queries: Tensor      # [T, Q, C]
    instance_queries: Tensor  # [Q, C]
    frame_weights: Tensor    # [T, Q], softmax over frames
    class_logits: Tensor     # [Q, num_classes + 1], last column is no-object
    boxes: Tensor            # [T, Q, 4] normalized (cx, cy, w, h)
    mask_logits: Tensor      # [T, Q, H/4, W/4]
    latents: Tensor | None = None  # [T, Q, C/2] contrastive projections


@dataclass
class PredictionSet:
    layers: list[LayerPrediction]

    @property
    def final(self) -> LayerPrediction:
        return self.layers[-1]


class TemporalSelfAttention(Module):
    """Self-attention across the T box queries of each query slot, plus residual and norm."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator, use_pos: bool = True):
        self.use_pos = use_pos
        self.attn = MultiheadAttention(dim, n_heads, rng)
        self.norm = LayerNorm(dim)

    def _inputs(self, box_queries):
        x = tn.as_tensor(box_queries).transpose(1, 0, 2)
        pos = temporal_encoding(x.shape[1], x.shape[2])[None] if self.use_pos else None
        return x, pos

    def attention_weights(self, box_queries) -> Tensor:
        """``[Q, heads, T, T]`` row-stochastic weights."""
        x, pos = self._inputs(box_queries)
        return self.attn.attention_weights(x, pos)

    def __call__(self, box_queries) -> Tensor:
        x, pos = self._inputs(box_queries)
        return self.norm(x + self.attn(x, pos)).transpose(1, 0, 2)


def temporal_self_attention(box_queries, tsa: TemporalSelfAttention) -> Tensor:
    return tsa(box_queries)


class DecoderLayer(Module):
    def __init__(self, dim: int, n_levels: int, cfg: DecoderConfig, rng: np.random.Generator):
        self.tsa = TemporalSelfAttention(dim, cfg.n_heads, rng, cfg.tsa_pos) if cfg.tsa else None
        self.self_attn = MultiheadAttention(dim, cfg.n_heads, rng)
        self.norm1 = LayerNorm(dim)
        self.cross_attn = DeformableAttention(dim, cfg.n_heads, n_levels, cfg.n_points, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, cfg.ffn_dim, rng)
        self.norm3 = LayerNorm(dim)

    def __call__(self, box_queries, ref_uv, memory: FeaturePyramidClip) -> Tensor:
        """box_queries ``[T, Q, C]``; ref_uv ``[T, Q, 2]`` normalized reference points."""
        b = tn.as_tensor(box_queries)
        if self.tsa is not None:
            b = self.tsa(b)
        b = self.norm1(b + self.self_attn(b))
        b = self.norm2(b + self.cross_attn(b, ref_uv, memory.levels))
        return self.norm3(b + self.ffn(b))


def decoder_layer(box_queries, ref_uv, memory: FeaturePyramidClip, layer: DecoderLayer) -> Tensor:
    return layer(box_queries, ref_uv, memory)


class FrameAggregation(Module):
    """Learned softmax-over-frames weighting of a slot's box queries."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.score = Linear(dim, 1, rng)

    def weights(self, box_queries) -> Tensor:
        scores = self.score(box_queries).reshape(box_queries.shape[:2])
        return tn.softmax(scores, axis=0)

    def __call__(self, box_queries) -> tuple[Tensor, Tensor]:
        w = self.weights(box_queries)
        inst = (box_queries * w.reshape(*w.shape, 1)).sum(axis=0)
        return inst, w


def aggregate_box_to_instance(box_queries, agg: FrameAggregation) -> Tensor:
    return agg(tn.as_tensor(box_queries))[0]


def _mask_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    return np.meshgrid(xs, ys, indexing="xy")


class OutputHeads(Module):
    """Class head on the instance query, box MLP per box query, dynamic mask kernel.

    The mask kernel acts on the projected finest memory level concatenated with
    four coordinate channels relative to the slot's predicted box in that frame
    (dx/w, dy/h and their squares), so identical-looking instances separate.
    """

    def __init__(self, dim: int, cfg: DecoderConfig, rng: np.random.Generator):
        self.class_head = Linear(dim, cfg.num_classes + 1, rng)
        self.box_head = MLP([dim, dim, dim, 4], rng)
        self.mask_feat = Linear(dim, cfg.mask_dim, rng)
        self.kernel = Linear(dim, cfg.mask_dim + 4, rng)

    def boxes(self, box_queries) -> Tensor:
        return tn.sigmoid(self.box_head(box_queries))

    def mask_logits(self, instance_queries, boxes, memory: FeaturePyramidClip) -> Tensor:
        finest = memory.levels[0]
        t, h, w, _ = finest.shape
        q = instance_queries.shape[0]
        feats = self.mask_feat(finest).reshape(t, 1, h * w, -1)
        feats = tn.broadcast_to(feats, (t, q, h * w, feats.shape[-1]))
        gx, gy = _mask_grid(h, w)
        cx = boxes[:, :, 0:1]
        cy = boxes[:, :, 1:2]
        rx = (gx.reshape(1, 1, -1) - cx) / boxes[:, :, 2:3]
        ry = (gy.reshape(1, 1, -1) - cy) / boxes[:, :, 3:4]
        rel = tn.stack([rx, ry, rx * rx, ry * ry], axis=-1)
        full = tn.concat([feats, rel], axis=-1)
        kernel = self.kernel(instance_queries).reshape(1, q, -1, 1)
        return tn.matmul(full, kernel).reshape(t, q, h, w)

    def __call__(self, instance_queries, box_queries, memory: FeaturePyramidClip):
        class_logits = self.class_head(instance_queries)
        boxes = self.boxes(box_queries)
        return class_logits, boxes, self.mask_logits(instance_queries, boxes, memory)


def output_heads(instance_queries, box_queries, memory: FeaturePyramidClip, heads: OutputHeads):
    return heads(tn.as_tensor(instance_queries), tn.as_tensor(box_queries), memory)


class Decoder(Module):
    def __init__(self, dim: int, n_levels: int, cfg: DecoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.query_embed = param(rng.normal(0.0, 1.0, size=(cfg.n_queries, dim)))
        self.ref_logits = param(rng.uniform(-1.5, 1.5, size=(cfg.n_queries, 2)))
        self.layers = [DecoderLayer(dim, n_levels, cfg, rng) for _ in range(cfg.n_layers)]
        self.aggregate = FrameAggregation(dim, rng)
        self.heads = OutputHeads(dim, cfg, rng)

    def initial_state(self, n_frames: int) -> tuple[Tensor, Tensor]:
        q, c = self.query_embed.shape
        box_queries = tn.broadcast_to(self.query_embed.reshape(1, q, c), (n_frames, q, c))
        refs = tn.broadcast_to(tn.sigmoid(self.ref_logits).reshape(1, q, 2), (n_frames, q, 2))
        return box_queries, refs

    def __call__(self, memory: FeaturePyramidClip) -> PredictionSet:
        box_queries, refs = self.initial_state(memory.n_frames)
        outputs = []
        for layer in self.layers:
            box_queries = layer(box_queries, refs, memory)
            inst, frame_w = self.aggregate(box_queries)
            class_logits, boxes, masks = self.heads(inst, box_queries, memory)
            outputs.append(LayerPrediction(box_queries, inst, frame_w, class_logits, boxes, masks))
            refs = boxes[:, :, 0:2]
        return PredictionSet(outputs)


def decoder_forward(memory: FeaturePyramidClip, decoder: Decoder) -> PredictionSet:
    return decoder(memory)
