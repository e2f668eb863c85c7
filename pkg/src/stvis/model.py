"""Full clip model: backbone, spatio-temporal encoder, decoder and contrastive projection."""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .decoder import Decoder, DecoderConfig, PredictionSet
from .encoder import Encoder, EncoderConfig, FeaturePyramidClip
from .nn import Linear, Module


class ContrastiveHead(Module):
    """Two FC layers C -> C -> C/2 mapping box queries to the contrastive space."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim // 2, rng)

    def __call__(self, x):
        return self.fc2(tn.gelu(self.fc1(x)))


class VideoModel(Module):
    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, seed: int = 0,
                 contrastive: bool = True):
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(enc_cfg, rng)
        self.decoder = Decoder(enc_cfg.hidden_dim, enc_cfg.n_levels, dec_cfg, rng)
        self.contrastive_head = ContrastiveHead(enc_cfg.hidden_dim, rng) if contrastive else None

    def encode(self, frames) -> FeaturePyramidClip:
        return self.encoder(frames)

    def __call__(self, frames) -> PredictionSet:
        return self.forward_with_memory(frames)[1]

    def forward_with_memory(self, frames) -> tuple[FeaturePyramidClip, PredictionSet]:
        memory = self.encode(frames)
        preds = self.decoder(memory)
        if self.contrastive_head is not None:
            for layer in preds.layers:
                layer.latents = self.contrastive_head(layer.box_queries)
        return memory, preds
