"""
Deformable sampling and gated fusion
====================================

A walk through the pieces of one encoder layer on hand-sized inputs:
where the sampling points land, how the weights normalize, and what the
two-way gate does to the spatial and temporal outputs.
"""

# %%
import numpy as np

from stvis import tensor as tn
from stvis.encoder import (DeformableAttention, DynamicFusion, TemporalDeformableAttention, daf_fuse,
                           rescale_ref, s_msda, t_msda)

rng = np.random.default_rng(0)

# %%
# Spatial attention with one head, one level and one point, identity
# projections and zero offsets reads the feature map bilinearly at the
# reference point.
attn = DeformableAttention(4, 1, 1, 1, rng)
attn.value_proj.weight.data[...] = np.eye(4)
attn.output_proj.weight.data[...] = np.eye(4)
attn.offset_proj.bias.data[...] = 0.0
fmap = np.arange(5 * 6 * 4, dtype=float).reshape(5, 6, 4)
ref = (0.5, 0.5)
print("pixel position", rescale_ref(ref, (5, 6)))
print("sample", s_msda(np.zeros(4), ref, [fmap], attn).data)

# %%
# With several levels and points the weights form one softmax per head.
attn = DeformableAttention(8, 2, 2, 3, rng)
attn.attn_proj.weight.data[...] = rng.normal(size=attn.attn_proj.weight.shape)
offsets, weights = attn.sampling_params(tn.Tensor(rng.normal(size=(1, 1, 8))))
print("weights per head sum to", weights.data.sum(axis=(3, 4)).ravel())
print("initial offsets of head 0, level 0", np.round(offsets.data[0, 0, 0, 0], 2).tolist())

# %%
# The temporal branch samples the neighbor frames only; at the clip edge
# the window is cut and the softmax covers whatever frames remain.
tattn = TemporalDeformableAttention(8, 2, 2, 2, 1, rng)
for t in range(3):
    print("frame", t, "neighbors", [tp for _, tp in tattn.neighbors(t, 3)])
clip_levels = [rng.normal(size=(3, 4, 4, 8)), rng.normal(size=(3, 2, 2, 8))]
print("temporal output", np.round(t_msda(rng.normal(size=8), (0.3, 0.7), clip_levels, 0, tattn).data, 3))

# %%
# The fusion gate is a per-channel two-way softmax. Identical inputs come
# back unchanged, and tied gates give the plain average.
fusion = DynamicFusion(8, 2, rng)
e_intra, e_inter = rng.normal(size=8), rng.normal(size=8)
w1, w2 = fusion.gate_weights(e_intra, e_inter)
print("w1 + w2", np.round(w1.data + w2.data, 12))
print("fused", np.round(daf_fuse(e_intra, e_inter, fusion).data, 3))
print("identical in, identical out:", np.allclose(daf_fuse(e_intra, e_intra, fusion).data, e_intra))
