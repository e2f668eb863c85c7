"""
Box-query embeddings with and without the contrastive term
==========================================================

Two same-colored, same-shape instances per clip. After training, compare
cosine similarity of final-layer box queries across frames: same
instance (intra) against the other instance (inter).
"""

# %%
import numpy as np

from stvis import harness
from stvis.config import RunConfig

base = RunConfig(steps=60).replace(data={"scenario": "same-class-pair", "n_clips": 4, "clips_per_step": 4})

# %%
runs = {}
for label, weight in (("with contrastive", 1.0), ("without contrastive", 0.0)):
    runs[label] = harness.train(base.replace(loss={"contrastive": weight}))
    m = runs[label].metrics
    print(f"{label:<20} intra {m.intra_similarity:.3f}  inter {m.inter_similarity:.3f}  margin {m.separation:.3f}")

# %%
# Cosine matrix over (frame, matched slot) for the first clip of the contrastive run.
result = runs["with contrastive"]
clip = result.clips[0]
doc = harness.dump_embeddings(result.model, clip, result.config, "gallery_out/embeddings")
matched = [e for e in doc["entries"] if e["instance"] is not None]
vecs = np.array([e["embedding"] for e in matched])
vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
labels = [f"t{e['frame']}/i{e['instance']}" for e in matched]
print(" " * 7 + " ".join(f"{lab:>6}" for lab in labels))
for lab, row in zip(labels, vecs @ vecs.T):
    print(f"{lab:>6} " + " ".join(f"{v:6.2f}" for v in row))
