"""
Toy training run
================

A short AdamW run on a handful of clips. The default config runs 500
steps; this one is cut to 60 so the script finishes in under a minute.
"""

# %%
import numpy as np

from stvis import harness
from stvis.config import RunConfig

cfg = RunConfig(steps=60).replace(data={"n_clips": 4, "clips_per_step": 4})
result = harness.train(cfg, "gallery_out/toy_run")

# %%
# The log holds one entry per step plus a final evaluation entry.
losses = np.array([e["loss"] for e in result.log])
for step in range(0, len(losses), 10):
    bar = "#" * int(40 * losses[step] / losses.max())
    print(f"step {step:3d} {losses[step]:8.3f} {bar}")
print("final", losses[-1])

# %%
# Per-term breakdown of the last training step.
print({k: round(v, 3) for k, v in result.log[-2]["terms"].items()})

# %%
m = result.metrics
print(f"mean IoU {m.mean_iou:.3f}  track consistency {m.track_consistency:.3f}  separation {m.separation:.3f}")

# %%
# The checkpoint reloads to the same numbers.
model, saved = harness.load_checkpoint("gallery_out/toy_run/checkpoint")
again, _ = harness.evaluate(model, result.clips, saved)
print("reloaded IoU", again.mean_iou, "matches:", again.mean_iou == m.mean_iou)
