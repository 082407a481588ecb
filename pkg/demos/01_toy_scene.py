"""
A synthetic subject
===================

Generate a small sequence of the toy avatar wearing an analytic exterior
shell, then look at what the training loop gets to see: images plus the
three masks (full, interior, exterior).
"""

# %%
from pathlib import Path

import numpy as np

from hybrid_avatar.synth import SceneSpec, corrupt_masks, generate, save_dataset, write_png

out = Path("demo_out/scene")
ds = generate(SceneSpec(resolution=64, n_frames=6, n_heldout=2))
save_dataset(ds, out)
print(f"{len(ds.train_frames)} training frames, {len(ds.heldout_frames)} held out -> {out}")

# %%
# Exterior pixels are where the shell alone is more than half opaque.
# Interior pixels see the mesh with nothing in front of it.
f = ds.frames[0]
for name in ("S", "S_b", "S_e"):
    print(f"{name:4s} covers {float(getattr(f, name).mean()):.1%} of the image")

# %%
# A systematic segmentation error: flip the exterior-mask boundary inside one
# angular sector. This is what the corruption study trains against.
bad = corrupt_masks(ds, mode="sector", rate=0.2, seed=0)
flipped = (bad.frames[0].S_e != f.S_e).float()
print(f"{int(flipped.sum())} boundary pixels flipped in frame 0")
write_png(out / "corrupted_S_e_000.png", bad.frames[0].S_e)
write_png(out / "flipped_000.png", np.asarray(flipped))
