"""
Fitting an avatar and reposing it
=================================

A short two-stage run on the toy scene. Stage 1 fits the mesh albedo, offsets
and canonical field; stage 2 adds the non-rigid residual field. The result is
rendered in a pose none of the training frames used.

The defaults below train for a couple of minutes. The acceptance runs use
1000 + 500 steps.
"""

# %%
from pathlib import Path

import torch

from hybrid_avatar.apps import render_state
from hybrid_avatar.optim import TrainConfig, evaluate, save_checkpoint, summarize, train
from hybrid_avatar.synth import SceneSpec, generate, write_png

out = Path("demo_out/train")
ds = generate(SceneSpec(n_frames=10, n_heldout=2))

# shape is held at the dataset's initial estimate; hard silhouettes give it no
# boundary signal (see README)
cfg = TrainConfig(stage1_steps=300, stage2_steps=100, frozen=("beta",), log_every=50)
state, history = train(ds, cfg, out_dir=out)
print("final batch loss", round(history[-1]["total"], 4))

# %%
summary = summarize(evaluate(state, ds))
print({k: round(v, 3) for k, v in summary.items()})

# %%
# Raise both arms and turn the body; the exterior follows through inverse skinning.
frame = ds.frames[0].params.to(torch.float32)
theta = frame.theta.clone()
theta[0, 1] = 0.6
theta[2, 2] -= 0.5
theta[3, 2] += 0.5
img = render_state(state, type(frame)(theta, frame.psi, frame.camera))
write_png(out / "novel_pose.png", img.rgb)
save_checkpoint(state, out / "avatar.havc")
