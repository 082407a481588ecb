"""
Exterior transfer and shape editing
===================================

Both avatars live in the same canonical space, so one avatar's exterior field
can be queried through another avatar's mesh. Changing the shape coefficients
works the same way: the field is re-queried through the new mesh.

Run ``02_train_and_repose.py`` first; it leaves ``demo_out/train/avatar.havc``.
"""

# %%
from pathlib import Path

from hybrid_avatar.apps import render_state, shape_sweep, state_from_truth, transfer
from hybrid_avatar.metrics import iou
from hybrid_avatar.optim import load_checkpoint
from hybrid_avatar.synth import SceneSpec, generate, write_png

out = Path("demo_out/apps")
out.mkdir(parents=True, exist_ok=True)
avatar = load_checkpoint("demo_out/train/avatar.havc")

# %%
# A broader body with its own (untrained, empty) exterior.
target = generate(SceneSpec(beta=[1.0, 0.5], n_frames=2, n_heldout=1, seed=7))
body = state_from_truth(target, avatar.config)
frame = target.frames[0].params

dressed = transfer(body, avatar, frame)
write_png(out / "body.png", render_state(body, frame).rgb)
write_png(out / "dressed.png", dressed.rgb)
print("exterior IoU against the analytic shell on the new body:",
      round(iou(dressed.s_v > 0.5, target.frames[0].S_e > 0.5), 3))

# %%
# Sweep the scale-like shape component; the silhouette grows with it.
b0 = float(avatar.avatar.beta[0].detach())
for value, area in shape_sweep(avatar, frame, 0, values=(b0 - 2, b0, b0 + 2)):
    print(f"beta[0] = {value:+.2f}: {area} silhouette pixels")
