"""Reposing, exterior transfer between avatars, and shape editing."""

from __future__ import annotations

from dataclasses import replace
from typing import Optional

import numpy as np
import torch

from .camera import BODY_BOUNDS, HEAD_BOUNDS
from .geometry import AvatarParams, FrameParams
from .optim import TrainState, init_state
from .render import RenderedFrame, RenderSettings, prepare_scene, render_frame


def bounds_for(state: TrainState):
    return HEAD_BOUNDS if state.spec.get("bounds") == "head" else BODY_BOUNDS


def _settings(state: TrainState, bins: Optional[int]) -> RenderSettings:
    return RenderSettings(n_bins=state.config.eval_bins if bins is None else bins, bounds=bounds_for(state))


def render_state(state: TrainState, frame: FrameParams, bins: Optional[int] = None,
                 avatar: Optional[AvatarParams] = None) -> RenderedFrame:
    """Render the avatar in ``state`` under any pose, expression and camera."""
    settings = _settings(state, bins)
    frame = frame.to(state.avatar.beta.dtype)
    with torch.no_grad():
        scene = prepare_scene(state.model, state.avatar if avatar is None else avatar, frame, settings)
        return render_frame(scene, settings)


def transfer(body: TrainState, exterior: TrainState, frame: FrameParams,
             bins: Optional[int] = None) -> RenderedFrame:
    """Dress ``body``'s mesh in ``exterior``'s canonical field.

    Both avatars share the model's canonical space, so the exterior field and
    its non-rigid residual are queried through inverse skinning on ``body``'s
    posed mesh.
    """
    if body.model.n_verts != exterior.model.n_verts or body.model.n_joints != exterior.model.n_joints:
        raise ValueError("avatars must share the same parametric model")
    settings = _settings(body, bins)
    frame = frame.to(body.avatar.beta.dtype)
    with torch.no_grad():
        scene = prepare_scene(body.model, body.avatar, frame, settings, field=exterior.avatar.field)
        scene.residual_field = exterior.avatar.residual_field
        return render_frame(scene, settings)


def reshape(state: TrainState, beta, frame: FrameParams, bins: Optional[int] = None) -> RenderedFrame:
    """Render with replaced shape coefficients; the field follows through inverse skinning."""
    beta = torch.as_tensor(beta, dtype=state.avatar.beta.dtype)
    if beta.shape != state.avatar.beta.shape:
        raise ValueError(f"beta needs {state.avatar.beta.numel()} entries")
    return render_state(state, frame, bins, avatar=replace(state.avatar, beta=beta))


def shape_sweep(state: TrainState, frame: FrameParams, component: int = 0,
                values=(-2.0, -1.0, 0.0, 1.0, 2.0), bins: Optional[int] = None) -> list[tuple[float, int]]:
    """Silhouette pixel count for ``beta[component]`` set to each value."""
    out = []
    for v in values:
        beta = state.avatar.beta.detach().clone()
        beta[component] = v
        img = reshape(state, beta, frame, bins)
        out.append((float(v), int(img.silhouette.sum())))
    return out


def state_from_truth(dataset, config=None, dtype=torch.float32) -> TrainState:
    """A state holding the dataset's true mesh parameters (empty learned field)."""
    from .optim import TrainConfig
    state = init_state(dataset, config or TrainConfig(), dtype)
    with torch.no_grad():
        state.avatar.beta.copy_(dataset.beta.to(dtype))
        state.avatar.albedo.copy_(dataset.albedo.to(dtype))
    return state


def is_monotone(values) -> bool:
    v = np.asarray(values)
    return bool(np.all(np.diff(v) > 0))
