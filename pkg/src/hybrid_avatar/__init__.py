"""Hybrid avatar kernel: blend-shape mesh interior, canonical radiance-field exterior."""

from .field import CanonicalField, ShellField
from .geometry import AvatarParams, FrameParams, ParametricModel, pose_mesh
from .losses import LossWeights, MaskSet
from .optim import TrainConfig, TrainState, evaluate, train
from .render import RenderSettings, prepare_scene, render_frame, render_rays
from .synth import SceneSpec, generate
from .toy import toy_model

__all__ = [
    "AvatarParams", "CanonicalField", "FrameParams", "LossWeights", "MaskSet", "ParametricModel",
    "RenderSettings", "SceneSpec", "ShellField", "TrainConfig", "TrainState", "evaluate", "generate",
    "pose_mesh", "prepare_scene", "render_frame", "render_rays", "toy_model", "train",
]
