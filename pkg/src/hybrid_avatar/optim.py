"""Two-stage stochastic optimization of shared and per-frame avatar parameters."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from scipy.ndimage import binary_dilation

from .camera import OrthoCamera, pixel_rays
from .container import load_arrays, save_arrays
from .field import CanonicalField
from .geometry import AvatarParams, FrameParams, NumericalDegeneracyError, ParametricModel, pose_mesh
from .losses import (LossWeights, MaskSet, exterior_loss, interior_losses, recon_loss, region_weights,
                     regularization, skin_color, total_loss)
from .metrics import iou, l1, psnr, ssim
from .render import RenderError, RenderSettings, prepare_scene, render_frame, render_rays
from .skinning import DeformationField

log = logging.getLogger(__name__)

SHARED_GROUPS = ("beta", "offsets", "albedo", "field", "residual_field")
FRAME_GROUPS = ("theta", "psi", "camera")


class TrainingDiverged(RuntimeError):
    """The loss or a gradient became non-finite."""


class NonFiniteGradient(TrainingDiverged):
    def __init__(self, group: str):
        super().__init__(f"non-finite gradient in parameter group {group!r}")
        self.group = group


@dataclass
class TrainConfig:
    rays_per_frame: int = 256
    frames_per_batch: int = 2
    stage1_steps: int = 1000
    stage2_steps: int = 500
    lr_field: float = 1e-2
    lr_mesh: float = 1e-3        # offsets and albedo
    lr_shape: float = 1e-3
    lr_residual: float = 1e-3
    lr_frame: float = 1e-4       # per-frame pose, expression and camera
    preset: str = "body"
    seed: int = 0
    n_bins: int = 32
    eval_bins: int = 64
    field_levels: tuple = (16, 32, 64)
    refine_frames: bool = True
    frozen: tuple = ()
    weights: dict = field(default_factory=dict)
    patch_size: int = 0
    foreground_fraction: float = 0.5   # share of rays drawn near the avatar mask
    log_every: int = 50

    def __post_init__(self):
        for name in ("rays_per_frame", "frames_per_batch", "n_bins", "eval_bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("stage1_steps", "stage2_steps", "patch_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("lr_field", "lr_mesh", "lr_shape", "lr_residual", "lr_frame"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.foreground_fraction <= 1.0:
            raise ValueError("foreground_fraction must be in [0, 1]")
        if self.preset not in ("body", "head"):
            raise ValueError("preset must be 'body' or 'head'")
        self.field_levels = tuple(int(r) for r in self.field_levels)
        self.frozen = tuple(self.frozen)
        unknown = set(self.frozen) - set(SHARED_GROUPS) - set(FRAME_GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
        self.loss_weights()   # validates overrides

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps

    def loss_weights(self, stage: int = 2) -> LossWeights:
        w = LossWeights.preset(self.preset).with_updates(**self.weights)
        return w.with_updates(semantic=0.0) if stage == 1 else w

    def lr(self, group: str) -> float:
        return {"beta": self.lr_shape, "offsets": self.lr_mesh, "albedo": self.lr_mesh,
                "field": self.lr_field, "residual_field": self.lr_residual}.get(group, self.lr_frame)

    def frozen_groups(self) -> set:
        out = set(self.frozen)
        if not self.refine_frames:
            out |= set(FRAME_GROUPS)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["field_levels"] = list(self.field_levels)
        d["frozen"] = list(self.frozen)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainState:
    model: ParametricModel
    avatar: AvatarParams
    frames: list            # FrameParams per dataset frame
    config: TrainConfig
    moments: dict = field(default_factory=dict)   # key -> {"m", "v", "t"}
    step: int = 0
    spec: dict = field(default_factory=dict)
    rng_state: Optional[torch.Tensor] = None

    @property
    def stage(self) -> int:
        return 1 if self.step < self.config.stage1_steps else 2

    def shared_groups(self) -> dict:
        g = {"beta": [self.avatar.beta], "offsets": [self.avatar.offsets], "albedo": [self.avatar.albedo],
             "field": list(self.avatar.field.grids)}
        if self.avatar.residual_field is not None:
            g["residual_field"] = list(self.avatar.residual_field.parameters())
        return g

    def frame_groups(self, i: int) -> dict:
        f = self.frames[i]
        return {"theta": [f.theta], "psi": [f.psi], "camera": [f.camera.scale, f.camera.translation]}


# --- Adam ------------------------------------------------------------------

def adam_step(params: list, grads: list, moments: list, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
              group: str = "params") -> None:
    """Bias-corrected Adam update, in place. ``moments`` holds one dict per parameter."""
    b1, b2 = betas
    for g in grads:
        if g is not None and not bool(torch.isfinite(g).all()):
            raise NonFiniteGradient(group)
    with torch.no_grad():
        for p, g, st in zip(params, grads, moments):
            if g is None:
                continue
            if not st:
                st.update(m=torch.zeros_like(p), v=torch.zeros_like(p), t=0)
            st["t"] += 1
            st["m"].mul_(b1).add_(g, alpha=1 - b1)
            st["v"].mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = st["m"] / (1 - b1 ** st["t"])
            v_hat = st["v"] / (1 - b2 ** st["t"])
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))


# --- initialization --------------------------------------------------------

def init_state(dataset, config: TrainConfig, dtype=torch.float32) -> TrainState:
    model = dataset.model
    avatar = AvatarParams.zeros(model, dtype)
    if getattr(dataset, "beta_init", None) is not None:
        avatar.beta = dataset.beta_init.to(dtype).clone()
    avatar.field = CanonicalField(config.field_levels, dtype=dtype)
    avatar.residual_field = DeformationField(seed=config.seed).to(dtype)
    avatar.residual_field.active = False
    frames = [f.params.to(dtype) for f in dataset.frames]
    state = TrainState(model, avatar, frames, config, spec=dataset.spec.to_dict())
    _enable_grads(state)
    return state


def _enable_grads(state: TrainState) -> None:
    for tensors in state.shared_groups().values():
        for t in tensors:
            t.requires_grad_(True)
    for i in range(len(state.frames)):
        for tensors in state.frame_groups(i).values():
            for t in tensors:
                t.requires_grad_(True)


# --- one step ----------------------------------------------------------------

def _gather(img: torch.Tensor, pix: torch.Tensor) -> torch.Tensor:
    return img[pix[:, 1], pix[:, 0]]


def foreground_pixels(mask: torch.Tensor, margin: int = 2) -> torch.Tensor:
    """Flat indices of pixels within ``margin`` of a binary mask."""
    m = binary_dilation(mask.numpy() > 0.5, iterations=margin) if margin > 0 else mask.numpy() > 0.5
    return torch.as_tensor(np.flatnonzero(m))


def _sample_pixels(cfg: TrainConfig, width: int, height: int, gen: torch.Generator, fg=None):
    n = cfg.rays_per_frame
    n_fg = int(round(n * cfg.foreground_fraction)) if fg is not None and len(fg) else 0
    idx = torch.randint(0, width * height, (n - n_fg,), generator=gen)
    if n_fg:
        idx = torch.cat([idx, fg[torch.randint(0, len(fg), (n_fg,), generator=gen)]])
    px, py = idx % width, idx // width
    patch = None
    if cfg.patch_size > 0:
        p = min(cfg.patch_size, width, height)
        x0 = int(torch.randint(0, width - p + 1, (1,), generator=gen))
        y0 = int(torch.randint(0, height - p + 1, (1,), generator=gen))
        yy, xx = torch.meshgrid(torch.arange(y0, y0 + p), torch.arange(x0, x0 + p), indexing="ij")
        px = torch.cat([px, xx.reshape(-1)])
        py = torch.cat([py, yy.reshape(-1)])
        patch = (n, p)
    return px, py, patch


def frame_terms(state: TrainState, frame_data, params: FrameParams, px, py, weights: LossWeights,
                settings: RenderSettings, gen: Optional[torch.Generator], patch=None,
                vertex_weights=None, edges=None) -> dict:
    """Loss terms for one frame over the given pixels."""
    model, avatar = state.model, state.avatar
    posed = pose_mesh(model, avatar, params)
    bare = pose_mesh(model, avatar, params, offsets=torch.zeros_like(avatar.offsets))
    scene = prepare_scene(model, avatar, params, settings, posed=posed)
    rays = pixel_rays(params.camera, px, py, settings.bounds)
    res = render_rays(scene, rays, settings, gen)
    dt = res.rgb.dtype
    pix = rays.pixels
    target = _gather(frame_data.rgb, pix).to(dt)
    masks = MaskSet(_gather(frame_data.S, pix).to(dt), _gather(frame_data.S_b, pix).to(dt),
                    _gather(frame_data.S_e, pix).to(dt))
    patches = None
    if patch is not None:
        n, p = patch
        patches = [(res.rgb[n:].reshape(p, p, 3), target[n:].reshape(p, p, 3))]
    terms = recon_loss(res.rgb, target, weights, patches)
    terms["ext"] = exterior_loss(res.s_v, masks.S_e, weights)
    c_skin = skin_color(model, avatar.albedo, state.config.preset).to(dt)
    terms.update(interior_losses(res.silhouette, res.mesh_rgb, target, masks, c_skin, weights))
    if vertex_weights is None:
        vertex_weights = region_weights(model, weights.region_ratio)
    if edges is None:
        edges = torch.as_tensor(model.edges())
    terms.update(regularization(posed.vertices, bare.vertices, avatar.offsets, edges, vertex_weights, weights))
    return terms


_FG_CACHE: dict = {}


def train_step(state: TrainState, dataset, gen: torch.Generator, train_ids: list) -> dict:
    cfg = state.config
    stage = state.stage
    weights = cfg.loss_weights(stage)
    state.avatar.residual_field.active = stage == 2
    settings = RenderSettings(n_bins=cfg.n_bins, bounds=dataset.spec.ray_bounds, jitter=True)
    order = torch.randperm(len(train_ids), generator=gen)[:cfg.frames_per_batch]
    batch = [train_ids[int(j)] for j in order]
    vw = region_weights(state.model, weights.region_ratio)
    edges = torch.as_tensor(state.model.edges())
    per_frame = []
    for i in batch:
        fd = dataset.frames[i]
        if i not in _FG_CACHE.setdefault(id(dataset), {}):
            _FG_CACHE[id(dataset)][i] = foreground_pixels(fd.S)
        px, py, patch = _sample_pixels(cfg, fd.params.camera.width, fd.params.camera.height, gen,
                                       _FG_CACHE[id(dataset)][i])
        per_frame.append(frame_terms(state, fd, state.frames[i], px, py, weights, settings, gen, patch,
                                     vw, edges))
    loss = total_loss(per_frame)
    total = loss.total
    if not bool(torch.isfinite(total)):
        raise TrainingDiverged(f"non-finite loss at step {state.step}")

    frozen = cfg.frozen_groups()
    named = []   # (group, key, tensor)
    for name, tensors in state.shared_groups().items():
        if name in frozen or (name == "residual_field" and stage == 1):
            continue
        named += [(name, f"{name}.{j}", t) for j, t in enumerate(tensors)]
    for i in sorted(set(batch)):
        for name, tensors in state.frame_groups(i).items():
            if name not in frozen:
                named += [(name, f"frame{i}.{name}.{j}", t) for j, t in enumerate(tensors)]
    grads = torch.autograd.grad(total, [t for _, _, t in named], allow_unused=True)
    by_group: dict = {}
    for (name, key, t), g in zip(named, grads):
        by_group.setdefault(name, []).append((key, t, g))
    # check everything before touching any parameter
    for name, items in by_group.items():
        for _, _, g in items:
            if g is not None and not bool(torch.isfinite(g).all()):
                raise NonFiniteGradient(name)
    for name, items in by_group.items():
        adam_step([t for _, t, _ in items], [g for _, _, g in items],
                  [state.moments.setdefault(k, {}) for k, _, _ in items], cfg.lr(name), group=name)
    with torch.no_grad():
        state.avatar.albedo.clamp_(0.0, 1.0)
        for i in batch:
            state.frames[i].camera.scale.clamp_(min=1e-3)
    state.step += 1
    out = loss.as_floats()
    out.update(step=state.step, stage=stage, frames=batch)
    return out


def train(dataset, config: TrainConfig, state: Optional[TrainState] = None, out_dir=None,
          callback: Optional[Callable] = None) -> tuple[TrainState, list]:
    """Run (or resume) both stages. Deterministic given ``config.seed``.

    On divergence the last good state is written to ``out_dir/diverged.havc``
    (when ``out_dir`` is given) and :class:`TrainingDiverged` is raised.
    """
    state = init_state(dataset, config) if state is None else state
    gen = torch.Generator().manual_seed(config.seed)
    if state.rng_state is not None:
        gen.set_state(state.rng_state)
    train_ids = dataset.train_frames
    if not train_ids:
        raise ValueError("dataset has no training frames")
    history = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_fh = (out / "metrics.jsonl").open("a") if out is not None else None
    t0 = time.time()
    try:
        while state.step < config.total_steps:
            backup = _snapshot_state(state) if out is not None else None
            try:
                rec = train_step(state, dataset, gen, train_ids)
                state.rng_state = gen.get_state()
            except (TrainingDiverged, RenderError, NumericalDegeneracyError) as exc:
                if out is not None:
                    save_checkpoint(backup, out / "diverged.havc")
                if isinstance(exc, TrainingDiverged):
                    raise
                raise TrainingDiverged(f"step {state.step}: {exc}") from exc
            rec["time"] = round(time.time() - t0, 3)
            history.append(rec)
            if log_fh is not None and (state.step % config.log_every == 0 or state.step == config.total_steps):
                log_fh.write(json.dumps(rec) + "\n")
            if callback is not None:
                callback(state, rec)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None:
        save_checkpoint(state, out / "final.havc")
    return state, history


def _snapshot_state(state: TrainState) -> TrainState:
    av = state.avatar
    field_copy = av.field.to(av.field.dtype)
    res = None
    if av.residual_field is not None:
        res = DeformationField().to(av.beta.dtype)
        res.load_state_dict(av.residual_field.state_dict())
    avatar = AvatarParams(av.beta.detach().clone(), av.offsets.detach().clone(), av.albedo.detach().clone(),
                          field_copy, res)
    frames = [f.to(f.theta.dtype) for f in state.frames]
    moments = {k: {"m": v["m"].clone(), "v": v["v"].clone(), "t": v["t"]} for k, v in state.moments.items()}
    rng = None if state.rng_state is None else state.rng_state.clone()
    return TrainState(state.model, avatar, frames, state.config, moments, state.step, dict(state.spec), rng)


# --- evaluation --------------------------------------------------------------

def render_dataset_frame(state: TrainState, params: FrameParams, bins: int, bounds, field=None):
    settings = RenderSettings(n_bins=bins, bounds=bounds)
    with torch.no_grad():
        scene = prepare_scene(state.model, state.avatar, params, settings, field=field)
        return render_frame(scene, settings)


def evaluate(state: TrainState, dataset, frames: Optional[list] = None, bins: Optional[int] = None) -> list:
    """Per-frame image metrics plus mask overlaps.

    Held-out frames use the dataset's parameters; training frames use the
    refined ones from ``state``.
    """
    frames = dataset.heldout_frames if frames is None else frames
    bins = state.config.eval_bins if bins is None else bins
    out = []
    for i in frames:
        fd = dataset.frames[i]
        params = fd.params.to(state.avatar.beta.dtype) if fd.heldout else state.frames[i]
        img = render_dataset_frame(state, params, bins, dataset.spec.ray_bounds)
        pred = img.rgb.double().numpy()
        gt = fd.rgb.double().numpy()
        S = fd.S.numpy() > 0.5
        S_b = fd.S_b.numpy() > 0.5
        S_e = fd.S_e.numpy() > 0.5
        rec = {"frame": i, "heldout": fd.heldout,
               "l1": l1(pred, gt), "psnr": psnr(pred, gt), "ssim": ssim(pred, gt),
               "psnr_avatar": psnr(pred, gt, mask=S), "l1_avatar": l1(pred, gt, mask=S),
               "psnr_interior": psnr(pred, gt, mask=S_b), "psnr_exterior": psnr(pred, gt, mask=S_e),
               "exterior_iou": iou(img.s_v.numpy() > 0.5, S_e),
               "interior_iou": iou(img.silhouette.numpy() > 0.5, fd.interior.numpy() > 0.5)}
        out.append(rec)
    return out


def summarize(records: list) -> dict:
    keys = [k for k in records[0] if k not in ("frame", "heldout")] if records else []
    return {k: float(np.mean([r[k] for r in records])) for k in keys}


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(state: TrainState, path, extra_meta: Optional[dict] = None) -> None:
    av = state.avatar
    arrays = {"beta": av.beta.detach().numpy(), "offsets": av.offsets.detach().numpy(),
              "albedo": av.albedo.detach().numpy()}
    for j, g in enumerate(av.field.grids):
        arrays[f"field.level_{j}"] = g.detach().numpy()
    arrays["field.box"] = torch.stack([av.field.box_min, av.field.box_max]).numpy()
    if av.residual_field is not None:
        for name, p in av.residual_field.state_dict().items():
            arrays[f"residual.{name}"] = p.detach().numpy()
    for i, f in enumerate(state.frames):
        arrays[f"frame{i}.theta"] = f.theta.detach().numpy()
        arrays[f"frame{i}.psi"] = f.psi.detach().numpy()
        arrays[f"frame{i}.scale"] = f.camera.scale.detach().reshape(1).numpy()
        arrays[f"frame{i}.translation"] = f.camera.translation.detach().numpy()
    adam_t = {}
    for k, st in state.moments.items():
        arrays[f"adam.{k}.m"] = st["m"].numpy()
        arrays[f"adam.{k}.v"] = st["v"].numpy()
        adam_t[k] = st["t"]
    if state.rng_state is not None:
        arrays["rng_state"] = state.rng_state.numpy()
    m = state.model
    for name in ("template_vertices", "faces", "shape_dirs", "pose_dirs", "expr_dirs", "skin_weights",
                 "joint_regressor", "parents", "region_labels", "canonical_pose"):
        arrays[f"model.{name}"] = np.asarray(getattr(m, name))
    meta = {"kind": "checkpoint", "step": state.step, "config": state.config.to_dict(),
            "field_levels": list(av.field.levels), "n_frames": len(state.frames),
            "image": [[f.camera.width, f.camera.height] for f in state.frames],
            "residual_active": bool(av.residual_field is not None and av.residual_field.active),
            "residual_scale": av.residual_field.scale if av.residual_field is not None else None,
            "adam_t": adam_t, "spec": state.spec, **(extra_meta or {})}
    save_arrays(path, arrays, meta)


def load_checkpoint(path, dtype=torch.float32) -> TrainState:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path}: not a checkpoint")
    model = ParametricModel(**{k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")})
    t = lambda name: torch.as_tensor(arrays[name], dtype=dtype).clone()  # noqa: E731
    levels = meta["field_levels"]
    fld = CanonicalField.from_arrays(arrays, levels, prefix="field.", dtype=dtype)
    res = None
    if any(k.startswith("residual.") for k in arrays):
        res = DeformationField(scale=meta.get("residual_scale") or 0.01).to(dtype)
        res.load_state_dict({k[len("residual."):]: torch.as_tensor(v, dtype=dtype)
                             for k, v in arrays.items() if k.startswith("residual.")})
        res.active = bool(meta.get("residual_active"))
    avatar = AvatarParams(t("beta"), t("offsets"), t("albedo"), fld, res)
    frames = []
    for i in range(meta["n_frames"]):
        w, h = meta["image"][i]
        cam = OrthoCamera(t(f"frame{i}.scale").reshape(()), t(f"frame{i}.translation"), w, h)
        frames.append(FrameParams(t(f"frame{i}.theta"), t(f"frame{i}.psi"), cam))
    moments = {}
    for k, step in meta.get("adam_t", {}).items():
        moments[k] = {"m": t(f"adam.{k}.m"), "v": t(f"adam.{k}.v"), "t": int(step)}
    rng = torch.as_tensor(arrays["rng_state"], dtype=torch.uint8) if "rng_state" in arrays else None
    state = TrainState(model, avatar, frames, TrainConfig.from_dict(meta["config"]), moments, meta["step"],
                       meta.get("spec", {}), rng)
    _enable_grads(state)
    return state


def mean_psnr(records: list) -> float:
    vals = [r["psnr"] for r in records]
    return float(np.mean(vals)) if vals else math.nan
