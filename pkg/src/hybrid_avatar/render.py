"""Mesh-integrated volume rendering: rays stop at the body mesh and composite its albedo."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .bvh import Bvh
from .camera import BODY_BOUNDS, OrthoCamera, Rays, image_pixels, pixel_rays
from .geometry import AvatarParams, FrameParams, ParametricModel, PosedMesh, pose_mesh
from .skinning import DEFAULT_K, DEFAULT_SIGMA, SkinningContext, canonicalize, skinning_context

DEFAULT_BINS = 64


class RenderError(RuntimeError):
    """Non-finite values appeared while rendering."""


@dataclass
class RenderSettings:
    n_bins: int = DEFAULT_BINS
    bounds: tuple = BODY_BOUNDS
    jitter: bool = False
    k: int = DEFAULT_K
    sigma: float = DEFAULT_SIGMA
    chunk: int = 1024

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError("n_bins must be at least 2")


@dataclass
class Scene:
    """Immutable per-frame snapshot: posed mesh, skinning data, BVH and fields."""

    model: ParametricModel
    avatar: AvatarParams
    frame: FrameParams
    posed: PosedMesh
    ctx: SkinningContext
    bvh: Bvh
    field: object
    residual_field: object = None


_BVH_CACHE: dict = {}


def _bvh_for(model: ParametricModel, vertices: np.ndarray) -> Bvh:
    bvh = _BVH_CACHE.get("bvh")
    if bvh is None or _BVH_CACHE.get("faces") is not model.faces:
        bvh = Bvh(vertices, model.faces)
        _BVH_CACHE.update(bvh=bvh, faces=model.faces)
    else:
        bvh.refit(vertices)
    return bvh


def prepare_scene(model: ParametricModel, avatar: AvatarParams, frame: FrameParams,
                  settings: RenderSettings = RenderSettings(), field=None, posed: PosedMesh = None,
                  bvh: Bvh = None) -> Scene:
    """Pose the mesh, build skinning data and refit the BVH for one frame.

    ``field`` overrides ``avatar.field`` (used for exterior transfer).
    """
    posed = pose_mesh(model, avatar, frame) if posed is None else posed
    ctx = skinning_context(model, avatar, frame, posed, settings.k, settings.sigma)
    verts = posed.vertices.detach().cpu().numpy().astype(np.float64)
    if bvh is None:
        bvh = _bvh_for(model, verts)
        # a private copy keeps this snapshot valid if the cache is refit later
        bvh = _snapshot(bvh)
    else:
        bvh.refit(verts)
    return Scene(model, avatar, frame, posed, ctx, bvh,
                 avatar.field if field is None else field, avatar.residual_field)


def _snapshot(bvh: Bvh) -> Bvh:
    clone = object.__new__(Bvh)
    clone.__dict__.update(bvh.__dict__)
    clone.bmin = bvh.bmin.copy()
    clone.bmax = bvh.bmax.copy()
    return clone


@dataclass
class RayResult:
    """Per-ray outputs plus what is needed to differentiate or replay them."""

    rgb: torch.Tensor          # (R, 3)
    s_v: torch.Tensor          # (R,) accumulated field opacity
    hit: torch.Tensor          # (R,) bool
    face: torch.Tensor         # (R,) long, -1 on miss
    bary: torch.Tensor         # (R, 3)
    t_hit: torch.Tensor        # (R,), inf on miss
    mesh_rgb: torch.Tensor     # (R, 3), zero on miss
    weights: torch.Tensor      # (R, n_bins): field weights, last column the residual
    structure: dict = field(default_factory=dict)

    @property
    def silhouette(self) -> torch.Tensor:
        return self.hit.to(self.rgb.dtype)


def intersect_differentiable(posed: PosedMesh, rays: Rays, face: torch.Tensor):
    """Recompute (t, u, v) for known hit faces with autograd through vertices and rays."""
    tri = posed.vertices[posed.faces[face]]
    o, d = rays.origins[: len(face)], rays.directions[: len(face)]
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1, e2 = v1 - v0, v2 - v0
    p = torch.cross(d, e2, dim=1)
    inv = 1.0 / (e1 * p).sum(1)
    s = o - v0
    u = (s * p).sum(1) * inv
    q = torch.cross(s, e1, dim=1)
    v = (d * q).sum(1) * inv
    t = (e2 * q).sum(1) * inv
    return t, u, v


def _subset(rays: Rays, sel) -> Rays:
    return Rays(rays.origins[sel], rays.directions[sel], rays.near, rays.far, rays.pixels[sel])


def render_rays(scene: Scene, rays: Rays, settings: RenderSettings = RenderSettings(),
                generator: Optional[torch.Generator] = None, structure: Optional[dict] = None) -> RayResult:
    """Render a batch of rays.

    ``structure`` replays the discrete choices of an earlier call (hit faces,
    sample jitter, neighbor sets) so finite differences see a smooth map.
    """
    n_rays = len(rays)
    nb = settings.n_bins
    dtype = rays.origins.dtype
    near, far = rays.near, rays.far

    if structure is None:
        face_np, _, _, _ = scene.bvh.intersect(rays.origins.detach().cpu().numpy(),
                                               rays.directions.detach().cpu().numpy(), near, far)
        face = torch.as_tensor(face_np)
        if settings.jitter:
            xi = torch.rand(n_rays, nb, generator=generator, dtype=dtype)
        else:
            xi = torch.full((n_rays, nb), 0.5, dtype=dtype)
        neighbors = None
    else:
        face, xi, neighbors = structure["face"], structure["xi"], structure["neighbors"]
    hit = face >= 0

    # differentiable hit point on the struck triangle
    t_hit = torch.full((n_rays,), float("inf"), dtype=dtype)
    bary = torch.zeros(n_rays, 3, dtype=dtype)
    mesh_rgb = torch.zeros(n_rays, 3, dtype=dtype)
    hit_idx = torch.nonzero(hit).reshape(-1)
    if len(hit_idx):
        sub = _subset(rays, hit_idx)
        th, u, v = intersect_differentiable(scene.posed, sub, face[hit_idx])
        b = torch.stack([1.0 - u - v, u, v], dim=1)
        albedo = scene.avatar.albedo.clamp(0.0, 1.0)
        corners = albedo[scene.posed.faces[face[hit_idx]]]          # (H, 3, 3)
        col = (b[:, :, None] * corners).sum(1)
        t_hit = t_hit.index_put((hit_idx,), th)
        bary = bary.index_put((hit_idx,), b)
        mesh_rgb = mesh_rgb.index_put((hit_idx,), col)

    t_end = torch.where(hit, torch.where(hit, t_hit, torch.zeros_like(t_hit)),
                        torch.full_like(t_hit, far))
    span = t_end - near                                              # (R,)
    delta = span / nb
    steps = torch.arange(nb, dtype=dtype)
    t_samples = near + span[:, None] * (steps[None, :] + xi) / nb    # (R, nb)
    points = rays.origins[:, None, :] + t_samples[..., None] * rays.directions[:, None, :]
    flat = points.reshape(-1, 3)
    q = canonicalize(flat, scene.ctx, scene.residual_field, neighbors)
    cells = None
    if hasattr(scene.field, "cells"):
        cells = scene.field.cells(q.x_c_tilde) if structure is None else structure.get("cells")
    if cells is not None and structure is not None:
        rgb_s, sigma_s = scene.field.query(q.x_c_tilde, cells)
    else:
        rgb_s, sigma_s = scene.field.query(q.x_c_tilde)
    rgb_s = rgb_s.reshape(n_rays, nb, 3)
    sigma_s = sigma_s.reshape(n_rays, nb)

    tau = sigma_s[:, :-1] * delta[:, None]                           # (R, nb-1)
    trans = torch.exp(-torch.cumsum(torch.cat([torch.zeros_like(tau[:, :1]), tau[:, :-1]], 1), 1))
    w = trans * -torch.expm1(-tau)
    s_v = w.sum(1)
    residual = 1.0 - s_v
    tail = torch.where(hit[:, None], mesh_rgb, rgb_s[:, -1])
    rgb = (w[..., None] * rgb_s[:, :-1]).sum(1) + residual[:, None] * tail
    rgb = rgb.clamp(0.0, 1.0)

    if not bool(torch.isfinite(rgb).all() and torch.isfinite(s_v).all()):
        raise RenderError(f"non-finite render output; source: {_nan_source(scene, q, rgb_s, sigma_s)}")

    return RayResult(
        rgb=rgb, s_v=s_v, hit=hit, face=face, bary=bary, t_hit=t_hit, mesh_rgb=mesh_rgb,
        weights=torch.cat([w, residual[:, None]], 1),
        structure={"face": face, "xi": xi, "neighbors": q.neighbors, "cells": cells},
    )


def render_ray(scene: Scene, rays: Rays, settings: RenderSettings = RenderSettings(), **kw) -> RayResult:
    """Single-ray convenience wrapper around :func:`render_rays`."""
    return render_rays(scene, rays, settings, **kw)


def _nan_source(scene: Scene, q, rgb_s, sigma_s) -> str:
    for name, tensors in parameter_groups(scene.avatar, scene.frame).items():
        if any(not bool(torch.isfinite(t).all()) for t in tensors):
            return f"parameter group {name!r}"
    if scene.field is not None and hasattr(scene.field, "grids"):
        if any(not bool(torch.isfinite(g).all()) for g in scene.field.grids):
            return "parameter group 'field'"
    if not bool(torch.isfinite(q.x_c_tilde).all()):
        return "canonicalization (x_c)"
    if not bool(torch.isfinite(sigma_s).all() and torch.isfinite(rgb_s).all()):
        return "field query"
    return "compositing"


def parameter_groups(avatar: AvatarParams, frame: FrameParams) -> dict[str, list[torch.Tensor]]:
    """Named optimizable tensors touched by a render."""
    groups = {
        "beta": [avatar.beta],
        "offsets": [avatar.offsets],
        "albedo": [avatar.albedo],
        "theta": [frame.theta],
        "psi": [frame.psi],
        "camera": [frame.camera.scale, frame.camera.translation],
    }
    if avatar.field is not None and hasattr(avatar.field, "grids"):
        groups["field"] = list(avatar.field.grids)
    if avatar.residual_field is not None:
        groups["residual_field"] = list(avatar.residual_field.parameters())
    return groups


def render_backward(result: RayResult, upstream: dict, scene: Scene) -> dict[str, list[torch.Tensor]]:
    """Gradients of ``sum(upstream[k] * result.k)`` for every parameter group.

    ``upstream`` maps output names (``rgb``, ``s_v``, ``mesh_rgb``) to
    tensors shaped like the corresponding outputs.
    """
    outputs = [getattr(result, name) for name in upstream]
    if not any(o.requires_grad for o in outputs):
        raise RuntimeError("render_backward needs a forward pass recorded with gradients enabled")
    total = sum((getattr(result, name) * g).sum() for name, g in upstream.items())
    groups = parameter_groups(scene.avatar, scene.frame)
    names, leaves = [], []
    for name, tensors in groups.items():
        for t in tensors:
            if t.requires_grad:
                names.append(name)
                leaves.append(t)
    grads = torch.autograd.grad(total, leaves, allow_unused=True, retain_graph=True)
    out: dict[str, list[torch.Tensor]] = {}
    for name, leaf, g in zip(names, leaves, grads):
        out.setdefault(name, []).append(torch.zeros_like(leaf) if g is None else g)
    return out


@dataclass
class RenderedFrame:
    rgb: torch.Tensor         # (H, W, 3)
    s_v: torch.Tensor         # (H, W)
    silhouette: torch.Tensor  # (H, W) in {0, 1}
    mesh_rgb: torch.Tensor    # (H, W, 3)
    face: torch.Tensor        # (H, W)
    bary: torch.Tensor        # (H, W, 3)
    t_hit: torch.Tensor       # (H, W)


def render_frame(scene: Scene, settings: RenderSettings = RenderSettings(),
                 generator: Optional[torch.Generator] = None) -> RenderedFrame:
    """Render every pixel of the frame's camera (no gradients)."""
    cam = scene.frame.camera
    px, py = image_pixels(cam.width, cam.height)
    parts = []
    with torch.no_grad():
        for start in range(0, len(px), settings.chunk):
            rays = pixel_rays(cam, px[start:start + settings.chunk], py[start:start + settings.chunk],
                              settings.bounds)
            parts.append(render_rays(scene, rays, settings, generator))
    H, W = cam.height, cam.width

    def cat(name, *shape):
        return torch.cat([getattr(p, name) for p in parts]).reshape(H, W, *shape)

    return RenderedFrame(rgb=cat("rgb", 3), s_v=cat("s_v"), silhouette=cat("silhouette"),
                         mesh_rgb=cat("mesh_rgb", 3), face=cat("face"), bary=cat("bary", 3),
                         t_hit=cat("t_hit"))


def rasterize(posed: PosedMesh, albedo: torch.Tensor, camera: OrthoCamera,
              bounds=BODY_BOUNDS, bvh: Bvh = None):
    """Mesh color image and binary silhouette from one ray per pixel."""
    verts = posed.vertices.detach().cpu().numpy()
    bvh = Bvh(verts, posed.faces.cpu().numpy()) if bvh is None else bvh
    px, py = image_pixels(camera.width, camera.height)
    rays = pixel_rays(camera, px, py, bounds)
    face, _, _, _ = bvh.intersect(rays.origins.detach().numpy(), rays.directions.detach().numpy(),
                                  rays.near, rays.far)
    face = torch.as_tensor(face)
    hit = face >= 0
    color = torch.zeros(len(px), 3, dtype=posed.vertices.dtype)
    idx = torch.nonzero(hit).reshape(-1)
    if len(idx):
        _, u, v = intersect_differentiable(posed, _subset(rays, idx), face[idx])
        b = torch.stack([1.0 - u - v, u, v], 1)
        col = (b[:, :, None] * albedo.clamp(0.0, 1.0)[posed.faces[face[idx]]]).sum(1)
        color = color.index_put((idx,), col)
    H, W = camera.height, camera.width
    return color.reshape(H, W, 3), hit.to(color.dtype).reshape(H, W)
