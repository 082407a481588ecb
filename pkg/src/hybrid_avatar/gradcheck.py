"""Finite-difference checks of every analytic gradient the optimizer relies on."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .camera import OrthoCamera, image_pixels, pixel_rays
from .field import CanonicalField, smooth_random_field
from .geometry import AvatarParams, FrameParams, ParametricModel, pose_mesh
from .losses import (LossWeights, MaskSet, exterior_loss, interior_losses, recon_loss, region_weights,
                     regularization)
from .render import RenderSettings, prepare_scene, render_rays
from .skinning import DeformationField
from .toy import toy_model

STEP = 1e-4
TOL = 1e-3
ATOL = 1e-9       # both gradients below this norm count as agreeing zeros
FUNCTIONALS = ("render", "pixel", "ext", "silhouette", "int_mask", "skin", "inside", "skin_inside",
               "edge", "offset")


@dataclass
class Check:
    suite: str
    config: int
    group: str
    functional: str
    rel: float
    scale: float
    ok: bool


@dataclass
class GradcheckReport:
    checks: list = field(default_factory=list)
    seconds: float = 0.0
    configs: int = 0

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def worst(self) -> Optional[Check]:
        return max(self.checks, key=lambda c: c.rel if c.scale > ATOL else 0.0, default=None)

    def failures(self) -> list:
        return [c for c in self.checks if not c.ok]

    def groups(self) -> set:
        return {c.group for c in self.checks}


def central_difference(view: torch.Tensor, c: int, h: float, evaluate):
    """Fourth-order central difference of ``evaluate()`` in ``view[c]`` at step ``h``.

    ``evaluate`` returns a float or a dict of floats. The two-point stencil's
    O(h^2) truncation error alone can exceed 1e-3 relative on coordinates with
    a small gradient and large curvature; this stencil's error is O(h^4).
    """
    orig = view[c].item()
    vals = {}
    for s in (2, 1, -1, -2):
        view[c] = orig + s * h
        vals[s] = evaluate()
    view[c] = orig

    def comb(p2, p1, m1, m2):
        return (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)

    if isinstance(vals[1], dict):
        return {k: comb(vals[2][k], vals[1][k], vals[-1][k], vals[-2][k]) for k in vals[1]}
    return comb(vals[2], vals[1], vals[-1], vals[-2])


def relative_error(a: np.ndarray, n: np.ndarray) -> tuple[float, float]:
    """``|a - n| / max(|a|, |n|)`` over a coordinate sample, with the scale returned alongside."""
    scale = float(max(np.linalg.norm(a), np.linalg.norm(n)))
    if scale <= ATOL:
        return 0.0, scale
    return float(np.linalg.norm(a - n) / scale), scale


# --- random scene configurations ---------------------------------------------

@dataclass
class GradConfig:
    model: ParametricModel
    avatar: AvatarParams
    frame: FrameParams
    px: torch.Tensor
    py: torch.Tensor
    target: torch.Tensor
    masks: MaskSet
    c_skin: torch.Tensor
    up_rgb: torch.Tensor
    up_sv: torch.Tensor
    settings: RenderSettings


def _stable_pixels(model, avatar, frame, settings, rng, n_rays):
    """Pixels whose 3x3 neighborhood agrees on mesh hit/miss."""
    with torch.no_grad():
        scene = prepare_scene(model, avatar, frame, settings)
        cam = frame.camera
        px, py = image_pixels(cam.width, cam.height)
        rays = pixel_rays(cam, px, py, settings.bounds)
        face, _, _, _ = scene.bvh.intersect(rays.origins.numpy(), rays.directions.numpy(), rays.near, rays.far)
    hit = (face >= 0).reshape(cam.height, cam.width)
    pad = np.pad(hit, 1, mode="edge")
    stable = np.ones_like(hit)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            stable &= pad[1 + dy:1 + dy + hit.shape[0], 1 + dx:1 + dx + hit.shape[1]] == hit
    inside = np.flatnonzero(stable & hit)
    outside = np.flatnonzero(stable & ~hit)
    n_in = min(len(inside), (n_rays + 1) // 2)
    pick = list(rng.choice(inside, n_in, replace=False)) if n_in else []
    pick += list(rng.choice(outside, min(len(outside), n_rays - n_in), replace=False))
    pick = np.asarray(sorted(pick), dtype=np.int64)
    return torch.as_tensor(pick % cam.width), torch.as_tensor(pick // cam.width)


def random_config(seed: int, base: Optional[dict] = None, n_rays: int = 6, n_bins: int = 12,
                  resolution: int = 32) -> GradConfig:
    """A float64 toy configuration with every parameter group perturbed away from zero."""
    rng = np.random.default_rng(seed)
    dt = torch.float64
    base = base or {}
    model = base.get("model") or toy_model()
    f = lambda a: torch.as_tensor(np.asarray(a), dtype=dt)  # noqa: E731
    avatar = AvatarParams(
        beta=f(rng.normal(0, 0.5, model.n_shape)),
        offsets=f(rng.normal(0, 3e-3, (model.n_verts, 3))),
        albedo=f(rng.uniform(0.1, 0.9, (model.n_verts, 3))),
    )
    if "field" in base:
        fld = base["field"].to(dt)
        fld.grids = [g + f(rng.normal(0, 0.3, tuple(g.shape))) for g in fld.grids]
    else:
        fld = smooth_random_field(seed, resolution=8, density_scale=2.0)
    avatar.field = fld
    res = DeformationField(seed=seed).to(dt)
    with torch.no_grad():
        res.layers[-1].weight.copy_(f(rng.normal(0, 0.5, tuple(res.layers[-1].weight.shape))))
        res.layers[-1].bias.copy_(f(rng.normal(0, 0.5, 3)))
    avatar.residual_field = res
    theta = rng.normal(0, 0.15, (model.n_joints, 3))
    if model.n_joints >= 4:
        theta[2, 2] -= rng.uniform(0, 0.6)
        theta[3, 2] += rng.uniform(0, 0.6)
    cam = OrthoCamera(f(1.8 + rng.normal(0, 0.05)), f(rng.normal(0, 0.02, 2)), resolution, resolution)
    frame = FrameParams(f(theta), f(rng.uniform(-1, 1, model.n_expr)), cam)
    settings = RenderSettings(n_bins=n_bins, jitter=True)
    px, py = _stable_pixels(model, avatar, frame, settings, rng, n_rays)
    n = len(px)
    S_e = f(rng.random(n) < 0.4)
    S_b = f(rng.random(n) < 0.5) * (1 - S_e)
    masks = MaskSet(torch.maximum(S_e, S_b), S_b, S_e)
    return GradConfig(model, avatar, frame, px, py, f(rng.uniform(0, 1, (n, 3))), masks,
                      f(rng.uniform(0.2, 0.8, 3)), f(rng.normal(0, 1, (n, 3))), f(rng.normal(0, 1, n)),
                      settings)


def _leaves(cfg: GradConfig) -> dict:
    av, fr = cfg.avatar, cfg.frame
    return {"beta": [av.beta], "offsets": [av.offsets], "albedo": [av.albedo], "theta": [fr.theta],
            "psi": [fr.psi], "camera": [fr.camera.scale, fr.camera.translation],
            "field": list(av.field.grids), "residual_field": list(av.residual_field.parameters())}


def functionals(cfg: GradConfig, weights: LossWeights, structure=None, gen=None):
    """Scalar outputs checked by the suite, plus the render structure for replay."""
    model, av, fr = cfg.model, cfg.avatar, cfg.frame
    posed = pose_mesh(model, av, fr)
    bare = pose_mesh(model, av, fr, offsets=torch.zeros_like(av.offsets))
    scene = prepare_scene(model, av, fr, cfg.settings, posed=posed)
    rays = pixel_rays(fr.camera, cfg.px, cfg.py, cfg.settings.bounds)
    res = render_rays(scene, rays, cfg.settings, gen, structure=structure)
    out = {"render": (res.rgb * cfg.up_rgb).sum() + (res.s_v * cfg.up_sv).sum()}
    out.update(recon_loss(res.rgb, cfg.target, weights))
    out["ext"] = exterior_loss(res.s_v, cfg.masks.S_e, weights)
    out.update(interior_losses(res.silhouette, res.mesh_rgb, cfg.target, cfg.masks, cfg.c_skin, weights))
    edges = torch.as_tensor(model.edges())
    out.update(regularization(posed.vertices, bare.vertices, av.offsets, edges,
                              region_weights(model, weights.region_ratio), weights))
    return out, res.structure


def _pick_coords(grad: torch.Tensor, rng, n: int) -> list:
    flat = grad.detach().reshape(-1).abs()
    k = min(n, flat.numel())
    top = torch.topk(flat, max(1, k // 2)).indices.tolist()
    rest = rng.choice(flat.numel(), size=min(flat.numel(), k), replace=False).tolist()
    out = []
    for i in top + rest:
        if i not in out:
            out.append(i)
    return out[:k]


def check_config(cfg: GradConfig, index: int, rng, coords_per_group: int = 4, h: float = STEP,
                 tol: float = TOL) -> list:
    weights = LossWeights()
    leaves = _leaves(cfg)
    for ts in leaves.values():
        for t in ts:
            t.requires_grad_(True)
    gen = torch.Generator().manual_seed(index)
    vals, structure = functionals(cfg, weights, gen=gen)
    flat_leaves = [(g, j, t) for g, ts in leaves.items() for j, t in enumerate(ts)]
    analytic = {}
    for name in FUNCTIONALS:
        v = vals[name]
        if v.requires_grad:
            gs = torch.autograd.grad(v, [t for _, _, t in flat_leaves], allow_unused=True, retain_graph=True)
        else:
            gs = [None] * len(flat_leaves)
        analytic[name] = [torch.zeros_like(t) if g is None else g for (_, _, t), g in zip(flat_leaves, gs)]
    render_grads = analytic["render"]
    checks = []
    per_group: dict = {}
    for k, (group, j, t) in enumerate(flat_leaves):
        for c in _pick_coords(render_grads[k] + analytic["pixel"][k], rng, coords_per_group):
            per_group.setdefault(group, []).append((k, c))
    with torch.no_grad():
        for group, items in per_group.items():
            num = {name: [] for name in FUNCTIONALS}
            ana = {name: [] for name in FUNCTIONALS}
            for k, c in items:
                fd = central_difference(flat_leaves[k][2].view(-1), c, h, lambda: {
                    name: float(v) for name, v in functionals(cfg, weights, structure)[0].items()})
                for name in FUNCTIONALS:
                    num[name].append(fd[name])
                    ana[name].append(float(analytic[name][k].reshape(-1)[c]))
            for name in FUNCTIONALS:
                rel, scale = relative_error(np.asarray(ana[name]), np.asarray(num[name]))
                checks.append(Check("render_and_losses", index, group, name, rel, scale, rel <= tol))
    for ts in leaves.values():
        for t in ts:
            t.requires_grad_(False)
    return checks


def check_pose_mesh(seed: int, model: Optional[ParametricModel] = None, h: float = STEP,
                    tol: float = TOL) -> list:
    """Posed vertices against central differences in shape, pose, expression and offsets."""
    model = model or toy_model()
    rng = np.random.default_rng(seed)
    dt = torch.float64
    cam = OrthoCamera(torch.tensor(1.0, dtype=dt), torch.zeros(2, dtype=dt), 8, 8)
    av = AvatarParams(torch.tensor(rng.normal(0, 0.5, model.n_shape)),
                      torch.tensor(rng.normal(0, 3e-3, (model.n_verts, 3))),
                      torch.full((model.n_verts, 3), 0.5, dtype=dt))
    fr = FrameParams(torch.tensor(rng.normal(0, 0.3, (model.n_joints, 3))),
                     torch.tensor(rng.uniform(-1, 1, model.n_expr)), cam)
    up = torch.tensor(rng.normal(0, 1, (model.n_verts, 3)))
    leaves = {"beta": av.beta, "theta": fr.theta, "psi": fr.psi, "offsets": av.offsets}
    for t in leaves.values():
        t.requires_grad_(True)
    out = (pose_mesh(model, av, fr).vertices * up).sum()
    grads = torch.autograd.grad(out, list(leaves.values()))
    checks = []
    with torch.no_grad():
        for (name, t), g in zip(leaves.items(), grads):
            coords = _pick_coords(g, rng, 6)
            a, n = [], []
            for c in coords:
                a.append(float(g.reshape(-1)[c]))
                n.append(central_difference(t.view(-1), c, h,
                                            lambda: float((pose_mesh(model, av, fr).vertices * up).sum())))
            rel, scale = relative_error(np.asarray(a), np.asarray(n))
            checks.append(Check("pose_mesh", seed, name, "vertices", rel, scale, rel <= tol))
    return checks


def check_field(seed: int, fld: Optional[CanonicalField] = None, n_points: int = 32, h: float = STEP,
                tol: float = TOL) -> list:
    """Field query against central differences in grid values and query points."""
    from .field import query_gradients
    rng = np.random.default_rng(seed)
    fld = smooth_random_field(seed, 6) if fld is None else fld.to(torch.float64)
    lo, hi = fld.box_min.numpy(), fld.box_max.numpy()
    x = torch.tensor(rng.uniform(lo + 0.01, hi - 0.01, (n_points, 3)))
    up_rgb = torch.tensor(rng.normal(0, 1, (n_points, 3)))
    up_d = torch.tensor(rng.normal(0, 1, n_points))

    def f():
        rgb, d = fld.query(x)
        return float((rgb * up_rgb).sum() + (d * up_d).sum())

    grid_grads, point_grad = query_gradients(fld, x, up_rgb, up_d)
    checks = []
    for name, t, g in [("field", fld.grids[-1], grid_grads[-1]), ("point", x, point_grad)]:
        coords = _pick_coords(g, rng, 8)
        a, n = [], []
        for c in coords:
            a.append(float(g.reshape(-1)[c]))
            n.append(central_difference(t.view(-1), c, h, f))
        rel, scale = relative_error(np.asarray(a), np.asarray(n))
        checks.append(Check("field_query", seed, name, "query", rel, scale, rel <= tol))
    return checks


def run(samples: int = 100, seed: int = 0, base: Optional[dict] = None, tol: float = TOL,
        h: float = STEP, coords_per_group: int = 4) -> GradcheckReport:
    """All suites over ``samples`` random render configurations."""
    t0 = time.time()
    report = GradcheckReport()
    rng = np.random.default_rng(seed)
    model = (base or {}).get("model")
    for i in range(samples):
        cfg = random_config(seed * 100003 + i, base)
        report.checks += check_config(cfg, i, rng, coords_per_group, h, tol)
        report.configs += 1
    for i in range(max(1, samples // 10)):
        report.checks += check_pose_mesh(seed * 7919 + i, model, h, tol)
        report.checks += check_field(seed * 7919 + i, (base or {}).get("field"), h=h, tol=tol)
    report.seconds = time.time() - t0
    return report
