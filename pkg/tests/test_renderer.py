import math

import numpy as np
import pytest
import torch

from hybrid_avatar.bvh import Bvh, intersect_brute
from hybrid_avatar.camera import OrthoCamera, Rays, pixel_ray, pixel_rays
from hybrid_avatar.field import CanonicalField, smooth_random_field
from hybrid_avatar.geometry import pose_mesh
from hybrid_avatar.render import (RenderError, RenderSettings, prepare_scene, rasterize, render_backward,
                                  render_frame, render_rays)
from hybrid_avatar.toy import capsule_model

from conftest import canonical_frame, make_frame, random_pose, zero_avatar

BIG_BOX = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


class ConstantField:
    """Homogeneous slab ``z_lo < z < z_hi`` (canonical space) of given density and color."""

    def __init__(self, density=0.0, color=(0.3, 0.6, 0.9), z_lo=-10.0, z_hi=10.0):
        self.density, self.color, self.z_lo, self.z_hi = density, color, z_lo, z_hi

    def query(self, x):
        x = x.reshape(-1, 3)
        inside = ((x[:, 2] > self.z_lo) & (x[:, 2] < self.z_hi)).to(x.dtype)
        rgb = torch.as_tensor(self.color, dtype=x.dtype).expand(len(x), 3) * inside[:, None]
        return rgb, self.density * inside


def scene_for(model, field, frame=None, albedo=None, settings=RenderSettings()):
    av = zero_avatar(model)
    if albedo is not None:
        av.albedo = torch.as_tensor(albedo, dtype=torch.float64).expand(model.n_verts, 3).clone()
    av.field = field
    return prepare_scene(model, av, canonical_frame(model) if frame is None else frame, settings)


def random_rays(rng, n, bounds=(-0.6, 0.6)):
    o = np.zeros((n, 3))
    o[:, :2] = rng.uniform(-0.6, 0.6, (n, 2))
    d = np.tile([0.0, 0.0, -1.0], (n, 1))
    return Rays(torch.as_tensor(o), torch.as_tensor(d), bounds[0], bounds[1], torch.zeros(n, 2, dtype=torch.long))


# --- camera -------------------------------------------------------------------

def test_center_pixel_ray():
    cam = OrthoCamera(torch.tensor(1.0, dtype=torch.float64), torch.zeros(2, dtype=torch.float64), 5, 5)
    r = pixel_ray(cam, 2, 2)
    np.testing.assert_allclose(r.origins.numpy(), [[0, 0, 0]], atol=1e-15)
    np.testing.assert_allclose(r.directions.numpy(), [[0, 0, -1]])
    assert (r.near, r.far) == (-0.6, 0.6)
    assert pixel_ray(cam, 2, 2, bounds=(-1.5, 1.5)).far == 1.5


def test_scale_law():
    def extent(s):
        cam = OrthoCamera(torch.tensor(s, dtype=torch.float64), torch.zeros(2, dtype=torch.float64), 8, 8)
        r = pixel_rays(cam, [0, 7], [0, 7])
        return float(r.origins[1, 0] - r.origins[0, 0])
    assert extent(2.0) == pytest.approx(extent(1.0) / 2)


def test_corner_pixel_hand_computation():
    cam = OrthoCamera(torch.tensor(2.0, dtype=torch.float64), torch.tensor([0.1, -0.2], dtype=torch.float64), 10, 6)
    r = pixel_ray(cam, 0, 0)
    # ndc of the top-left pixel center: x = 0.5/10*2-1 = -0.9, y = 1 - 0.5/6*2 = 5/6
    np.testing.assert_allclose(r.origins[0, :2].numpy(), [(-0.9 - 0.1) / 2.0, (5 / 6 + 0.2) / 2.0], atol=1e-15)
    assert cam.project(r.origins)[0].tolist() == pytest.approx([0.0, 0.0], abs=1e-12)


def test_camera_and_ray_validation():
    with pytest.raises(ValueError):
        OrthoCamera(torch.tensor(0.0), torch.zeros(2), 4, 4)
    cam = OrthoCamera(torch.tensor(1.0), torch.zeros(2), 4, 4)
    with pytest.raises(ValueError):
        pixel_ray(cam, 4, 0)
    with pytest.raises(ValueError):
        pixel_ray(cam, 0, 0, bounds=(0.5, 0.5))


# --- BVH ------------------------------------------------------------------------

def test_single_triangle_centroid():
    v = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]])
    bvh = Bvh(v, [[0, 1, 2]])
    f, t, u, w = bvh.intersect([[1 / 3, 1 / 3, 1.0]], [[0, 0, -1.0]], 0.0, 5.0)
    assert f[0] == 0 and t[0] == pytest.approx(1.0)
    assert (u[0], w[0]) == pytest.approx((1 / 3, 1 / 3))
    f, t, _, _ = bvh.intersect([[5.0, 5.0, 1.0]], [[0, 0, -1.0]], 0.0, 5.0)
    assert f[0] == -1 and math.isinf(t[0])


def test_bvh_matches_brute_force(model, rng):
    fr = make_frame(model, theta=random_pose(model, rng, 0.4))
    v = pose_mesh(model, zero_avatar(model), fr).vertices.numpy()
    bvh = Bvh(v, model.faces)
    bvh.check()
    n = 1000
    o = rng.uniform(-0.7, 0.7, (n, 3))
    target = v[rng.integers(0, len(v), n)] + rng.normal(0, 0.02, (n, 3))
    d = np.where(rng.random((n, 1)) < 0.8, target - o, rng.normal(size=(n, 3)))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d[:300] = [0.0, 0.0, -1.0]   # camera-style rays
    o[:300, 2] = 0.0
    a = bvh.intersect(o, d, -0.6, 0.6)
    b = intersect_brute(v, model.faces, o, d, -0.6, 0.6)
    assert (a[0] >= 0).sum() > 300
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    # refit to a new pose keeps the equivalence
    v2 = pose_mesh(model, zero_avatar(model), make_frame(model, theta=random_pose(model, rng, 0.4))).vertices.numpy()
    bvh.refit(v2)
    bvh.check()
    np.testing.assert_array_equal(bvh.intersect(o, d, -0.6, 0.6)[0], intersect_brute(v2, model.faces, o, d, -0.6, 0.6)[0])


# --- compositing ------------------------------------------------------------------

def test_empty_field_shows_albedo(model):
    scene = scene_for(model, ConstantField(0.0), albedo=(0.2, 0.4, 0.6))
    res = render_rays(scene, pixel_rays(make_frame(model).camera, [16], [16]))
    assert bool(res.hit[0])
    np.testing.assert_allclose(res.rgb[0].numpy(), [0.2, 0.4, 0.6], atol=1e-15)
    assert float(res.s_v[0]) == 0.0


def test_opaque_first_bin_saturates(model):
    # a thin dense slab in the first bins of a ray that misses the mesh
    fld = ConstantField(density=2000.0, color=(0.9, 0.1, 0.3), z_lo=0.55, z_hi=0.6)
    scene = scene_for(model, fld)
    rays = random_rays(np.random.default_rng(0), 1)
    rays.origins[0, :2] = torch.tensor([0.6, -0.5])
    res = render_rays(scene, rays, RenderSettings(n_bins=64))
    assert not bool(res.hit[0])
    np.testing.assert_allclose(res.rgb[0].numpy(), [0.9, 0.1, 0.3], atol=1e-8)
    assert float(res.s_v[0]) == pytest.approx(1.0, abs=1e-8)


def quadrature(fld, model, rays, n):
    """Independent midpoint compositing with the identity canonical map."""
    o, d = rays.origins.numpy(), rays.directions.numpy()
    v = pose_mesh(model, zero_avatar(model), canonical_frame(model)).vertices.numpy()
    face, t_hit, u, w = intersect_brute(v, model.faces, o, d, rays.near, rays.far)
    out = np.zeros((len(o), 3))
    for r in range(len(o)):
        t_end = t_hit[r] if face[r] >= 0 else rays.far
        dt = (t_end - rays.near) / n
        ts = rays.near + (np.arange(n) + 0.5) * dt
        rgb, sig = fld.query(torch.as_tensor(o[r] + ts[:, None] * d[r]))
        rgb, sig = rgb.numpy(), sig.numpy()
        tau = sig[:-1] * dt
        T = np.exp(-np.concatenate([[0.0], np.cumsum(tau)[:-1]]))
        wts = T * (1 - np.exp(-tau))
        if face[r] >= 0:
            b = np.array([1 - u[r] - w[r], u[r], w[r]])
            tail = b @ np.full((3, 3), 0.5)
        else:
            tail = rgb[-1]
        out[r] = (wts[:, None] * rgb[:-1]).sum(0) + (1 - wts.sum()) * tail
    return out


def test_matches_fine_quadrature(model):
    rng = np.random.default_rng(5)
    fld = smooth_random_field(11, resolution=6, box=BIG_BOX, density_scale=2.0)
    scene = scene_for(model, fld)
    rays = random_rays(rng, 500)
    res = render_rays(scene, rays, RenderSettings(n_bins=64))
    fine = quadrature(fld, model, rays, 4096)
    assert int(res.hit.sum()) > 50 and int((~res.hit).sum()) > 50
    assert np.abs(res.rgb.numpy() - fine).max() <= 2e-3


def test_weights_conserve_energy(model, rng):
    for seed in range(3):
        fld = smooth_random_field(seed, resolution=8, density_scale=5.0 * (seed + 1))
        fr = make_frame(model, theta=random_pose(model, rng, 0.3))
        scene = scene_for(model, fld, frame=fr)
        res = render_rays(scene, random_rays(rng, 400), RenderSettings(n_bins=int(rng.integers(2, 80)), jitter=True))
        assert float((res.weights.sum(1) - 1).abs().max()) <= 1e-6
        assert bool(((res.rgb >= 0) & (res.rgb <= 1)).all())
        assert bool(((res.s_v >= 0) & (res.s_v <= 1)).all())


def test_occlusion_by_mesh(model):
    cam = make_frame(model).camera
    rays = pixel_rays(cam, torch.arange(32), torch.full((32,), 16))
    mesh_only = render_rays(scene_for(model, ConstantField(0.0), albedo=(0.7, 0.2, 0.1)), rays)
    behind = ConstantField(density=500.0, z_lo=-0.6, z_hi=-0.2)   # toy torso spans |z| < 0.16
    with_slab = render_rays(scene_for(model, behind, albedo=(0.7, 0.2, 0.1)), rays)
    hit = mesh_only.hit
    assert int(hit.sum()) > 5 and int((~hit).sum()) > 5
    assert torch.equal(with_slab.rgb[hit], mesh_only.rgb[hit])
    assert bool((with_slab.s_v[~hit] > 0.99).all())


def test_albedo_gradient_is_barycentric(model):
    scene = scene_for(model, ConstantField(0.0), albedo=(0.4, 0.5, 0.6))
    scene.avatar.albedo.requires_grad_(True)
    res = render_rays(scene, pixel_rays(make_frame(model).camera, [15], [14]))
    g = render_backward(res, {"rgb": torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)}, scene)["albedo"][0]
    corners = model.faces[int(res.face[0])]
    np.testing.assert_allclose(g[corners, 0].numpy(), res.bary[0].detach().numpy(), atol=1e-14)
    assert float(g[:, 1:].abs().max()) == 0.0
    zero = render_backward(res, {"rgb": torch.zeros(1, 3, dtype=torch.float64)}, scene)
    assert all(float(t.abs().max()) == 0 for ts in zero.values() for t in ts)


def test_nan_names_source(model):
    fld = smooth_random_field(0)
    fld.grids[0][..., 3] = float("nan")
    av = zero_avatar(model)
    av.field = fld
    av.offsets[3, 0] = float("nan")
    with pytest.raises(Exception) as info:
        prepare_scene(model, av, canonical_frame(model))
    av.offsets[3, 0] = 0.0
    scene = prepare_scene(model, av, canonical_frame(model))
    with pytest.raises(RenderError, match="field"):
        render_rays(scene, random_rays(np.random.default_rng(0), 4))


# --- rasterization ----------------------------------------------------------------

def test_rasterize_empty_and_full(model):
    posed = pose_mesh(model, zero_avatar(model), canonical_frame(model))
    albedo = torch.full((model.n_verts, 3), 0.5, dtype=torch.float64)
    away = OrthoCamera(torch.tensor(1.8, dtype=torch.float64), torch.tensor([5.0, 5.0], dtype=torch.float64), 16, 16)
    _, sil = rasterize(posed, albedo, away)
    assert float(sil.sum()) == 0
    close = OrthoCamera(torch.tensor(40.0, dtype=torch.float64), torch.zeros(2, dtype=torch.float64), 16, 16)
    color, sil = rasterize(posed, albedo, close)
    assert bool((sil == 1).all())
    np.testing.assert_allclose(color.numpy(), 0.5, atol=1e-12)


def test_capsule_projected_area():
    m = capsule_model(radius=0.3, half_length=0.3)
    posed = pose_mesh(m, zero_avatar(m), make_frame(m))
    W = 200
    s = 1.0
    cam = OrthoCamera(torch.tensor(s, dtype=torch.float64), torch.zeros(2, dtype=torch.float64), W, W)
    _, sil = rasterize(posed, torch.full((m.n_verts, 3), 0.5, dtype=torch.float64), cam, bounds=(-1.0, 1.0))
    r, h = 0.3, 0.3
    analytic = 2 * r * 2 * h + math.pi * r * r
    pixel_area = (2.0 / (s * W)) ** 2
    assert abs(float(sil.sum()) * pixel_area / analytic - 1) <= 0.02


def test_render_frame_silhouette_matches_rasterize(model, rng):
    fr = make_frame(model, theta=random_pose(model, rng, 0.3), size=24)
    av = zero_avatar(model)
    av.field = smooth_random_field(1)
    settings = RenderSettings(n_bins=8)
    img = render_frame(prepare_scene(model, av, fr, settings), settings)
    color, sil = rasterize(pose_mesh(model, av, fr), av.albedo, fr.camera)
    assert torch.equal(img.silhouette, sil)
    assert torch.allclose(img.mesh_rgb, color, atol=1e-12)
    assert set(torch.unique(img.silhouette).tolist()) <= {0.0, 1.0}
