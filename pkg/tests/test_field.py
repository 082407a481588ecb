import math

import numpy as np
import pytest
import torch

from hybrid_avatar.field import CanonicalField, ShellField, query_gradients, smooth_random_field


def scalar_trilinear(grid, box_min, box_max, p):
    """Plain-Python 8-corner interpolation of one level at one point."""
    r = grid.shape[0]
    u = [(p[a] - box_min[a]) / (box_max[a] - box_min[a]) * (r - 1) for a in range(3)]
    i0 = [min(max(int(math.floor(u[a])), 0), r - 2) for a in range(3)]
    f = [u[a] - i0[a] for a in range(3)]
    out = np.zeros(grid.shape[-1])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1]) * (f[2] if dz else 1 - f[2]))
                out += w * grid[i0[0] + dx, i0[1] + dy, i0[2] + dz]
    return out


def test_zero_raw_activation_identity():
    fld = CanonicalField((4, 8), dtype=torch.float64,
                         grids=[torch.zeros(4, 4, 4, 4, dtype=torch.float64), torch.zeros(8, 8, 8, 4, dtype=torch.float64)])
    rgb, dens = fld.query(torch.tensor([[0.1, -0.2, 0.05]], dtype=torch.float64))
    np.testing.assert_allclose(rgb.numpy(), 0.5)
    np.testing.assert_allclose(dens.numpy(), math.log(2.0), rtol=1e-15)


def test_default_density_init():
    fld = CanonicalField(dtype=torch.float64, levels=(8, 16))
    _, dens = fld.query(torch.zeros(1, 3, dtype=torch.float64))
    assert float(dens) == pytest.approx(math.log1p(math.exp(-3.0)))


def test_exact_grid_node():
    fld = smooth_random_field(3, resolution=6)
    g = fld.grids[0]
    node = (2, 4, 1)
    x = fld.box_min + torch.tensor(node, dtype=torch.float64) / 5.0 * (fld.box_max - fld.box_min)
    rgb, dens = fld.query(x[None])
    raw = g[node]
    np.testing.assert_allclose(rgb[0].numpy(), torch.sigmoid(raw[:3]).numpy(), atol=1e-14)
    np.testing.assert_allclose(float(dens), float(torch.nn.functional.softplus(raw[3])), atol=1e-14)


def test_matches_scalar_oracle(rng):
    levels = (4, 7, 16)
    grids = [torch.as_tensor(rng.normal(size=(r, r, r, 4))) for r in levels]
    fld = CanonicalField(levels, dtype=torch.float64, grids=grids)
    bmin, bmax = fld.box_min.numpy(), fld.box_max.numpy()
    pts = rng.uniform(bmin, bmax, (200, 3))
    pts[:5] = bmin          # faces and corners of the box
    pts[5:10] = bmax
    raw = fld.raw(torch.as_tensor(pts)).numpy()
    ref = fld.raw_reference(torch.as_tensor(pts)).numpy()
    for i, p in enumerate(pts):
        expect = sum(scalar_trilinear(g.numpy(), bmin, bmax, p) for g in grids)
        np.testing.assert_allclose(raw[i], expect, atol=1e-12)
        np.testing.assert_allclose(ref[i], expect, atol=1e-12)


def test_outside_box_is_empty(rng):
    fld = smooth_random_field(0)
    pts = torch.as_tensor(rng.uniform(-3, 3, (2000, 3)))
    rgb, dens = fld.query(pts)
    out = ~fld.inside(pts)
    assert int(out.sum()) > 500
    assert bool((dens[out] == 0).all()) and bool((rgb[out] == 0).all())
    assert bool((dens >= 0).all())
    assert bool(((rgb >= 0) & (rgb <= 1)).all())


def test_zero_upstream_gives_zero_gradient(rng):
    fld = smooth_random_field(1)
    x = torch.as_tensor(rng.uniform(-0.5, 0.5, (10, 3)))
    gg, gx = query_gradients(fld, x, torch.zeros(10, 3, dtype=torch.float64), torch.zeros(10, dtype=torch.float64))
    assert all(float(g.abs().max()) == 0 for g in gg) and float(gx.abs().max()) == 0


def test_single_corner_routing():
    fld = smooth_random_field(2, resolution=5)
    node = (1, 3, 2)
    x = fld.box_min + torch.tensor(node, dtype=torch.float64) / 4.0 * (fld.box_max - fld.box_min)
    gg, _ = query_gradients(fld, x[None], torch.zeros(1, 3, dtype=torch.float64), torch.ones(1, dtype=torch.float64))
    g = gg[0]
    nz = torch.nonzero(g)
    assert nz.shape[0] == 1 and tuple(nz[0].tolist()) == node + (3,)


def _rel(a, n):
    return np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-300)


def test_gradients_match_finite_differences(rng):
    """100 random (point, upstream) pairs, grid values and point coordinates."""
    levels = (5, 9)
    fld = CanonicalField(levels, dtype=torch.float64,
                         grids=[torch.as_tensor(rng.normal(size=(r, r, r, 4))) for r in levels])
    h = 1e-4
    worst = 0.0
    for _ in range(100):
        x = torch.as_tensor(rng.uniform(fld.box_min.numpy() * 0.95, fld.box_max.numpy() * 0.95, (1, 3)))
        up_c = torch.as_tensor(rng.normal(size=(1, 3)))
        up_d = torch.as_tensor(rng.normal(size=1))
        cells = fld.cells(x)

        def f(xx):
            rgb, d = fld.query(xx, cells)
            return float((rgb * up_c).sum() + (d * up_d).sum())

        gg, gx = query_gradients(fld, x, up_c, up_d)
        # point gradient
        num = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in torch.eye(3, dtype=torch.float64)])
        worst = max(worst, _rel(gx[0].numpy(), num))
        # grid gradient on the corners that carry weight
        lvl = int(rng.integers(len(levels)))
        flat = fld.grids[lvl].view(-1)
        nz = torch.nonzero(gg[lvl].reshape(-1)).reshape(-1)
        picks = nz[torch.as_tensor(rng.choice(len(nz), 3, replace=False))]
        a, n = [], []
        for i in picks.tolist():
            o = float(flat[i])
            flat[i] = o + h
            fp = f(x)
            flat[i] = o - h
            fm = f(x)
            flat[i] = o
            a.append(float(gg[lvl].reshape(-1)[i]))
            n.append((fp - fm) / (2 * h))
        worst = max(worst, _rel(np.array(a), np.array(n)))
    assert worst <= 1e-3


def test_save_load_round_trip(tmp_path, rng):
    fld = CanonicalField((4, 8), dtype=torch.float32)
    fld.grids[1] += torch.as_tensor(rng.normal(size=fld.grids[1].shape), dtype=torch.float32)
    fld.save(tmp_path / "f.havc")
    back = CanonicalField.load(tmp_path / "f.havc")
    assert back.levels == fld.levels
    assert all(torch.equal(a, b) for a, b in zip(back.grids, fld.grids))


def test_invalid_construction():
    with pytest.raises(ValueError):
        CanonicalField((1,))
    with pytest.raises(ValueError):
        CanonicalField((4,), box=((0, 0, 0), (0, 1, 1)))


def test_shell_field_support():
    shell = ShellField()
    pts = torch.tensor([[0.0, 0.0, 0.19], [0.0, 0.0, 0.0], [0.0, 0.5, 0.19]], dtype=torch.float64)
    rgb, dens = shell.query(pts)
    assert float(dens[0]) > 50 and float(dens[1]) < 1e-3 and float(dens[2]) < 1e-3
    np.testing.assert_allclose(rgb[0].numpy(), shell.color)
