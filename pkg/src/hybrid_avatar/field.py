"""Canonical exterior field: dense multi-resolution grids with trilinear lookup."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .container import load_arrays, save_arrays

DEFAULT_LEVELS = (16, 32, 64, 128)
DEFAULT_BOX = ((-0.75, -0.75, -0.4), (0.75, 0.75, 0.4))
DENSITY_INIT = -3.0

_CORNERS = torch.tensor([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


class CanonicalField:
    """RGB and density over a box in canonical space.

    Each level is a (R, R, R, 4) grid of raw values with nodes on the box
    corners. Raw values are trilinearly interpolated per level and summed;
    color is ``sigmoid(raw[:3])`` and density ``softplus(raw[3])``. Points
    outside the box return zeros.
    """

    def __init__(self, levels: Sequence[int] = DEFAULT_LEVELS, box=DEFAULT_BOX,
                 dtype=torch.float32, grids=None):
        self.levels = tuple(int(r) for r in levels)
        if any(r < 2 for r in self.levels):
            raise ValueError("each level needs at least 2 nodes per axis")
        self.box_min = torch.as_tensor(box[0], dtype=dtype)
        self.box_max = torch.as_tensor(box[1], dtype=dtype)
        if not bool((self.box_max > self.box_min).all()):
            raise ValueError("empty bounding box")
        if grids is None:
            grids = []
            for r in self.levels:
                g = torch.zeros(r, r, r, 4, dtype=dtype)
                g[..., 3] = DENSITY_INIT / len(self.levels)
                grids.append(g)
        self.grids = [torch.as_tensor(g, dtype=dtype) for g in grids]
        for g, r in zip(self.grids, self.levels):
            if tuple(g.shape) != (r, r, r, 4):
                raise ValueError("grid shape does not match its level resolution")

    @property
    def dtype(self):
        return self.grids[0].dtype

    def parameters(self) -> list[torch.Tensor]:
        return self.grids

    def to(self, dtype) -> "CanonicalField":
        return CanonicalField(self.levels, (self.box_min, self.box_max), dtype,
                              [g.detach().to(dtype).clone() for g in self.grids])

    def inside(self, x: torch.Tensor) -> torch.Tensor:
        return ((x >= self.box_min) & (x <= self.box_max)).all(-1)

    def raw(self, x: torch.Tensor) -> torch.Tensor:
        """Summed interpolated raw channels (N, 4); points are clamped to the box."""
        x = x.reshape(-1, 3)
        unit = (x - self.box_min) / (self.box_max - self.box_min)
        # grid_sample wants (x, y, z) in [-1, 1] indexing a (C, D=z, H=y, W=x) volume
        coords = (unit * 2.0 - 1.0).reshape(1, -1, 1, 1, 3)
        total = torch.zeros(x.shape[0], 4, dtype=x.dtype)
        for grid in self.grids:
            vol = grid.permute(3, 2, 1, 0).unsqueeze(0)
            out = F.grid_sample(vol, coords, mode="bilinear", padding_mode="border", align_corners=True)
            total = total + out.reshape(4, -1).T
        return total

    @torch.no_grad()
    def cells(self, x: torch.Tensor) -> dict:
        """Discrete lookup state of each point: base cell per level and the in-box flag."""
        x = x.reshape(-1, 3)
        unit = (x - self.box_min) / (self.box_max - self.box_min)
        return {"base": [torch.floor(unit.clamp(0.0, 1.0) * (r - 1)).long().clamp(0, r - 2)
                         for r in self.levels],
                "inside": self.inside(x)}

    def raw_reference(self, x: torch.Tensor, cells: dict | None = None) -> torch.Tensor:
        """Explicit 8-corner trilinear sum; slower twin of :meth:`raw`.

        With ``cells`` the given base cells are used even if points have moved
        out of them, which keeps finite differences on one polynomial piece.
        """
        x = x.reshape(-1, 3)
        unit = (x - self.box_min) / (self.box_max - self.box_min)
        total = torch.zeros(x.shape[0], 4, dtype=x.dtype)
        for level, (grid, r) in enumerate(zip(self.grids, self.levels)):
            if cells is None:
                pos = unit.clamp(0.0, 1.0) * (r - 1)
                base = torch.floor(pos.detach()).long().clamp(0, r - 2)
            else:
                pos = unit * (r - 1)
                base = cells["base"][level]
            frac = pos - base
            idx = base[:, None, :] + _CORNERS[None]                      # (N, 8, 3)
            flat = (idx[..., 0] * r + idx[..., 1]) * r + idx[..., 2]
            w = torch.where(_CORNERS[None].bool(), frac[:, None, :], 1.0 - frac[:, None, :]).prod(-1)
            vals = grid.reshape(-1, 4)[flat]                             # (N, 8, 4)
            total = total + (w[..., None] * vals).sum(1)
        return total

    def query(self, x: torch.Tensor, cells: dict | None = None):
        """Return ``(rgb (N, 3), density (N,))`` at canonical points ``x``.

        ``cells`` (from :meth:`cells`) replays an earlier lookup state.
        """
        x = x.reshape(-1, 3)
        if cells is None:
            raw = self.raw(x)
            inside = self.inside(x)
        else:
            raw = self.raw_reference(x, cells)
            inside = cells["inside"]
        rgb = torch.sigmoid(raw[:, :3]) * inside[:, None]
        density = F.softplus(raw[:, 3]) * inside
        return rgb, density

    __call__ = query

    def save(self, path, meta: dict | None = None) -> None:
        arrays = {f"level_{i}": g.detach().cpu().numpy() for i, g in enumerate(self.grids)}
        arrays["box"] = torch.stack([self.box_min, self.box_max]).cpu().numpy()
        save_arrays(path, arrays, meta={"kind": "canonical_field", "levels": list(self.levels),
                                        **(meta or {})})

    @classmethod
    def from_arrays(cls, arrays: dict, levels, prefix: str = "", dtype=torch.float32):
        grids = [torch.as_tensor(arrays[f"{prefix}level_{i}"]) for i in range(len(levels))]
        box = arrays[f"{prefix}box"]
        return cls(levels, (box[0], box[1]), dtype, [g.to(dtype) for g in grids])

    @classmethod
    def load(cls, path, dtype=torch.float32) -> "CanonicalField":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "canonical_field":
            raise ValueError(f"{path}: not a field container")
        return cls.from_arrays(arrays, meta["levels"], dtype=dtype)


def query(field, x: torch.Tensor):
    return field.query(x)


def query_gradients(field: CanonicalField, x: torch.Tensor, upstream_rgb: torch.Tensor,
                    upstream_density: torch.Tensor):
    """Vector-Jacobian product of :meth:`CanonicalField.query`.

    Returns ``(grid_grads, point_grad)`` for the given upstream gradients of
    rgb (N, 3) and density (N,).
    """
    grids = [g.detach().requires_grad_(True) for g in field.grids]
    probe = CanonicalField(field.levels, (field.box_min, field.box_max), field.dtype, grids)
    probe.grids = grids
    x = x.detach().reshape(-1, 3).requires_grad_(True)
    rgb, density = probe.query(x)
    out = (rgb * upstream_rgb).sum() + (density * upstream_density).sum()
    if not out.requires_grad:
        return [torch.zeros_like(g) for g in grids], torch.zeros_like(x)
    grads = torch.autograd.grad(out, grids + [x], allow_unused=True)
    grid_grads = [torch.zeros_like(g) if gg is None else gg for g, gg in zip(grids, grads[:-1])]
    point_grad = torch.zeros_like(x) if grads[-1] is None else grads[-1]
    return grid_grads, point_grad


class ShellField:
    """Analytic exterior: a banded shell around the vertical torso axis.

    Density is ``peak`` inside ``inner < radius < outer`` and
    ``y_min < y < y_max`` with smooth falloff of width ``soft``; color is
    constant where the shell has any occupancy and black elsewhere. Used to
    synthesize ground truth with known occupancy.
    """

    def __init__(self, inner=0.165, outer=0.215, y_min=-0.25, y_max=0.22, peak=60.0,
                 color=(0.8, 0.25, 0.2), soft=0.01, front_only=False):
        self.inner, self.outer = inner, outer
        self.y_min, self.y_max = y_min, y_max
        self.peak = peak
        self.color = tuple(color)
        self.soft = soft
        self.front_only = front_only

    def _ramp(self, v):
        return torch.sigmoid(v / self.soft)

    def query(self, x: torch.Tensor):
        x = x.reshape(-1, 3)
        radius = torch.sqrt(x[:, 0] ** 2 + x[:, 2] ** 2 + 1e-12)
        occ = (self._ramp(radius - self.inner) * self._ramp(self.outer - radius)
               * self._ramp(x[:, 1] - self.y_min) * self._ramp(self.y_max - x[:, 1]))
        if self.front_only:
            occ = occ * self._ramp(x[:, 2])
        density = self.peak * occ
        rgb = torch.as_tensor(self.color, dtype=x.dtype).expand(x.shape[0], 3) * (occ > 1e-3)[:, None]
        return rgb, density

    __call__ = query

    def to_dict(self) -> dict:
        return {"inner": self.inner, "outer": self.outer, "y_min": self.y_min, "y_max": self.y_max,
                "peak": self.peak, "color": list(self.color), "soft": self.soft,
                "front_only": self.front_only}


def smooth_random_field(seed: int, resolution: int = 8, box=DEFAULT_BOX, density_scale: float = 3.0,
                        dtype=torch.float64) -> CanonicalField:
    """Single-level field with low-frequency random raw values (test fixture)."""
    rng = np.random.default_rng(seed)
    g = rng.normal(0.0, 1.0, size=(resolution,) * 3 + (4,))
    g[..., 3] = g[..., 3] * 0.5 + density_scale + np.log(-np.expm1(-density_scale))
    return CanonicalField((resolution,), box, dtype, [torch.as_tensor(g, dtype=dtype)])
