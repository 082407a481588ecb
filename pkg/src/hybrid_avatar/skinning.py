"""Observation-space to canonical-space mapping for radiance-field queries."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn

from .geometry import (AvatarParams, FrameParams, NumericalDegeneracyError, ParametricModel, PosedMesh,
                       apply_transforms, canonical_transforms, pose_mesh, vertex_transforms)

DEFAULT_K = 6
DEFAULT_SIGMA = 0.1


class DeformationField(nn.Module):
    """Non-rigid residual ``(x_c, anchor) -> dx_c`` with a zero-initialized output layer."""

    def __init__(self, hidden: int = 64, scale: float = 0.01, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.layers = nn.ModuleList([nn.Linear(6, hidden), nn.Linear(hidden, hidden), nn.Linear(hidden, 3)])
        with torch.no_grad():
            for layer in self.layers[:-1]:
                bound = 1.0 / np.sqrt(layer.in_features)
                layer.weight.copy_(torch.empty_like(layer.weight).uniform_(-bound, bound, generator=gen))
                layer.bias.copy_(torch.empty_like(layer.bias).uniform_(-bound, bound, generator=gen))
            self.layers[-1].weight.zero_()
            self.layers[-1].bias.zero_()
        self.scale = scale
        self.active = True

    def forward(self, x_c: torch.Tensor, anchor: torch.Tensor) -> torch.Tensor:
        h = torch.cat([x_c, anchor], dim=-1)
        for layer in self.layers[:-1]:
            h = torch.tanh(layer(h))
        return self.scale * self.layers[-1](h)


@dataclass
class CanonicalQuery:
    x_p: torch.Tensor
    x_c: torch.Tensor
    x_c_tilde: torch.Tensor
    neighbors: torch.Tensor   # (N, k) long
    alpha: torch.Tensor       # (N, k)


@dataclass
class SkinningContext:
    """Per-frame data needed to canonicalize observation-space points."""

    vertices: torch.Tensor       # posed vertices V (n_v, 3)
    composite: torch.Tensor      # M_i(0, theta_c, 0, 0) @ M_i^{-1}(beta, theta, psi, O)
    anchors: torch.Tensor        # pose-only mesh M(0, theta, 0, 0) vertices
    weights: torch.Tensor        # skin weights per vertex (n_v, n_k)
    k: int = DEFAULT_K
    sigma: float = DEFAULT_SIGMA


def skinning_context(model: ParametricModel, avatar: AvatarParams, frame: FrameParams,
                     posed: Optional[PosedMesh] = None, k: int = DEFAULT_K,
                     sigma: float = DEFAULT_SIGMA) -> SkinningContext:
    if posed is None:
        posed = pose_mesh(model, avatar, frame)
    dtype = posed.vertices.dtype
    composite = canonical_transforms(model, dtype) @ posed.inverse_transforms
    t = model.tensors(dtype)
    zeros_b = torch.zeros(model.n_shape, dtype=dtype)
    zeros_e = torch.zeros(model.n_expr, dtype=dtype)
    zeros_o = torch.zeros(model.n_verts, 3, dtype=dtype)
    M0 = vertex_transforms(model, zeros_b, frame.theta, zeros_e, zeros_o)
    anchors = apply_transforms(M0, t["template"])
    return SkinningContext(posed.vertices, composite, anchors, t["weights"].T.contiguous(), k, sigma)


def _sorted_smallest(d2: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k smallest entries per row, ordered by (value, index)."""
    return torch.sort(d2, dim=1, stable=True).indices[:, :k]


@torch.no_grad()
def nearest_neighbors_brute(x_p: torch.Tensor, vertices: torch.Tensor, k: int) -> torch.Tensor:
    """Exhaustive scan in float64; ties broken by lower index."""
    x = x_p.detach().reshape(-1, 3).double()
    v = vertices.detach().double()
    out = [_sorted_smallest(((x[s:s + 1024, None, :] - v[None]) ** 2).sum(-1), k)
           for s in range(0, x.shape[0], 1024)]
    return torch.cat(out) if out else torch.zeros(0, k, dtype=torch.long)


@torch.no_grad()
def nearest_neighbors(x_p: torch.Tensor, vertices: torch.Tensor, k: int = DEFAULT_K) -> torch.Tensor:
    """Indices (N, k) of the k nearest vertices, ties broken by lower index.

    A KD-tree proposes k + 1 candidates; rows whose k-th and (k+1)-th
    distances tie are resolved by an exhaustive scan.
    """
    x = x_p.detach().reshape(-1, 3).cpu().double().numpy()
    v = vertices.detach().cpu().double().numpy()
    n_v = v.shape[0]
    if not 1 <= k <= n_v:
        raise ValueError(f"k must be in [1, {n_v}], got {k}")
    if x.shape[0] == 0:
        return torch.zeros(0, k, dtype=torch.long)
    if not (np.isfinite(v).all() and np.isfinite(x).all()):
        raise NumericalDegeneracyError("non-finite points or vertices in neighbour search")
    if k == n_v:
        return nearest_neighbors_brute(x_p, vertices, k)
    tree = cKDTree(v)
    _, idx = tree.query(x, k=k + 1)
    idx = idx.reshape(-1, k + 1)
    d2 = ((x[:, None, :] - v[idx]) ** 2).sum(-1)
    # sort each row by (distance, index)
    keys = np.argsort(idx, axis=1, kind="stable")
    idx = np.take_along_axis(idx, keys, 1)
    d2 = np.take_along_axis(d2, keys, 1)
    keys = np.argsort(d2, axis=1, kind="stable")
    idx = np.take_along_axis(idx, keys, 1)
    d2 = np.take_along_axis(d2, keys, 1)
    out = torch.as_tensor(idx[:, :k].copy(), dtype=torch.long)
    tied = np.nonzero(d2[:, k - 1] == d2[:, k])[0]
    if len(tied):
        rows = torch.as_tensor(tied)
        out[rows] = nearest_neighbors_brute(x_p.reshape(-1, 3)[rows], vertices, k)
    return out


def _safe_norm(v: torch.Tensor) -> torch.Tensor:
    sq = (v * v).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def blend_alpha(x_p: torch.Tensor, neighbors: torch.Tensor, vertices: torch.Tensor,
                weights: torch.Tensor, sigma: float = DEFAULT_SIGMA) -> torch.Tensor:
    """Kernel weights over the neighbor set, normalized to sum to one.

    ``weights`` holds per-vertex skin weights (n_v, n_k); ``neighbors[:, 0]``
    must be the nearest vertex.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    dist = _safe_norm(x_p[:, None, :] - vertices[neighbors])
    w_nb = weights[neighbors]
    w_gap = torch.linalg.vector_norm(w_nb - w_nb[:, :1, :], dim=-1)
    raw = torch.exp(-dist * w_gap / (2.0 * sigma ** 2))
    raw = torch.where(torch.isnan(raw), torch.zeros_like(raw), raw)   # 0/0 once sigma**2 underflows
    z = raw.sum(1, keepdim=True)
    dead = z <= 0
    if bool(dead.any()):
        raw = torch.where(dead, torch.ones_like(raw), raw)
        z = raw.sum(1, keepdim=True)
    return raw / z


def inverse_skin(x_p: torch.Tensor, neighbors: torch.Tensor, alpha: torch.Tensor,
                 composite: torch.Tensor) -> torch.Tensor:
    """x_c = sum_i alpha_i M_i(0, theta_c, 0, 0) M_i^{-1} x_p, with ``composite`` precomputed."""
    blended = (alpha[:, :, None, None] * composite[:, :3, :][neighbors]).sum(1)
    return (blended[:, :, :3] @ x_p[:, :, None])[..., 0] + blended[:, :, 3]


def canonicalize(x_p: torch.Tensor, ctx: SkinningContext,
                 residual_field: Optional[DeformationField] = None,
                 neighbors: Optional[torch.Tensor] = None) -> CanonicalQuery:
    """Map observation-space points (N, 3) into the canonical space.

    ``neighbors`` may be supplied to reuse a previous neighbor selection.
    """
    if neighbors is None:
        neighbors = nearest_neighbors(x_p, ctx.vertices, ctx.k)
    alpha = blend_alpha(x_p, neighbors, ctx.vertices, ctx.weights, ctx.sigma)
    x_c = inverse_skin(x_p, neighbors, alpha, ctx.composite)
    if residual_field is not None and residual_field.active:
        anchor = ctx.anchors[neighbors[:, 0]]
        x_tilde = x_c + residual_field(x_c, anchor)
    else:
        x_tilde = x_c
    return CanonicalQuery(x_p, x_c, x_tilde, neighbors, alpha)


def forward_skin(x_c: torch.Tensor, ctx: SkinningContext, canonical_verts: torch.Tensor,
                 neighbors: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Canonical points back to observation space by forward blend skinning.

    Neighbors and kernel weights are taken in the canonical mesh, and the
    per-vertex maps ``composite_i^{-1}`` are blended. With one neighbor this
    is the exact inverse of :func:`inverse_skin`.
    """
    if neighbors is None:
        neighbors = nearest_neighbors(x_c, canonical_verts, ctx.k)
    alpha = blend_alpha(x_c, neighbors, canonical_verts, ctx.weights, ctx.sigma)
    inv = torch.linalg.inv(ctx.composite)
    blended = (alpha[:, :, None, None] * inv[:, :3, :][neighbors]).sum(1)
    return (blended[:, :, :3] @ x_c[:, :, None])[..., 0] + blended[:, :, 3]
