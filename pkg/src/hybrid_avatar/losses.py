"""Training objective: reconstruction, exterior mask, interior terms and regularization."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .geometry import REGIONS, ParametricModel

log = logging.getLogger(__name__)

EDGE_EPS = 1e-8
TERMS = ("pixel", "semantic", "ext", "silhouette", "int_mask", "skin", "inside", "skin_inside",
         "edge", "offset")


@dataclass
class LossWeights:
    pixel: float = 1.0
    semantic: float = 0.0005
    ext: float = 0.5
    silhouette: float = 0.001
    int_mask: float = 30.0
    skin: float = 1.0
    inside: float = 40.0
    skin_inside: float = 0.01
    edge: float = 500.0
    offset: float = 400.0
    region_ratio: tuple = (2.0, 3.0, 12.0)   # body : face : hands
    huber_delta: float = 1.0
    semantic_surrogate: bool = False

    def __post_init__(self):
        for name in TERMS:
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name!r} must be non-negative")
        if len(self.region_ratio) != len(REGIONS) or min(self.region_ratio) < 0:
            raise ValueError("region_ratio needs three non-negative entries")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")

    @classmethod
    def preset(cls, name: str) -> "LossWeights":
        if name == "body":
            return cls()
        if name == "head":
            return cls(semantic=0.015, skin_inside=0.001)
        raise ValueError(f"unknown preset {name!r}")

    def with_updates(self, **kw) -> "LossWeights":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["region_ratio"] = list(self.region_ratio)
        return d


@dataclass
class MaskSet:
    """Per-pixel masks: full avatar, visible interior and exterior."""

    S: torch.Tensor
    S_b: torch.Tensor
    S_e: torch.Tensor

    def __post_init__(self):
        if bool(((self.S_b > 0.5) & (self.S_e > 0.5)).any()):
            raise ValueError("interior and exterior masks overlap")

    @property
    def coverage(self) -> torch.Tensor:
        return torch.maximum(self.S_b, self.S_e)


def huber(x: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Element-wise Huber penalty, mean-reduced."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    a = x.abs()
    quad = 0.5 * x * x
    lin = delta * (a - 0.5 * delta)
    return torch.where(a <= delta, quad, lin).mean()


def local_contrast_distance(a: torch.Tensor, b: torch.Tensor, size: int = 5, eps: float = 1e-4) -> torch.Tensor:
    """Mean (1 - normalized correlation) over all size x size patches of (H, W, C) images."""
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    if a.shape[0] < size or a.shape[1] < size:
        return a.new_zeros(())
    pa = a.permute(2, 0, 1).unfold(1, size, 1).unfold(2, size, 1).reshape(a.shape[2], -1, size * size)
    pb = b.permute(2, 0, 1).unfold(1, size, 1).unfold(2, size, 1).reshape(b.shape[2], -1, size * size)
    pa = pa - pa.mean(-1, keepdim=True)
    pb = pb - pb.mean(-1, keepdim=True)
    num = (pa * pb).sum(-1)
    den = torch.sqrt((pa * pa).sum(-1) * (pb * pb).sum(-1) + eps)
    return (1.0 - num / den).mean()


def recon_loss(rgb: torch.Tensor, target: torch.Tensor, w: LossWeights,
               patches: tuple | None = None) -> dict:
    """Pixel Huber term plus the optional semantic surrogate on (rendered, target) patch pairs."""
    if rgb.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(rgb.shape)} vs {tuple(target.shape)}")
    out = {"pixel": w.pixel * huber(rgb - target, w.huber_delta)}
    sem = rgb.new_zeros(())
    if w.semantic_surrogate and w.semantic > 0 and patches:
        sem = w.semantic * torch.stack([local_contrast_distance(p, q) for p, q in patches]).mean()
    out["semantic"] = sem
    return out


def exterior_loss(s_v: torch.Tensor, S_e: torch.Tensor, w: LossWeights) -> torch.Tensor:
    return w.ext * (s_v - S_e).abs().mean()


def skin_color(model: ParametricModel, albedo: torch.Tensor, preset: str = "body") -> torch.Tensor:
    """Mean albedo of the skin reference region (hands for body, face for head), detached."""
    region = "hands" if preset == "body" else "face"
    sel = torch.as_tensor(model.region_mask(region))
    a = albedo.detach().clamp(0.0, 1.0)
    if not bool(sel.any()):
        log.warning("skin region %r is empty; using the mean albedo of the whole mesh", region)
        return a.mean(0)
    return a[sel].mean(0)


def interior_losses(silhouette: torch.Tensor, mesh_rgb: torch.Tensor, target: torch.Tensor,
                    masks: MaskSet, c_skin: torch.Tensor, w: LossWeights) -> dict:
    """Five mesh terms over a set of pixels.

    ``silhouette`` (P,), ``mesh_rgb``/``target`` (P, 3), masks (P,).
    """
    d = w.huber_delta
    S_b = masks.S_b[:, None]
    S_e = masks.S_e[:, None]
    return {
        "silhouette": w.silhouette * huber(silhouette - masks.S, d),
        "int_mask": w.int_mask * huber(masks.S_b * silhouette - masks.S_b, d),
        "skin": w.skin * huber(S_b * (mesh_rgb - target), d),
        "inside": w.inside * huber(torch.relu(silhouette - masks.coverage), d),
        "skin_inside": w.skin_inside * huber(S_e * (mesh_rgb - c_skin), d),
    }


def edge_lengths(vertices: torch.Tensor, edges: torch.Tensor) -> torch.Tensor:
    diff = vertices[edges[:, 0]] - vertices[edges[:, 1]]
    return torch.sqrt((diff * diff).sum(-1))


def region_weights(model: ParametricModel, ratio) -> torch.Tensor:
    r = np.asarray(ratio, dtype=np.float64)
    r = r / r.sum()
    return torch.as_tensor(r[np.asarray(model.region_labels)])


def regularization(with_offsets: torch.Tensor, without_offsets: torch.Tensor, offsets: torch.Tensor,
                   edges: torch.Tensor, vertex_weights: torch.Tensor, w: LossWeights) -> dict:
    """Relative edge-length change caused by the offsets, plus region-weighted offset magnitude."""
    l_with = edge_lengths(with_offsets, edges)
    l_without = edge_lengths(without_offsets, edges)
    rel = (l_with - l_without) / l_without.clamp_min(EDGE_EPS)
    vw = vertex_weights.to(offsets.dtype)
    sq = (offsets * offsets).sum(-1)
    return {"edge": w.edge * (rel * rel).mean(),
            "offset": w.offset * (vw * sq).sum() / vw.sum().clamp_min(EDGE_EPS)}


@dataclass
class LossBreakdown:
    terms: dict = field(default_factory=dict)

    @property
    def total(self) -> torch.Tensor:
        return sum(self.terms[t] for t in TERMS if t in self.terms)

    def as_floats(self) -> dict:
        out = {t: float(self.terms[t].detach()) for t in TERMS if t in self.terms}
        out["total"] = float(self.total.detach())
        return out


def total_loss(per_frame: list[dict]) -> LossBreakdown:
    """Average every term over the frames in the batch; the total is the sum of the averages."""
    if not per_frame:
        raise ValueError("no frames in batch")
    names = [t for t in TERMS if t in per_frame[0]]
    return LossBreakdown({t: torch.stack([f[t] for f in per_frame]).mean() for t in names})
