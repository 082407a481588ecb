"""Scaled orthographic camera and ray generation."""

from __future__ import annotations

from dataclasses import dataclass

import torch

# Ray depth bounds (t_near, t_far) along the viewing direction.
BODY_BOUNDS = (-0.6, 0.6)
HEAD_BOUNDS = (-1.5, 1.5)


@dataclass
class OrthoCamera:
    """Parallel projection ``ndc = scale * xy + translation``.

    ``scale`` is a 0-d tensor and ``translation`` a (2,) tensor so both can be
    optimized per frame.
    """

    scale: torch.Tensor
    translation: torch.Tensor
    width: int
    height: int

    def __post_init__(self):
        self.scale = torch.as_tensor(self.scale)
        if not self.scale.is_floating_point():
            self.scale = self.scale.to(torch.get_default_dtype())
        if self.scale.shape != ():
            self.scale = self.scale.reshape(())
        self.translation = torch.as_tensor(self.translation, dtype=self.scale.dtype)
        if self.translation.shape != (2,):
            self.translation = self.translation.reshape(2)
        if not float(self.scale.detach()) > 0:
            raise ValueError("camera scale must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")

    def to(self, dtype):
        return OrthoCamera(self.scale.detach().to(dtype), self.translation.detach().to(dtype),
                           self.width, self.height)

    def pixel_ndc(self, px, py):
        """Normalized device coordinates of pixel centers (y up)."""
        px = torch.as_tensor(px, dtype=self.scale.dtype)
        py = torch.as_tensor(py, dtype=self.scale.dtype)
        x = (px + 0.5) / self.width * 2.0 - 1.0
        y = 1.0 - (py + 0.5) / self.height * 2.0
        return x, y

    def project(self, points: torch.Tensor) -> torch.Tensor:
        """World points (..., 3) to continuous pixel coordinates (..., 2)."""
        ndc = points[..., :2] * self.scale + self.translation
        px = (ndc[..., 0] + 1.0) * 0.5 * self.width - 0.5
        py = (1.0 - ndc[..., 1]) * 0.5 * self.height - 0.5
        return torch.stack([px, py], dim=-1)


@dataclass
class Rays:
    """A batch of rays ``r(t) = origin + t * direction`` with t in (near, far)."""

    origins: torch.Tensor      # (R, 3)
    directions: torch.Tensor   # (R, 3), unit
    near: float
    far: float
    pixels: torch.Tensor       # (R, 2) integer (px, py)

    def __post_init__(self):
        if not self.near < self.far:
            raise ValueError("ray bounds must satisfy near < far")

    def __len__(self):
        return self.origins.shape[0]


def pixel_rays(camera: OrthoCamera, px, py, bounds=BODY_BOUNDS, z_start: float = 0.0) -> Rays:
    """Rays through pixel centers; viewer sits on +z looking down -z."""
    px = torch.as_tensor(px).reshape(-1)
    py = torch.as_tensor(py).reshape(-1)
    if px.numel() and (px.min() < 0 or px.max() >= camera.width or py.min() < 0
                       or py.max() >= camera.height):
        raise ValueError("pixel outside image bounds")
    nx, ny = camera.pixel_ndc(px, py)
    ox = (nx - camera.translation[0]) / camera.scale
    oy = (ny - camera.translation[1]) / camera.scale
    oz = torch.full_like(ox, z_start)
    origins = torch.stack([ox, oy, oz], dim=-1)
    directions = torch.zeros_like(origins)
    directions[:, 2] = -1.0
    return Rays(origins, directions, float(bounds[0]), float(bounds[1]),
                torch.stack([px, py], dim=-1).long())


def pixel_ray(camera: OrthoCamera, px: int, py: int, bounds=BODY_BOUNDS) -> Rays:
    return pixel_rays(camera, [px], [py], bounds)


def image_pixels(width: int, height: int):
    """All pixel coordinates in row-major order."""
    py, px = torch.meshgrid(torch.arange(height), torch.arange(width), indexing="ij")
    return px.reshape(-1), py.reshape(-1)
