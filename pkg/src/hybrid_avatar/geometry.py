"""Parametric interior mesh: blend shapes, joints, offsets and forward skinning."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .camera import OrthoCamera
from .container import load_arrays, save_arrays

REGIONS = ("body", "face", "hands")


class NumericalDegeneracyError(ArithmeticError):
    """A per-vertex transform is singular or non-finite."""


@dataclass(eq=False)
class ParametricModel:
    """Template mesh with shape/pose/expression bases and skinning data.

    Arrays follow the usual body-model layout: ``shape_dirs`` is
    (n_v, 3, n_beta), ``skin_weights`` is (n_k, n_v) with unit column sums,
    and ``parents[0] == -1`` marks the root joint.
    """

    template_vertices: np.ndarray
    faces: np.ndarray
    shape_dirs: np.ndarray
    pose_dirs: np.ndarray
    expr_dirs: np.ndarray
    skin_weights: np.ndarray
    joint_regressor: np.ndarray
    parents: np.ndarray
    region_labels: np.ndarray
    canonical_pose: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.template_vertices = np.asarray(self.template_vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.shape_dirs = np.asarray(self.shape_dirs, dtype=np.float64)
        self.pose_dirs = np.asarray(self.pose_dirs, dtype=np.float64)
        self.expr_dirs = np.asarray(self.expr_dirs, dtype=np.float64)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=np.float64)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.region_labels = np.asarray(self.region_labels, dtype=np.int64)
        self.canonical_pose = np.asarray(self.canonical_pose, dtype=np.float64)
        self.validate()

    @property
    def n_verts(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.skin_weights.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_dirs.shape[2]

    @property
    def n_expr(self) -> int:
        return self.expr_dirs.shape[2]

    def validate(self) -> None:
        nv = self.template_vertices.shape[0]
        nk = self.skin_weights.shape[0]
        if self.template_vertices.shape != (nv, 3):
            raise ValueError("template_vertices must be (n_v, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be (n_t, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= nv):
            raise ValueError("faces reference missing vertices")
        for name in ("shape_dirs", "pose_dirs", "expr_dirs"):
            arr = getattr(self, name)
            if arr.ndim != 3 or arr.shape[:2] != (nv, 3):
                raise ValueError(f"{name} must be (n_v, 3, d)")
        if self.pose_dirs.shape[2] != 9 * (nk - 1):
            raise ValueError("pose_dirs must have 9 * (n_k - 1) components")
        if self.skin_weights.shape != (nk, nv):
            raise ValueError("skin_weights must be (n_k, n_v)")
        if (self.skin_weights < 0).any() or not np.allclose(self.skin_weights.sum(0), 1.0, atol=1e-6):
            raise ValueError("skin weight columns must be non-negative and sum to 1")
        if self.joint_regressor.shape != (nk, nv):
            raise ValueError("joint_regressor must be (n_k, n_v)")
        if self.parents.shape != (nk,) or self.parents[0] != -1:
            raise ValueError("parents must have one entry per joint with root at index 0")
        for k in range(1, nk):
            if not 0 <= self.parents[k] < k:
                raise ValueError("parents must precede children (tree rooted at joint 0)")
        if self.region_labels.shape != (nv,) or not np.isin(self.region_labels, range(len(REGIONS))).all():
            raise ValueError("region_labels must tag every vertex with a known region")
        if self.canonical_pose.shape != (nk, 3):
            raise ValueError("canonical_pose must be (n_k, 3)")

    def tensors(self, dtype=torch.float64) -> dict[str, torch.Tensor]:
        """Torch views of the model arrays, cached per dtype."""
        if dtype not in self._cache:
            self._cache[dtype] = {
                "template": torch.as_tensor(self.template_vertices, dtype=dtype),
                "faces": torch.as_tensor(self.faces),
                "shape_dirs": torch.as_tensor(self.shape_dirs, dtype=dtype),
                "pose_dirs": torch.as_tensor(self.pose_dirs, dtype=dtype),
                "expr_dirs": torch.as_tensor(self.expr_dirs, dtype=dtype),
                "weights": torch.as_tensor(self.skin_weights, dtype=dtype),
                "regressor": torch.as_tensor(self.joint_regressor, dtype=dtype),
            }
        return self._cache[dtype]

    def region_mask(self, name: str) -> np.ndarray:
        return self.region_labels == REGIONS.index(name)

    def edges(self) -> np.ndarray:
        """Unique undirected edges (n_e, 2)."""
        key = "edges"
        if key not in self._cache:
            e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
            e = np.sort(e, axis=1)
            self._cache[key] = np.unique(e, axis=0)
        return self._cache[key]

    def save(self, path) -> None:
        arrays = {name: getattr(self, name) for name in _MODEL_ARRAYS}
        save_arrays(path, arrays, meta={"kind": "parametric_model", "regions": list(REGIONS)})

    @classmethod
    def load(cls, path) -> "ParametricModel":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "parametric_model":
            raise ValueError(f"{path}: not a parametric model container")
        missing = [n for n in _MODEL_ARRAYS if n not in arrays]
        if missing:
            raise ValueError(f"{path}: missing arrays {missing}")
        return cls(**{n: arrays[n] for n in _MODEL_ARRAYS})


_MODEL_ARRAYS = ("template_vertices", "faces", "shape_dirs", "pose_dirs", "expr_dirs",
                 "skin_weights", "joint_regressor", "parents", "region_labels", "canonical_pose")


@dataclass
class AvatarParams:
    """Shared optimizable state. ``field`` and ``residual_field`` are set by the caller."""

    beta: torch.Tensor
    offsets: torch.Tensor
    albedo: torch.Tensor
    field: object = None
    residual_field: object = None

    @classmethod
    def zeros(cls, model: ParametricModel, dtype=torch.float32, albedo: float = 0.5):
        return cls(
            beta=torch.zeros(model.n_shape, dtype=dtype),
            offsets=torch.zeros(model.n_verts, 3, dtype=dtype),
            albedo=torch.full((model.n_verts, 3), albedo, dtype=dtype),
        )


@dataclass
class FrameParams:
    """Per-frame pose (axis-angle per joint, radians), expression and camera."""

    theta: torch.Tensor
    psi: torch.Tensor
    camera: OrthoCamera

    def to(self, dtype):
        return FrameParams(self.theta.detach().to(dtype), self.psi.detach().to(dtype),
                           self.camera.to(dtype))


@dataclass
class PosedMesh:
    vertices: torch.Tensor            # (n_v, 3)
    faces: torch.Tensor               # (n_t, 3)
    transforms: torch.Tensor          # (n_v, 4, 4) M_i
    inverse_transforms: torch.Tensor  # (n_v, 4, 4) M_i^{-1}


def rodrigues(axis_angle: torch.Tensor) -> torch.Tensor:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3).

    Uses the series expansion below 1e-8 rad so the map and its gradient stay
    finite at zero.
    """
    aa = axis_angle
    sq = (aa * aa).sum(-1, keepdim=True)[..., None]
    small = sq < 1e-16
    sq_safe = torch.where(small, torch.ones_like(sq), sq)
    angle = torch.sqrt(sq_safe)
    a = torch.where(small, 1.0 - sq / 6.0, torch.sin(angle) / angle)
    b = torch.where(small, 0.5 - sq / 24.0, (1.0 - torch.cos(angle)) / sq_safe)
    x, y, z = aa[..., 0], aa[..., 1], aa[..., 2]
    zero = torch.zeros_like(x)
    K = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=-1).reshape(*aa.shape[:-1], 3, 3)
    eye = torch.eye(3, dtype=aa.dtype).expand_as(K)
    return eye + a * K + b * (K @ K)


def _check_dims(model: ParametricModel, beta, theta, psi, offsets):
    if beta is not None and tuple(beta.shape) != (model.n_shape,):
        raise ValueError(f"beta must have shape ({model.n_shape},), got {tuple(beta.shape)}")
    if theta is not None and tuple(theta.shape) != (model.n_joints, 3):
        raise ValueError(f"theta must have shape ({model.n_joints}, 3), got {tuple(theta.shape)}")
    if psi is not None and tuple(psi.shape) != (model.n_expr,):
        raise ValueError(f"psi must have shape ({model.n_expr},), got {tuple(psi.shape)}")
    if offsets is not None and tuple(offsets.shape) != (model.n_verts, 3):
        raise ValueError(f"offsets must have shape ({model.n_verts}, 3), got {tuple(offsets.shape)}")


def pose_feature(theta: torch.Tensor) -> torch.Tensor:
    """Flattened (R_j - I) over non-root joints."""
    rot = rodrigues(theta[1:])
    return (rot - torch.eye(3, dtype=theta.dtype)).reshape(-1)


def blend_displacements(model: ParametricModel, beta, theta, psi) -> torch.Tensor:
    """B = B_S(beta) + B_P(theta) + B_E(psi), shape (n_v, 3)."""
    t = model.tensors(beta.dtype)
    return (t["shape_dirs"] @ beta + t["pose_dirs"] @ pose_feature(theta)
            + t["expr_dirs"] @ psi)


def shaped_template(model: ParametricModel, beta, theta, psi, offsets) -> torch.Tensor:
    _check_dims(model, beta, theta, psi, offsets)
    t = model.tensors(beta.dtype)
    return t["template"] + blend_displacements(model, beta, theta, psi) + offsets


def joints(model: ParametricModel, beta: torch.Tensor) -> torch.Tensor:
    _check_dims(model, beta, None, None, None)
    t = model.tensors(beta.dtype)
    return t["regressor"] @ (t["template"] + t["shape_dirs"] @ beta)


def joint_transforms(model: ParametricModel, theta: torch.Tensor, joint_pos: torch.Tensor) -> torch.Tensor:
    """Per-joint skinning transforms G_k (n_k, 4, 4), identity at theta = 0.

    Forward kinematics over ``parents`` followed by removal of the rest-pose
    joint location, so G_k maps rest-space points to posed space.
    """
    rot = rodrigues(theta)
    dtype = theta.dtype
    bottom = torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=dtype)
    world = []
    for k in range(model.n_joints):
        p = int(model.parents[k])
        rel = joint_pos[k] if p < 0 else joint_pos[k] - joint_pos[p]
        local = torch.cat([torch.cat([rot[k], rel[:, None]], dim=1), bottom[None]], dim=0)
        world.append(local if p < 0 else world[p] @ local)
    world = torch.stack(world)
    rest = world[:, :3, :3] @ joint_pos[:, :, None]
    shift = torch.zeros_like(world)
    shift[:, :3, 3:] = rest
    return world - shift


def vertex_transforms(model: ParametricModel, beta, theta, psi, offsets) -> torch.Tensor:
    """M_i = sum_k W[k, i] G_k [[I, o_i + b_i], [0, 1]], shape (n_v, 4, 4)."""
    _check_dims(model, beta, theta, psi, offsets)
    t = model.tensors(beta.dtype)
    G = joint_transforms(model, theta, joints(model, beta))
    blended = torch.einsum("kv,kab->vab", t["weights"], G)
    disp = blend_displacements(model, beta, theta, psi) + offsets
    # [[A, c],[0,1]] @ [[I, d],[0,1]] = [[A, A d + c],[0,1]]
    trans = blended[:, :3, 3] + (blended[:, :3, :3] @ disp[:, :, None])[..., 0]
    M = blended.clone()
    M[:, :3, 3] = trans
    return M


def apply_transforms(M: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    return (M[..., :3, :3] @ points[..., :, None])[..., 0] + M[..., :3, 3]


def invert_transforms(M: torch.Tensor, tol: float = 1e-10) -> torch.Tensor:
    """Inverse of affine 4x4 transforms with a degeneracy check."""
    A = M[..., :3, :3]
    det = torch.linalg.det(A)
    bad = ~torch.isfinite(det) | (det.abs() < tol)
    if bool(bad.any()):
        idx = torch.nonzero(bad).reshape(-1)[:5].tolist()
        raise NumericalDegeneracyError(f"singular vertex transform(s) at {idx}")
    A_inv = torch.linalg.inv(A)
    out = torch.zeros_like(M)
    out[..., :3, :3] = A_inv
    out[..., :3, 3] = -(A_inv @ M[..., :3, 3:])[..., 0]
    out[..., 3, 3] = 1.0
    return out


def pose_mesh(model: ParametricModel, avatar: AvatarParams, frame: FrameParams,
              offsets: Optional[torch.Tensor] = None) -> PosedMesh:
    """Pose the template; ``offsets`` overrides ``avatar.offsets`` when given."""
    offsets = avatar.offsets if offsets is None else offsets
    M = vertex_transforms(model, avatar.beta, frame.theta, frame.psi, offsets)
    template = model.tensors(M.dtype)["template"]
    verts = apply_transforms(M, template)
    if not bool(torch.isfinite(verts).all()):
        raise NumericalDegeneracyError("non-finite posed vertices")
    return PosedMesh(verts, model.tensors(M.dtype)["faces"], M, invert_transforms(M))


def canonical_transforms(model: ParametricModel, dtype=torch.float64) -> torch.Tensor:
    """M_i(0, theta_c, 0, 0) for the model's fixed canonical pose."""
    key = ("canonical", dtype)
    if key not in model._cache:
        beta = torch.zeros(model.n_shape, dtype=dtype)
        theta = torch.as_tensor(model.canonical_pose, dtype=dtype)
        psi = torch.zeros(model.n_expr, dtype=dtype)
        offsets = torch.zeros(model.n_verts, 3, dtype=dtype)
        model._cache[key] = vertex_transforms(model, beta, theta, psi, offsets)
    return model._cache[key]


def canonical_vertices(model: ParametricModel, dtype=torch.float64) -> torch.Tensor:
    M = canonical_transforms(model, dtype)
    return apply_transforms(M, model.tensors(dtype)["template"])
