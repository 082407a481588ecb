"""Synthetic toy sequences with known interior, exterior and per-frame parameters."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import binary_dilation, binary_erosion

from .camera import BODY_BOUNDS, HEAD_BOUNDS, OrthoCamera
from .container import load_arrays, save_arrays
from .field import ShellField
from .geometry import REGIONS, AvatarParams, FrameParams, ParametricModel, canonical_vertices
from .render import RenderSettings, prepare_scene, render_frame
from .toy import toy_model

SKIN = (0.85, 0.64, 0.52)
BODY = (0.45, 0.5, 0.6)


@dataclass
class SceneSpec:
    model: str = "toy"
    model_seed: int = 0
    resolution: int = 64
    n_frames: int = 25
    n_heldout: int = 5
    seed: int = 0
    beta: list = field(default_factory=lambda: [0.3, -0.4])
    beta_init_noise: float = 0.02   # std of the initial shape estimate handed to training
    exterior: Optional[dict] = field(default_factory=lambda: ShellField().to_dict())
    camera_scale: float = 1.8
    camera_jitter: float = 0.0
    root_range: float = 0.25      # max root rotation about the vertical axis (rad)
    arm_range: float = 0.7        # arm swing below horizontal (rad)
    expression_range: float = 1.0
    texture: float = 0.18
    n_bins: int = 64
    bounds: str = "body"

    def __post_init__(self):
        if self.resolution < 1 or self.n_frames < 1:
            raise ValueError("resolution and n_frames must be positive")
        if not 0 <= self.n_heldout < self.n_frames:
            raise ValueError("n_heldout must leave at least one training frame")
        if self.model != "toy":
            raise ValueError(f"unknown model {self.model!r}")
        if self.bounds not in ("body", "head"):
            raise ValueError("bounds must be 'body' or 'head'")

    @property
    def ray_bounds(self):
        return BODY_BOUNDS if self.bounds == "body" else HEAD_BOUNDS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scene spec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def build_model(self) -> ParametricModel:
        """The scene's model, rounded to float32 so a saved copy reloads bit-identically."""
        model = toy_model(self.model_seed)
        for name in ("template_vertices", "shape_dirs", "pose_dirs", "expr_dirs", "skin_weights",
                     "joint_regressor", "canonical_pose"):
            setattr(model, name, _f32(getattr(model, name)))
        return model


@dataclass
class Frame:
    rgb: torch.Tensor        # (H, W, 3)
    S: torch.Tensor          # (H, W) full avatar
    S_b: torch.Tensor        # visible interior
    S_e: torch.Tensor        # exterior
    interior: torch.Tensor   # true mesh silhouette
    params: FrameParams
    heldout: bool = False


@dataclass
class Dataset:
    spec: SceneSpec
    model: ParametricModel
    beta: torch.Tensor
    albedo: torch.Tensor
    frames: list
    beta_init: Optional[torch.Tensor] = None

    @property
    def exterior(self):
        return None if self.spec.exterior is None else ShellField(**self.spec.exterior)

    @property
    def train_frames(self) -> list[int]:
        return [i for i, f in enumerate(self.frames) if not f.heldout]

    @property
    def heldout_frames(self) -> list[int]:
        return [i for i, f in enumerate(self.frames) if f.heldout]

    def true_avatar(self, dtype=torch.float64) -> AvatarParams:
        av = AvatarParams.zeros(self.model, dtype)
        av.beta = self.beta.to(dtype).clone()
        av.albedo = self.albedo.to(dtype).clone()
        av.field = self.exterior if self.exterior is not None else _EmptyField()
        return av


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


class _EmptyField:
    def query(self, x):
        x = x.reshape(-1, 3)
        return torch.zeros(x.shape[0], 3, dtype=x.dtype), torch.zeros(x.shape[0], dtype=x.dtype)


def texture_albedo(model: ParametricModel, amplitude: float = 0.18) -> torch.Tensor:
    """Smooth per-vertex color pattern over canonical positions; skin-colored face and hands."""
    v = canonical_vertices(model).numpy()
    x, y, z = v.T
    pattern = (np.sin(9.0 * x + 1.0) * np.cos(7.0 * y) + 0.5 * np.sin(11.0 * z + 3.0 * y)
               + 0.6 * np.sin(23.0 * x + 5.0) * np.sin(19.0 * y + 2.0))
    base = np.tile(np.asarray(BODY), (len(v), 1))
    skin = model.region_labels != REGIONS.index("body")
    base[skin] = SKIN
    tint = np.array([1.0, 0.6, -0.5])
    return torch.as_tensor(np.clip(base + amplitude * pattern[:, None] * tint, 0.0, 1.0))


def sample_frames(spec: SceneSpec, model: ParametricModel, rng: np.random.Generator) -> list[FrameParams]:
    out = []
    for _ in range(spec.n_frames):
        theta = np.zeros((model.n_joints, 3))
        theta[0] = rng.uniform(-1, 1, 3) * np.array([0.1, spec.root_range, 0.05])
        theta[1] = rng.uniform(-0.1, 0.1, 3)
        if model.n_joints >= 4:
            swing = rng.uniform(0.0, spec.arm_range, 2)
            theta[2] = [rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), -swing[0]]
            theta[3] = [rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), swing[1]]
        psi = rng.uniform(-1, 1, model.n_expr) * spec.expression_range
        t = rng.normal(0.0, spec.camera_jitter, 2) if spec.camera_jitter > 0 else np.zeros(2)
        cam = OrthoCamera(torch.tensor(spec.camera_scale, dtype=torch.float64),
                          torch.as_tensor(t, dtype=torch.float64), spec.resolution, spec.resolution)
        out.append(FrameParams(torch.as_tensor(theta), torch.as_tensor(psi), cam))
    return out


def render_truth(model, avatar, params: FrameParams, spec: SceneSpec):
    """Render one ground-truth frame and derive its masks."""
    settings = RenderSettings(n_bins=spec.n_bins, bounds=spec.ray_bounds)
    scene = prepare_scene(model, avatar, params, settings)
    img = render_frame(scene, settings)
    interior = img.silhouette
    S_e = (img.s_v > 0.5).to(img.rgb.dtype)
    S_b = interior * (1.0 - S_e)
    S = torch.maximum(S_b, S_e)
    return img.rgb, S, S_b, S_e, interior


def generate(spec: SceneSpec) -> Dataset:
    """Render every frame of the scene in float64. Deterministic in ``spec``."""
    model = spec.build_model()
    rng = np.random.default_rng(spec.seed)
    beta = torch.as_tensor(_f32(spec.beta))
    if beta.shape != (model.n_shape,):
        raise ValueError(f"beta needs {model.n_shape} entries")
    albedo = texture_albedo(model, spec.texture).float().double()
    init = beta + torch.as_tensor(rng.normal(0.0, spec.beta_init_noise, beta.shape)) \
        if spec.beta_init_noise > 0 else beta.clone()
    ds = Dataset(spec, model, beta, albedo, [], torch.as_tensor(_f32(init)))
    avatar = ds.true_avatar()
    params = sample_frames(spec, model, rng)
    held = set(range(spec.n_frames - spec.n_heldout, spec.n_frames))
    for i, p in enumerate(params):
        rgb, S, S_b, S_e, interior = render_truth(model, avatar, p, spec)
        ds.frames.append(Frame(rgb.float(), S.float(), S_b.float(), S_e.float(), interior.float(), p,
                               heldout=i in held))
    return ds


def boundary_band(mask: np.ndarray, width: int) -> np.ndarray:
    """Pixels within ``width`` of the mask boundary, on either side."""
    mask = np.asarray(mask, dtype=bool)
    if width < 1:
        return np.zeros_like(mask)
    return binary_dilation(mask, iterations=width) & ~binary_erosion(mask, iterations=width, border_value=1)


def corrupt_masks(ds: Dataset, mode: str = "random", rate: float = 0.2, seed: int = 0,
                  width: int = 2, frames: Optional[list] = None) -> Dataset:
    """Flip exterior-mask pixels inside the boundary band.

    ``random`` flips each band pixel independently with probability ``rate``.
    ``sector`` flips every band pixel inside an angular sector (around the
    mask centroid) covering a ``rate`` fraction of the full turn; the sector
    is the same in every frame, which mimics a systematic segmentation error.
    Interior and full masks are re-derived from the corrupted exterior mask.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must be in [0, 1]")
    if mode not in ("random", "sector"):
        raise ValueError(f"unknown corruption mode {mode!r}")
    rng = np.random.default_rng(seed)
    start = rng.uniform(0.0, 2 * np.pi)
    targets = ds.train_frames if frames is None else frames
    out = []
    for i, f in enumerate(ds.frames):
        if i not in targets or rate == 0.0:
            out.append(f)
            continue
        S_e = f.S_e.numpy() > 0.5
        band = boundary_band(S_e, width)
        if mode == "random":
            flip = band & (rng.random(S_e.shape) < rate)
        else:
            ys, xs = np.nonzero(S_e) if S_e.any() else np.nonzero(np.ones_like(S_e))
            cy, cx = ys.mean(), xs.mean()
            yy, xx = np.mgrid[:S_e.shape[0], :S_e.shape[1]]
            ang = np.mod(np.arctan2(yy - cy, xx - cx) - start, 2 * np.pi)
            flip = band & (ang < rate * 2 * np.pi)
        new_e = S_e ^ flip
        S = (f.S.numpy() > 0.5) | new_e
        S_b = S & ~new_e
        dt = f.S_e.dtype
        out.append(replace(f, S=torch.as_tensor(S, dtype=dt), S_b=torch.as_tensor(S_b, dtype=dt),
                           S_e=torch.as_tensor(new_e, dtype=dt)))
    return replace(ds, frames=out)


# --- dataset directory IO -------------------------------------------------

def _png(path: Path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def write_png(path, img) -> None:
    """8-bit PNG (RGB or grayscale, no alpha) from a float image in [0, 1]."""
    img = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    _png(Path(path), img)


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {"beta": ds.beta.numpy(), "albedo": ds.albedo.numpy()}
    if ds.beta_init is not None:
        arrays["beta_init"] = ds.beta_init.numpy()
    frames_meta = []
    for i, f in enumerate(ds.frames):
        for name in ("rgb", "S", "S_b", "S_e", "interior"):
            arrays[f"{name}_{i}"] = getattr(f, name).numpy()
        write_png(out / f"frame_{i:03d}.png", f.rgb)
        for name in ("S", "S_b", "S_e"):
            write_png(out / f"mask_{name}_{i:03d}.png", getattr(f, name))
        frames_meta.append({
            "index": i, "heldout": f.heldout,
            "theta": f.params.theta.tolist(), "psi": f.params.psi.tolist(),
            "camera": {"scale": float(f.params.camera.scale),
                       "translation": f.params.camera.translation.tolist()},
        })
    save_arrays(out / "data.havc", arrays, meta={"kind": "dataset", "n_frames": len(ds.frames)})
    ds.model.save(out / "model.havc")
    (out / "spec.json").write_text(json.dumps(ds.spec.to_dict(), indent=2))
    (out / "params.json").write_text(json.dumps({"beta": ds.beta.tolist(), "frames": frames_meta}, indent=2))


def load_dataset(in_dir) -> Dataset:
    d = Path(in_dir)
    for name in ("spec.json", "params.json", "data.havc", "model.havc"):
        if not (d / name).exists():
            raise FileNotFoundError(f"{d / name} is missing")
    spec = SceneSpec.from_dict(json.loads((d / "spec.json").read_text()))
    params = json.loads((d / "params.json").read_text())
    arrays, _ = load_arrays(d / "data.havc")
    model = ParametricModel.load(d / "model.havc")
    frames = []
    res = spec.resolution
    for fm in params["frames"]:
        i = fm["index"]
        cam = OrthoCamera(torch.tensor(fm["camera"]["scale"], dtype=torch.float64),
                          torch.tensor(fm["camera"]["translation"], dtype=torch.float64), res, res)
        fp = FrameParams(torch.tensor(fm["theta"], dtype=torch.float64),
                         torch.tensor(fm["psi"], dtype=torch.float64), cam)
        t = {n: torch.as_tensor(arrays[f"{n}_{i}"], dtype=torch.float32)
             for n in ("rgb", "S", "S_b", "S_e", "interior")}
        frames.append(Frame(t["rgb"], t["S"], t["S_b"], t["S_e"], t["interior"], fp, fm["heldout"]))
    init = torch.as_tensor(arrays["beta_init"], dtype=torch.float64) if "beta_init" in arrays else None
    return Dataset(spec, model, torch.as_tensor(arrays["beta"], dtype=torch.float64),
                   torch.as_tensor(arrays["albedo"], dtype=torch.float64), frames, init)


def perturb_poses(ds: Dataset, sigma: float, seed: int = 0, frames: Optional[list] = None) -> Dataset:
    """Copy of ``ds`` whose training-frame poses carry Gaussian noise (rad); images are unchanged."""
    rng = np.random.default_rng(seed)
    targets = set(ds.train_frames if frames is None else frames)
    out = []
    for i, f in enumerate(ds.frames):
        if i in targets and sigma > 0:
            theta = f.params.theta + torch.as_tensor(rng.normal(0.0, sigma, tuple(f.params.theta.shape)))
            f = replace(f, params=FrameParams(theta, f.params.psi.clone(), f.params.camera))
        out.append(f)
    return replace(ds, frames=out)
