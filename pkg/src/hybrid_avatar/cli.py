"""Command-line entry: ``python -m hybrid_avatar <command> ...``.

Exit codes: 0 success, 2 bad input (arguments, paths, configs), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .camera import OrthoCamera
from .container import ContainerError, save_arrays
from .geometry import FrameParams, NumericalDegeneracyError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("hybrid_avatar")


class InputError(Exception):
    pass


def _read_json(path_or_text: str):
    p = Path(path_or_text)
    try:
        text = p.read_text() if p.exists() else path_or_text
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed JSON in {path_or_text!r}: {exc}") from exc


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {path}")
    return p


def _write_image(out: str, img, raw: str | None = None) -> None:
    from .synth import write_png
    out_p = Path(out)
    out_p.parent.mkdir(parents=True, exist_ok=True)
    write_png(out_p, img.rgb)
    if raw:
        save_arrays(raw, {"rgb": img.rgb.numpy(), "s_v": img.s_v.numpy(), "silhouette": img.silhouette.numpy()},
                    meta={"kind": "image"})


def _frame_from(state, args) -> FrameParams:
    if getattr(args, "pose", None):
        d = _read_json(args.pose)
        ref = state.frames[0]
        dt = ref.theta.dtype
        try:
            theta = torch.as_tensor(d.get("theta", ref.theta.tolist()), dtype=dt).reshape(ref.theta.shape)
            psi = torch.as_tensor(d.get("psi", ref.psi.tolist()), dtype=dt).reshape(ref.psi.shape)
            cam_d = d.get("camera", {})
            cam = OrthoCamera(torch.tensor(cam_d.get("scale", float(ref.camera.scale.detach())), dtype=dt),
                              torch.tensor(cam_d.get("translation", ref.camera.translation.tolist()), dtype=dt),
                              int(cam_d.get("width", ref.camera.width)), int(cam_d.get("height", ref.camera.height)))
        except (RuntimeError, TypeError, ValueError) as exc:
            raise InputError(f"bad pose description: {exc}") from exc
        return FrameParams(theta, psi, cam)
    n = args.frame if args.frame is not None else 0
    if not 0 <= n < len(state.frames):
        raise InputError(f"frame {n} out of range (checkpoint has {len(state.frames)})")
    f = state.frames[n]
    return FrameParams(f.theta.detach(), f.psi.detach(), f.camera.to(f.theta.dtype))


def _load_state(path: str):
    from .optim import load_checkpoint
    return load_checkpoint(_need_file(path, "checkpoint"))


# --- commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import SceneSpec, generate, save_dataset
    spec_d = _read_json(str(_need_file(args.spec, "scene spec")))
    if args.seed is not None:
        spec_d["seed"] = args.seed
    spec = SceneSpec.from_dict(spec_d)
    ds = generate(spec)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.frames)} frames to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .optim import TrainConfig, evaluate, load_checkpoint, summarize, train
    from .synth import load_dataset
    cfg_d = _read_json(str(_need_file(args.config, "config"))) if args.config else {}
    for key in ("seed", "stage1_steps", "stage2_steps", "rays_per_frame"):
        val = getattr(args, key)
        if val is not None:
            cfg_d[key] = val
    cfg = TrainConfig.from_dict(cfg_d)
    if not Path(args.data).is_dir():
        raise InputError(f"dataset directory not found: {args.data}")
    ds = load_dataset(args.data)
    state = None
    if args.resume:
        state = load_checkpoint(_need_file(args.resume, "checkpoint"))
        state.config = cfg
    state, _ = train(ds, cfg, state=state, out_dir=args.out)
    summary = summarize(evaluate(state, ds))
    (Path(args.out) / "eval.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return EXIT_OK


def cmd_render(args) -> int:
    from .apps import render_state
    state = _load_state(args.ckpt)
    img = render_state(state, _frame_from(state, args), args.bins)
    _write_image(args.out, img, args.raw)
    return EXIT_OK


def cmd_transfer(args) -> int:
    from .apps import render_state, transfer
    body = _load_state(args.body)
    ext = _load_state(args.exterior)
    frame = _frame_from(body, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    img = transfer(body, ext, frame, args.bins)
    _write_image(str(out / "transfer.png"), img, str(out / "transfer.havc"))
    _write_image(str(out / "body.png"), render_state(body, frame, args.bins))
    return EXIT_OK


def cmd_reshape(args) -> int:
    from .apps import reshape
    state = _load_state(args.ckpt)
    beta = _read_json(args.beta)
    if isinstance(beta, dict):
        beta = beta.get("beta")
    if not isinstance(beta, list):
        raise InputError("--beta must be a JSON list (or {\"beta\": [...]})")
    img = reshape(state, beta, _frame_from(state, args), args.bins)
    _write_image(args.out, img, args.raw)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck
    state = _load_state(args.ckpt)
    base = {"model": state.model, "field": state.avatar.field}
    report = gradcheck.run(samples=args.samples, seed=args.seed or 0, base=base, tol=args.tol)
    worst = report.worst
    print(f"{len(report.checks)} checks over {report.configs} configurations in {report.seconds:.1f}s")
    if worst is not None:
        print(f"worst relative error {worst.rel:.2e} ({worst.suite}/{worst.group}/{worst.functional})")
    for c in report.failures()[:20]:
        print(f"FAIL {c.suite} config={c.config} group={c.group} term={c.functional} rel={c.rel:.3e}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="python -m hybrid_avatar", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="fit an avatar to a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.add_argument("--seed", type=int)
    s.add_argument("--stage1-steps", dest="stage1_steps", type=int)
    s.add_argument("--stage2-steps", dest="stage2_steps", type=int)
    s.add_argument("--rays", dest="rays_per_frame", type=int)
    s.set_defaults(func=cmd_train)

    def frame_args(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--frame", type=int)
        g.add_argument("--pose", help="JSON file or literal with theta / psi / camera")
        sp.add_argument("--bins", type=int)

    s = sub.add_parser("render", help="render a checkpoint in a stored or new pose")
    s.add_argument("--ckpt", required=True)
    frame_args(s)
    s.add_argument("--out", required=True)
    s.add_argument("--raw", help="also dump float buffers to this container path")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("transfer", help="render one avatar's body with another's exterior")
    s.add_argument("--body", required=True)
    s.add_argument("--exterior", required=True)
    frame_args(s)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("reshape", help="render with new shape coefficients")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--beta", required=True, help="JSON list, literal or file")
    frame_args(s)
    s.add_argument("--out", required=True)
    s.add_argument("--raw")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_reshape)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--samples", type=int, default=100)
    s.add_argument("--tol", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    from .optim import TrainingDiverged
    from .render import RenderError
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    if getattr(args, "seed", None) is not None:
        torch.manual_seed(args.seed)
    try:
        return args.func(args)
    except (InputError, ContainerError, FileNotFoundError, IsADirectoryError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingDiverged, RenderError, NumericalDegeneracyError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
