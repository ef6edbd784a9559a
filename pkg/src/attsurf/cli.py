"""Command-line interface: dataset simulation, training, full-view rendering,
surface extraction, and metric evaluation.

Exit codes: 0 on success, 1 on a runtime or capability error, 2 on bad usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from attsurf.meshing import extract_surface, load_ply, save_ply, surface_points
from attsurf.metrics import (
    alignment_residual,
    chamfer_distance,
    icp_align,
    psnr,
    ssim,
    umeyama_align,
)
from attsurf.phantoms import (
    make_trajectory,
    nested_spheres_phantom,
    project,
    quantize_intensity,
    sphere_phantom,
    write_dataset,
)
from attsurf.training import (
    ProjectionDataset,
    TrainConfig,
    load_checkpoint,
    nested_preset,
    render_view,
    run_two_stage,
    sphere_preset,
    train,
)

log = logging.getLogger(__name__)


def _load_image(path) -> np.ndarray:
    """PNG to float transmittance in [0, 1]; 8- and 16-bit inputs accepted."""
    raw = np.asarray(Image.open(path))
    if raw.ndim != 2:
        raise ValueError(f"{path}: expected a grayscale image, got shape {raw.shape}")
    scale = 65535.0 if raw.dtype == np.uint16 or raw.dtype == np.int32 else 255.0
    return raw.astype(np.float64) / scale


def _parse_view_list(text: str, total: int) -> list[int]:
    views = sorted({int(v) for v in text.split(",") if v.strip() != ""})
    bad = [v for v in views if v < 0 or v >= total]
    if bad:
        raise ValueError(f"held-out views {bad} outside 0..{total - 1}")
    return views


# ---------- subcommands ----------


def _cmd_simulate(args) -> int:
    if args.phantom == "sphere":
        phantom = sphere_phantom(radius=args.radius, mu=args.mu)
    else:
        phantom = nested_spheres_phantom(r_outer=args.outer_radius,
                                         mu_outer=args.outer_mu,
                                         r_inner=args.inner_radius,
                                         mu_inner=args.inner_mu)
    cameras = make_trajectory(args.views, args.step, args.distance,
                              2.0 * args.distance, args.size, args.focal)
    val_views = _parse_view_list(args.val_views, args.views)
    train_views = [v for v in range(args.views) if v not in val_views]
    rng = np.random.default_rng(args.seed)
    images = [project(phantom, cam, supersample=args.supersample,
                      noise_sigma=args.noise, rng=rng) for cam in cameras]
    out = write_dataset(args.out, images, cameras, train_views=train_views,
                        val_views=val_views, phantom=phantom,
                        noise_sigma=args.noise)
    print(f"wrote {len(images)} views ({len(train_views)} train, "
          f"{len(val_views)} val) to {out}")
    return 0


_TRAIN_OVERRIDES = ("encoder", "iterations", "batch_rays", "samples_per_ray",
                    "seed", "val_interval", "checkpoint_interval", "warm_up")


def _cmd_train(args) -> int:
    dataset = ProjectionDataset.load(args.data)
    if args.config:
        base = json.loads(Path(args.config).read_text())
    else:
        preset = nested_preset if args.preset == "nested" else sphere_preset
        base = preset().to_dict()
    for name in _TRAIN_OVERRIDES:
        value = getattr(args, name)
        if value is not None:
            base[name] = value
    config = TrainConfig.from_dict(base)

    if args.two_stage:
        both = run_two_stage(dataset, config, args.out)
        result = both.stage2
        print(f"stage 1 (pose refinement): {both.stage1.checkpoint_path}")
    else:
        if args.pose_refine:
            config = TrainConfig.from_dict({**config.to_dict(),
                                            "pose_refine": True,
                                            "train_on_all_views": True})
        result = train(dataset, config, args.out, resume_from=args.resume)
    print(f"checkpoint: {result.checkpoint_path}")
    for view, value in sorted(result.val_psnr.items()):
        print(f"val view {view}: {value:.2f} dB")
    return 0


def _cmd_render(args) -> int:
    state = load_checkpoint(args.ckpt)
    if not 0 <= args.view < len(state.cameras):
        raise ValueError(f"view {args.view} outside 0..{len(state.cameras) - 1}")
    model = state.build_model()
    camera = state.cameras[args.view]
    rng = np.random.default_rng([state.config.seed, args.view])
    image = render_view(model, camera, samples=args.samples, rng=rng)
    Image.fromarray(quantize_intensity(image)).save(args.out)
    print(f"rendered view {args.view} ({camera.height}x{camera.width}) to {args.out}")
    return 0


def _cmd_extract(args) -> int:
    state = load_checkpoint(args.ckpt)
    model = state.build_model()
    mesh = extract_surface(model, args.resolution, material=args.material)
    if mesh.is_empty:
        raise ValueError("the level set does not cross zero inside the volume")
    save_ply(mesh, args.out)
    print(f"extracted {args.material} surface: {len(mesh.vertices)} vertices, "
          f"{len(mesh.triangles)} triangles -> {args.out}")
    return 0


def _metric_records_images(args) -> list[dict]:
    pred = _load_image(args.pred)
    ref = _load_image(args.ref)
    if pred.shape != ref.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {ref.shape}")
    return [
        {"metric": "psnr", "value": psnr(pred, ref), "units": "dB"},
        {"metric": "ssim", "value": ssim(pred, ref), "units": "unitless"},
    ]


def _metric_records_meshes(args) -> list[dict]:
    rng = np.random.default_rng(args.seed)
    pred = surface_points(load_ply(args.mesh), args.points, rng)
    ref = surface_points(load_ply(args.ref_mesh), args.points, rng)
    records = []
    if args.align != "none":
        align = icp_align if args.align == "icp" else umeyama_align
        transform = align(pred, ref)
        records.append({"metric": "alignment_rms",
                        "value": alignment_residual(transform, pred, ref),
                        "units": "scene"})
        pred = transform.apply(pred)
    records.insert(0, {"metric": "chamfer",
                       "value": chamfer_distance(pred, ref),
                       "units": "scene"})
    return records


def _cmd_eval(args) -> int:
    image_mode = args.pred is not None or args.ref is not None
    mesh_mode = args.mesh is not None or args.ref_mesh is not None
    if image_mode == mesh_mode:
        raise UsageError("pass either --pred/--ref images or --mesh/--ref-mesh meshes")
    if image_mode and (args.pred is None or args.ref is None):
        raise UsageError("image evaluation needs both --pred and --ref")
    if mesh_mode and (args.mesh is None or args.ref_mesh is None):
        raise UsageError("mesh evaluation needs both --mesh and --ref-mesh")
    records = (_metric_records_images(args) if image_mode
               else _metric_records_meshes(args))
    print(json.dumps(records, indent=1))
    return 0


class UsageError(ValueError):
    """Argument combinations argparse cannot express; exits with code 2."""


# ---------- parser ----------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attsurf",
        description="Attenuation-surface reconstruction from X-ray projections")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate an analytic phantom dataset")
    sim.add_argument("--phantom", choices=("sphere", "nested"), default="sphere")
    sim.add_argument("--out", required=True)
    sim.add_argument("--views", type=int, default=20)
    sim.add_argument("--step", type=float, default=18.0, help="degrees between views")
    sim.add_argument("--size", type=int, default=64, help="image side in pixels")
    sim.add_argument("--focal", type=float, default=100.0, help="focal length in pixels")
    sim.add_argument("--distance", type=float, default=4.0, help="source to center")
    sim.add_argument("--val-views", default="2,7,12,17",
                     help="comma-separated held-out view indices")
    sim.add_argument("--radius", type=float, default=0.35)
    sim.add_argument("--mu", type=float, default=3.0)
    sim.add_argument("--outer-radius", type=float, default=0.5)
    sim.add_argument("--outer-mu", type=float, default=1.0)
    sim.add_argument("--inner-radius", type=float, default=0.25)
    sim.add_argument("--inner-mu", type=float, default=4.0)
    sim.add_argument("--supersample", type=int, default=1)
    sim.add_argument("--noise", type=float, default=0.0)
    sim.add_argument("--seed", type=int, default=0)
    sim.set_defaults(func=_cmd_simulate)

    tr = sub.add_parser("train", help="optimize a field against a dataset")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--preset", choices=("sphere", "nested"), default="sphere")
    tr.add_argument("--config", help="JSON file with a full training configuration")
    tr.add_argument("--encoder", choices=("hash", "frequency"))
    tr.add_argument("--iterations", type=int)
    tr.add_argument("--batch-rays", type=int, dest="batch_rays")
    tr.add_argument("--samples", type=int, dest="samples_per_ray")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--val-interval", type=int, dest="val_interval")
    tr.add_argument("--checkpoint-interval", type=int, dest="checkpoint_interval")
    tr.add_argument("--warm-up", type=int, dest="warm_up")
    tr.add_argument("--resume", help="checkpoint file to continue from")
    mode = tr.add_mutually_exclusive_group()
    mode.add_argument("--pose-refine", action="store_true",
                      help="jointly refine camera poses (single stage)")
    mode.add_argument("--two-stage", action="store_true",
                      help="refine poses, then retrain with them frozen")
    tr.set_defaults(func=_cmd_train)

    rd = sub.add_parser("render", help="render one view from a checkpoint")
    rd.add_argument("--ckpt", required=True)
    rd.add_argument("--view", type=int, required=True)
    rd.add_argument("--out", required=True)
    rd.add_argument("--samples", type=int, default=128)
    rd.set_defaults(func=_cmd_render)

    ex = sub.add_parser("extract", help="extract a surface mesh from a checkpoint")
    ex.add_argument("--ckpt", required=True)
    ex.add_argument("--out", required=True)
    ex.add_argument("--resolution", type=int, default=128)
    ex.add_argument("--material", choices=("outer", "inner"), default="outer")
    ex.set_defaults(func=_cmd_extract)

    ev = sub.add_parser("eval", help="image or mesh agreement metrics as JSON")
    ev.add_argument("--pred", help="rendered image (PNG)")
    ev.add_argument("--ref", help="reference image (PNG)")
    ev.add_argument("--mesh", help="extracted mesh (PLY)")
    ev.add_argument("--ref-mesh", dest="ref_mesh", help="reference mesh (PLY)")
    ev.add_argument("--align", choices=("none", "umeyama", "icp"), default="none")
    ev.add_argument("--points", type=int, default=10_000)
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        parser.error(str(err))    # exits 2
    except (ValueError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
