"""Training orchestration: configuration, the optimization loop, binary
checkpoints with bitwise resume, validation rendering, and the two-stage
pose-refinement protocol."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

import attsurf.autodiff as ad
from attsurf.autodiff import AdamState, Tensor, adam_step
from attsurf.cameras import Camera, RefineSchedule, pose_step, tau_at
from attsurf.encoding import FrequencyConfig, HashGridConfig
from attsurf.fields import (
    AttenuationBand,
    FieldConfig,
    SurfaceAttenuationField,
    geometric_init,
)
from attsurf.phantoms import load_dataset, quantize_intensity
from attsurf.rendering import (
    loss_eikonal,
    loss_intensity,
    render_with_samples,
    sphere_bounds,
    stratified_sample_batch,
    total_loss,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NEAS\0"
CHECKPOINT_VERSION = 1


class TrainingAborted(RuntimeError):
    """Raised when the loss goes non-finite; diagnostics are dumped first."""


@dataclass(frozen=True)
class TrainConfig:
    """Every number that affects a training run; serialized to the manifest."""

    encoder: str = "hash"                # "hash" | "frequency"
    materials: int = 1
    iterations: int = 0                  # 0 -> 8000 hash / 20000 frequency
    batch_rays: int = 512
    samples_per_ray: int = 128
    lambda_eikonal: float = 0.1
    lr_weights: float = 1e-3
    lr_weights_final: float = 1e-4       # cosine decay target
    lr_pose: float = 1e-4
    bands: tuple[tuple[float, float], ...] = ((1.5, 3.0),)   # (floor, span) per material
    s_init: float = 20.0
    pose_refine: bool = False
    warm_up: int = 500                   # pose steps start here when refining
    tau_start: float = 2.0
    tau_end: float = 0.0                 # 0 -> number of encoder levels
    seed: int = 0
    eikonal_points: int = 1024
    init_radius: float = 0.5
    inner_init_radius: float = 0.3
    init_iters: int = 400
    grid_levels: int = 8
    grid_base: int = 16
    grid_max: int = 256
    grid_table: int = 2**15
    grid_features: int = 2
    freq_octaves: int = 6
    val_interval: int = 0                # 0 -> validate at the end only
    checkpoint_interval: int = 0         # 0 -> final checkpoint only
    train_on_all_views: bool = False     # pose stage 1 optimizes every view

    def __post_init__(self):
        if self.encoder not in ("hash", "frequency"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.materials not in (1, 2):
            raise ValueError(f"materials must be 1 or 2, got {self.materials}")
        if len(self.bands) != self.materials:
            raise ValueError(f"got {len(self.bands)} band tuple(s) for "
                             f"{self.materials} material(s)")
        if self.batch_rays < 1 or self.samples_per_ray < 2:
            raise ValueError("batch_rays must be >= 1 and samples_per_ray >= 2")

    def resolved(self) -> "TrainConfig":
        iters = self.iterations or (8000 if self.encoder == "hash" else 20000)
        tau_end = self.tau_end or float(
            self.grid_levels if self.encoder == "hash" else self.freq_octaves)
        return replace(self, iterations=iters, tau_end=tau_end)

    def field_config(self) -> FieldConfig:
        bands = tuple(AttenuationBand(floor, span) for floor, span in self.bands)
        return FieldConfig(
            encoder=self.encoder,
            materials=self.materials,
            bands=bands,
            s_init=self.s_init,
            grid=HashGridConfig(levels=self.grid_levels, base_resolution=self.grid_base,
                                max_resolution=self.grid_max, table_size=self.grid_table,
                                features_per_level=self.grid_features),
            frequency=FrequencyConfig(octaves=self.freq_octaves),
        )

    def schedule(self) -> RefineSchedule:
        cfg = self.resolved()
        return RefineSchedule(total_iters=cfg.iterations, tau_end=cfg.tau_end,
                              warm_up=cfg.warm_up, tau_start=cfg.tau_start)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bands"] = [list(b) for b in self.bands]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["bands"] = tuple(tuple(b) for b in d["bands"])
        return cls(**d)


def sphere_preset(**overrides) -> TrainConfig:
    """Desk-scale single-material preset (attenuation band around mu=3)."""
    base = dict(encoder="hash", materials=1, bands=((1.5, 3.0),), init_radius=0.5)
    base.update(overrides)
    return TrainConfig(**base)


def nested_preset(**overrides) -> TrainConfig:
    """Desk-scale two-material preset; bands from thresholds of (0,1,4,9)."""
    base = dict(encoder="hash", materials=2, bands=((0.5, 2.0), (2.5, 6.5)),
                init_radius=0.5, inner_init_radius=0.3)
    base.update(overrides)
    return TrainConfig(**base)


# ---------- dataset ----------


@dataclass
class ProjectionDataset:
    """Loaded projection images with cameras and the split manifest."""

    images: list[np.ndarray]
    cameras: list[Camera]
    manifest: dict
    path: str = ""

    @classmethod
    def load(cls, directory) -> "ProjectionDataset":
        images, cameras, manifest = load_dataset(directory)
        return cls(images=images, cameras=cameras, manifest=manifest,
                   path=str(directory))

    @property
    def train_views(self) -> list[int]:
        return list(self.manifest["train_views"])

    @property
    def val_views(self) -> list[int]:
        return list(self.manifest["val_views"])

    def with_cameras(self, camera_dicts: list[dict]) -> "ProjectionDataset":
        if len(camera_dicts) != len(self.cameras):
            raise ValueError(f"{len(camera_dicts)} cameras for {len(self.cameras)} views")
        return ProjectionDataset(images=self.images,
                                 cameras=[Camera.from_dict(d) for d in camera_dicts],
                                 manifest=self.manifest, path=self.path)

    def pixel_pool(self, views: list[int]):
        """Flattened training pixels: view index, (u, v) centers, target."""
        view_idx, coords, targets = [], [], []
        for v in views:
            image = self.images[v]
            h, w = image.shape
            cols, rows = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
            coords.append(np.stack([cols.reshape(-1), rows.reshape(-1)], axis=1))
            targets.append(image.reshape(-1))
            view_idx.append(np.full(h * w, v, dtype=np.int64))
        return (np.concatenate(view_idx), np.vstack(coords),
                np.concatenate(targets))


def perturb_camera_translations(cameras: list[Camera], magnitude: float,
                                rng: np.random.Generator) -> list[Camera]:
    """Displace each camera position by `magnitude` in a random direction."""
    out = []
    for cam in cameras:
        d = cam.as_dict()
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        d["translation"] = (np.asarray(d["translation"]) + magnitude * direction).tolist()
        out.append(Camera.from_dict(d))
    return out


def mean_translation_error(cameras_a: list[Camera], cameras_b: list[Camera]) -> float:
    errs = [np.linalg.norm(a.translation.values[0] - b.translation.values[0])
            for a, b in zip(cameras_a, cameras_b)]
    return float(np.mean(errs))


# ---------- checkpoints ----------


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def save_checkpoint(path, *, config: TrainConfig, iteration: int,
                    model: SurfaceAttenuationField, cameras: list[Camera],
                    cameras_original: list[dict], adam: AdamState,
                    pose_adam: AdamState, rng: np.random.Generator,
                    permutation: np.ndarray, cursor: int) -> Path:
    """Serialize the full training state; load_checkpoint resumes bitwise."""
    path = Path(path)
    arrays: list[tuple[str, np.ndarray]] = []
    params = model.parameters()
    for name in sorted(params):
        arrays.append((f"param.{name}", params[name].values))
    for name in sorted(adam.m):
        arrays.append((f"adam_m.{name}", adam.m[name]))
        arrays.append((f"adam_v.{name}", adam.v[name]))
    for name in sorted(pose_adam.m):
        arrays.append((f"pose_m.{name}", pose_adam.m[name]))
        arrays.append((f"pose_v.{name}", pose_adam.v[name]))
    arrays.append(("permutation", permutation.astype(np.int64)))

    manifest = []
    payload = bytearray()
    for name, arr in arrays:
        shape = list(arr.shape)    # before ascontiguousarray promotes 0-d to 1-d
        arr = np.ascontiguousarray(arr)
        code = "<i8" if arr.dtype.kind == "i" else "<f8"
        raw = arr.astype(code).tobytes()
        manifest.append({"name": name, "shape": shape, "dtype": code,
                         "nbytes": len(raw)})
        payload.extend(raw)

    header = {
        "config": config.to_dict(),
        "iteration": iteration,
        "rng_state": rng.bit_generator.state,
        "cursor": cursor,
        "adam_t": adam.t,
        "pose_adam_t": pose_adam.t,
        "cameras_original": cameras_original,
        "cameras_current": [cam.as_dict() for cam in cameras],
        "arrays": manifest,
    }
    blob = json.dumps(header).encode("utf-8")
    out = bytearray()
    out.extend(CHECKPOINT_MAGIC)
    out.append(CHECKPOINT_VERSION)
    out.extend(len(blob).to_bytes(4, "little"))
    out.extend(blob)
    out.extend(payload)
    _atomic_write_bytes(path, bytes(out))
    return path


@dataclass
class LoadedCheckpoint:
    config: TrainConfig
    iteration: int
    rng_state: dict
    cursor: int
    cameras_original: list[dict]
    cameras: list[Camera]
    params: dict[str, np.ndarray]
    adam: AdamState
    pose_adam: AdamState
    permutation: np.ndarray

    def build_model(self) -> SurfaceAttenuationField:
        model = SurfaceAttenuationField(self.config.field_config(),
                                        np.random.default_rng(0))
        tensors = model.parameters()
        if set(tensors) != set(self.params):
            raise ValueError("checkpoint parameters do not match the model layout")
        for name, tensor in tensors.items():
            saved = self.params[name]
            if saved.shape != tensor.values.shape:
                raise ValueError(f"checkpoint array {name!r} has shape {saved.shape}, "
                                 f"expected {tensor.values.shape}")
            tensor.values[...] = saved
        return model


def load_checkpoint(path) -> LoadedCheckpoint:
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    if raw[5] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {raw[5]}")
    header_len = int.from_bytes(raw[6:10], "little")
    header = json.loads(raw[10:10 + header_len].decode("utf-8"))
    offset = 10 + header_len

    blobs: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        chunk = raw[offset:offset + entry["nbytes"]]
        offset += entry["nbytes"]
        blobs[entry["name"]] = np.frombuffer(chunk, dtype=entry["dtype"]).reshape(
            entry["shape"]).copy()

    params = {k[len("param."):]: v for k, v in blobs.items() if k.startswith("param.")}
    adam = AdamState(t=header["adam_t"])
    pose_adam = AdamState(t=header["pose_adam_t"])
    for k, v in blobs.items():
        if k.startswith("adam_m."):
            adam.m[k[len("adam_m."):]] = v
        elif k.startswith("adam_v."):
            adam.v[k[len("adam_v."):]] = v
        elif k.startswith("pose_m."):
            pose_adam.m[k[len("pose_m."):]] = v
        elif k.startswith("pose_v."):
            pose_adam.v[k[len("pose_v."):]] = v

    return LoadedCheckpoint(
        config=TrainConfig.from_dict(header["config"]),
        iteration=header["iteration"],
        rng_state=header["rng_state"],
        cursor=header["cursor"],
        cameras_original=header["cameras_original"],
        cameras=[Camera.from_dict(d) for d in header["cameras_current"]],
        params=params,
        adam=adam,
        pose_adam=pose_adam,
        permutation=blobs["permutation"],
    )


# ---------- rendering helpers ----------


def render_view(model: SurfaceAttenuationField, camera: Camera, *,
                samples: int = 128, tau: float = math.inf,
                rng: np.random.Generator | None = None,
                chunk: int = 4096) -> np.ndarray:
    """Render a full view as an (H, W) transmittance image (no gradients)."""
    from attsurf.rendering import render_rays

    rng = np.random.default_rng(0) if rng is None else rng
    h, w = camera.height, camera.width
    cols, rows = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    pixels = np.stack([cols.reshape(-1), rows.reshape(-1)], axis=1)
    out = np.empty(len(pixels))
    with ad.no_grad():
        for start in range(0, len(pixels), chunk):
            block = pixels[start:start + chunk]
            origins, directions = camera.camera_rays(block)
            result = render_rays(lambda p: model.query_attenuation(p, tau),
                                 origins, directions, samples, rng)
            out[start:start + len(block)] = result.intensity.values[:, 0]
    return out.reshape(h, w)


def evaluate_views(model: SurfaceAttenuationField, dataset: ProjectionDataset,
                   cameras: list[Camera], views: list[int], *,
                   samples: int = 128, seed: int = 0) -> dict[int, float]:
    """Held-out PSNR per view, rendered with a fixed evaluation seed."""
    from attsurf.metrics import psnr

    scores = {}
    for v in views:
        rendered = render_view(model, cameras[v], samples=samples,
                               rng=np.random.default_rng([seed, v]))
        scores[v] = psnr(rendered, dataset.images[v])
    return scores


# ---------- the training loop ----------


@dataclass
class TrainResult:
    run_dir: Path
    checkpoint_path: Path
    model: SurfaceAttenuationField
    cameras: list[Camera]
    cameras_original: list[dict]
    config: TrainConfig
    loss_rows: list[tuple]
    val_psnr: dict[int, float] = field(default_factory=dict)


def _cosine_lr(config: TrainConfig, iteration: int) -> float:
    span = config.lr_weights - config.lr_weights_final
    progress = iteration / max(config.iterations - 1, 1)
    return config.lr_weights_final + 0.5 * span * (1.0 + math.cos(math.pi * progress))


def _dump_abort(run_dir: Path, iteration: int, views, pixels, terms, tau, lr):
    info = {
        "iteration": iteration,
        "loss_intensity": float(terms.intensity.values),
        "loss_eikonal": float(terms.eikonal.values),
        "loss_total": float(terms.total.values),
        "tau": tau if math.isfinite(tau) else "inf",
        "lr": lr,
        "ray_views": np.asarray(views).tolist(),
        "ray_pixels": np.asarray(pixels).tolist(),
    }
    (run_dir / "abort_diagnostics.json").write_text(json.dumps(info, indent=1))


def train(dataset: ProjectionDataset, config: TrainConfig, run_dir,
          resume_from=None) -> TrainResult:
    """Optimize a field (and optionally poses) against projection images.

    Writes config.json, loss.csv, checkpoints, validation renders, and (when
    pose refinement is on) poses_refined.json into run_dir.  Resuming from a
    checkpoint continues the iteration/RNG/optimizer state bitwise.
    """
    config = config.resolved()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    views = sorted(set(dataset.train_views)
                   | (set(dataset.val_views) if config.train_on_all_views else set()))
    pool_view, pool_uv, pool_target = dataset.pixel_pool(views)
    n_pool = len(pool_view)

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state.config != config:
            raise ValueError("resume config differs from checkpoint config")
        model = state.build_model()
        cameras = state.cameras
        cameras_original = state.cameras_original
        adam, pose_adam = state.adam, state.pose_adam
        rng = np.random.default_rng(config.seed)
        rng.bit_generator.state = state.rng_state
        permutation, cursor = state.permutation, state.cursor
        start_iter = state.iteration
    else:
        rng = np.random.default_rng(config.seed)
        model = SurfaceAttenuationField(config.field_config(), rng)
        inner = config.inner_init_radius if config.materials == 2 else None
        mae = geometric_init(model, config.init_radius, rng, inner_radius=inner,
                             iters=config.init_iters)
        log.info("geometric init: fit error %.4f", mae)
        cameras = [Camera.from_dict(cam.as_dict()) for cam in dataset.cameras]
        cameras_original = [cam.as_dict() for cam in dataset.cameras]
        adam, pose_adam = AdamState(), AdamState()
        permutation = rng.permutation(n_pool)
        cursor = 0
        start_iter = 0

    manifest = {"config": config.to_dict(), "dataset": dataset.path,
                "views_used": views, "resumed_from": str(resume_from) if resume_from else None}
    (run_dir / "config.json").write_text(json.dumps(manifest, indent=1))

    schedule = config.schedule()
    params = model.parameters()
    loss_path = run_dir / "loss.csv"
    loss_file = loss_path.open("a" if resume_from and loss_path.exists() else "w")
    if loss_file.tell() == 0:
        loss_file.write("iter,L_int,L_reg,total,tau\n")
    loss_rows: list[tuple] = []
    val_psnr: dict[int, float] = {}

    def save_state(path):
        return save_checkpoint(path, config=config, iteration=iteration + 1,
                               model=model, cameras=cameras,
                               cameras_original=cameras_original, adam=adam,
                               pose_adam=pose_adam, rng=rng,
                               permutation=permutation, cursor=cursor)

    def run_validation(iteration):
        from attsurf.metrics import psnr

        nonlocal val_psnr
        if not dataset.val_views:
            return
        val_dir = run_dir / "val"
        val_dir.mkdir(exist_ok=True)
        for v in dataset.val_views:
            image = render_view(model, cameras[v], samples=config.samples_per_ray,
                                rng=np.random.default_rng([config.seed, v]))
            val_psnr[v] = psnr(image, dataset.images[v])
            Image.fromarray(quantize_intensity(image)).save(
                val_dir / f"view_{v:04d}.png")
        line = " ".join(f"view {v}: {p:.2f} dB" for v, p in val_psnr.items())
        log.info("validation at iter %d: %s", iteration + 1, line)

    for iteration in range(start_iter, config.iterations):
        lr = _cosine_lr(config, iteration)
        tau = tau_at(iteration, schedule) if config.pose_refine else math.inf

        if cursor >= n_pool:
            permutation = rng.permutation(n_pool)
            cursor = 0
        batch = permutation[cursor:cursor + config.batch_rays]
        cursor += len(batch)

        b_view = pool_view[batch]
        b_uv = pool_uv[batch]
        b_target = pool_target[batch]
        order = np.argsort(b_view, kind="stable")
        b_view, b_uv, b_target = b_view[order], b_uv[order], b_target[order]

        for t in params.values():
            t.zero_grad()

        parts_o, parts_d = [], []
        present = np.unique(b_view)
        if config.pose_refine:
            for cam in cameras:    # stale grads would leak into pose_step
                cam.translation.zero_grad()
                cam.principal.zero_grad()
            for v in present:
                mask = b_view == v
                o, d = cameras[v].camera_rays(b_uv[mask])
                parts_o.append(o)
                parts_d.append(d)
        else:
            with ad.no_grad():
                for v in present:
                    mask = b_view == v
                    o, d = cameras[v].camera_rays(b_uv[mask])
                    parts_o.append(o)
                    parts_d.append(d)
        origins = parts_o[0] if len(parts_o) == 1 else ad.concat_rows(parts_o)
        directions = parts_d[0] if len(parts_d) == 1 else ad.concat_rows(parts_d)

        near, far, hit = sphere_bounds(origins.values, directions.values)
        hit_idx = np.nonzero(hit)[0]
        t_samples, deltas = stratified_sample_batch(near[hit_idx], far[hit_idx],
                                                    config.samples_per_ray, rng)
        result = render_with_samples(lambda p: model.query_attenuation(p, tau),
                                     origins, directions, hit_idx, t_samples,
                                     deltas, len(batch))
        l_int = loss_intensity(result.intensity, Tensor(b_target.reshape(-1, 1)))

        probe_points = rng.uniform(-0.995, 0.995, (config.eikonal_points, 3))
        l_eik = loss_eikonal(model.sdf_spatial_gradients(probe_points, tau))
        terms = total_loss(l_int, l_eik, config.lambda_eikonal,
                           len(batch), config.samples_per_ray)

        total_value = float(terms.total.values)
        if not math.isfinite(total_value):
            _dump_abort(run_dir, iteration, b_view, b_uv, terms, tau, lr)
            loss_file.close()
            raise TrainingAborted(
                f"non-finite loss at iteration {iteration}; "
                f"diagnostics in {run_dir / 'abort_diagnostics.json'}")

        terms.total.backward()
        adam_step(params, {k: t.grad for k, t in params.items()}, adam, lr)
        if config.pose_refine:
            pose_step(cameras, iteration, schedule, pose_adam, config.lr_pose)

        row = (iteration, float(l_int.values), float(l_eik.values), total_value,
               tau if math.isfinite(tau) else math.inf)
        loss_rows.append(row)
        loss_file.write(f"{row[0]},{row[1]:.17g},{row[2]:.17g},{row[3]:.17g},"
                        f"{row[4]:.17g}\n")
        if (iteration + 1) % 100 == 0:
            loss_file.flush()
            log.info("iter %d: total %.5f (intensity %.5f, eikonal %.5f), tau %.2f",
                     iteration + 1, row[3], row[1], row[2], row[4])

        if config.checkpoint_interval and (iteration + 1) % config.checkpoint_interval == 0:
            save_state(run_dir / f"ckpt_{iteration + 1:06d}.bin")
        if config.val_interval and (iteration + 1) % config.val_interval == 0:
            run_validation(iteration)

    iteration = config.iterations - 1
    checkpoint_path = save_state(run_dir / f"ckpt_{config.iterations:06d}.bin")
    if not (config.val_interval and config.iterations % config.val_interval == 0):
        run_validation(iteration)
    loss_file.close()

    if config.pose_refine:
        refined = []
        for i, cam in enumerate(cameras):
            refined.append({
                "view": i,
                "translation": cam.translation.values[0].tolist(),
                "principal": cam.principal.values[0].tolist(),
                "translation_original": cameras_original[i]["translation"],
                "principal_original": [cameras_original[i]["cx"],
                                       cameras_original[i]["cy"]],
            })
        (run_dir / "poses_refined.json").write_text(
            json.dumps({"views": refined}, indent=1))

    return TrainResult(run_dir=run_dir, checkpoint_path=checkpoint_path,
                       model=model, cameras=cameras,
                       cameras_original=cameras_original, config=config,
                       loss_rows=loss_rows, val_psnr=val_psnr)


# ---------- two-stage pose protocol ----------


@dataclass
class TwoStageResult:
    stage1: TrainResult
    stage2: TrainResult


def run_two_stage(dataset: ProjectionDataset, config: TrainConfig,
                  run_dir) -> TwoStageResult:
    """Pose-refinement protocol: refine poses jointly over every view, then
    retrain from scratch with the refined poses frozen on training views."""
    run_dir = Path(run_dir)
    stage1_cfg = replace(config, pose_refine=True, train_on_all_views=True)
    stage1 = train(dataset, stage1_cfg, run_dir / "stage1")

    refined = []
    for cam in stage1.cameras:
        d = cam.as_dict()
        refined.append(d)
    stage2_dataset = dataset.with_cameras(refined)
    stage2_cfg = replace(config, pose_refine=False, train_on_all_views=False)
    stage2 = train(stage2_dataset, stage2_cfg, run_dir / "stage2")
    return TwoStageResult(stage1=stage1, stage2=stage2)
