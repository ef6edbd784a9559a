"""Analytic ground-truth phantoms and an exact cone-beam projector.

Phantoms are unions of primitives (spheres, boxes, capsules) with exact
signed-distance functions, each tagged with an attenuation coefficient and a
material label: "outer" shapes sit in air, "inner" shapes must be nested
inside outer ones and displace their material.  Projection uses closed-form
ray-primitive intervals, so path lengths (and therefore pixel intensities)
are exact up to float rounding rather than quadrature: the projector is the
oracle the learned renderer is judged against.

Datasets are written as 16-bit grayscale PNGs (65535 = unattenuated beam)
next to a cameras.json and a manifest.json describing splits, materials, and
scene scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .cameras import Camera

SCENE_SCALE_MM = 100.0  # 1 scene unit = 100 mm; desk phantoms fit the unit sphere


# ---------- primitives ----------


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"sphere radius must be positive, got {self.radius}")

    def sdf(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius

    def intervals(self, origins: np.ndarray, dirs: np.ndarray):
        oc = origins - np.asarray(self.center)
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - c
        hit = disc > 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        return -b - root, -b + root, hit

    def describe(self) -> dict:
        return {"kind": "sphere", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]

    def __post_init__(self):
        if min(self.half_extents) <= 0:
            raise ValueError(f"box half extents must be positive, got {self.half_extents}")

    def sdf(self, x: np.ndarray) -> np.ndarray:
        q = np.abs(x - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def intervals(self, origins: np.ndarray, dirs: np.ndarray):
        lo = np.asarray(self.center) - np.asarray(self.half_extents)
        hi = np.asarray(self.center) + np.asarray(self.half_extents)
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo - origins) / dirs
            tb = (hi - origins) / dirs
        tmin = np.minimum(ta, tb)
        tmax = np.maximum(ta, tb)
        parallel = np.abs(dirs) < 1e-300
        inside_slab = (origins >= lo) & (origins <= hi)
        tmin = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), tmin)
        tmax = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), tmax)
        t0 = tmin.max(axis=1)
        t1 = tmax.min(axis=1)
        return t0, t1, t1 > t0

    def describe(self) -> dict:
        return {"kind": "box", "center": list(self.center),
                "half_extents": list(self.half_extents)}


@dataclass(frozen=True)
class Capsule:
    a: tuple[float, float, float]
    b: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"capsule radius must be positive, got {self.radius}")
        if np.linalg.norm(np.subtract(self.b, self.a)) < 1e-12:
            raise ValueError("capsule endpoints coincide; use a sphere instead")

    def sdf(self, x: np.ndarray) -> np.ndarray:
        a = np.asarray(self.a)
        ba = np.asarray(self.b) - a
        pa = x - a
        h = np.clip(np.einsum("...j,j->...", pa, ba) / (ba @ ba), 0.0, 1.0)
        return np.linalg.norm(pa - h[..., None] * ba, axis=-1) - self.radius

    def intervals(self, origins: np.ndarray, dirs: np.ndarray):
        # convex body: the line segment inside it is covered by the finite
        # cylinder plus the two end balls, so entry/exit are component extremes
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        axis = b - a
        length = float(np.linalg.norm(axis))
        u = axis / length
        oa = origins - a
        yd = dirs @ u
        y0 = oa @ u
        od = dirs - yd[:, None] * u
        oo = oa - y0[:, None] * u
        qa = np.einsum("ij,ij->i", od, od)
        qb = np.einsum("ij,ij->i", od, oo)
        qc = np.einsum("ij,ij->i", oo, oo) - self.radius**2
        axial = qa < 1e-300
        disc = qb * qb - np.where(axial, 0.0, qa) * qc
        cyl_hit = ~axial & (disc > 0)
        root = np.sqrt(np.where(cyl_hit, disc, 0.0))
        safe_qa = np.where(cyl_hit, qa, 1.0)
        c0 = np.where(cyl_hit, (-qb - root) / safe_qa, np.inf)
        c1 = np.where(cyl_hit, (-qb + root) / safe_qa, -np.inf)
        # rays parallel to the axis pierce the infinite cylinder iff qc < 0
        c0 = np.where(axial & (qc < 0), -np.inf, c0)
        c1 = np.where(axial & (qc < 0), np.inf, c1)
        # clip the cylinder interval to axial coordinate y in [0, length]
        with np.errstate(divide="ignore", invalid="ignore"):
            s0 = (0.0 - y0) / yd
            s1 = (length - y0) / yd
        slab_lo = np.minimum(s0, s1)
        slab_hi = np.maximum(s0, s1)
        flat = np.abs(yd) < 1e-300
        inside_band = (y0 >= 0.0) & (y0 <= length)
        slab_lo = np.where(flat, np.where(inside_band, -np.inf, np.inf), slab_lo)
        slab_hi = np.where(flat, np.where(inside_band, np.inf, -np.inf), slab_hi)
        c0 = np.maximum(c0, slab_lo)
        c1 = np.minimum(c1, slab_hi)
        body_hit = c1 > c0

        pieces = [(c0, c1, body_hit),
                  Sphere(tuple(a), self.radius).intervals(origins, dirs),
                  Sphere(tuple(b), self.radius).intervals(origins, dirs)]
        entry = np.full(origins.shape[0], np.inf)
        exit_ = np.full(origins.shape[0], -np.inf)
        hit = np.zeros(origins.shape[0], dtype=bool)
        for p0, p1, ph in pieces:
            entry = np.where(ph, np.minimum(entry, p0), entry)
            exit_ = np.where(ph, np.maximum(exit_, p1), exit_)
            hit |= ph
        return entry, exit_, hit

    def describe(self) -> dict:
        return {"kind": "capsule", "a": list(self.a), "b": list(self.b),
                "radius": self.radius}


# ---------- composite phantom ----------


@dataclass(frozen=True)
class PhantomPart:
    shape: Sphere | Box | Capsule
    mu: float
    label: str = "outer"

    def __post_init__(self):
        if self.label not in ("outer", "inner"):
            raise ValueError(f"part label must be 'outer' or 'inner', got {self.label!r}")
        if not math.isfinite(self.mu) or self.mu <= 0:
            raise ValueError(f"attenuation must be positive and finite, got {self.mu}")


class AnalyticPhantom:
    """Ordered union of labeled primitives with exact geometry.

    Inner parts must be nested inside the outer union; nesting is validated by
    dense sampling at construction time.
    """

    def __init__(self, parts: list[PhantomPart], validation_samples: int = 20000):
        if not parts:
            raise ValueError("phantom needs at least one part")
        self.parts = list(parts)
        self.outer = [p for p in self.parts if p.label == "outer"]
        self.inner = [p for p in self.parts if p.label == "inner"]
        if not self.outer:
            raise ValueError("phantom needs at least one outer part")
        if self.inner:
            self._validate_nesting(validation_samples)

    def _validate_nesting(self, n: int) -> None:
        rng = np.random.default_rng(0)
        x = rng.uniform(-1.0, 1.0, size=(n, 3))
        inner_count = np.zeros(n, dtype=np.int64)
        for p in self.inner:
            inner_count += p.shape.sdf(x) < 0
        if (inner_count > 1).any():
            raise ValueError("inner parts overlap each other; path lengths would double-count")
        in_outer = np.zeros(n, dtype=bool)
        for p in self.outer:
            in_outer |= p.shape.sdf(x) < 0
        stray = (inner_count > 0) & ~in_outer
        if stray.any():
            frac = float(stray.mean())
            raise ValueError(
                f"inner parts poke outside the outer union on {frac:.1%} of samples")

    # -- signed distances ----------------------------------------------------

    def sdf(self, x: np.ndarray, surface: str = "outer") -> np.ndarray:
        """Composite signed distance: 'outer' is material-vs-air (union of all
        parts); 'inner' is the inner-vs-outer boundary."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if surface == "outer":
            parts = self.parts
        elif surface == "inner":
            if not self.inner:
                raise ValueError("phantom has no inner surface")
            parts = self.inner
        else:
            raise ValueError(f"surface must be 'outer' or 'inner', got {surface!r}")
        return np.min(np.stack([p.shape.sdf(x) for p in parts], axis=0), axis=0)

    # -- exact attenuation ------------------------------------------------------

    def attenuation(self, points: np.ndarray) -> np.ndarray:
        """Pointwise mu (M, 1): inner material displaces outer material."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        mu = np.zeros(points.shape[0])
        in_inner = np.zeros(points.shape[0], dtype=bool)
        for p in self.inner:
            inside = p.shape.sdf(points) < 0
            mu = np.where(inside & ~in_inner, p.mu, mu)
            in_inner |= inside
        for p in self.outer:
            inside = p.shape.sdf(points) < 0
            mu = np.where(inside & ~in_inner, p.mu, mu)
            in_inner |= inside
        return mu[:, None]

    def optical_depth(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Exact integral of mu along each forward ray (t > 0)."""
        origins = np.atleast_2d(origins)
        dirs = np.atleast_2d(dirs)
        inner_iv = []
        for p in self.inner:
            t0, t1, hit = p.shape.intervals(origins, dirs)
            t0 = np.where(hit, np.maximum(t0, 0.0), 0.0)
            t1 = np.where(hit, np.maximum(t1, 0.0), 0.0)
            inner_iv.append((t0, t1))
        depth = np.zeros(origins.shape[0])
        for p, (t0, t1) in zip(self.inner, inner_iv):
            depth += p.mu * (t1 - t0)
        for p in self.outer:
            t0, t1, hit = p.shape.intervals(origins, dirs)
            t0 = np.where(hit, np.maximum(t0, 0.0), 0.0)
            t1 = np.where(hit, np.maximum(t1, 0.0), 0.0)
            length = t1 - t0
            for j0, j1 in inner_iv:
                length -= np.maximum(np.minimum(t1, j1) - np.maximum(t0, j0), 0.0)
            depth += p.mu * np.maximum(length, 0.0)
        return depth

    def describe(self) -> dict:
        return {"parts": [{**p.shape.describe(), "mu": p.mu, "label": p.label}
                          for p in self.parts]}


def phantom_sdf(phantom: AnalyticPhantom, x, surface: str = "outer") -> np.ndarray:
    return phantom.sdf(x, surface)


def sphere_phantom(radius: float = 0.5, mu: float = 1.0) -> AnalyticPhantom:
    return AnalyticPhantom([PhantomPart(Sphere((0.0, 0.0, 0.0), radius), mu=mu)])


def nested_spheres_phantom(r_outer: float = 0.5, mu_outer: float = 1.0,
                           r_inner: float = 0.25, mu_inner: float = 4.0) -> AnalyticPhantom:
    return AnalyticPhantom([
        PhantomPart(Sphere((0.0, 0.0, 0.0), r_outer), mu=mu_outer, label="outer"),
        PhantomPart(Sphere((0.0, 0.0, 0.0), r_inner), mu=mu_inner, label="inner"),
    ])


# ---------- projector ----------


def project(phantom: AnalyticPhantom, camera: Camera, supersample: int = 1,
            noise_sigma: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Exact transmittance image (H, W) in [0, 1]; 1 means the ray missed.

    supersample > 1 averages an s x s sub-pixel ray grid per pixel.  Optional
    additive Gaussian noise is applied after averaging and clipped to [0, 1].
    """
    if supersample < 1:
        raise ValueError(f"supersample must be >= 1, got {supersample}")
    h, w, s = camera.height, camera.width, supersample
    offsets = (np.arange(s) + 0.5) / s
    cols = (np.arange(w)[:, None] + offsets[None, :]).reshape(-1)
    rows = (np.arange(h)[:, None] + offsets[None, :]).reshape(-1)
    u, v = np.meshgrid(cols, rows)
    x = (u.reshape(-1) - camera.cx) / camera.fx
    y = (v.reshape(-1) - camera.cy) / camera.fy
    cam_dirs = np.stack([x, y, np.ones_like(x)], axis=1)
    cam_dirs /= np.linalg.norm(cam_dirs, axis=1, keepdims=True)
    world_dirs = cam_dirs @ camera.rotation.T
    origins = np.broadcast_to(camera.center, world_dirs.shape)
    depth = phantom.optical_depth(origins, world_dirs)
    image = np.exp(-depth).reshape(h * s, w * s)
    if s > 1:
        image = image.reshape(h, s, w, s).mean(axis=(1, 3))
    if noise_sigma > 0.0:
        rng = rng or np.random.default_rng(0)
        image = np.clip(image + rng.normal(0.0, noise_sigma, size=image.shape), 0.0, 1.0)
    return image


# ---------- acquisition trajectory ----------


def make_trajectory(views: int, step_deg: float, d_source: float, d_detector: float,
                    image_size: int, focal: float) -> list[Camera]:
    """Cameras on a circle in the x-z plane, optical axes through the origin.

    The source orbits at d_source from the object center; d_detector only
    fixes the (virtual) detector plane and is recorded in dataset metadata,
    the focal length is given directly in pixels.
    """
    if views < 1:
        raise ValueError(f"need at least one view, got {views}")
    if views * step_deg > 360.0 + 1e-9:
        raise ValueError(
            f"{views} views at {step_deg} degrees sweep past a full circle")
    del d_detector  # geometry is fully specified by focal in pixels
    cameras = []
    half = image_size / 2.0
    for k in range(views):
        angle = math.radians(k * step_deg)
        c, s = math.cos(angle), math.sin(angle)
        rotation = np.array([[c, 0.0, s],
                             [0.0, 1.0, 0.0],
                             [-s, 0.0, c]])
        translation = rotation @ np.array([0.0, 0.0, -d_source])
        cameras.append(Camera(fx=focal, fy=focal, cx=half, cy=half,
                              width=image_size, height=image_size,
                              rotation=rotation, translation=translation))
    return cameras


# ---------- dataset I/O ----------


def quantize_intensity(image: np.ndarray) -> np.ndarray:
    """Float transmittance in [0, 1] to the stored 16-bit scale (65535 = I0)."""
    return np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)


_CAMERA_FIELDS = ("fx", "fy", "cx", "cy", "width", "height", "rotation", "translation")


def write_dataset(out_dir, images: list[np.ndarray], cameras: list[Camera],
                  train_views: list[int], val_views: list[int],
                  phantom: AnalyticPhantom | dict, noise_sigma: float = 0.0) -> Path:
    """Write images, camera geometry, and the manifest; returns the directory."""
    if len(images) != len(cameras):
        raise ValueError(f"{len(images)} images for {len(cameras)} cameras")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for i, image in enumerate(images):
        Image.fromarray(quantize_intensity(image)).save(
            out_dir / "images" / f"view_{i:04d}.png")
    views = []
    for cam in cameras:
        entry = cam.as_dict()
        entry["units"] = "scene"
        views.append(entry)
    (out_dir / "cameras.json").write_text(json.dumps({"views": views}, indent=1))
    description = phantom.describe() if isinstance(phantom, AnalyticPhantom) else dict(phantom)
    mu_table = {f"part{i}": part["mu"]
                for i, part in enumerate(description.get("parts", []))}
    manifest = {
        "image_count": len(images),
        "train_views": list(map(int, train_views)),
        "val_views": list(map(int, val_views)),
        "phantom": description,
        "mu": mu_table,
        "scene_scale_mm": SCENE_SCALE_MM,
        "noise_sigma": noise_sigma,
        "white_level": 65535,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out_dir


def _load_camera(entry: dict, index: int) -> Camera:
    for name in _CAMERA_FIELDS:
        if name not in entry:
            raise ValueError(f"cameras.json: view {index} missing field {name!r}")
    rotation = np.array(entry["rotation"], dtype=np.float64)
    if rotation.size != 9:
        raise ValueError(f"cameras.json: view {index} field 'rotation' needs 9 values")
    return Camera.from_dict(entry)


def load_dataset(path) -> tuple[list[np.ndarray], list[Camera], dict]:
    """Read a dataset directory back: float images in [0, 1], cameras, manifest."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    for field in ("image_count", "train_views", "val_views"):
        if field not in manifest:
            raise ValueError(f"manifest.json: missing field {field!r}")
    data = json.loads((path / "cameras.json").read_text())
    if "views" not in data:
        raise ValueError("cameras.json: missing field 'views'")
    cameras = [_load_camera(entry, i) for i, entry in enumerate(data["views"])]
    images = []
    for i in range(manifest["image_count"]):
        raw = np.asarray(Image.open(path / "images" / f"view_{i:04d}.png"))
        images.append(raw.astype(np.float64) / 65535.0)
    if len(images) != len(cameras):
        raise ValueError(
            f"dataset lists {len(cameras)} cameras but has {len(images)} images")
    return images, cameras, manifest
