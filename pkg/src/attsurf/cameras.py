"""Pinhole source-detector geometry and pose refinement machinery.

The source sits at the camera center; a pixel's ray is the normalized
back-projection through the intrinsics followed by the camera-to-world
rotation.  Only the translations and the principal points are trainable:
rotations and focal lengths stay frozen.  There is no lens distortion.

Pose gradients arrive through the rendered sample positions o + t * r, with
the stratified t-values treated as constants of the current step, and are
applied by a dedicated optimizer that stays inert during a warm-up window.
The octave-mask parameter tau follows a piecewise-linear schedule: it starts
at 2, reaches its final value halfway through training, then plateaus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rendering import ROI_RADIUS, Ray, sphere_bounds

__all__ = [
    "Camera",
    "RefineSchedule",
    "generate_ray",
    "pose_step",
    "share_principal_points",
    "tau_at",
]


class Camera:
    """One view's intrinsics and pose.

    translation is the source position in world coordinates; rotation maps
    camera coordinates to world coordinates.  translation and principal point
    live on the tape as trainable tensors, everything else is fixed.
    """

    def __init__(self, fx: float, fy: float, cx: float, cy: float,
                 width: int, height: int, rotation: np.ndarray, translation: np.ndarray):
        if fx <= 0 or fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({fx}, {fy})")
        if width <= 0 or height <= 0:
            raise ValueError(f"image size must be positive, got ({width}, {height})")
        rotation = np.array(rotation, dtype=np.float64)
        if rotation.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rotation.shape}")
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal within 1e-9")
        if not abs(np.linalg.det(rotation) - 1.0) < 1e-9:
            raise ValueError("rotation must be proper (determinant +1)")
        rotation.setflags(write=False)
        self.fx = float(fx)
        self.fy = float(fy)
        self.width = int(width)
        self.height = int(height)
        self.rotation = rotation
        self.translation = Tensor(np.asarray(translation, dtype=np.float64).reshape(1, 3),
                                  requires_grad=True)
        self.principal = Tensor(np.array([[cx, cy]], dtype=np.float64), requires_grad=True)

    # -- plain accessors ------------------------------------------------------

    @property
    def cx(self) -> float:
        return float(self.principal.values[0, 0])

    @property
    def cy(self) -> float:
        return float(self.principal.values[0, 1])

    @property
    def center(self) -> np.ndarray:
        return self.translation.values[0].copy()

    def pose_parameters(self) -> dict[str, Tensor]:
        return {"translation": self.translation, "principal": self.principal}

    # -- geometry --------------------------------------------------------------

    def _check_bounds(self, pixels: np.ndarray) -> None:
        u, v = pixels[:, 0], pixels[:, 1]
        bad = (u < 0) | (u > self.width) | (v < 0) | (v > self.height)
        if bad.any():
            culprit = pixels[np.argmax(bad)]
            raise ValueError(
                f"pixel {tuple(culprit)} outside {self.width}x{self.height} image bounds")

    def camera_rays(self, pixels: np.ndarray) -> tuple[Tensor, Tensor]:
        """Differentiable ray bundle for continuous pixel coordinates (P, 2).

        Callers pass pixel centers as (col + 0.5, row + 0.5).  Returns origins
        and unit directions, both (P, 3), as functions of the trainable
        translation and principal point.
        """
        pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        self._check_bounds(pixels)
        count = pixels.shape[0]
        u = Tensor(pixels[:, 0:1])
        v = Tensor(pixels[:, 1:2])
        x = ad.mul(ad.sub(u, ad.slice_cols(self.principal, 0, 1)), 1.0 / self.fx)
        y = ad.mul(ad.sub(v, ad.slice_cols(self.principal, 1, 2)), 1.0 / self.fy)
        cam = ad.concat_cols([x, y, Tensor(np.ones((count, 1)))])
        norm = ad.sqrt(ad.tensor_sum(ad.square(cam), axis=1, keepdims=True))
        directions = ad.matmul(ad.div(cam, norm), Tensor(self.rotation.T))
        origins = ad.gather(self.translation, np.zeros(count, dtype=np.int64))
        return origins, directions

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points (P, 3) to continuous pixel coordinates (P, 2).

        Points at or behind the source (camera z <= 0) cannot be projected.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        cam = (points - self.center) @ self.rotation
        z = cam[:, 2]
        if (z <= 0).any():
            raise ValueError("cannot project points at or behind the source plane")
        return np.stack([self.fx * cam[:, 0] / z + self.cx,
                         self.fy * cam[:, 1] / z + self.cy], axis=1)

    # -- serialization ----------------------------------------------------------

    def as_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "rotation": [float(x) for x in self.rotation.reshape(-1)],
            "translation": [float(x) for x in self.translation.values[0]],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Camera":
        rotation = np.array(data["rotation"], dtype=np.float64).reshape(3, 3)
        return cls(fx=data["fx"], fy=data["fy"], cx=data["cx"], cy=data["cy"],
                   width=data["width"], height=data["height"], rotation=rotation,
                   translation=np.array(data["translation"], dtype=np.float64))


def generate_ray(camera: Camera, u: float, v: float, radius: float = ROI_RADIUS) -> Ray:
    """Single ray through a continuous pixel coordinate (numpy convenience).

    Sampling bounds come from the region-of-interest sphere when the ray hits
    it; otherwise a nominal full segment in front of the source is used.
    """
    with ad.no_grad():
        origins, directions = camera.camera_rays(np.array([[u, v]]))
    o, d = origins.values[0], directions.values[0]
    near, far, hit = sphere_bounds(o[None, :], d[None, :], radius)
    if hit[0]:
        return Ray(o, d, float(near[0]), float(far[0]))
    return Ray(o, d, 0.0, float(np.linalg.norm(o) + 2.0 * radius))


# ---------- refinement schedule ----------


@dataclass(frozen=True)
class RefineSchedule:
    """Warm-up window plus the coarse-to-fine tau ramp."""

    total_iters: int
    tau_end: float
    warm_up: int = 500
    tau_start: float = 2.0

    def __post_init__(self):
        if self.total_iters <= 0:
            raise ValueError(f"total_iters must be positive, got {self.total_iters}")
        if self.tau_end < self.tau_start:
            raise ValueError(
                f"tau_end {self.tau_end} below tau_start {self.tau_start}")
        if self.warm_up < 0:
            raise ValueError(f"warm_up must be non-negative, got {self.warm_up}")


def tau_at(iteration: int, schedule: RefineSchedule) -> float:
    """Linear ramp from tau_start to tau_end over the first half, then flat."""
    if iteration < 0:
        raise ValueError(f"iteration must be non-negative, got {iteration}")
    half = schedule.total_iters / 2.0
    if iteration >= half:
        return schedule.tau_end
    return schedule.tau_start + (schedule.tau_end - schedule.tau_start) * iteration / half


# ---------- pose optimizer ----------


def share_principal_points(cameras: list[Camera]) -> None:
    """Bind every camera to the first camera's principal-point tensor."""
    for cam in cameras[1:]:
        cam.principal = cameras[0].principal


def pose_step(cameras: list[Camera], iteration: int, schedule: RefineSchedule,
              state: ad.AdamState, lr: float = 1e-4) -> bool:
    """Apply one pose update from the gradients sitting on the pose tensors.

    Inert during warm-up (iteration < schedule.warm_up): cameras stay bitwise
    unchanged and the optimizer state does not advance.  Shared tensors (e.g.
    a shared principal point) are updated once.  Returns whether an update was
    applied.  Non-finite gradients are skipped inside the optimizer.
    """
    if iteration < schedule.warm_up:
        return False
    params: dict[str, Tensor] = {}
    grads: dict[str, np.ndarray | None] = {}
    seen: set[int] = set()
    for i, cam in enumerate(cameras):
        for name, p in cam.pose_parameters().items():
            if id(p) in seen:
                continue
            seen.add(id(p))
            key = f"cam{i}.{name}"
            params[key] = p
            grads[key] = p.grad
    ad.adam_step(params, grads, state, lr=lr)
    return True
