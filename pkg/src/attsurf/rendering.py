"""Ray sampling and transmittance rendering.

Pixels record the transmittance of a monochromatic beam through the
attenuation field: I = I0 * exp(-integral of mu along the ray), with I0
normalized to 1.  The integral is approximated by stratified midpoint-free
quadrature, sum_j mu(x_j) * delta_j, where delta_j is the spacing to the next
sample and the last sample carries the remaining distance to the far bound.

Rays are bounded by their intersection with the unit region-of-interest
sphere; rays that miss it render exactly 1 without evaluating the field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatchError, Tensor

ROI_RADIUS = 1.0


# ---------- rays and bounds ----------


@dataclass(frozen=True)
class Ray:
    """Single ray o + t*r with sampling bounds along t (scene units)."""

    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=np.float64))
        norm = float(np.linalg.norm(self.direction))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length, got norm {norm}")
        if not self.near < self.far:
            raise ValueError(f"ray needs near < far, got [{self.near}, {self.far}]")

    def point_at(self, t) -> np.ndarray:
        return self.origin + np.asarray(t)[..., None] * self.direction


def sphere_bounds(origins: np.ndarray, directions: np.ndarray,
                  radius: float = ROI_RADIUS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Entry/exit distances of each ray against the bounding sphere.

    Returns (near, far, hit).  near is clipped to 0 for origins inside the
    sphere; rays that miss (or only graze) have hit=False and undefined
    bounds.  Directions must be unit length.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    b = np.einsum("ij,ij->i", origins, directions)
    c = np.einsum("ij,ij->i", origins, origins) - radius * radius
    disc = b * b - c
    hit = disc > 1e-12
    root = np.sqrt(np.where(hit, disc, 0.0))
    near = np.maximum(-b - root, 0.0)
    far = -b + root
    hit &= far > near + 1e-12
    return near, far, hit


# ---------- stratified sampling ----------


@dataclass(frozen=True)
class SampleSet:
    """Ascending sample distances and per-sample spacings for one ray.

    delta_j = t_{j+1} - t_j for interior samples; the last spacing is
    far - t_N so every sample carries quadrature weight.
    """

    t: np.ndarray
    deltas: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        if not (np.diff(self.t) > 0).all():
            raise ValueError("sample distances must be strictly increasing")

    @property
    def count(self) -> int:
        return self.t.shape[0]


def _spacings(t: np.ndarray, far) -> np.ndarray:
    # works for (N,) with scalar far and (R, N) with (R,) far
    last = np.expand_dims(np.asarray(far), -1) - t[..., -1:]
    return np.concatenate([np.diff(t, axis=-1), last], axis=-1)


def stratified_sample(near: float, far: float, n: int, rng: np.random.Generator) -> SampleSet:
    """One uniform draw per stratum of [near, far); no hierarchical pass."""
    if n < 2:
        raise ValueError(f"need at least 2 samples per ray, got {n}")
    h = (far - near) / n
    t = near + (np.arange(n) + rng.uniform(0.0, 1.0, size=n)) * h
    return SampleSet(t=t, deltas=_spacings(t, far), near=near, far=far)


def stratified_sample_batch(near: np.ndarray, far: np.ndarray, n: int,
                            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized stratified sampling: (R,) bounds -> t and spacings, both (R, n)."""
    if n < 2:
        raise ValueError(f"need at least 2 samples per ray, got {n}")
    near = np.asarray(near, dtype=np.float64)[:, None]
    far = np.asarray(far, dtype=np.float64)[:, None]
    h = (far - near) / n
    t = near + (np.arange(n)[None, :] + rng.uniform(0.0, 1.0, size=(near.shape[0], n))) * h
    return t, _spacings(t, far[:, 0])


# ---------- quadrature ----------


def transmittance(mu: Tensor, deltas: np.ndarray) -> Tensor:
    """exp(-sum_j mu_j delta_j) per ray; mu is (R*N, 1) row-major over rays."""
    rays, n = deltas.shape
    if mu.shape != (rays * n, 1):
        raise ShapeMismatchError(f"transmittance: mu shape {mu.shape} != ({rays * n}, 1)")
    optical = ad.tensor_sum(ad.mul(ad.reshape(mu, (rays, n)), Tensor(deltas)),
                            axis=1, keepdims=True)
    return ad.exp(ad.neg(optical))


@dataclass
class RenderResult:
    """Batch render output plus the intermediates the losses need."""

    intensity: Tensor            # (B, 1), missed rays exactly 1
    points: Tensor | None        # (H*N, 3) sample points of the H hit rays
    hit_indices: np.ndarray      # (H,) rows of the batch that were sampled
    t: np.ndarray                # (H, N)
    deltas: np.ndarray           # (H, N)


def render_with_samples(mu_fn, origins: Tensor, directions: Tensor,
                        hit_idx: np.ndarray, t: np.ndarray, deltas: np.ndarray,
                        batch: int) -> RenderResult:
    """Differentiable render stage for a fixed sampling pattern.

    Sample points are origin + t * direction built on the tape, so pose
    parameters feeding origins/directions receive gradients while the sample
    distances stay frozen constants.  Rays outside hit_idx render exactly 1.
    """
    miss = np.ones((batch, 1))
    miss[hit_idx] = 0.0
    if hit_idx.size == 0:
        return RenderResult(intensity=Tensor(miss), points=None,
                            hit_indices=hit_idx, t=t, deltas=deltas)
    n_samples = t.shape[1]
    rows = np.repeat(hit_idx, n_samples)
    points = ad.add(ad.gather(origins, rows),
                    ad.mul(ad.gather(directions, rows), Tensor(t.reshape(-1, 1))))
    mu = mu_fn(points)
    hit_intensity = transmittance(mu, deltas)
    intensity = ad.add(ad.scatter_add(hit_intensity, hit_idx, batch), Tensor(miss))
    return RenderResult(intensity=intensity, points=points,
                        hit_indices=hit_idx, t=t, deltas=deltas)


def render_rays(mu_fn, origins, directions, n_samples: int, rng: np.random.Generator,
                radius: float = ROI_RADIUS) -> RenderResult:
    """Render a batch of rays through an attenuation callback.

    mu_fn maps sample points (M, 3) to attenuation (M, 1) as a differentiable
    graph.  origins/directions may be Tensors (so that pose parameters receive
    gradients through the sample points) or plain arrays; the sample distances
    themselves are always treated as constants of the current geometry.
    """
    o_t = origins if isinstance(origins, Tensor) else Tensor(np.atleast_2d(origins))
    d_t = directions if isinstance(directions, Tensor) else Tensor(np.atleast_2d(directions))
    batch = o_t.shape[0]
    near, far, hit = sphere_bounds(o_t.values, d_t.values, radius)
    hit_idx = np.flatnonzero(hit)
    if hit_idx.size == 0:
        t = np.zeros((0, n_samples))
        return render_with_samples(mu_fn, o_t, d_t, hit_idx, t, t.copy(), batch)
    t, deltas = stratified_sample_batch(near[hit_idx], far[hit_idx], n_samples, rng)
    return render_with_samples(mu_fn, o_t, d_t, hit_idx, t, deltas, batch)


def render_intensity(ray: Ray, model, tau: float = np.inf, n_samples: int = 128,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Transmittance of a single ray through a field model, in (0, 1].

    Sampling bounds come from the ray itself (near/far), not from the
    bounding sphere, so callers control the integration segment exactly.
    """
    rng = rng or np.random.default_rng(0)
    samples = stratified_sample(ray.near, ray.far, n_samples, rng)
    points = ray.origin[None, :] + samples.t[:, None] * ray.direction[None, :]
    mu = model.query_attenuation(Tensor(points), tau)
    return transmittance(mu, samples.deltas[None, :])


# ---------- losses ----------


@dataclass(frozen=True)
class LossTerms:
    """Assembled training objective: total = intensity + lam * eikonal."""

    intensity: Tensor
    eikonal: Tensor
    lam: float
    total: Tensor
    rays: int
    samples_per_ray: int


def loss_intensity(predicted: Tensor, target) -> Tensor:
    """Sum over the ray batch of squared intensity error."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if predicted.shape != target.shape:
        raise ShapeMismatchError(
            f"loss_intensity: predicted {predicted.shape} vs target {target.shape}")
    return ad.tensor_sum(ad.square(ad.sub(predicted, target)))


def loss_eikonal(gradients: Tensor) -> Tensor:
    """Mean squared deviation of surface-gradient norms from 1."""
    if gradients.ndim != 2 or gradients.shape[1] != 3:
        raise ShapeMismatchError(f"loss_eikonal: expected (M, 3), got {gradients.shape}")
    norms = ad.sqrt(ad.tensor_sum(ad.square(gradients), axis=1, keepdims=True))
    return ad.mean(ad.square(ad.sub(norms, 1.0)))


def total_loss(l_int: Tensor, l_reg: Tensor, lam: float, rays: int,
               samples_per_ray: int) -> LossTerms:
    if lam < 0:
        raise ValueError(f"regularizer weight must be non-negative, got {lam}")
    total = ad.add(l_int, ad.mul(l_reg, lam))
    return LossTerms(intensity=l_int, eikonal=l_reg, lam=lam, total=total,
                     rays=rays, samples_per_ray=samples_per_ray)
