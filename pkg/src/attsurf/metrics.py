"""Geometric and image-quality metrics: symmetric point-cloud distance,
similarity alignment (closed form and iterative), PSNR, and SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

BRUTE_FORCE_LIMIT = 1000


def _as_cloud(points, name: str) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"{name} must be (N, 3), got {points.shape}")
    if len(points) == 0:
        raise ValueError(f"{name} is empty")
    return points


def nearest_distances(query: np.ndarray, reference: np.ndarray,
                      method: str = "auto") -> np.ndarray:
    """Distance from each query point to its nearest reference point.

    Small inputs fall back to the exhaustive pairwise computation; the two
    routes agree exactly and either can be forced for cross-checking.
    """
    if method == "auto":
        method = "brute" if max(len(query), len(reference)) < BRUTE_FORCE_LIMIT else "tree"
    if method == "brute":
        diff = query[:, None, :] - reference[None, :, :]
        return np.sqrt((diff * diff).sum(axis=2)).min(axis=1)
    if method == "tree":
        dist, _ = cKDTree(reference).query(query, k=1)
        return np.asarray(dist)
    raise ValueError(f"method must be 'auto', 'brute', or 'tree', got {method!r}")


def chamfer_distance(cloud_a, cloud_b, method: str = "auto") -> float:
    """Symmetric mean nearest-neighbor distance between two point clouds."""
    a = _as_cloud(cloud_a, "cloud_a")
    b = _as_cloud(cloud_b, "cloud_b")
    return 0.5 * (nearest_distances(a, b, method).mean()
                  + nearest_distances(b, a, method).mean())


@dataclass(frozen=True)
class SimilarityTransform:
    """x -> scale * rotation @ x + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation

    @staticmethod
    def identity() -> "SimilarityTransform":
        return SimilarityTransform(1.0, np.eye(3), np.zeros(3))


def umeyama_align(src, dst, with_scale: bool = True) -> SimilarityTransform:
    """Least-squares similarity transform mapping src points onto dst.

    Closed-form solution over given correspondences (row i of src matches
    row i of dst), with the determinant sign correction so a reflection is
    never returned.  Degenerate (collinear or fewer than 3) points fail.
    """
    src = _as_cloud(src, "src")
    dst = _as_cloud(dst, "dst")
    if src.shape != dst.shape:
        raise ValueError(f"src and dst must correspond, got {src.shape} vs {dst.shape}")
    n = len(src)
    if n < 3:
        raise ValueError(f"need at least 3 correspondences, got {n}")
    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    src_c = src - mu_src
    dst_c = dst - mu_dst
    cov = dst_c.T @ src_c / n
    u, d, vt = np.linalg.svd(cov)
    # rank < 2 leaves the rotation underdetermined
    if d[1] <= 1e-12 * max(d[0], 1e-300):
        raise ValueError("points are collinear or coincident; rotation is underdetermined")
    s = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2] = -1.0
    rotation = u @ np.diag(s) @ vt
    if with_scale:
        var_src = (src_c * src_c).sum() / n
        scale = float((d * s).sum() / var_src)
        if scale <= 0:
            raise ValueError("degenerate configuration produced a non-positive scale")
    else:
        scale = 1.0
    translation = mu_dst - scale * rotation @ mu_src
    return SimilarityTransform(scale, rotation, translation)


def alignment_residual(transform: SimilarityTransform, src, dst) -> float:
    """Root-mean-square distance of transformed src to corresponding dst."""
    moved = transform.apply(src)
    return float(np.sqrt(((moved - np.asarray(dst)) ** 2).sum(axis=1).mean()))


def icp_align(src, dst, with_scale: bool = True, max_iters: int = 50,
              tol: float = 1e-10) -> SimilarityTransform:
    """Iterative closest point: re-match to nearest neighbors, refit, repeat.

    Stops when the matched correspondence set stops changing or the mean
    residual improves by less than tol.
    """
    src = _as_cloud(src, "src")
    dst = _as_cloud(dst, "dst")
    tree = cKDTree(dst)
    transform = SimilarityTransform.identity()
    previous_idx = None
    previous_res = math.inf
    for _ in range(max_iters):
        moved = transform.apply(src)
        dist, idx = tree.query(moved, k=1)
        if previous_idx is not None and np.array_equal(idx, previous_idx):
            break
        transform = umeyama_align(src, dst[idx], with_scale)
        residual = alignment_residual(transform, src, dst[idx])
        if previous_res - residual < tol:
            break
        previous_idx = idx
        previous_res = residual
    return transform


def psnr(img_a, img_b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give +infinity."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _windowed_mean(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    # separable valid-mode correlation
    size = len(window)
    out = np.apply_along_axis(lambda r: np.convolve(r, window, mode="valid"), 1, img)
    out = np.apply_along_axis(lambda c: np.convolve(c, window, mode="valid"), 0, out)
    assert out.shape == (img.shape[0] - size + 1, img.shape[1] - size + 1)
    return out


def ssim(img_a, img_b, data_range: float = 1.0) -> float:
    """Single-scale structural similarity with the standard 11x11 Gaussian
    window (sigma 1.5) and stabilizers K1=0.01, K2=0.03."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < 11:
        raise ValueError(f"images must be 2d and at least 11x11, got {a.shape}")
    window = _gaussian_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = _windowed_mean(a, window)
    mu_b = _windowed_mean(b, window)
    var_a = _windowed_mean(a * a, window) - mu_a * mu_a
    var_b = _windowed_mean(b * b, window) - mu_b * mu_b
    cov = _windowed_mean(a * b, window) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
             / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)))
    return float(score.mean())
