"""Coordinate encodings for the implicit fields.

Two interchangeable encoders:

* frequency encoding — per coordinate p, the octave pairs
  (sin(2^k pi p), cos(2^k pi p)) for k = 0..L-1, laid out coordinate-major;
* multiresolution hash grid — trainable feature tables over geometrically
  spaced grid resolutions, trilinearly interpolated, with dense row-major
  indexing whenever a level's full vertex grid fits the table and a prime-XOR
  hash otherwise.

Both honor the same coarse-to-fine mask weight w_k(tau): component k is off
for tau < k, ramps with (1 - cos((tau - k) pi)) / 2, and saturates at 1.
tau = inf means unmasked.  For the frequency encoder k is the octave index;
for the grid it is the level index.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import _gridkernels as _k
from .autodiff import DTYPE, Tensor, _node

logger = logging.getLogger(__name__)


# ---------- coarse-to-fine mask ----------


def mask_weight(k: int, tau: float) -> float:
    """Weight of frequency/level component k at schedule position tau."""
    if tau is None or math.isinf(tau):
        return 1.0
    d = tau - k
    if d <= 0.0:
        return 0.0
    if d >= 1.0:
        return 1.0
    return 0.5 * (1.0 - math.cos(d * math.pi))


# ---------- frequency encoding ----------


@dataclass(frozen=True)
class FrequencyConfig:
    octaves: int = 6

    @property
    def output_dim(self) -> int:
        return 3 * 2 * self.octaves

    @property
    def tau_end(self) -> float:
        return float(self.octaves)


def frequency_encode(x: Tensor, cfg: FrequencyConfig, tau: float = math.inf) -> Tensor:
    """Encode positions (P, 3) to (P, 3 * 2L), octave-masked at tau.

    Layout is coordinate-major: for each coordinate, L (sin, cos) pairs in
    ascending octave order.
    """
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"frequency_encode: expected (P, 3) positions, got {x.shape}")
    L = cfg.octaves
    freqs = (2.0 ** np.arange(L)) * np.pi          # (L,)
    weights = np.array([mask_weight(k, tau) for k in range(L)], dtype=DTYPE)
    # wrap to [0, 2) before scaling: every octave frequency is an integer
    # multiple of pi, so the encoding is exactly period-2 and the wrap keeps
    # sin/cos arguments small; slope is 1, leaving the x gradient untouched
    ang = np.mod(x.values, 2.0)[:, :, None] * freqs    # (P, 3, L)
    s = np.sin(ang)
    c = np.cos(ang)
    out = np.empty((x.shape[0], 3, L, 2), dtype=DTYPE)
    out[..., 0] = s * weights
    out[..., 1] = c * weights
    out = out.reshape(x.shape[0], 3 * 2 * L)

    def backward_fn(dY, acc):
        d = dY.reshape(dY.shape[0], 3, L, 2)
        scale = freqs * weights                    # (L,)
        dx = (d[..., 0] * c - d[..., 1] * s) @ scale
        acc(x, dx)

    return _node(out, (x,), backward_fn)


# ---------- multiresolution hash grid ----------


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 14
    base_resolution: int = 16
    max_resolution: int = 2048
    features_per_level: int = 2
    table_size: int = 2**19
    init_scale: float = 1e-4

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    @property
    def tau_end(self) -> float:
        return float(self.levels)


def level_resolutions(cfg: HashGridConfig) -> np.ndarray:
    """Geometric resolution ladder with exact endpoints."""
    if cfg.levels == 1:
        return np.array([cfg.base_resolution], dtype=np.int64)
    growth = (cfg.max_resolution / cfg.base_resolution) ** (1.0 / (cfg.levels - 1))
    res = np.round(cfg.base_resolution * growth ** np.arange(cfg.levels)).astype(np.int64)
    res[0] = cfg.base_resolution
    res[-1] = cfg.max_resolution
    return res


def hash_index(resolution: int, table_size: int, ix: int, iy: int, iz: int) -> int:
    """Table index of grid vertex (ix, iy, iz) at one level.

    Dense row-major (x fastest) when the full vertex grid fits the table,
    otherwise the prime-XOR hash modulo the table size.
    """
    stride = resolution + 1
    if stride**3 <= table_size:
        return ix + iy * stride + iz * stride * stride
    return (ix ^ (iy * _k.PRIME_Y) ^ (iz * _k.PRIME_Z)) % table_size


class HashGrid:
    """Trainable multiresolution feature tables (one ParamTensor per level)."""

    def __init__(self, cfg: HashGridConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.resolutions = level_resolutions(cfg)
        self.dense = np.array(
            [(r + 1) ** 3 <= cfg.table_size for r in self.resolutions], dtype=bool
        )
        self.tables: list[Tensor] = []
        for r, dense in zip(self.resolutions, self.dense):
            entries = (int(r) + 1) ** 3 if dense else cfg.table_size
            init = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(entries, cfg.features_per_level))
            self.tables.append(Tensor(init, requires_grad=True))

    def index(self, level: int, ix: int, iy: int, iz: int) -> int:
        return hash_index(int(self.resolutions[level]), self.tables[level].shape[0], ix, iy, iz)

    def parameters(self) -> dict[str, Tensor]:
        return {f"grid.level{l:02d}": t for l, t in enumerate(self.tables)}


def _normalize_positions(xv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map [-1, 1]^3 to [0, 1]^3; clamp strays with a logged warning."""
    outside = (xv < -1.0) | (xv > 1.0)
    if outside.any():
        logger.warning(
            "hash_encode: %d coordinate(s) outside [-1, 1]^3 were clamped", int(outside.sum())
        )
        xv = np.clip(xv, -1.0, 1.0)
    u = (xv + 1.0) * 0.5
    inside = (~outside).astype(DTYPE)
    return np.ascontiguousarray(u), inside


def hash_encode(x: Tensor, grid: HashGrid, tau: float = math.inf) -> Tensor:
    """Encode positions (P, 3) to (P, levels * F) level-masked features.

    Differentiable with respect to both the tables (scatter-add adjoint) and
    the query positions (trilinear weights are piecewise linear in x).
    """
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"hash_encode: expected (P, 3) positions, got {x.shape}")
    cfg = grid.cfg
    F = cfg.features_per_level
    u, inside = _normalize_positions(x.values)
    weights = [mask_weight(k, tau) for k in range(cfg.levels)]
    out = np.zeros((x.shape[0], cfg.levels * F), dtype=DTYPE)
    for lvl, w in enumerate(weights):
        if w <= 0.0:
            continue
        _k.encode_fwd(
            u, int(grid.resolutions[lvl]), grid.tables[lvl].values,
            bool(grid.dense[lvl]), out, lvl * F, w,
        )

    def backward_fn(dY, acc):
        dY = np.ascontiguousarray(dY)
        for lvl, w in enumerate(weights):
            if w <= 0.0:
                continue
            tab = grid.tables[lvl]
            if tab.requires_grad:
                g = np.zeros_like(tab.values)
                _k.encode_bwd_table(
                    u, int(grid.resolutions[lvl]), tab.shape[0],
                    bool(grid.dense[lvl]), dY, lvl * F, w, g,
                )
                acc(tab, g)
        if x.requires_grad:
            dx = np.zeros((x.shape[0], 3), dtype=DTYPE)
            for lvl, w in enumerate(weights):
                if w <= 0.0:
                    continue
                _k.encode_bwd_x(
                    u, int(grid.resolutions[lvl]), grid.tables[lvl].values,
                    bool(grid.dense[lvl]), dY, lvl * F, w, dx,
                )
            acc(x, dx * inside)

    return _node(out, (x, *grid.tables), backward_fn)
