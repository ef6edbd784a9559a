"""Zero-level-set extraction: cube-case table, grid evaluation, PLY export.

The 256-case triangulation table is generated once at import by walking the
marching-squares segments of every cube face and stitching them into closed
polygons around the inside corners.  Ambiguous faces (both diagonals inside)
always keep the inside corners separated, a fixed sign-only rule, so any two
cells sharing a face make the same choice and the extracted surface closes
without an asymptotic decider.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

import attsurf.autodiff as ad
from attsurf.autodiff import DTYPE, Tensor

# unit-cube corners, bit i of a case index set means corner i is inside
CORNERS = np.array([
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
], dtype=np.float64)

# the 12 cube edges as corner pairs
EDGES = ((0, 1), (1, 2), (2, 3), (3, 0),
         (4, 5), (5, 6), (6, 7), (7, 4),
         (0, 4), (1, 5), (2, 6), (3, 7))

# faces as corner cycles, ordered counterclockwise seen from outside the cube
FACES = ((0, 3, 2, 1),   # z = 0
         (4, 5, 6, 7),   # z = 1
         (0, 1, 5, 4),   # y = 0
         (2, 3, 7, 6),   # y = 1
         (0, 4, 7, 3),   # x = 0
         (1, 2, 6, 5))   # x = 1

_EDGE_OF_PAIR = {}
for _e, (_a, _b) in enumerate(EDGES):
    _EDGE_OF_PAIR[(_a, _b)] = _e
    _EDGE_OF_PAIR[(_b, _a)] = _e


def _face_segments(face: tuple[int, ...], inside: tuple[bool, ...]):
    """Directed cut segments of one face, inside region to the left.

    The face cycle is counterclockwise from outside, so walking it keeps the
    face interior on the left; a segment runs from the edge entering an
    inside run of corners to the edge leaving it.
    """
    cut = []
    for i in range(4):
        a, b = face[i], face[(i + 1) % 4]
        if inside[a] != inside[b]:
            cut.append((i, _EDGE_OF_PAIR[(a, b)]))
    if not cut:
        return []
    if len(cut) == 2:
        (ia, ea), (ib, eb) = cut
        # direct the segment so the inside corners sit on its left: start at
        # the crossing whose following corner is outside
        if inside[face[(ia + 1) % 4]]:
            return [(eb, ea)]
        return [(ea, eb)]
    # ambiguous face: diagonal corners inside; cut each inside corner off on
    # its own, which separates the inside corners for every adjacent cell
    segments = []
    for i, e in cut:
        if inside[face[(i + 1) % 4]]:
            nxt = ((i + 1) % 4, _EDGE_OF_PAIR[(face[(i + 1) % 4], face[(i + 2) % 4])])
            segments.append((nxt[1], e))
    return segments


def _case_triangles(case: int) -> list[tuple[int, int, int]]:
    inside = tuple(bool(case >> i & 1) for i in range(8))
    succ: dict[int, int] = {}
    for face in FACES:
        for start, end in _face_segments(face, inside):
            succ[start] = end
    triangles = []
    seen = set()
    for start in sorted(succ):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        nxt = succ[start]
        while nxt != start:
            loop.append(nxt)
            seen.add(nxt)
            nxt = succ[nxt]
        for i in range(1, len(loop) - 1):
            triangles.append((loop[0], loop[i + 1], loop[i]))
    return triangles


def _build_tables():
    counts = np.zeros(256, dtype=np.int64)
    table = np.full((256, 15), -1, dtype=np.int64)
    for case in range(256):
        tris = _case_triangles(case)
        counts[case] = len(tris)
        flat = [e for tri in tris for e in tri]
        table[case, :len(flat)] = flat
    return table, counts


TRI_TABLE, TRI_COUNTS = _build_tables()


@dataclass(frozen=True)
class TriMesh:
    """Triangle mesh: vertices (V, 3) and index triples (T, 3)."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.isfinite(v).all():
            raise ValueError("mesh vertices must be finite")
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle indices out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def marching_cubes(field: np.ndarray, iso: float = 0.0,
                   origin=(-1.0, -1.0, -1.0), spacing: float | None = None) -> TriMesh:
    """Extract the iso-surface of a G^3 scalar grid as a welded triangle mesh.

    field[i, j, k] samples position origin + (i, j, k) * spacing; by default
    the grid spans the unit cube [-1, 1]^3.  A field without a sign change
    yields an empty mesh.  Triangles with area <= 1e-12 are dropped.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 3:
        raise ValueError(f"field must be a 3d grid, got shape {field.shape}")
    if min(field.shape) < 8:
        raise ValueError(f"grid resolution must be at least 8, got {field.shape}")
    if not np.isfinite(field).all():
        raise ValueError("field contains non-finite values")
    gx, gy, gz = field.shape
    if spacing is None:
        spacing = 2.0 / (gx - 1)
    origin = np.asarray(origin, dtype=np.float64)

    inside = field < iso
    cases = np.zeros((gx - 1, gy - 1, gz - 1), dtype=np.int64)
    for bit, (dx, dy, dz) in enumerate(CORNERS.astype(np.int64)):
        cases |= (inside[dx:dx + gx - 1, dy:dy + gy - 1, dz:dz + gz - 1]
                  .astype(np.int64) << bit)
    active = np.nonzero(TRI_COUNTS[cases] > 0)
    if len(active[0]) == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    acase = cases[active]
    ax, ay, az = (a.astype(np.int64) for a in active)

    # global ids for the three grid-edge families (along x, y, z)
    n_ex = (gx - 1) * gy * gz
    n_ey = gx * (gy - 1) * gz

    def grid_edge_id(ix, iy, iz, axis):
        if axis == 0:
            return (ix * gy + iy) * gz + iz
        if axis == 1:
            return n_ex + (ix * (gy - 1) + iy) * gz + iz
        return n_ex + n_ey + (ix * gy + iy) * (gz - 1) + iz

    # cell edge e of cell (ax, ay, az) -> global grid edge id
    cell_edge_ids = np.empty((len(ax), 12), dtype=np.int64)
    for e, (a, b) in enumerate(EDGES):
        ca, cb = CORNERS[a].astype(np.int64), CORNERS[b].astype(np.int64)
        axis = int(np.nonzero(ca != cb)[0][0])
        base = np.minimum(ca, cb)
        cell_edge_ids[:, e] = grid_edge_id(ax + base[0], ay + base[1], az + base[2], axis)

    rows = TRI_TABLE[acase]                                    # (A, 15) cell-edge ids
    used = rows >= 0
    tri_edges = np.where(used, np.take_along_axis(
        cell_edge_ids, np.where(used, rows, 0), axis=1), -1)
    flat = tri_edges[used]
    n_tri_each = TRI_COUNTS[acase]
    triangles_gid = flat.reshape(-1, 3)
    assert len(triangles_gid) == n_tri_each.sum()

    # interpolate one vertex per used grid edge
    gids, tri_idx = np.unique(triangles_gid, return_inverse=True)
    verts = np.empty((len(gids), 3), dtype=np.float64)
    for axis, (lo, hi) in enumerate([(0, n_ex), (n_ex, n_ex + n_ey),
                                     (n_ex + n_ey, None)]):
        sel = (gids >= lo) if hi is None else (gids >= lo) & (gids < hi)
        if not sel.any():
            continue
        local = gids[sel] - lo
        if axis == 0:
            ix, rem = np.divmod(local, gy * gz)
            iy, iz = np.divmod(rem, gz)
        elif axis == 1:
            ix, rem = np.divmod(local, (gy - 1) * gz)
            iy, iz = np.divmod(rem, gz)
        else:
            ix, rem = np.divmod(local, gy * (gz - 1))
            iy, iz = np.divmod(rem, gz - 1)
        step = np.zeros(3, dtype=np.int64)
        step[axis] = 1
        f0 = field[ix, iy, iz]
        f1 = field[ix + step[0], iy + step[1], iz + step[2]]
        t = (iso - f0) / (f1 - f0)
        base = np.stack([ix, iy, iz], axis=1).astype(np.float64)
        base[:, axis] += t
        verts[sel] = origin + base * spacing

    triangles = tri_idx.reshape(-1, 3)
    mesh = TriMesh(verts, triangles)
    keep = mesh.areas() > 1e-12
    if keep.all():
        return mesh
    tri = mesh.triangles[keep]
    kept_v, remap = np.unique(tri, return_inverse=True)
    return TriMesh(mesh.vertices[kept_v], remap.reshape(-1, 3))


def sdf_grid_eval(model, resolution: int, material: str = "outer",
                  tau: float = np.inf, chunk: int = 65536) -> np.ndarray:
    """Sample a model's signed distance on a regular lattice over [-1, 1]^3.

    material selects the distance column: "outer" is always present, "inner"
    needs a two-material model.
    """
    if material not in ("outer", "inner"):
        raise ValueError(f"material must be 'outer' or 'inner', got {material!r}")
    column = 0 if material == "outer" else 1
    if column >= model.cfg.materials:
        raise ValueError("model has no inner material surface")
    axis = np.linspace(-1.0, 1.0, resolution)
    xs, ys, zs = np.meshgrid(axis, axis, axis, indexing="ij")
    points = np.stack([xs.reshape(-1), ys.reshape(-1), zs.reshape(-1)], axis=1)
    out = np.empty(len(points), dtype=DTYPE)
    with ad.no_grad():
        for start in range(0, len(points), chunk):
            block = points[start:start + chunk]
            d = model.sdf_only(Tensor(block), tau)
            out[start:start + len(block)] = d.values[:, column]
    return out.reshape(resolution, resolution, resolution)


def extract_surface(model, resolution: int, material: str = "outer",
                    tau: float = np.inf) -> TriMesh:
    """Mesh of the model's zero level set over the unit cube."""
    field = sdf_grid_eval(model, resolution, material, tau)
    return marching_cubes(field, iso=0.0, origin=(-1.0, -1.0, -1.0),
                          spacing=2.0 / (resolution - 1))


def surface_points(mesh: TriMesh, count: int = 10_000,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Uniform area-weighted point sample of a mesh surface, (count, 3)."""
    if mesh.is_empty:
        raise ValueError("cannot sample points from an empty mesh")
    if count < 1:
        raise ValueError(f"need at least one sample, got {count}")
    rng = np.random.default_rng() if rng is None else rng
    areas = mesh.areas()
    tri = rng.choice(len(areas), size=count, p=areas / areas.sum())
    a = mesh.vertices[mesh.triangles[tri, 0]]
    b = mesh.vertices[mesh.triangles[tri, 1]]
    c = mesh.vertices[mesh.triangles[tri, 2]]
    # square-root warp makes (u, v) uniform over the triangle
    u = np.sqrt(rng.uniform(size=(count, 1)))
    v = rng.uniform(size=(count, 1))
    return a * (1 - u) + b * u * (1 - v) + c * u * v


def save_ply(mesh: TriMesh, path) -> Path:
    """Write the mesh as ASCII PLY."""
    path = Path(path)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for v in mesh.vertices:
        lines.append(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for t in mesh.triangles:
        lines.append(f"3 {t[0]} {t[1]} {t[2]}")
    path.write_text("\n".join(lines) + "\n")
    return path


def load_ply(path) -> TriMesh:
    """Read a mesh written by save_ply."""
    lines = Path(path).read_text().splitlines()
    n_vertex = n_face = 0
    body = 0
    for i, line in enumerate(lines):
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_vertex = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
        elif parts[:1] == ["end_header"]:
            body = i + 1
            break
    vertices = np.array([[float(x) for x in lines[body + i].split()]
                         for i in range(n_vertex)])
    faces = np.array([[int(x) for x in lines[body + n_vertex + i].split()[1:4]]
                      for i in range(n_face)], dtype=np.int64)
    return TriMesh(vertices.reshape(-1, 3), faces.reshape(-1, 3))
