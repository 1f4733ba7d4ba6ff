"""Dense field sampling, Marching Cubes, and mesh connectivity/serialization."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import _mc_tables
from .geometry import TriangleMesh
from .sampling import Box

GRID_MAGIC = b"IKPG"
GRID_VERSION = 1
DEFAULT_RESOLUTION = 128
_ISO_NUDGE = 1e-10


@dataclass
class ScalarGrid:
    """Samples on a regular lattice that includes the box corners.

    ``values`` has shape ``(nx, ny, nz)``; serialized order is x-fastest.
    """

    values: np.ndarray
    bounds: Box = Box()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError("grid needs at least 2 samples per axis")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)

    @property
    def spacing(self) -> np.ndarray:
        return (self.bounds.hi_arr - self.bounds.lo_arr) / (np.asarray(self.resolution) - 1)

    def axes(self) -> list[np.ndarray]:
        lo, hi = self.bounds.lo_arr, self.bounds.hi_arr
        return [np.linspace(lo[a], hi[a], n) for a, n in enumerate(self.resolution)]

    def lattice_points(self) -> np.ndarray:
        """All lattice points, x-fastest, shape ``(nx*ny*nz, 3)``."""
        return lattice_points(self.resolution, self.bounds)

    def flat_values(self) -> np.ndarray:
        return self.values.ravel(order="F")

    def __neg__(self) -> "ScalarGrid":
        return ScalarGrid(-self.values, self.bounds)


def _as_resolution(resolution) -> tuple[int, int, int]:
    res = (int(resolution),) * 3 if np.isscalar(resolution) else tuple(int(r) for r in resolution)
    if len(res) != 3 or min(res) < 2:
        raise ValueError("resolution must be >= 2 per axis")
    return res


def lattice_points(resolution, bounds: Box = Box()) -> np.ndarray:
    res = _as_resolution(resolution)
    lo, hi = bounds.lo_arr, bounds.hi_arr
    axes = [np.linspace(lo[a], hi[a], n) for a, n in enumerate(res)]
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)


def eval_grid(field, resolution=DEFAULT_RESOLUTION, bounds: Box = Box(), chunk: int = 262144) -> ScalarGrid:
    """Sample ``field`` (any callable mapping ``(N, 3)`` points to ``N`` values)."""
    res = _as_resolution(resolution)
    pts = lattice_points(res, bounds)
    flat = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        flat[s:s + chunk] = np.asarray(field(pts[s:s + chunk]), dtype=np.float64).reshape(-1)
    return ScalarGrid(flat.reshape(res, order="F"), bounds)


def _tables():
    tri = np.full((256, 15), -1, dtype=np.int64)
    count = np.zeros(256, dtype=np.int64)
    for k, row in enumerate(_mc_tables.TRIANGLES):
        tri[k, :len(row)] = row
        count[k] = len(row) // 3
    corners = np.asarray(_mc_tables.CORNERS, dtype=np.int64)
    a, b = np.asarray(_mc_tables.EDGES).T
    lower = np.minimum(corners[a], corners[b])
    axis = np.argmax(corners[a] != corners[b], axis=1)
    return tri, count, corners, lower, axis


_TRI, _TRI_COUNT, _CORNERS, _EDGE_LOWER, _EDGE_AXIS = _tables()


def marching_cubes(grid: ScalarGrid, iso: float = 0.0) -> TriangleMesh:
    """Triangulate the ``iso`` level set.

    Vertices are keyed by lattice edge, so neighbouring cells share them.
    Triangles wind so their normals point toward increasing field values.
    """
    v = grid.values - iso
    v = np.where(v == 0.0, _ISO_NUDGE, v)
    nx, ny, nz = v.shape
    below = v < 0
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for bit, (dx, dy, dz) in enumerate(_CORNERS):
        case |= below[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz].astype(np.int64) << bit
    ci, cj, ck = np.nonzero((case != 0) & (case != 255))
    if len(ci) == 0:
        return TriangleMesh.empty()
    cases = case[ci, cj, ck]
    ntri = _TRI_COUNT[cases]
    cell_of_tri = np.repeat(np.arange(len(cases)), ntri)
    slot = np.arange(len(cell_of_tri)) - np.repeat(np.cumsum(ntri) - ntri, ntri)
    edges = np.stack([_TRI[cases[cell_of_tri], 3 * slot + m] for m in range(3)], axis=1)

    base = np.stack([ci, cj, ck], axis=1)[cell_of_tri]
    lower = base[:, None, :] + _EDGE_LOWER[edges]
    axis = _EDGE_AXIS[edges]
    n_pts = nx * ny * nz
    keys = axis * n_pts + lower[..., 0] + nx * (lower[..., 1] + ny * lower[..., 2])
    uniq, inverse = np.unique(keys.ravel(), return_inverse=True)
    triangles = inverse.reshape(-1, 3)

    ax = uniq // n_pts
    rem = uniq % n_pts
    p0 = np.stack([rem % nx, (rem // nx) % ny, rem // (nx * ny)], axis=1)
    p1 = p0 + np.eye(3, dtype=np.int64)[ax]
    v0 = v[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = v[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = v0 / (v0 - v1)
    lo, step = grid.bounds.lo_arr, grid.spacing
    verts = lo + (p0 + t[:, None] * (p1 - p0)) * step
    # the table winds triangles with normals toward the below-iso side
    triangles = triangles[:, ::-1]
    mesh = TriangleMesh(verts, triangles)
    mesh.normals = vertex_normals(mesh)
    return mesh


def face_normals(mesh: TriangleMesh, normalize: bool = True) -> np.ndarray:
    a, b, c = (mesh.vertices[mesh.triangles[:, m]] for m in range(3))
    n = np.cross(b - a, c - a)
    if normalize:
        length = np.linalg.norm(n, axis=1, keepdims=True)
        n = n / np.where(length > 0, length, 1.0)
    return n


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    fn = face_normals(mesh, normalize=False)
    vn = np.zeros_like(mesh.vertices)
    for m in range(3):
        np.add.at(vn, mesh.triangles[:, m], fn)
    length = np.linalg.norm(vn, axis=1, keepdims=True)
    return vn / np.where(length > 0, length, 1.0)


def split_components(mesh: TriangleMesh) -> list[TriangleMesh]:
    """Vertex-connected pieces, ordered by their smallest original vertex index."""
    if mesh.is_empty:
        return []
    tri = mesh.triangles
    n = len(mesh.vertices)
    rows = np.concatenate([tri[:, 0], tri[:, 1], tri[:, 2]])
    cols = np.concatenate([tri[:, 1], tri[:, 2], tri[:, 0]])
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    used = np.zeros(n, bool)
    used[tri.ravel()] = True
    tri_label = labels[tri[:, 0]]
    out = []
    seen = []
    for vid in np.flatnonzero(used):
        if labels[vid] not in seen:
            seen.append(labels[vid])
    for lab in seen:
        vids = np.flatnonzero(used & (labels == lab))
        remap = np.full(n, -1, dtype=np.int64)
        remap[vids] = np.arange(len(vids))
        sub_tri = remap[tri[tri_label == lab]]
        normals = None if mesh.normals is None else mesh.normals[vids]
        out.append(TriangleMesh(mesh.vertices[vids], sub_tri, normals))
    return out


def merge_meshes(meshes: list[TriangleMesh]) -> TriangleMesh:
    if not meshes:
        return TriangleMesh.empty()
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    normals = None
    if all(m.normals is not None for m in meshes):
        normals = np.vstack([m.normals for m in meshes])
    return TriangleMesh(np.vstack(verts), np.vstack(tris), normals)


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    if mesh.normals is not None:
        lines += [f"vn {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.normals]
        lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in mesh.triangles + 1]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in mesh.triangles + 1]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    verts, normals, faces = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vn":
            normals.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(tok.split("/")[0]) - 1 for tok in parts[1:4]])
    return TriangleMesh(np.asarray(verts).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3),
                        np.asarray(normals) if normals else None)


def write_ply(path, mesh: TriangleMesh) -> None:
    """Binary little-endian PLY with double vertex coordinates."""
    has_n = mesh.normals is not None
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(mesh.vertices)}",
              "property double x", "property double y", "property double z"]
    if has_n:
        header += ["property double nx", "property double ny", "property double nz"]
    header += [f"element face {len(mesh.triangles)}", "property list uchar int vertex_indices",
               "end_header"]
    vdata = np.hstack([mesh.vertices, mesh.normals]) if has_n else mesh.vertices
    face_dtype = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
    faces = np.empty(len(mesh.triangles), dtype=face_dtype)
    faces["n"] = 3
    faces["idx"] = mesh.triangles
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(vdata.astype("<f8").tobytes())
        f.write(faces.tobytes())


def read_ply(path) -> TriangleMesh:
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    if header[1] != "format binary_little_endian 1.0":
        raise ValueError(f"{path}: unsupported PLY format")
    n_vert = n_face = 0
    vprops = []
    current = None
    for line in header:
        tok = line.split()
        if tok[0] == "element":
            current = tok[1]
            if current == "vertex":
                n_vert = int(tok[2])
            elif current == "face":
                n_face = int(tok[2])
        elif tok[0] == "property" and current == "vertex":
            if tok[1] != "double":
                raise ValueError(f"{path}: expected double vertex properties")
            vprops.append(tok[2])
    ncol = len(vprops)
    vdata = np.frombuffer(raw, "<f8", n_vert * ncol, end).reshape(n_vert, ncol)
    off = end + 8 * n_vert * ncol
    face_dtype = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
    faces = np.frombuffer(raw, face_dtype, n_face, off)
    if n_face and np.any(faces["n"] != 3):
        raise ValueError(f"{path}: only triangle faces are supported")
    normals = vdata[:, 3:6].copy() if ncol >= 6 else None
    return TriangleMesh(vdata[:, :3].copy(), faces["idx"].astype(np.int64), normals)


def write_grid(path, grid: ScalarGrid) -> None:
    head = struct.pack("<4sI3I6d", GRID_MAGIC, GRID_VERSION, *grid.resolution,
                       *grid.bounds.lo, *grid.bounds.hi)
    with open(path, "wb") as f:
        f.write(head)
        f.write(grid.flat_values().astype("<f4").tobytes())


def read_grid(path) -> ScalarGrid:
    raw = Path(path).read_bytes()
    fmt = "<4sI3I6d"
    magic, version, nx, ny, nz, *box = struct.unpack_from(fmt, raw, 0)
    if magic != GRID_MAGIC or version != GRID_VERSION:
        raise ValueError(f"{path}: not an IKPG v{GRID_VERSION} file")
    vals = np.frombuffer(raw, "<f4", nx * ny * nz, struct.calcsize(fmt)).astype(np.float64)
    return ScalarGrid(vals.reshape((nx, ny, nz), order="F"), Box(tuple(box[:3]), tuple(box[3:])))
