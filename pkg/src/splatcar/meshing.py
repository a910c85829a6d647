"""TSDF fusion of rendered depth maps and marching-cubes mesh extraction."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage.measure import marching_cubes

from .camera import Camera

log = logging.getLogger(__name__)

DEFAULT_VOXEL = 0.004
DEFAULT_TRUNCATION = 0.02
MAX_VOXELS = 512 ** 3


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    def __len__(self) -> int:
        return len(self.faces)

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if not len(self.vertices):
            raise ValueError("empty mesh has no bounds")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def sample(self, n: int, seed: int = 0) -> np.ndarray:
        """Area-weighted uniform surface samples."""
        if self.empty:
            raise ValueError("cannot sample an empty mesh")
        rng = np.random.default_rng(seed)
        areas = self.face_areas()
        tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        a, b, c = (self.vertices[self.faces[tri, k]] for k in range(3))
        return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c

    def edge_counts(self) -> dict[tuple[int, int], int]:
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return {tuple(map(int, k)): int(c) for k, c in zip(uniq, counts)}

    def is_watertight(self) -> bool:
        if self.empty:
            return False
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def components(self) -> np.ndarray:
        """Connected-component label per face (faces sharing a vertex are connected)."""
        nf = len(self.faces)
        if nf == 0:
            return np.zeros(0, dtype=np.int64)
        rows = np.repeat(np.arange(nf), 3)
        cols = self.faces.reshape(-1)
        inc = coo_matrix((np.ones(3 * nf), (rows, cols)), shape=(nf, len(self.vertices))).tocsr()
        _, labels = connected_components(inc @ inc.T, directed=False)
        return labels

    def transformed(self, offset) -> TriangleMesh:
        return TriangleMesh(self.vertices + np.asarray(offset), self.faces.copy())


def cleanup_mesh(mesh: TriangleMesh, area_eps: float = 1e-12,
                 min_component_fraction: float = 0.0) -> TriangleMesh:
    """Drop degenerate faces, optionally small components, then unreferenced vertices."""
    faces = mesh.faces
    keep = mesh.face_areas() > area_eps
    keep &= (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[keep]
    m = TriangleMesh(mesh.vertices, faces)
    if min_component_fraction > 0 and len(faces):
        labels = m.components()
        sizes = np.bincount(labels)
        faces = faces[sizes[labels] >= min_component_fraction * len(faces)]
    used = np.unique(faces)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(mesh.vertices[used], remap[faces])


@dataclass
class TsdfVolume:
    origin: np.ndarray
    dims: tuple[int, int, int]
    voxel_size: float = DEFAULT_VOXEL
    truncation: float = DEFAULT_TRUNCATION
    tsdf: np.ndarray = field(default=None, repr=False)
    weight: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in self.dims)
        if self.voxel_size <= 0 or self.truncation < self.voxel_size:
            raise ValueError("need voxel_size > 0 and truncation >= voxel_size")
        if self.tsdf is None:
            self.tsdf = np.ones(self.dims, dtype=np.float32)
        if self.weight is None:
            self.weight = np.zeros(self.dims, dtype=np.float32)

    @classmethod
    def from_bounds(cls, lo, hi, voxel_size: float = DEFAULT_VOXEL,
                    truncation: float = DEFAULT_TRUNCATION, max_voxels: int = MAX_VOXELS,
                    inflate: float = 0.05) -> TsdfVolume:
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        pad = (hi - lo) * inflate + truncation
        lo, hi = lo - pad, hi + pad
        size = hi - lo
        vs = voxel_size
        while np.prod(np.ceil(size / vs) + 1) > max_voxels:
            vs *= 1.05
        if vs != voxel_size:
            log.warning("volume too large; voxel size grown from %g to %g", voxel_size, vs)
        dims = tuple(int(d) for d in np.ceil(size / vs).astype(int) + 1)
        return cls(lo, dims, vs, max(truncation, vs))

    def voxel_centers(self, ix: int | None = None) -> np.ndarray:
        """World coordinates of all voxels, or of the x-slab ``ix``."""
        xs = np.arange(self.dims[0]) if ix is None else np.array([ix])
        g = np.meshgrid(xs, np.arange(self.dims[1]), np.arange(self.dims[2]), indexing="ij")
        return self.origin + np.stack(g, axis=-1) * self.voxel_size


def integrate_depth(vol: TsdfVolume, depth: np.ndarray, camera: Camera,
                    alpha: np.ndarray | None = None, alpha_threshold: float = 0.5) -> TsdfVolume:
    """Fuse one depth map (camera-z) into ``vol`` in place; returns ``vol``."""
    h, w = depth.shape
    valid = depth > 0
    if alpha is not None:
        valid &= alpha > alpha_threshold
    lo = vol.origin
    hi = vol.origin + (np.array(vol.dims) - 1) * vol.voxel_size
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    if np.all(camera.world_to_camera(corners)[:, 2] <= 0):
        log.warning("camera is behind the whole volume; nothing fused")
        return vol
    k = camera.intrinsics
    wc = camera.pose.R.T
    tc = -wc @ camera.pose.T
    inv_t = 1.0 / vol.truncation
    for ix in range(vol.dims[0]):  # slab-wise to bound memory
        pts = vol.voxel_centers(ix).reshape(-1, 3)
        pc = pts @ wc.T + tc
        z = pc[:, 2]
        front = z > 1e-9
        zs = np.where(front, z, 1.0)
        u = np.floor(k.fx * pc[:, 0] / zs + k.cx).astype(np.int64)
        v = np.floor(k.fy * pc[:, 1] / zs + k.cy).astype(np.int64)
        ok = front & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        uu, vv = np.where(ok, u, 0), np.where(ok, v, 0)
        ok &= valid[vv, uu]
        sdf = depth[vv, uu] - z
        ok &= sdf >= -vol.truncation
        if not ok.any():
            continue
        val = np.clip(sdf * inv_t, -1.0, 1.0)
        t_sl = vol.tsdf[ix].reshape(-1)
        w_sl = vol.weight[ix].reshape(-1)
        w_old = w_sl[ok].astype(np.float64)
        t_sl[ok] = (t_sl[ok] * w_old + val[ok]) / (w_old + 1.0)
        w_sl[ok] = w_old + 1.0
        vol.tsdf[ix] = t_sl.reshape(vol.dims[1:])
        vol.weight[ix] = w_sl.reshape(vol.dims[1:])
    return vol


def extract_mesh(vol: TsdfVolume, cleanup: bool = True, min_component_fraction: float = 0.0) -> TriangleMesh:
    """Zero isosurface; cells touching unobserved voxels produce no faces."""
    observed = vol.weight > 0
    if not observed.any():
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3)))
    field_ = np.where(observed, vol.tsdf, 1.0).astype(np.float64)
    if field_.min() >= 0 or field_[observed].max() <= 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3)))
    # a cell is evaluated only when all eight corners are observed
    full = np.zeros_like(observed)
    core = observed[:-1, :-1, :-1].copy()
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                core &= observed[dx:dx + observed.shape[0] - 1, dy:dy + observed.shape[1] - 1,
                                 dz:dz + observed.shape[2] - 1]
    full[:-1, :-1, :-1] = core
    try:
        verts, faces, normals, _ = marching_cubes(field_, level=0.0, spacing=(vol.voxel_size,) * 3,
                                                  mask=full, gradient_direction="ascent")
    except (ValueError, RuntimeError):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3)))
    # every vertex lies on a grid edge; drop faces interpolated toward unobserved voxels
    g = verts / vol.voxel_size
    lo = np.clip(np.floor(g + 1e-6).astype(np.int64), 0, np.array(observed.shape) - 1)
    hi = np.clip(np.ceil(g - 1e-6).astype(np.int64), 0, np.array(observed.shape) - 1)
    good = observed[lo[:, 0], lo[:, 1], lo[:, 2]] & observed[hi[:, 0], hi[:, 1], hi[:, 2]]
    faces = faces[good[faces].all(axis=1)]
    mesh = TriangleMesh(verts + vol.origin, faces)
    if cleanup:
        mesh = cleanup_mesh(mesh, min_component_fraction=min_component_fraction)
    return mesh


def volume_for_splats(centers: np.ndarray, voxel_size: float = DEFAULT_VOXEL,
                      truncation: float = DEFAULT_TRUNCATION, max_voxels: int = MAX_VOXELS,
                      weights: np.ndarray | None = None, min_weight: float = 0.05) -> TsdfVolume:
    """Volume spanning the splat centers (those with weight >= min_weight if given)."""
    pts = np.asarray(centers)
    if weights is not None and np.any(weights >= min_weight):
        pts = pts[weights >= min_weight]
    if not len(pts):
        raise ValueError("no splats to bound")
    return TsdfVolume.from_bounds(pts.min(axis=0), pts.max(axis=0), voxel_size, truncation, max_voxels)


def fuse_scene(scene, cameras: list[Camera], voxel_size: float = DEFAULT_VOXEL,
               truncation: float = DEFAULT_TRUNCATION, max_voxels: int = MAX_VOXELS,
               alpha_threshold: float = 0.5) -> TsdfVolume:
    """Render geometry-channel depth of every camera (VSG only) and fuse it."""
    from .rasterizer import ChannelConfig, render_view

    vsg = scene.vsg
    vol = volume_for_splats(vsg.centers, voxel_size, truncation, max_voxels,
                            weights=vsg.geo_opacity)
    for cam in cameras:
        out = render_view(scene, None, cam, ChannelConfig(appearance=False, geometry=True, include_vdg=False))
        depth, valid = out.surface_depth(alpha_threshold)
        integrate_depth(vol, np.where(valid, depth, 0.0), cam, out.geometry_alpha, alpha_threshold)
    return vol


# -- mesh files -------------------------------------------------------------


def write_ply(path, mesh: TriangleMesh) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(mesh.faces)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    ).encode("ascii")
    face_rec = np.zeros(len(mesh.faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    face_rec["n"] = 3
    face_rec["idx"] = mesh.faces
    path.write_bytes(header + mesh.vertices.astype("<f4").tobytes() + face_rec.tobytes())


def read_ply(path) -> TriangleMesh:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len("end_header\n"):]
    fmt = next(line.split()[1] for line in header if line.startswith("format"))
    elements = []
    for line in header:
        parts = line.split()
        if parts[:1] == ["element"]:
            elements.append([parts[1], int(parts[2]), []])
        elif parts[:1] == ["property"]:
            elements[-1][2].append(parts[1:])
    types = {"float": "f4", "float32": "f4", "double": "f8", "uchar": "u1", "uint8": "u1",
             "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4", "short": "i2", "ushort": "u2",
             "char": "i1"}
    verts = faces = None
    if fmt == "ascii":
        tokens = body.decode("ascii").split()
        pos = 0
        for name, count, props in elements:
            if name == "vertex":
                np_ = len(props)
                arr = np.array(tokens[pos:pos + count * np_], dtype=np.float64).reshape(count, np_)
                pos += count * np_
                names = [p[-1] for p in props]
                verts = arr[:, [names.index(a) for a in "xyz"]]
            elif name == "face":
                rows = []
                for _ in range(count):
                    n = int(tokens[pos])
                    rows.append([int(t) for t in tokens[pos + 1:pos + 1 + n]])
                    pos += 1 + n
                faces = _triangulate(rows)
        return TriangleMesh(verts, faces)
    if fmt != "binary_little_endian":
        raise ValueError(f"{path}: unsupported PLY format {fmt}")
    pos = 0
    for name, count, props in elements:
        if name == "face" and props and props[0][0] == "list":
            ct, it = "<" + types[props[0][1]], "<" + types[props[0][2]]
            csz, isz = np.dtype(ct).itemsize, np.dtype(it).itemsize
            if count and int(np.frombuffer(body, ct, 1, pos)[0]) == 3 and len(props) == 1:
                rec = np.dtype([("n", ct), ("idx", it, (3,))])
                arr = np.frombuffer(body, rec, count, pos)
                if np.all(arr["n"] == 3):
                    faces = arr["idx"].astype(np.int64)
                    pos += count * rec.itemsize
                    continue
            rows = []
            for _ in range(count):
                n = int(np.frombuffer(body, ct, 1, pos)[0])
                pos += csz
                rows.append(np.frombuffer(body, it, n, pos).tolist())
                pos += n * isz
            faces = _triangulate(rows)
        else:
            rec = np.dtype([(p[-1], "<" + types[p[0]]) for p in props])
            arr = np.frombuffer(body, rec, count, pos)
            pos += count * rec.itemsize
            if name == "vertex":
                verts = np.stack([arr[a].astype(np.float64) for a in "xyz"], axis=1)
    return TriangleMesh(verts if verts is not None else np.zeros((0, 3)),
                        faces if faces is not None else np.zeros((0, 3)))


def _triangulate(rows) -> np.ndarray:
    tris = [[r[0], r[k], r[k + 1]] for r in rows for k in range(1, len(r) - 1)]
    return np.array(tris, dtype=np.int64).reshape(-1, 3)


def write_obj(path, mesh: TriangleMesh) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    path.write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    verts, rows = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            rows.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), _triangulate(rows))


def read_mesh(path) -> TriangleMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix == ".obj":
        return read_obj(path)
    raise ValueError(f"unsupported mesh format: {path}")


def write_mesh(path, mesh: TriangleMesh) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        write_ply(path, mesh)
    elif suffix == ".obj":
        write_obj(path, mesh)
    else:
        raise ValueError(f"unsupported mesh format: {path}")
