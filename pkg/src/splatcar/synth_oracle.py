"""Analytic ray tracer producing ground-truth datasets in the ingestion layout.

Scenes mix diffuse, mirror and thin-glass surfaces. RGB follows the full light
path (through glass, one mirror bounce); depth, normal and mask always come from
the first surface hit, which is the geometry ground truth.

Scene files are INI documents::

    [scene]
    background = 0.05 0.05 0.08
    ambient = 0.3
    environment = sky

    [camera]
    width = 64
    height = 64
    fov_deg = 50
    radius = 1.2
    elevations_deg = 15
    arc_deg = 120
    target = 0 0 0

    [light.key]
    type = directional
    direction = 0.3 0.8 0.6
    intensity = 0.8

    [primitive.wall]
    type = quad
    center = 0 -0.15 0
    u = 0.3 0 0
    v = 0 0 0.25
    material = diffuse
    albedo = 0.8 0.7 0.6
    texture = waves
"""
from __future__ import annotations

import configparser
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera, CameraIntrinsics, CameraPose
from .ingest import write_png, write_raw
from .meshing import TriangleMesh, write_ply
from .rasterizer import encode_normal_png
from .splat_model import rotmat_to_quat

EPS = 1e-7
SCENE_DIR = Path(__file__).parent / "scenes"


@dataclass
class Material:
    kind: str = "diffuse"  # diffuse | mirror | glass
    albedo: np.ndarray = field(default_factory=lambda: np.full(3, 0.7))
    texture: str = "none"  # none | checker | waves
    texture_scale: float = 0.08
    texture_color: np.ndarray = field(default_factory=lambda: np.array([0.15, 0.2, 0.35]))
    reflectance: float = 0.8
    tint: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.85, 0.9]))
    tint_alpha: float = 0.15
    seed: int = 0


@dataclass
class Primitive:
    name: str
    kind: str  # quad | box | sphere
    material: Material
    center: np.ndarray
    u: np.ndarray | None = None
    v: np.ndarray | None = None
    half: np.ndarray | None = None
    radius: float = 0.0


@dataclass
class Light:
    kind: str
    vector: np.ndarray
    intensity: float


@dataclass
class CameraRig:
    width: int = 64
    height: int = 64
    fov_deg: float = 50.0
    radius: float = 1.2
    elevations_deg: tuple = (15.0,)
    arc_deg: float = 360.0
    arc_center_deg: float = 90.0
    target: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ssaa: int = 2


@dataclass
class OracleScene:
    primitives: list[Primitive]
    lights: list[Light] = field(default_factory=list)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ambient: float = 0.3
    environment: str = "none"
    rig: CameraRig = field(default_factory=CameraRig)
    source: str = ""

    def centroid(self) -> np.ndarray:
        return np.mean([p.center for p in self.primitives], axis=0)

    def extent(self) -> float:
        lo, hi = self.gt_mesh().bounds()
        return float(np.linalg.norm(hi - lo))

    def gt_mesh(self, sphere_res: int = 48) -> TriangleMesh:
        verts, faces = [], []
        base = 0
        for p in self.primitives:
            v, f = _primitive_mesh(p, sphere_res)
            verts.append(v)
            faces.append(f + base)
            base += len(v)
        if not verts:
            return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        return TriangleMesh(np.concatenate(verts), np.concatenate(faces))


def _vec(text: str) -> np.ndarray:
    return np.array([float(x) for x in text.replace(",", " ").split()], dtype=np.float64)


def parse_scene(text: str) -> OracleScene:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.read_string(text)
    sc = cp["scene"] if cp.has_section("scene") else {}
    rig = CameraRig()
    if cp.has_section("camera"):
        c = cp["camera"]
        rig = CameraRig(
            width=c.getint("width", rig.width),
            height=c.getint("height", rig.height),
            fov_deg=c.getfloat("fov_deg", rig.fov_deg),
            radius=c.getfloat("radius", rig.radius),
            elevations_deg=tuple(_vec(c.get("elevations_deg", "15"))),
            arc_deg=c.getfloat("arc_deg", rig.arc_deg),
            arc_center_deg=c.getfloat("arc_center_deg", rig.arc_center_deg),
            target=_vec(c.get("target", "0 0 0")),
            ssaa=c.getint("ssaa", rig.ssaa),
        )
    lights = []
    prims = []
    for name in cp.sections():
        sec = cp[name]
        if name.startswith("light."):
            kind = sec.get("type", "directional")
            if kind not in ("directional", "point"):
                raise ValueError(f"[{name}] unknown light type {kind}")
            vec = _vec(sec.get("direction" if kind == "directional" else "position"))
            if kind == "directional":
                vec = vec / np.linalg.norm(vec)
            lights.append(Light(kind, vec, sec.getfloat("intensity", 1.0)))
        elif name.startswith("primitive."):
            pname = name.split(".", 1)[1]
            kind = sec.get("type")
            mat = Material(
                kind=sec.get("material", "diffuse"),
                albedo=_vec(sec.get("albedo", "0.7 0.7 0.7")),
                texture=sec.get("texture", "none"),
                texture_scale=sec.getfloat("texture_scale", 0.08),
                texture_color=_vec(sec.get("texture_color", "0.15 0.2 0.35")),
                reflectance=sec.getfloat("reflectance", 0.8),
                tint=_vec(sec.get("tint", "0.7 0.85 0.9")),
                tint_alpha=sec.getfloat("tint_alpha", 0.15),
                seed=zlib.crc32(pname.encode()),
            )
            if mat.kind not in ("diffuse", "mirror", "glass"):
                raise ValueError(f"[{name}] unknown material {mat.kind}")
            center = _vec(sec.get("center", "0 0 0"))
            if kind == "quad":
                u, v = _vec(sec["u"]), _vec(sec["v"])
                if abs(u @ v) > 1e-9 * np.linalg.norm(u) * np.linalg.norm(v):
                    raise ValueError(f"[{name}] quad edges must be orthogonal")
                prims.append(Primitive(pname, "quad", mat, center, u=u, v=v))
            elif kind == "box":
                prims.append(Primitive(pname, "box", mat, center, half=_vec(sec["half"])))
            elif kind == "sphere":
                prims.append(Primitive(pname, "sphere", mat, center, radius=sec.getfloat("radius")))
            else:
                raise ValueError(f"[{name}] unknown primitive type {kind}")
            if mat.kind == "glass" and kind != "quad":
                raise ValueError(f"[{name}] glass is only supported on quads")
    return OracleScene(
        primitives=prims,
        lights=lights,
        background=_vec(sc.get("background", "0 0 0")),
        ambient=float(sc.get("ambient", 0.3)),
        environment=sc.get("environment", "none"),
        rig=rig,
        source=text,
    )


def load_scene(name_or_path: str | Path) -> OracleScene:
    """Load a scene file, or a built-in preset by name (glass_pane, mirror_quad, box)."""
    path = Path(name_or_path)
    if not path.is_file():
        preset = SCENE_DIR / f"{name_or_path}.ini"
        if not preset.is_file():
            raise FileNotFoundError(f"scene config not found: {name_or_path}")
        path = preset
    return parse_scene(path.read_text())


# -- geometry ---------------------------------------------------------------


def _primitive_mesh(p: Primitive, res: int):
    if p.kind == "quad":
        c, u, v = p.center, p.u, p.v
        verts = np.array([c - u - v, c + u - v, c + u + v, c - u + v])
        return verts, np.array([[0, 1, 2], [0, 2, 3]])
    if p.kind == "box":
        h = p.half
        corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)]) * h + p.center
        faces = np.array([
            [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],  # -x, +x
            [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],  # -y, +y
            [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],  # -z, +z
        ])
        return corners, faces
    # UV sphere
    th = np.linspace(0, np.pi, res + 1)[1:-1]
    ph = np.linspace(0, 2 * np.pi, 2 * res, endpoint=False)
    ring = np.stack([np.outer(np.sin(th), np.cos(ph)), np.outer(np.sin(th), np.sin(ph)),
                     np.outer(np.cos(th), np.ones_like(ph))], axis=-1).reshape(-1, 3)
    verts = np.concatenate([[[0, 0, 1]], ring, [[0, 0, -1]]]) * p.radius + p.center
    m = len(ph)
    faces = []
    for j in range(m):
        faces.append([0, 1 + j, 1 + (j + 1) % m])
    for i in range(len(th) - 1):
        for j in range(m):
            a = 1 + i * m + j
            b = 1 + i * m + (j + 1) % m
            faces += [[a, a + m, b], [b, a + m, b + m]]
    last = len(verts) - 1
    base = 1 + (len(th) - 1) * m
    for j in range(m):
        faces.append([base + j, last, base + (j + 1) % m])
    return verts, np.array(faces)


def _intersect(p: Primitive, o: np.ndarray, d: np.ndarray):
    """Return (t, normal) per ray; t = inf for misses. Normals are outward/geometric."""
    n_rays = o.shape[0]
    t = np.full(n_rays, np.inf)
    nrm = np.zeros((n_rays, 3))
    if p.kind == "quad":
        n = np.cross(p.u, p.v)
        n /= np.linalg.norm(n)
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = ((p.center - o) @ n) / denom
        hit = o + tt[:, None] * d - p.center
        a = hit @ p.u / (p.u @ p.u)
        b = hit @ p.v / (p.v @ p.v)
        ok = (np.abs(denom) > 1e-12) & (tt > EPS) & (np.abs(a) <= 1) & (np.abs(b) <= 1)
        t[ok] = tt[ok]
        nrm[ok] = n
    elif p.kind == "sphere":
        oc = o - p.center
        b = np.sum(oc * d, axis=1)
        c = np.sum(oc * oc, axis=1) - p.radius ** 2
        disc = b * b - c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0))
        t0 = -b - sq
        t1 = -b + sq
        tt = np.where(t0 > EPS, t0, t1)
        ok &= tt > EPS
        t[ok] = tt[ok]
        pts = o[ok] + tt[ok, None] * d[ok]
        nrm[ok] = (pts - p.center) / p.radius
    else:
        lo = p.center - p.half
        hi = p.center + p.half
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t_lo = (lo - o) * inv
            t_hi = (hi - o) * inv
        t_near = np.nan_to_num(np.minimum(t_lo, t_hi), nan=-np.inf)
        t_far = np.nan_to_num(np.maximum(t_lo, t_hi), nan=np.inf)
        tn = t_near.max(axis=1)
        tf = t_far.min(axis=1)
        ok = (tn <= tf) & (tf > EPS)
        tt = np.where(tn > EPS, tn, tf)
        t[ok] = tt[ok]
        pts = o + np.where(ok, tt, 0)[:, None] * d
        rel = (pts - p.center) / p.half
        axis = np.argmax(np.abs(rel), axis=1)
        sgn = np.sign(rel[np.arange(n_rays), axis])
        nn = np.zeros((n_rays, 3))
        nn[np.arange(n_rays), axis] = sgn
        nrm[ok] = nn[ok]
    return t, nrm


def first_hit(scene: OracleScene, o: np.ndarray, d: np.ndarray):
    """Closest hit over all primitives: (t, primitive index or -1, geometric normal)."""
    best_t = np.full(o.shape[0], np.inf)
    best_i = np.full(o.shape[0], -1)
    best_n = np.zeros_like(o)
    for i, p in enumerate(scene.primitives):
        t, n = _intersect(p, o, d)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_i[closer] = i
        best_n[closer] = n[closer]
    return best_t, best_i, best_n


def _albedo(mat: Material, pts: np.ndarray) -> np.ndarray:
    base = np.broadcast_to(mat.albedo, pts.shape).copy()
    if mat.texture == "checker":
        cell = np.floor(pts / mat.texture_scale).astype(np.int64).sum(axis=1) % 2
        base[cell == 1] = mat.texture_color
    elif mat.texture == "waves":
        rng = np.random.default_rng(mat.seed)
        freqs = rng.normal(size=(4, 3))
        freqs /= np.linalg.norm(freqs, axis=1, keepdims=True)
        freqs *= (2 * np.pi / mat.texture_scale) * rng.uniform(0.6, 1.4, size=(4, 1))
        phase = rng.uniform(0, 2 * np.pi, size=4)
        s = np.sin(pts @ freqs.T + phase).mean(axis=1) * 0.5 + 0.5
        s = np.clip(s * 1.6 - 0.3, 0, 1)
        base = base * (1 - s[:, None]) + mat.texture_color * s[:, None]
    elif mat.texture != "none":
        raise ValueError(f"unknown texture {mat.texture}")
    return base


def environment(scene: OracleScene, d: np.ndarray) -> np.ndarray:
    """Radiance of secondary rays that escape the scene."""
    if scene.environment == "none":
        return np.broadcast_to(scene.background, d.shape).copy()
    # sky: horizon-to-zenith gradient plus two coloured lobes, strongly directional
    up = np.clip(d[:, 2], -1, 1)[:, None]
    sky = np.array([0.25, 0.35, 0.6]) * (0.5 + 0.5 * up) + np.array([0.35, 0.25, 0.15]) * (0.5 - 0.5 * up)
    lobe1 = np.exp(8 * (d @ np.array([0.6, 0.48, 0.64]) - 1))[:, None] * np.array([1.2, 1.0, 0.6])
    lobe2 = np.exp(12 * (d @ np.array([-0.7, 0.5, 0.1]) / np.linalg.norm([-0.7, 0.5, 0.1]) - 1))[:, None]
    return np.clip(sky + lobe1 + lobe2 * np.array([0.3, 0.9, 0.5]), 0, 1)


def _diffuse(scene: OracleScene, mat: Material, pts: np.ndarray, n_face: np.ndarray) -> np.ndarray:
    light = np.full(len(pts), scene.ambient)
    for lt in scene.lights:
        if lt.kind == "directional":
            ldir = np.broadcast_to(lt.vector, pts.shape)
        else:
            ldir = lt.vector - pts
            ldir = ldir / np.linalg.norm(ldir, axis=1, keepdims=True)
        light = light + lt.intensity * np.maximum(np.sum(n_face * ldir, axis=1), 0)
    return _albedo(mat, pts) * light[:, None]


def _shade(scene: OracleScene, o, d, depth: int, primary: bool) -> np.ndarray:
    t, idx, n = first_hit(scene, o, d)
    miss = idx < 0
    out = np.zeros_like(o)
    if miss.any():
        out[miss] = np.broadcast_to(scene.background, (miss.sum(), 3)) if primary else environment(scene, d[miss])
    for i, prim in enumerate(scene.primitives):
        sel = idx == i
        if not sel.any():
            continue
        mat = prim.material
        pts = o[sel] + t[sel, None] * d[sel]
        nn = n[sel]
        n_face = np.where((np.sum(nn * d[sel], axis=1) > 0)[:, None], -nn, nn)
        if mat.kind == "diffuse" or depth == 0:
            col = _diffuse(scene, mat, pts, n_face)
            if mat.kind == "glass":
                col = mat.tint * np.ones_like(col)
        elif mat.kind == "mirror":
            dd = d[sel]
            refl = dd - 2 * np.sum(dd * n_face, axis=1, keepdims=True) * n_face
            bounce = _shade(scene, pts + 1e-6 * n_face, refl, 0, False)
            col = (1 - mat.reflectance) * _diffuse(scene, mat, pts, n_face) + mat.reflectance * bounce
        else:
            through = _shade(scene, pts + 1e-6 * d[sel], d[sel], depth - 1, primary)
            col = mat.tint_alpha * mat.tint + (1 - mat.tint_alpha) * through
        out[sel] = col
    return out


def trace(scene: OracleScene, camera: Camera, ssaa: int | None = None):
    """Return (rgb, first-hit camera-z depth, first-hit camera-frame normal, mask, hit index)."""
    k = camera.intrinsics
    ssaa = scene.rig.ssaa if ssaa is None else ssaa
    h, w = k.height, k.width
    # geometry at pixel centers
    rays = camera.pixel_rays().reshape(-1, 3)
    dirs_w = rays @ camera.pose.R.T
    dirs_w /= np.linalg.norm(dirs_w, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, dirs_w.shape).copy()
    t, idx, n = first_hit(scene, origins, dirs_w)
    mask = idx >= 0
    pts = origins + np.where(mask, t, 0)[:, None] * dirs_w
    depth = np.where(mask, camera.world_to_camera(pts)[:, 2], 0.0)
    n_cam = n @ camera.pose.R
    flip = np.sum(n_cam * rays, axis=1) > 0
    n_cam[flip] *= -1
    n_cam[~mask] = 0
    # supersampled radiance
    offs = (np.arange(ssaa) + 0.5) / ssaa - 0.5
    acc = np.zeros((h * w, 3))
    for oy in offs:
        for ox in offs:
            xs = (np.arange(w) + 0.5 + ox - k.cx) / k.fx
            ys = (np.arange(h) + 0.5 + oy - k.cy) / k.fy
            gx, gy = np.meshgrid(xs, ys)
            r = np.stack([gx, gy, np.ones_like(gx)], axis=-1).reshape(-1, 3) @ camera.pose.R.T
            r /= np.linalg.norm(r, axis=1, keepdims=True)
            acc += _shade(scene, origins, r, 2, True)
    rgb = np.clip(acc / ssaa ** 2, 0, 1)
    return (rgb.reshape(h, w, 3), depth.reshape(h, w), n_cam.reshape(h, w, 3),
            mask.reshape(h, w).astype(np.uint8), np.where(mask, idx, -1).reshape(h, w))


# -- dataset generation -----------------------------------------------------


def rig_cameras(scene: OracleScene, n_views: int, radius: float | None = None,
                phase: float = 0.0) -> list[Camera]:
    """Cameras on rings around the target; ``phase`` in [0,1) shifts along the arc."""
    rig = scene.rig
    radius = rig.radius if radius is None else radius
    f = 0.5 * rig.width / np.tan(np.radians(rig.fov_deg) / 2)
    intr = CameraIntrinsics(f, f, rig.width / 2, rig.height / 2, rig.width, rig.height)
    elevs = list(rig.elevations_deg)
    cams = []
    full = abs(rig.arc_deg - 360.0) < 1e-9
    for v in range(n_views):
        elev = np.radians(elevs[v % len(elevs)])
        if full:
            frac = (v + phase) / n_views
            az = np.radians(rig.arc_center_deg) + 2 * np.pi * frac
        else:
            frac = (v + 0.5 + phase) / n_views - 0.5
            az = np.radians(rig.arc_center_deg + rig.arc_deg * frac)
        eye = rig.target + radius * np.array([np.cos(elev) * np.cos(az),
                                              np.cos(elev) * np.sin(az), np.sin(elev)])
        cams.append(Camera(intr, CameraPose.look_at(eye, rig.target)))
    return cams


def camera_to_json(view_id: str, cam: Camera) -> dict:
    k = cam.intrinsics
    return {"id": view_id, "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
            "width": k.width, "height": k.height,
            "R": cam.pose.R.tolist(), "T": cam.pose.T.tolist()}


def camera_from_json(d: dict) -> Camera:
    return Camera(CameraIntrinsics(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"])),
                  CameraPose(np.array(d["R"]), np.array(d["T"])))


def _corrupt_normals(n: np.ndarray, sel: np.ndarray, angle_deg: float, rng) -> np.ndarray:
    """Rotate normals at ``sel`` by ``angle_deg`` about random perpendicular axes."""
    out = n.copy()
    idx = np.nonzero(sel.reshape(-1))[0]
    flat = out.reshape(-1, 3)
    if idx.size == 0:
        return out
    v = flat[idx]
    rnd = rng.normal(size=(idx.size, 3))
    axis = np.cross(v, rnd)
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    a = np.radians(angle_deg)
    rot = v * np.cos(a) + np.cross(axis, v) * np.sin(a)
    flat[idx] = rot / np.linalg.norm(rot, axis=1, keepdims=True)
    return out


@dataclass
class OracleDataset:
    out_dir: Path
    view_ids: list[str]
    cameras: list[Camera]
    scale_offset: dict[str, tuple[float, float]]
    test_ids: list[str]
    test_cameras: list[Camera]


def make_dataset(scene: OracleScene, n_views: int, radius: float | None, seed: int,
                 out_dir: str | Path, n_test: int = 0, points_per_view: int = 150,
                 corrupt_head_on: bool = False, corrupt_deg: float = 25.0,
                 corrupt_angle_deg: float = 40.0, corrupt_materials=("glass", "mirror", "diffuse"),
                 ) -> OracleDataset:
    if n_views < 2:
        raise ValueError("need at least 2 views")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    rng = np.random.default_rng(seed)
    cams = rig_cameras(scene, n_views, radius)
    view_ids = [f"view_{i:03d}" for i in range(n_views)]
    traced = [trace(scene, c) for c in cams]
    so = {}
    gt_dir = out / "gt"
    gt_dir.mkdir(exist_ok=True)
    for vid, cam, (rgb, depth, normal, mask, hit) in zip(view_ids, cams, traced):
        s = float(rng.uniform(0.5, 2.0))
        o = float(rng.uniform(-0.2, 0.2))
        so[vid] = (s, o)
        far = depth[mask > 0].max() * 1.5 if mask.any() else 10.0
        metric = np.where(mask > 0, depth, far)
        write_png(out / "images" / f"{vid}.png", rgb)
        write_png(out / "masks" / f"{vid}.png", mask * 255)
        write_raw(out / "depth" / f"{vid}.raw", (metric - o) / s)
        rays = cam.unit_pixel_rays()
        theta = np.degrees(np.arccos(np.clip(np.abs(np.sum(normal * rays, axis=-1)), 0, 1)))
        mats = np.array([p.material.kind for p in scene.primitives] + ["none"])
        kind = mats[hit]
        corrupt = np.zeros(mask.shape, dtype=bool)
        if corrupt_head_on:
            corrupt = (mask > 0) & (theta <= corrupt_deg) & np.isin(kind, list(corrupt_materials))
        labels = _corrupt_normals(normal, corrupt, corrupt_angle_deg, rng) if corrupt.any() else normal
        write_png(out / "normals" / f"{vid}.png", encode_normal_png(labels))
        glass = (kind == "glass")
        np.savez_compressed(gt_dir / f"{vid}.npz",
                            depth=depth, normal=normal, mask=mask, hit=hit, corrupt=corrupt,
                            glass=glass, rgb=rgb)
    _write_sparse(scene, out, view_ids, cams, traced, rng, points_per_view)
    # held-out views, interleaved with the training ring
    test_ids, test_cams = [], []
    if n_test:
        test_cams = rig_cameras(scene, n_test, radius, phase=0.5 if n_test == n_views else 0.37)
        for i, cam in enumerate(test_cams):
            tid = f"test_{i:03d}"
            rgb, depth, normal, mask, hit = trace(scene, cam)
            write_png(out / "test" / "images" / f"{tid}.png", rgb)
            mats = np.array([p.material.kind for p in scene.primitives] + ["none"])
            np.savez_compressed(gt_dir / f"{tid}.npz", depth=depth, normal=normal, mask=mask,
                                hit=hit, glass=mats[hit] == "glass", rgb=rgb,
                                corrupt=np.zeros(mask.shape, dtype=bool))
            test_ids.append(tid)
    mesh = scene.gt_mesh()
    write_ply(gt_dir / "gt_mesh.ply", mesh)
    meta = {
        "seed": seed,
        "n_views": n_views,
        "scale_offset": {k: list(v) for k, v in so.items()},
        "extent": scene.extent(),
        "corrupt_head_on": corrupt_head_on,
        "corrupt_deg": corrupt_deg,
        "cameras": [camera_to_json(v, c) for v, c in zip(view_ids, cams)],
        "test_cameras": [camera_to_json(v, c) for v, c in zip(test_ids, test_cams)],
        "background": list(map(float, scene.background)),
    }
    (gt_dir / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    (gt_dir / "scene.ini").write_text(scene.source)
    return OracleDataset(out, view_ids, cams, so, test_ids, test_cams)


def _f(x) -> str:
    return repr(float(x))


def _write_sparse(scene, out: Path, view_ids, cams, traced, rng, per_view: int) -> None:
    """COLMAP-style text model; points only on diffuse surfaces, visible in >= 2 views."""
    sparse = out / "sparse" / "0"
    sparse.mkdir(parents=True, exist_ok=True)
    k = cams[0].intrinsics
    (sparse / "cameras.txt").write_text(
        "# Camera list with one line of data per camera:\n"
        "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n"
        f"1 PINHOLE {k.width} {k.height} {_f(k.fx)} {_f(k.fy)} {_f(k.cx)} {_f(k.cy)}\n")
    points = []
    for vi, (cam, (rgb, depth, normal, mask, hit)) in enumerate(zip(cams, traced)):
        kinds = np.array([p.material.kind for p in scene.primitives] + ["none"])[hit]
        ii, jj = np.nonzero((mask > 0) & (kinds == "diffuse"))
        if ii.size == 0:
            continue
        pick = rng.choice(ii.size, size=min(per_view, ii.size), replace=False)
        pick.sort()
        i, j = ii[pick], jj[pick]
        rays = cam.pixel_rays()[i, j]
        world = cam.camera_to_world(rays * depth[i, j][:, None])
        for p, col in zip(world, rgb[i, j]):
            points.append((vi, p, col))
    obs_per_view = [[] for _ in cams]
    tracks = []
    for pid, (src, p, col) in enumerate(points):
        track = []
        for vi, cam in enumerate(cams):
            px, z = cam.project(p[None])
            x, y = px[0]
            if z[0] <= 0 or not (0 <= x < k.width and 0 <= y < k.height):
                continue
            d = p - cam.center
            dist = np.linalg.norm(d)
            t, idx, _ = first_hit(scene, cam.center[None], (d / dist)[None])
            if idx[0] < 0 or abs(t[0] - dist) > 1e-6 * max(1.0, dist):
                continue
            track.append((vi, len(obs_per_view[vi])))
            obs_per_view[vi].append((x, y, pid + 1))
        if len(track) >= 2:
            tracks.append((pid + 1, p, col, track))
    valid = {t[0] for t in tracks}
    lines = ["# Image list with two lines of data per image:",
             "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
             "#   POINTS2D[] as (X, Y, POINT3D_ID)"]
    for vi, (vid, cam) in enumerate(zip(view_ids, cams)):
        rcw = cam.pose.R.T
        q = rotmat_to_quat(rcw)
        t = -rcw @ cam.pose.T
        lines.append(f"{vi + 1} " + " ".join(_f(x) for x in (*q, *t)) + f" 1 {vid}.png")
        lines.append(" ".join(f"{_f(x)} {_f(y)} {pid if pid in valid else -1}"
                              for x, y, pid in obs_per_view[vi]))
    (sparse / "images.txt").write_text("\n".join(lines) + "\n")
    plines = ["# 3D point list with one line of data per point:",
              "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)"]
    for pid, p, col, track in tracks:
        rgb8 = np.clip(np.round(col * 255), 0, 255).astype(int)
        tr = " ".join(f"{vi + 1} {idx}" for vi, idx in track)
        plines.append(f"{pid} {_f(p[0])} {_f(p[1])} {_f(p[2])} {rgb8[0]} {rgb8[1]} {rgb8[2]} 0.0 {tr}")
    (sparse / "points3D.txt").write_text("\n".join(plines) + "\n")
