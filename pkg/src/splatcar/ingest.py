"""Dataset ingestion: COLMAP text models, per-view rasters, depth alignment, splat init.

Layout of a scene directory::

    sparse/0/{cameras,images,points3D}.txt
    images/<view>.png   masks/<view>.png   depth/<view>.raw   normals/<view>.png

``.raw`` files hold width and height as little-endian int32 followed by
row-major little-endian float32 values. Normal PNGs store camera-frame unit
normals as (n + 1) / 2 in 8-bit RGB.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .camera import Camera, CameraIntrinsics, CameraPose
from .splat_model import (
    VdgSet,
    VsgSet,
    frame_from_normal,
    logit,
    num_sh_coeffs,
    quat_to_rotmat,
    rgb_to_sh_dc,
)

log = logging.getLogger(__name__)

INIT_OPACITY = 0.1
DEPTH_EDGE_TOL = 0.05  # relative depth spread marking an occlusion edge
TRIM_FRACTION = 0.2


class IngestError(ValueError):
    pass


@dataclass
class SfmPoint:
    position: np.ndarray
    observations: list[tuple[str, np.ndarray]]
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))


@dataclass
class ViewRecord:
    view_id: str
    intrinsics: CameraIntrinsics
    pose: CameraPose
    rgb: np.ndarray | None = None
    mask: np.ndarray | None = None
    depth_rel: np.ndarray | None = None
    normals: np.ndarray | None = None
    scale: float | None = None
    offset: float | None = None
    image_name: str = ""

    @property
    def camera(self) -> Camera:
        return Camera(self.intrinsics, self.pose)

    @property
    def aligned(self) -> bool:
        return self.scale is not None and self.offset is not None

    def metric_depth(self) -> np.ndarray:
        if not self.aligned:
            raise IngestError(f"view {self.view_id}: depth not aligned")
        return self.depth_rel * self.scale + self.offset


# -- raster files -----------------------------------------------------------


def read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise IngestError(f"{path}: truncated raw header")
    w, h = np.frombuffer(data[:8], dtype="<i4")
    values = np.frombuffer(data[8:], dtype="<f4")
    if values.size != w * h:
        raise IngestError(f"{path}: expected {w * h} floats, found {values.size}")
    return values.reshape(h, w).astype(np.float64)


def write_raw(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    h, w = grid.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(np.array([w, h], dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def read_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def write_png(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as img:
        return (np.asarray(img.convert("L")) > 127).astype(np.uint8)


def read_normals(path) -> np.ndarray:
    n = read_png(path) * 2.0 - 1.0
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    return np.where(norm > 0, n / np.where(norm > 0, norm, 1.0), 0.0)


# -- COLMAP text model ------------------------------------------------------


def _data_lines(path: Path):
    if not path.is_file():
        raise IngestError(f"missing file: {path}")
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if stripped and not stripped.startswith("#"):
            yield lineno, stripped


def qvec_to_rotmat(qvec) -> np.ndarray:
    return quat_to_rotmat(np.asarray(qvec, dtype=np.float64))[0]


def parse_colmap_sparse(path) -> tuple[list[ViewRecord], list[SfmPoint]]:
    """Parse cameras/images/points3D.txt; poses are returned camera-to-world."""
    path = Path(path)
    cams = {}
    cam_file = path / "cameras.txt"
    for lineno, line in _data_lines(cam_file):
        parts = line.split()
        try:
            cam_id, model, w, h = int(parts[0]), parts[1], int(parts[2]), int(parts[3])
            params = [float(p) for p in parts[4:]]
        except (ValueError, IndexError) as exc:
            raise IngestError(f"{cam_file}:{lineno}: malformed camera line") from exc
        if model == "SIMPLE_PINHOLE" and len(params) == 3:
            f, cx, cy = params
            cams[cam_id] = CameraIntrinsics(f, f, cx, cy, w, h)
        elif model == "PINHOLE" and len(params) == 4:
            cams[cam_id] = CameraIntrinsics(params[0], params[1], params[2], params[3], w, h)
        elif model in ("SIMPLE_PINHOLE", "PINHOLE"):
            raise IngestError(f"{cam_file}:{lineno}: wrong parameter count for {model}")
        else:
            raise IngestError(f"{cam_file}:{lineno}: unsupported camera model {model}")

    img_file = path / "images.txt"
    views: list[ViewRecord] = []
    image_ids: dict[int, ViewRecord] = {}
    keypoints: dict[int, np.ndarray] = {}
    if not img_file.is_file():
        raise IngestError(f"missing file: {img_file}")
    # images.txt alternates pose lines and 2D point lines; the latter may be empty
    raw_lines = img_file.read_text().splitlines()
    content = [(i + 1, l.strip()) for i, l in enumerate(raw_lines) if not l.strip().startswith("#")]
    k = 0
    while k < len(content):
        lineno, line = content[k]
        if not line:
            k += 1
            continue
        parts = line.split()
        try:
            image_id = int(parts[0])
            qvec = [float(v) for v in parts[1:5]]
            tvec = np.array([float(v) for v in parts[5:8]])
            cam_id = int(parts[8])
            name = parts[9]
        except (ValueError, IndexError) as exc:
            raise IngestError(f"{img_file}:{lineno}: malformed image line") from exc
        if cam_id not in cams:
            raise IngestError(f"{img_file}:{lineno}: unknown camera id {cam_id}")
        pts_line = content[k + 1][1] if k + 1 < len(content) else ""
        vals = pts_line.split()
        if len(vals) % 3:
            raise IngestError(f"{img_file}:{content[k + 1][0]}: malformed 2D point list")
        kp = np.array([float(v) for v in vals], dtype=np.float64).reshape(-1, 3)
        keypoints[image_id] = kp
        rc = qvec_to_rotmat(qvec)
        pose = CameraPose(rc.T, -rc.T @ tvec)
        view = ViewRecord(Path(name).stem, cams[cam_id], pose, image_name=name)
        views.append(view)
        image_ids[image_id] = view
        k += 2

    pts_file = path / "points3D.txt"
    points: list[SfmPoint] = []
    for lineno, line in _data_lines(pts_file):
        parts = line.split()
        try:
            xyz = np.array([float(v) for v in parts[1:4]])
            rgb = np.array([float(v) for v in parts[4:7]]) / 255.0
            track = [int(v) for v in parts[8:]]
        except (ValueError, IndexError) as exc:
            raise IngestError(f"{pts_file}:{lineno}: malformed point line") from exc
        if len(track) % 2:
            raise IngestError(f"{pts_file}:{lineno}: odd track length")
        obs = []
        for image_id, idx in zip(track[::2], track[1::2]):
            if image_id not in image_ids:
                raise IngestError(f"{pts_file}:{lineno}: unknown image id {image_id}")
            kp = keypoints[image_id]
            if idx >= len(kp):
                raise IngestError(f"{pts_file}:{lineno}: 2D point index {idx} out of range")
            obs.append((image_ids[image_id].view_id, kp[idx, :2].copy()))
        points.append(SfmPoint(xyz, obs, rgb))
    return views, points


# -- depth alignment and back-projection ------------------------------------


def fit_scale_offset(z_rel, z_sfm) -> tuple[float, float]:
    """Least-squares z_sfm ~ s * z_rel + o, with one re-fit after a 20% residual trim."""
    z_rel = np.asarray(z_rel, dtype=np.float64)
    z_sfm = np.asarray(z_sfm, dtype=np.float64)
    if z_rel.size < 2:
        raise IngestError(f"need at least 2 depth correspondences, got {z_rel.size}")
    if np.ptp(z_rel) <= 1e-12 * max(1.0, np.abs(z_rel).max()):
        raise IngestError("degenerate depth alignment: all relative depths are equal")

    def solve(a, b):
        design = np.stack([a, np.ones_like(a)], axis=1)
        (s, o), *_ = np.linalg.lstsq(design, b, rcond=None)
        return float(s), float(o)

    s, o = solve(z_rel, z_sfm)
    drop = int(np.floor(TRIM_FRACTION * z_rel.size))
    if drop:
        resid = np.abs(z_rel * s + o - z_sfm)
        keep = np.argsort(resid, kind="stable")[: z_rel.size - drop]
        if np.ptp(z_rel[keep]) > 1e-12 * max(1.0, np.abs(z_rel).max()):
            s, o = solve(z_rel[keep], z_sfm[keep])
    if s <= 0:
        raise IngestError(f"depth alignment produced non-positive scale {s:.6g}")
    return s, o


def sample_bilinear(grid: np.ndarray, px: np.ndarray) -> np.ndarray:
    """Sample (H,W) ``grid`` at continuous image coords (N,2) with pixel centers at +0.5."""
    h, w = grid.shape
    x = np.clip(px[:, 0] - 0.5, 0, w - 1)
    y = np.clip(px[:, 1] - 0.5, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 2 if w > 1 else 0)
    y0 = np.minimum(np.floor(y).astype(int), h - 2 if h > 1 else 0)
    fx, fy = x - x0, y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = grid[y0, x0] * (1 - fx) + grid[y0, x1] * fx
    bot = grid[y1, x0] * (1 - fx) + grid[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _stencil(grid: np.ndarray, px: np.ndarray) -> np.ndarray:
    """The four grid values a bilinear sample at ``px`` reads, shape (N, 4)."""
    h, w = grid.shape
    x = np.clip(px[:, 0] - 0.5, 0, w - 1)
    y = np.clip(px[:, 1] - 0.5, 0, h - 1)
    x0, y0 = np.floor(x).astype(int), np.floor(y).astype(int)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    return np.stack([grid[y0, x0], grid[y0, x1], grid[y1, x0], grid[y1, x1]], axis=1)


def _stencil_inside(mask: np.ndarray, px: np.ndarray) -> np.ndarray:
    return _stencil(mask, px).all(axis=1)


def _stencil_smooth(depth: np.ndarray, px: np.ndarray, tol: float = DEPTH_EDGE_TOL) -> np.ndarray:
    """False where the stencil spans a depth edge (occlusion boundary)."""
    s = _stencil(depth, px)
    return np.ptp(s, axis=1) <= tol * np.abs(s).mean(axis=1)


def align_depth(view: ViewRecord, points: list[SfmPoint]) -> tuple[float, float]:
    """Fit (scale, offset) mapping the view's relative depth onto SfM depths."""
    if view.depth_rel is None:
        raise IngestError(f"view {view.view_id}: no relative depth loaded")
    pos = np.array([p.position for p in points if any(v == view.view_id for v, _ in p.observations)])
    if pos.size == 0:
        raise IngestError(f"view {view.view_id}: no SfM observations")
    px, z = view.camera.project(pos)
    k = view.intrinsics
    inside = (z > 0) & (px[:, 0] >= 0) & (px[:, 0] < k.width) & (px[:, 1] >= 0) & (px[:, 1] < k.height)
    if inside.sum() < 2:
        raise IngestError(f"view {view.view_id}: fewer than 2 usable SfM observations")
    # skip samples whose bilinear stencil straddles the silhouette or an occlusion edge
    stencil = _stencil_smooth(view.depth_rel, px)
    if view.mask is not None:
        stencil &= _stencil_inside(view.mask > 0, px)
    if (inside & stencil).sum() >= 2:
        inside &= stencil
    z_rel = sample_bilinear(view.depth_rel, px[inside])
    try:
        return fit_scale_offset(z_rel, z[inside])
    except IngestError as exc:
        raise IngestError(f"view {view.view_id}: {exc}") from exc


def backproject_pixel(px, z, K: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    px = np.asarray(px, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise IngestError("back-projection needs positive depth")
    p_cam = np.stack([(px[..., 0] - K.cx) * z / K.fx, (px[..., 1] - K.cy) * z / K.fy, z], axis=-1)
    return p_cam @ pose.R.T + pose.T


def _knn_scale(points: np.ndarray, floor: np.ndarray) -> np.ndarray:
    n = len(points)
    if n < 2:
        return floor.copy()
    kk = min(3, n - 1)
    dist, _ = cKDTree(points).query(points, k=kk + 1)
    mean = dist[:, 1:].mean(axis=1)
    # coincident samples (with-replacement draws) fall back to one pixel footprint
    return np.maximum(mean, floor)


def _sample_view_points(view: ViewRecord, count: int, rng: np.random.Generator):
    if view.mask is None or not np.any(view.mask):
        raise IngestError(f"view {view.view_id}: empty mask")
    if not view.aligned:
        raise IngestError(f"view {view.view_id}: depth alignment missing")
    ii, jj = np.nonzero(view.mask)
    pick = rng.integers(0, ii.size, size=count)
    i, j = ii[pick], jj[pick]
    z = view.depth_rel[i, j] * view.scale + view.offset
    good = z > 0
    i, j, z = i[good], j[good], z[good]
    px = np.stack([j + 0.5, i + 0.5], axis=1)
    world = backproject_pixel(px, z, view.intrinsics, view.pose)
    colors = view.rgb[i, j]
    footprint = z / view.intrinsics.fx
    return world, colors, footprint


def _facing_quats(points: np.ndarray, cam_centers: np.ndarray) -> np.ndarray:
    rays = points - cam_centers
    rays /= np.maximum(np.linalg.norm(rays, axis=1, keepdims=True), 1e-12)
    return frame_from_normal(-rays)


def init_vdg(view: ViewRecord, count: int, seed: int) -> VdgSet:
    rng = np.random.default_rng(seed)
    world, colors, footprint = _sample_view_points(view, count, rng)
    scale = _knn_scale(world, footprint)
    sh = rgb_to_sh_dc(colors)[:, None, :]
    return VdgSet(
        centers=world,
        quats=_facing_quats(world, np.broadcast_to(view.pose.T, world.shape)),
        log_scales=np.log(np.stack([scale, scale], axis=1)),
        sh=sh,
        raw_opacity=np.full(len(world), float(logit(INIT_OPACITY))),
        view_id=view.view_id,
    )


def init_vsg(points: list[SfmPoint], views: list[ViewRecord], extra_per_view: int,
             seed: int, sh_degree: int = 3) -> VsgSet:
    by_id = {v.view_id: v for v in views}
    pos, col, eyes, floor = [], [], [], []
    for p in points:
        owner = next((by_id[v] for v, _ in p.observations if v in by_id), None)
        if owner is None:
            continue
        pos.append(p.position)
        col.append(p.color)
        eyes.append(owner.pose.T)
        z = owner.camera.world_to_camera(p.position[None])[0, 2]
        floor.append(max(z, 1e-6) / owner.intrinsics.fx)
    pos = [np.asarray(pos).reshape(-1, 3)]
    col = [np.asarray(col).reshape(-1, 3)]
    eyes = [np.asarray(eyes).reshape(-1, 3)]
    floor = [np.asarray(floor)]
    if extra_per_view > 0:
        for idx, view in enumerate(views):
            rng = np.random.default_rng([seed, idx])
            w, c, fp = _sample_view_points(view, extra_per_view, rng)
            pos.append(w)
            col.append(c)
            eyes.append(np.broadcast_to(view.pose.T, w.shape))
            floor.append(fp)
    pos = np.concatenate(pos)
    if len(pos) == 0:
        raise IngestError("no SfM points and no depth samples to initialize from")
    col = np.concatenate(col)
    eyes = np.concatenate(eyes)
    floor = np.concatenate(floor)
    scale = _knn_scale(pos, floor)
    sh = np.zeros((len(pos), num_sh_coeffs(sh_degree), 3))
    sh[:, 0] = rgb_to_sh_dc(col)
    raw = np.full(len(pos), float(logit(INIT_OPACITY)))
    return VsgSet(
        centers=pos,
        quats=_facing_quats(pos, eyes),
        log_scales=np.log(np.stack([scale, scale], axis=1)),
        sh=sh,
        raw_opacity=raw,
        raw_geo_opacity=raw.copy(),
    )


# -- full dataset -----------------------------------------------------------


def _find(folder: Path, stem: str, suffixes: tuple[str, ...]) -> Path | None:
    for suffix in suffixes:
        for candidate in (folder / f"{stem}{suffix}", folder.parent / f"{stem}{suffix}"):
            if candidate.is_file():
                return candidate
    return None


def load_view_assets(view: ViewRecord, scene_dir: Path) -> None:
    stem = view.view_id
    img = _find(scene_dir / "images", stem, (".png",))
    if img is None:
        img = scene_dir / "images" / view.image_name
        if not img.is_file():
            raise IngestError(f"missing image for view {stem}")
    view.rgb = read_png(img)
    mask = _find(scene_dir / "masks", stem, (".png", "_mask.png"))
    view.mask = read_mask(mask) if mask else np.ones(view.rgb.shape[:2], dtype=np.uint8)
    depth = _find(scene_dir / "depth", stem, (".raw", "_depth.raw"))
    if depth is None:
        raise IngestError(f"missing relative depth for view {stem}")
    view.depth_rel = read_raw(depth)
    normals = _find(scene_dir / "normals", stem, (".png", "_normal.png"))
    view.normals = read_normals(normals) if normals else None
    shapes = {view.rgb.shape[:2], view.mask.shape, view.depth_rel.shape}
    if view.normals is not None:
        shapes.add(view.normals.shape[:2])
    if len(shapes) != 1:
        raise IngestError(f"view {stem}: raster sizes disagree {sorted(shapes)}")
    if view.rgb.shape[:2] != (view.intrinsics.height, view.intrinsics.width):
        raise IngestError(f"view {stem}: image size does not match the camera model")


def load_dataset(scene_dir, align: bool = True) -> tuple[list[ViewRecord], list[SfmPoint]]:
    """Load every view's rasters and align its depth. Views that fail alignment are dropped."""
    scene_dir = Path(scene_dir)
    views, points = parse_colmap_sparse(scene_dir / "sparse" / "0")
    for view in views:
        load_view_assets(view, scene_dir)
    if not align:
        return views, points
    kept = []
    for view in views:
        try:
            view.scale, view.offset = align_depth(view, points)
        except IngestError as exc:
            log.warning("skipping view: %s", exc)
            continue
        kept.append(view)
    return kept, points
