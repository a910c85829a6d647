"""Dual-channel differentiable splat rasterizer.

Appearance channel: VSG plus the current view's VDG, alpha = o * G.
Geometry channel: VSG only, alpha = geo_o * G, attributes are camera-z depth
and the camera-facing normal.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .camera import Camera
from .splat_model import (
    SceneModel,
    SplatPrimitive,
    num_sh_coeffs,
    quat_to_rotmat,
    quat_to_rotmat_backward,
    sh_basis,
    sh_basis_grad,
)

NEAR_CLIP = 0.01
DEFAULT_TILE = 8


class RevisionMismatch(RuntimeError):
    pass


@dataclass
class RayHit:
    index: int
    t: float
    u: float
    v: float
    weight: float
    normal: np.ndarray


def intersect_ray_splat(origin, direction, p: SplatPrimitive, index: int = 0,
                        near: float = NEAR_CLIP) -> RayHit | None:
    """Explicit ray-plane intersection with a 3-sigma disk cutoff."""
    origin = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    frame = p.tangent_frame()
    tu, tv = frame[:, 0], frame[:, 1]
    n = np.cross(tu, tv)
    denom = float(d @ n)
    if abs(denom) < 1e-9:
        return None
    t = float((p.center - origin) @ n) / denom
    if t <= near:
        return None
    rel = origin + t * d - p.center
    s = np.exp(p.log_scale)
    u = float(rel @ tu) / s[0]
    v = float(rel @ tv) / s[1]
    if u * u + v * v > _kernels.KERNEL_CUTOFF:
        return None
    facing = -n if denom > 0 else n
    return RayHit(index, t, u, v, float(np.exp(-0.5 * (u * u + v * v))), facing)


@dataclass(frozen=True)
class ChannelConfig:
    appearance: bool = True
    geometry: bool = True
    include_vdg: bool = True


@dataclass
class RenderOutput:
    rgb: np.ndarray
    expected_depth: np.ndarray
    normal: np.ndarray
    appearance_alpha: np.ndarray
    geometry_alpha: np.ndarray
    counts: np.ndarray
    revision: int = 0

    def surface_depth(self, alpha_threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
        """Expected depth renormalized by geometry alpha, and its validity mask."""
        valid = self.geometry_alpha > alpha_threshold
        depth = np.where(valid, self.expected_depth / np.where(valid, self.geometry_alpha, 1.0), 0.0)
        return depth, valid

    def unit_normal(self) -> np.ndarray:
        norm = np.linalg.norm(self.normal, axis=-1, keepdims=True)
        return np.where(norm > 0, self.normal / np.where(norm > 0, norm, 1.0), 0.0)


@dataclass
class RenderGrads:
    """Upstream gradients on every RenderOutput channel; missing channels are zero."""

    rgb: np.ndarray | None = None
    expected_depth: np.ndarray | None = None
    normal: np.ndarray | None = None
    appearance_alpha: np.ndarray | None = None
    geometry_alpha: np.ndarray | None = None


@dataclass
class TileBins:
    tile_start: np.ndarray
    tile_prims: np.ndarray
    tiles_x: int
    tiles_y: int
    tile_size: int

    def tile_list(self, tid: int) -> np.ndarray:
        return self.tile_prims[self.tile_start[tid]:self.tile_start[tid + 1]]


def splat_footprints(cc, tu, tv, su, sv, camera: Camera, near: float = NEAR_CLIP) -> np.ndarray:
    """Screen bounding rectangles [xmin, xmax, ymin, ymax] of each splat's influence.

    Covers the projected 3-sigma disk and the 1.5 px screen filter around the
    projected center. Rows are NaN for culled splats (center behind the near plane).
    """
    k = camera.intrinsics
    m = cc.shape[0]
    out = np.full((m, 4), np.nan)
    if m == 0:
        return out
    corners = np.stack([
        cc + 3 * (a * su[:, None] * tu + b * sv[:, None] * tv)
        for a in (-1.0, 1.0) for b in (-1.0, 1.0)
    ], axis=1)
    z = corners[..., 2]
    front = np.all(z > near, axis=1)
    zs = np.where(z > near, z, 1.0)
    px = k.fx * corners[..., 0] / zs + k.cx
    py = k.fy * corners[..., 1] / zs + k.cy
    alive = cc[:, 2] > near
    czs = np.where(alive, cc[:, 2], 1.0)
    pcx = k.fx * cc[:, 0] / czs + k.cx
    pcy = k.fy * cc[:, 1] / czs + k.cy
    r = np.sqrt(_kernels.FILTER_CUTOFF)
    out[:, 0] = np.minimum(px.min(axis=1), pcx - r)
    out[:, 1] = np.maximum(px.max(axis=1), pcx + r)
    out[:, 2] = np.minimum(py.min(axis=1), pcy - r)
    out[:, 3] = np.maximum(py.max(axis=1), pcy + r)
    # splats straddling the near plane: conservatively the whole image
    straddle = alive & ~front
    out[straddle] = [-np.inf, np.inf, -np.inf, np.inf]
    out[~alive] = np.nan
    return out


def _project_centers(cc: np.ndarray, camera: Camera) -> np.ndarray:
    k = camera.intrinsics
    z = np.where(np.abs(cc[:, 2]) > 0, cc[:, 2], 1.0)
    return np.ascontiguousarray(np.stack([k.fx * cc[:, 0] / z + k.cx, k.fy * cc[:, 1] / z + k.cy], axis=1))


def bin_tiles(footprints, centers_cam, normals_cam, camera: Camera,
              tile_size: int = DEFAULT_TILE) -> TileBins:
    """Assign each splat to every tile its footprint rectangle overlaps.

    Per-tile lists are sorted by the splat plane's depth along the tile-center
    ray, ties broken by primitive index.
    """
    if tile_size < 1:
        raise ValueError("tile size must be >= 1")
    k = camera.intrinsics
    w, h = k.width, k.height
    tiles_x = -(-w // tile_size)
    tiles_y = -(-h // tile_size)
    fp = np.asarray(footprints, dtype=np.float64)
    ok = ~np.isnan(fp[:, 0])
    with np.errstate(invalid="ignore"):
        j0 = np.clip(np.ceil(fp[:, 0] - 0.5), 0, w - 1)
        j1 = np.clip(np.floor(fp[:, 1] - 0.5), 0, w - 1)
        i0 = np.clip(np.ceil(fp[:, 2] - 0.5), 0, h - 1)
        i1 = np.clip(np.floor(fp[:, 3] - 0.5), 0, h - 1)
        ok &= (np.ceil(fp[:, 0] - 0.5) <= w - 1) & (np.floor(fp[:, 1] - 0.5) >= 0)
        ok &= (np.ceil(fp[:, 2] - 0.5) <= h - 1) & (np.floor(fp[:, 3] - 0.5) >= 0)
    idx = np.nonzero(ok)[0]
    tx0 = (j0[idx] // tile_size).astype(np.int64)
    tx1 = (j1[idx] // tile_size).astype(np.int64)
    ty0 = (i0[idx] // tile_size).astype(np.int64)
    ty1 = (i1[idx] // tile_size).astype(np.int64)
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    per = nx * ny
    total = int(per.sum())
    prim = np.repeat(idx, per)
    local = np.arange(total) - np.repeat(np.cumsum(per) - per, per)
    rep_nx = np.repeat(nx, per)
    tx = np.repeat(tx0, per) + local % rep_nx
    ty = np.repeat(ty0, per) + local // rep_nx
    tile_id = ty * tiles_x + tx
    # depth of the splat plane along the ray through the tile center
    xc = (tx * tile_size + np.minimum((tx + 1) * tile_size, w)) / 2.0
    yc = (ty * tile_size + np.minimum((ty + 1) * tile_size, h)) / 2.0
    dx = (xc - k.cx) / k.fx
    dy = (yc - k.cy) / k.fy
    c = centers_cam[prim]
    n = normals_cam[prim]
    denom = dx * n[:, 0] + dy * n[:, 1] + n[:, 2]
    num = np.sum(c * n, axis=1)
    steep = np.abs(denom) < 1e-6 * np.sqrt(dx * dx + dy * dy + 1)
    key = np.where(steep, c[:, 2], num / np.where(steep, 1.0, denom))
    order = np.lexsort((prim, key, tile_id))
    tile_id = tile_id[order]
    prims = prim[order].astype(np.int64)
    counts = np.bincount(tile_id, minlength=tiles_x * tiles_y)
    start = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    np.cumsum(counts, out=start[1:])
    return TileBins(start, prims, tiles_x, tiles_y, tile_size)


@dataclass
class PreparedView:
    """Camera-frame splat arrays and tile bins for one (scene, view) render."""

    camera: Camera
    view_id: str | None
    n_vsg: int
    n_vdg: int
    cc: np.ndarray
    tu: np.ndarray
    tv: np.ndarray
    nrm: np.ndarray
    su: np.ndarray
    sv: np.ndarray
    col: np.ndarray
    col_active: np.ndarray
    oa: np.ndarray
    og: np.ndarray
    dirs: np.ndarray
    dir_norm: np.ndarray
    basis: list
    degrees: list
    bins: TileBins
    footprints: np.ndarray
    projected: np.ndarray
    background: np.ndarray
    near: float
    revision: int
    sh_dir_grad: bool = True
    extras: dict = field(default_factory=dict)


def prepare_view(scene: SceneModel, camera: Camera, view_id: str | None = None,
                 channels: ChannelConfig = ChannelConfig(), active_degree: int | None = None,
                 tile_size: int = DEFAULT_TILE, near: float = NEAR_CLIP,
                 sh_dir_grad: bool = True) -> PreparedView:
    vsg = scene.vsg
    groups = [vsg]
    if channels.appearance and channels.include_vdg and view_id is not None and view_id in scene.vdg:
        groups.append(scene.vdg[view_id])
    if active_degree is None:
        active_degree = scene.sh_degree
    centers = np.concatenate([g.centers for g in groups])
    quats = np.concatenate([g.quats for g in groups])
    scales = np.exp(np.concatenate([g.log_scales for g in groups]))
    rot = quat_to_rotmat(quats)
    R = camera.pose.R
    cc = (centers - camera.center) @ R
    tu = rot[:, :, 0] @ R
    tv = rot[:, :, 1] @ R
    nrm = np.cross(tu, tv)
    offset = centers - camera.center
    dist = np.linalg.norm(offset, axis=1)
    dirs = offset / np.maximum(dist, 1e-12)[:, None]
    cols, actives, bases, degrees = [], [], [], []
    start = 0
    for g in groups:
        deg = min(active_degree, g.sh_degree)
        k = num_sh_coeffs(deg)
        basis = sh_basis(dirs[start:start + len(g)], deg)
        raw = np.einsum("nk,nkc->nc", basis, g.sh[:, :k]) + 0.5
        cols.append(np.maximum(raw, 0.0))
        actives.append(raw > 0.0)
        bases.append(basis)
        degrees.append(deg)
        start += len(g)
    oa = np.concatenate([g.opacity for g in groups])
    og = np.zeros(len(oa))
    og[:len(vsg)] = vsg.geo_opacity
    if not channels.appearance:
        oa = np.zeros_like(oa)
    if not channels.geometry:
        og = np.zeros_like(og)
    su = np.ascontiguousarray(scales[:, 0])
    sv = np.ascontiguousarray(scales[:, 1])
    fp = splat_footprints(cc, tu, tv, su, sv, camera, near)
    bins = bin_tiles(fp, cc, nrm, camera, tile_size)
    return PreparedView(
        camera=camera, view_id=view_id, n_vsg=len(vsg),
        n_vdg=len(oa) - len(vsg),
        cc=np.ascontiguousarray(cc), tu=np.ascontiguousarray(tu), tv=np.ascontiguousarray(tv),
        nrm=np.ascontiguousarray(nrm), su=su, sv=sv,
        col=np.ascontiguousarray(np.concatenate(cols)), col_active=np.concatenate(actives),
        oa=np.ascontiguousarray(oa), og=np.ascontiguousarray(og),
        dirs=dirs, dir_norm=dist, basis=bases, degrees=degrees, bins=bins, footprints=fp,
        projected=_project_centers(cc, camera),
        background=np.asarray(scene.background, dtype=np.float64), near=near,
        revision=scene.revision, sh_dir_grad=sh_dir_grad,
    )


def _kernel_args(pv: PreparedView):
    k = pv.camera.intrinsics
    b = pv.bins
    return (pv.cc, pv.tu, pv.tv, pv.nrm, pv.su, pv.sv, pv.col, pv.oa, pv.og, pv.footprints,
            pv.projected,
            float(k.fx), float(k.fy), float(k.cx), float(k.cy), int(k.width), int(k.height),
            int(b.tile_size), int(b.tiles_x), b.tile_start, b.tile_prims, pv.background,
            float(pv.near))


def rasterize(pv: PreparedView) -> RenderOutput:
    h, w = pv.camera.height, pv.camera.width
    rgb = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    normal = np.zeros((h, w, 3))
    aa = np.zeros((h, w))
    ag = np.zeros((h, w))
    counts = np.zeros((h, w), dtype=np.int64)
    _kernels.forward(*_kernel_args(pv), rgb, depth, normal, aa, ag, counts)
    return RenderOutput(rgb, depth, normal, aa, ag, counts, revision=pv.revision)


def render_view(scene: SceneModel, view_id: str | None, camera: Camera,
                channels: ChannelConfig = ChannelConfig(), active_degree: int | None = None,
                tile_size: int = DEFAULT_TILE) -> RenderOutput:
    return rasterize(prepare_view(scene, camera, view_id, channels, active_degree, tile_size))


@dataclass
class SceneGrads:
    """Parameter gradients for the VSG and for the rendered view's VDG set."""

    vsg: dict[str, np.ndarray]
    vdg: dict[str, np.ndarray] | None
    view_id: str | None
    viewspace_grad: np.ndarray
    visible: np.ndarray


def _zeros_like_grad(pv: PreparedView, g: np.ndarray | None, shape) -> np.ndarray:
    if g is None:
        return np.zeros(shape)
    return np.ascontiguousarray(g, dtype=np.float64)


def backward_raw(pv: PreparedView, grads: RenderGrads) -> np.ndarray:
    """Per-primitive gradients w.r.t. the camera-frame quantities (M, N_GRAD)."""
    h, w = pv.camera.height, pv.camera.width
    g_rgb = _zeros_like_grad(pv, grads.rgb, (h, w, 3))
    g_depth = _zeros_like_grad(pv, grads.expected_depth, (h, w))
    g_normal = _zeros_like_grad(pv, grads.normal, (h, w, 3))
    g_aa = _zeros_like_grad(pv, grads.appearance_alpha, (h, w))
    g_ag = _zeros_like_grad(pv, grads.geometry_alpha, (h, w))
    entries = np.zeros((pv.bins.tile_prims.shape[0], _kernels.N_GRAD))
    _kernels.backward(*_kernel_args(pv), g_rgb, g_depth, g_normal, g_aa, g_ag, entries)
    # tile-ordered reduction: deterministic regardless of thread count
    m = pv.cc.shape[0]
    out = np.zeros((m, _kernels.N_GRAD))
    np.add.at(out, pv.bins.tile_prims, entries)
    return out


def render_backward(scene: SceneModel, pv: PreparedView, grads: RenderGrads) -> SceneGrads:
    if scene.revision != pv.revision:
        raise RevisionMismatch(
            f"scene revision {scene.revision} does not match forward pass {pv.revision}")
    raw = backward_raw(pv, grads)
    R = pv.camera.pose.R
    g_cc = raw[:, 0:3]
    g_tu = raw[:, 3:6]
    g_tv = raw[:, 6:9]
    g_n = raw[:, 16:19]
    # n = t_u x t_v
    g_tu = g_tu + np.cross(pv.tv, g_n)
    g_tv = g_tv + np.cross(g_n, pv.tu)
    g_centers = g_cc @ R.T
    g_rot = np.zeros((g_cc.shape[0], 3, 3))
    g_rot[:, :, 0] = g_tu @ R.T
    g_rot[:, :, 1] = g_tv @ R.T
    g_su = raw[:, 9] * pv.su
    g_sv = raw[:, 10] * pv.sv
    g_col = raw[:, 11:14] * pv.col_active
    groups = [scene.vsg]
    if pv.n_vdg:
        groups.append(scene.vdg[pv.view_id])
    results = []
    start = 0
    for gi, g in enumerate(groups):
        sl = slice(start, start + len(g))
        deg = pv.degrees[gi]
        basis = pv.basis[gi]
        g_sh = np.zeros_like(g.sh)
        g_sh[:, :num_sh_coeffs(deg)] = basis[:, :, None] * g_col[sl][:, None, :]
        gc = g_centers[sl].copy()
        if pv.sh_dir_grad and deg > 0:
            bgrad = sh_basis_grad(pv.dirs[sl], deg)
            g_dir = np.einsum("nkc,nc,nkd->nd", g.sh[:, :num_sh_coeffs(deg)], g_col[sl], bgrad)
            dvec = pv.dirs[sl]
            gc += (g_dir - dvec * np.sum(dvec * g_dir, axis=1, keepdims=True)) / pv.dir_norm[sl, None]
        opacity = g.opacity
        out = {
            "centers": gc,
            "quats": quat_to_rotmat_backward(g.quats, g_rot[sl]),
            "log_scales": np.stack([g_su[sl], g_sv[sl]], axis=1),
            "sh": g_sh,
            "raw_opacity": raw[sl, 14] * opacity * (1 - opacity),
        }
        if gi == 0:
            geo = g.geo_opacity
            out["raw_geo_opacity"] = raw[sl, 15] * geo * (1 - geo)
        results.append(out)
        start += len(g)
    # view-space (NDC) positional gradient magnitude for densification
    k = pv.camera.intrinsics
    n = pv.n_vsg
    z = pv.cc[:n, 2]
    gx = g_cc[:n, 0] * z / k.fx * (k.width / 2.0)
    gy = g_cc[:n, 1] * z / k.fy * (k.height / 2.0)
    visible = np.zeros(n, dtype=bool)
    entries = pv.bins.tile_prims
    visible[entries[entries < n]] = True
    return SceneGrads(
        vsg=results[0],
        vdg=results[1] if len(results) > 1 else None,
        view_id=pv.view_id if len(results) > 1 else None,
        viewspace_grad=np.hypot(gx, gy),
        visible=visible,
    )


def trace_pixel(pv: PreparedView, i: int, j: int) -> dict[str, np.ndarray]:
    """Slow pure-Python compositing of one pixel; exposes the per-hit weights."""
    k = pv.camera.intrinsics
    x, y = j + 0.5, i + 0.5
    d = np.array([(x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0])
    tid = (i // pv.bins.tile_size) * pv.bins.tiles_x + j // pv.bins.tile_size
    hits = []
    for p in pv.bins.tile_list(tid):
        n = pv.nrm[p]
        denom = d @ n
        if abs(denom) < 1e-9 * np.linalg.norm(d):
            continue
        t = (pv.cc[p] @ n) / denom
        if t <= pv.near:
            continue
        r = t * d - pv.cc[p]
        u = (r @ pv.tu[p]) / pv.su[p]
        v = (r @ pv.tv[p]) / pv.sv[p]
        q = u * u + v * v
        proj = np.array([k.fx * pv.cc[p, 0] / pv.cc[p, 2] + k.cx,
                         k.fy * pv.cc[p, 1] / pv.cc[p, 2] + k.cy])
        d2 = float(np.sum((proj - [x, y]) ** 2))
        if q > _kernels.KERNEL_CUTOFF and d2 > _kernels.FILTER_CUTOFF:
            continue
        g = np.exp(-0.5 * q) if q <= _kernels.KERNEL_CUTOFF else 0.0
        gs = np.exp(-0.5 * _kernels.FILTER_INV_VAR * d2) if d2 <= _kernels.FILTER_CUTOFF else 0.0
        hits.append((t, int(p), max(g, gs)))
    hits.sort()
    weights = {"appearance": [], "geometry": []}
    for channel, opac in (("appearance", pv.oa), ("geometry", pv.og)):
        T = 1.0
        for t, p, g in hits:
            a = opac[p] * g
            weights[channel].append(a * T)
            T *= 1.0 - a
            if T < _kernels.T_EPS:
                break
    return {
        "t": np.array([h[0] for h in hits]),
        "index": np.array([h[1] for h in hits], dtype=np.int64),
        "appearance": np.array(weights["appearance"]),
        "geometry": np.array(weights["geometry"]),
    }


def encode_normal_png(normal: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(normal) + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)


def decode_normal_png(pixels: np.ndarray) -> np.ndarray:
    n = np.asarray(pixels, dtype=np.float64)[..., :3] / 255.0 * 2.0 - 1.0
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    return np.where(norm > 0, n / np.where(norm > 0, norm, 1.0), 0.0)
