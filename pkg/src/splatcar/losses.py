"""Training losses with analytic gradients.

Every loss returns its scalar value together with gradients w.r.t. its inputs,
so the trainer can chain them into the rasterizer backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .camera import CameraIntrinsics
from .splat_model import sigmoid

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    w_ds: float = 0.1
    w_n_base: float = 0.1
    w_vdg: float = 0.2
    w_lho: float = 3.0
    lambda_dssim: float = 0.2
    tau_deg: float = 30.0

    def __post_init__(self):
        for name in ("w_ds", "w_n_base", "w_vdg", "w_lho", "lambda_dssim"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.tau_deg < 90:
            raise ValueError("tau_deg must lie in [0, 90)")


@dataclass
class LossBreakdown:
    l_c: float
    l_normal: float
    l_vdg: float
    l_lho: float
    l_total: float
    w_n_mask: np.ndarray = field(default=None, repr=False)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _blur(img: np.ndarray) -> np.ndarray:
    # separable, zero padded; the operator is symmetric so it is its own adjoint
    w = gaussian_window()
    out = correlate1d(img, w, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, w, axis=1, mode="constant", cval=0.0)


def _ssim_terms(x: np.ndarray, y: np.ndarray):
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    vx = exx - mx * mx
    vy = eyy - my * my
    cxy = exy - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * cxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = vx + vy + SSIM_C2
    return mx, my, a1, a2, b1, b2


def _as_channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-pixel, per-channel SSIM of (H,W[,C]) images."""
    x, y = _as_channels(x), _as_channels(y)
    _, _, a1, a2, b1, b2 = _ssim_terms(x, y)
    return (a1 * a2) / (b1 * b2)


def _mask_weights(mask, shape) -> np.ndarray:
    m = np.ones(shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("mask is empty")
    return m


def ssim_value(x, y, mask=None) -> float:
    """Mean SSIM over masked pixels and channels."""
    s = ssim_map(x, y)
    m = _mask_weights(mask, s.shape)
    return float(s[m].mean())


def ssim_with_grad(x, y, mask=None) -> tuple[float, np.ndarray]:
    """Mean masked SSIM and its gradient w.r.t. ``x``."""
    x, y = _as_channels(x), _as_channels(y)
    m = _mask_weights(mask, x.shape)
    mx, my, a1, a2, b1, b2 = _ssim_terms(x, y)
    s = (a1 * a2) / (b1 * b2)
    count = m.sum() * x.shape[2]
    gs = np.broadcast_to(m[..., None], x.shape) / count
    value = float(s[m].mean())
    denom = b1 * b2
    d_mx = (2 * my * a2 - 2 * my * a1) / denom - s * 2 * mx / b1 + s * 2 * mx / b2
    d_exx = -s / b2
    d_exy = 2 * a1 / denom
    grad = _blur(gs * d_mx) + 2 * x * _blur(gs * d_exx) + y * _blur(gs * d_exy)
    return value, grad


def loss_color(rendered, gt, mask=None, lambda_dssim: float = 0.2) -> tuple[float, np.ndarray]:
    """(1 - lambda) * masked L1 + lambda * (1 - masked SSIM), with d/d rendered."""
    r = np.asarray(rendered, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if r.shape != g.shape:
        raise ValueError(f"shape mismatch {r.shape} vs {g.shape}")
    m = _mask_weights(mask, r.shape)
    diff = r - g
    count = m.sum() * r.shape[2]
    l1 = float(np.abs(diff)[m].sum() / count)
    g_l1 = np.sign(diff) * m[..., None] / count
    if lambda_dssim == 0:
        return (1 - lambda_dssim) * l1, (1 - lambda_dssim) * g_l1
    s, g_s = ssim_with_grad(r, g, m)
    value = (1 - lambda_dssim) * l1 + lambda_dssim * (1 - s)
    return value, (1 - lambda_dssim) * g_l1 - lambda_dssim * g_s


def _rays(intr: CameraIntrinsics) -> np.ndarray:
    xs = (np.arange(intr.width) + 0.5 - intr.cx) / intr.fx
    ys = (np.arange(intr.height) + 0.5 - intr.cy) / intr.fy
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy, np.ones_like(gx)], axis=-1)


@dataclass
class DepthNormalContext:
    rays: np.ndarray
    a: np.ndarray
    b: np.ndarray
    cross_norm: np.ndarray
    unit: np.ndarray
    sign: np.ndarray
    valid: np.ndarray


def depth_to_normal(depth, intrinsics: CameraIntrinsics, valid=None):
    """Camera-frame normals from central differences of back-projected depth.

    Returns ``(normals, valid, ctx)``; border pixels and pixels with an invalid
    4-neighbour are flagged invalid and hold a zero normal. Normals face the camera.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    base = np.ones((h, w), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    rays = _rays(intrinsics)
    pts = depth[..., None] * rays
    a = np.zeros((h, w, 3))
    b = np.zeros((h, w, 3))
    a[:, 1:-1] = pts[:, 2:] - pts[:, :-2]
    b[1:-1, :] = pts[2:, :] - pts[:-2, :]
    ok = np.zeros((h, w), dtype=bool)
    ok[1:-1, 1:-1] = (base[1:-1, 1:-1] & base[1:-1, 2:] & base[1:-1, :-2]
                      & base[2:, 1:-1] & base[:-2, 1:-1])
    c = np.cross(a, b)
    norm = np.linalg.norm(c, axis=-1)
    ok &= norm > 1e-20
    safe = np.where(ok, norm, 1.0)
    unit = c / safe[..., None]
    sign = np.where(np.sum(unit * rays, axis=-1) > 0, -1.0, 1.0)
    normals = np.where(ok[..., None], sign[..., None] * unit, 0.0)
    return normals, ok, DepthNormalContext(rays, a, b, safe, unit, sign, ok)


def depth_to_normal_backward(ctx: DepthNormalContext, grad_normals: np.ndarray) -> np.ndarray:
    g = np.where(ctx.valid[..., None], grad_normals, 0.0) * ctx.sign[..., None]
    gc = (g - ctx.unit * np.sum(ctx.unit * g, axis=-1, keepdims=True)) / ctx.cross_norm[..., None]
    ga = np.cross(ctx.b, gc)
    gb = np.cross(gc, ctx.a)
    gp = np.zeros_like(ctx.rays)
    gp[:, 2:] += ga[:, 1:-1]
    gp[:, :-2] -= ga[:, 1:-1]
    gp[2:, :] += gb[1:-1, :]
    gp[:-2, :] -= gb[1:-1, :]
    return np.sum(gp * ctx.rays, axis=-1)


def qsm_weight(normal, ray, tau_deg: float):
    """1 where the angle between the surface normal and the view ray exceeds tau, else 0.

    The angle is folded to [0, 90] degrees, so normal orientation does not matter.
    Works elementwise on (..., 3) arrays.
    """
    n = np.asarray(normal, dtype=np.float64)
    r = np.asarray(ray, dtype=np.float64)
    cosang = np.clip(np.abs(np.sum(n * r, axis=-1)), 0.0, 1.0)
    theta = np.degrees(np.arccos(cosang))
    # snap values within rounding of the threshold so theta == tau gates to 0
    theta = np.where(np.isclose(theta, tau_deg, rtol=0, atol=1e-9), tau_deg, theta)
    w = (theta > tau_deg).astype(np.float64)
    return float(w) if w.ndim == 0 else w


def loss_normal(n_d, n_s, n_hat, mask, weights: LossWeights, rays=None, use_qsm: bool = True):
    """Gated pseudo-label terms plus the ungated depth/splat normal consistency term.

    Returns ``(value, grad_n_d, grad_n_s, w_n)``. ``rays`` are unit view rays used by
    the quality gate; ``w_n`` is the per-pixel gate (H,W).
    """
    n_d = np.asarray(n_d, dtype=np.float64)
    n_s = np.asarray(n_s, dtype=np.float64)
    n_hat = np.asarray(n_hat, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    shape = n_d.shape
    if not m.any():
        return 0.0, np.zeros(shape), np.zeros(shape), np.zeros(shape[:-1])
    if use_qsm and rays is not None:
        gate = qsm_weight(n_s, rays, weights.tau_deg) * m
    else:
        gate = m.astype(np.float64)
    count = m.sum()
    wn = weights.w_n_base * gate[..., None] / count
    wds = weights.w_ds * m[..., None] / count
    d1 = n_d - n_hat
    d2 = n_s - n_hat
    d3 = n_d - n_s
    value = float(np.sum(wn * np.abs(d1)) + np.sum(wn * np.abs(d2)) + np.sum(wds * np.abs(d3)))
    g_nd = wn * np.sign(d1) + wds * np.sign(d3)
    g_ns = wn * np.sign(d2) - wds * np.sign(d3)
    return value, g_nd, g_ns, gate


def loss_vdg(raw_opacity, w_vdg: float) -> tuple[float, np.ndarray]:
    raw = np.asarray(raw_opacity, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("VDG set is empty")
    o = sigmoid(raw)
    return float(w_vdg * o.mean()), w_vdg * o * (1 - o) / raw.size


def loss_lho(raw_opacity, raw_geo_opacity, w_lho: float):
    """Returns (value, d/d raw_opacity, d/d raw_geo_opacity)."""
    ro = np.asarray(raw_opacity, dtype=np.float64)
    rg = np.asarray(raw_geo_opacity, dtype=np.float64)
    if ro.size == 0:
        raise ValueError("VSG set is empty")
    o, g = sigmoid(ro), sigmoid(rg)
    diff = o - g
    s = np.sign(diff) * w_lho / ro.size
    return float(w_lho * np.abs(diff).mean()), s * o * (1 - o), -s * g * (1 - g)


def loss_total(l_c: float, l_normal: float, l_vdg: float, l_lho: float,
               w_n_mask: np.ndarray | None = None) -> LossBreakdown:
    return LossBreakdown(l_c, l_normal, l_vdg, l_lho, l_c + l_normal + l_vdg + l_lho, w_n_mask)


def normalize_with_grad(v: np.ndarray):
    """Unit vectors of (...,3) ``v`` and a closure mapping d/d unit -> d/d v."""
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    unit = np.where(norm > 0, v / safe, 0.0)

    def backward(g: np.ndarray) -> np.ndarray:
        return (g - unit * np.sum(unit * g, axis=-1, keepdims=True)) / safe

    return unit, backward
