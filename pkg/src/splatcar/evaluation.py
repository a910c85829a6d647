"""Image and geometry metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .losses import ssim_value
from .meshing import TriangleMesh

PSNR_CAP = 99.0
DEFAULT_D_THR = 0.05
DEFAULT_SAMPLES = 100_000


@dataclass
class GeometryReport:
    cd: float
    accuracy: float
    completeness: float
    f1: float
    d_thr: float
    n_pred: int
    n_gt: int

    def as_dict(self) -> dict:
        return {"cd": self.cd, "accuracy": self.accuracy, "completeness": self.completeness,
                "f1": self.f1, "d_thr": self.d_thr, "n_pred": self.n_pred, "n_gt": self.n_gt}


@dataclass
class ImageReport:
    per_view: dict[str, dict[str, float]] = field(default_factory=dict)

    def add(self, view_id: str, psnr_db: float, ssim: float) -> None:
        self.per_view[view_id] = {"psnr": psnr_db, "ssim": ssim}

    @property
    def psnr(self) -> float:
        return float(np.mean([v["psnr"] for v in self.per_view.values()])) if self.per_view else float("nan")

    @property
    def ssim(self) -> float:
        return float(np.mean([v["ssim"] for v in self.per_view.values()])) if self.per_view else float("nan")


def f_score(acc: float, comp: float) -> float:
    return 2 * acc * comp / (acc + comp) if acc + comp > 0 else 0.0


def _points(x, n_samples: int, seed: int) -> np.ndarray:
    if isinstance(x, TriangleMesh):
        return x.sample(n_samples, seed)
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty point set")
    return pts


def crop_to_box(points: np.ndarray, lo, hi, inflate: float = 0.05) -> np.ndarray:
    lo, hi = np.asarray(lo), np.asarray(hi)
    # one pad for all axes so flat boxes (a single plane) keep some thickness
    pad = (hi - lo).max() * inflate
    keep = np.all((points >= lo - pad) & (points <= hi + pad), axis=1)
    return points[keep]


def chamfer(pred, gt, n_samples: int = DEFAULT_SAMPLES, seed: int = 0,
            d_thr: float = DEFAULT_D_THR, crop: bool = False) -> GeometryReport:
    """Symmetric Chamfer distance plus accuracy / completeness / F1 at ``d_thr``.

    Meshes are sampled by area; point arrays are used as given. With ``crop`` both
    sets are restricted to the GT bounding box inflated by 5%.
    """
    p = _points(pred, n_samples, seed)
    g = _points(gt, n_samples, seed + 1)
    if crop:
        lo, hi = g.min(axis=0), g.max(axis=0)
        p = crop_to_box(p, lo, hi)
        if len(p) == 0:
            raise ValueError("prediction lies entirely outside the evaluation region")
    d_pg, _ = cKDTree(g).query(p, k=1)
    d_gp, _ = cKDTree(p).query(g, k=1)
    acc = float(np.mean(d_pg <= d_thr))
    comp = float(np.mean(d_gp <= d_thr))
    cd = 0.5 * (float(d_pg.mean()) + float(d_gp.mean()))
    return GeometryReport(cd, acc, comp, f_score(acc, comp), d_thr, len(p), len(g))


def _mask(mask, shape) -> np.ndarray:
    m = np.ones(shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("empty evaluation mask")
    return m


def psnr(pred, gt, mask=None, cap: float = PSNR_CAP) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = _mask(mask, pred.shape)
    mse = float(np.mean((pred[m] - gt[m]) ** 2))
    if mse == 0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def ssim_metric(pred, gt, mask=None) -> float:
    """Masked mean SSIM, same window and constants as the training loss."""
    pred = np.asarray(pred, dtype=np.float64)
    return ssim_value(pred, np.asarray(gt, dtype=np.float64), _mask(mask, pred.shape))


def mean_angular_error(pred_normals, gt_normals, mask) -> float:
    """Mean angle in degrees between unit normal maps over ``mask``."""
    m = _mask(mask, np.shape(pred_normals))
    a = np.asarray(pred_normals)[m]
    b = np.asarray(gt_normals)[m]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    cos = np.sum(a[ok] * b[ok], axis=1) / (na[ok] * nb[ok])
    ang = np.degrees(np.arccos(np.clip(cos, -1, 1)))
    # unrendered pixels count as a right angle
    return float((ang.sum() + 90.0 * (~ok).sum()) / len(a))
