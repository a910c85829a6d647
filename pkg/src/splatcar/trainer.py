"""Optimization loop: Adam over both splat sets, densify/prune, hybrid opacity resets."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .ingest import ViewRecord, init_vdg, init_vsg
from .losses import (LossBreakdown, LossWeights, depth_to_normal, depth_to_normal_backward,
                     loss_color, loss_lho, loss_normal, loss_total, loss_vdg, normalize_with_grad)
from .rasterizer import ChannelConfig, RenderGrads, prepare_view, rasterize, render_backward
from .splat_model import SceneModel, VsgSet, logit, save_checkpoint

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "l_c", "l_normal", "l_vdg", "l_lho", "l_total", "N", "mean_o", "mean_geo_o")
RESET_OPACITY = 0.01


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 30000
    lr_center: float = 1.6e-4
    lr_center_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_sh: float = 2.5e-3
    sh_rest_lr_factor: float = 0.05  # higher SH bands learn 20x slower
    lr_raw_opacity: float = 5e-2
    lr_raw_geo_opacity: float = 5e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    densify_start: int = 500
    densify_stop: int = 15000
    opacity_reset_interval: int = 3000
    prune_opacity: float = 0.005
    percent_dense: float = 0.01
    max_vsg: int = 500000
    sh_degree: int = 3
    sh_degree_interval: int = 1000
    normal_start: int = 0
    vdg_per_view: int = 10000
    use_vdg: bool = True
    use_qsm: bool = True
    freeze_vdg_geometry: bool = False
    extra_per_view: int = 2000
    min_geometry_alpha: float = 0.05
    tile_size: int = 8
    seed: int = 0
    checkpoint_interval: int = 0
    losses: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.densify_stop > max(self.iterations, 0) and self.iterations > 0:
            self.densify_stop = self.iterations
        if not 0 < self.prune_opacity < 1:
            raise ValueError("prune_opacity must lie in (0, 1)")
        if self.densify_interval <= 0:
            raise ValueError("densify_interval must be positive")
        if self.vdg_per_view < 0 or self.extra_per_view < 0:
            raise ValueError("splat counts must be >= 0")

    @classmethod
    def desk(cls, **overrides) -> TrainConfig:
        """Small-scene preset: 2000 iterations with the schedule compressed to match."""
        base = dict(iterations=2000, densify_start=200, densify_stop=1500, densify_interval=100,
                    opacity_reset_interval=0, sh_degree_interval=500, vdg_per_view=300,
                    extra_per_view=300, normal_start=200)
        base.update(overrides)
        return cls(**base)


@dataclass
class OptimizerState:
    """Adam moments keyed like SceneModel.pack(); step counters per VDG view and for the VSG."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)

    def update(self, key: str, param: np.ndarray, grad: np.ndarray, lr, step: int) -> None:
        """One Adam step in place; ``lr`` may be an array broadcasting against ``param``."""
        m = self.m.get(key)
        if m is None or m.shape != param.shape:
            m = self.m[key] = np.zeros_like(param)
            self.v[key] = np.zeros_like(param)
        v = self.v[key]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        mhat = m / (1 - self.beta1 ** step)
        vhat = v / (1 - self.beta2 ** step)
        param -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def keep_rows(self, prefix: str, keep: np.ndarray) -> None:
        for d in (self.m, self.v):
            for k in list(d):
                if k.startswith(prefix):
                    d[k] = d[k][keep]

    def add_rows(self, prefix: str, n: int) -> None:
        for d in (self.m, self.v):
            for k in list(d):
                if k.startswith(prefix):
                    d[k] = np.concatenate([d[k], np.zeros((n,) + d[k].shape[1:])])

    def zero(self, key: str) -> None:
        for d in (self.m, self.v):
            if key in d:
                d[key][:] = 0.0

    def check_lockstep(self, scene: SceneModel) -> None:
        for k, m in self.m.items():
            if k.startswith("vsg."):
                p = getattr(scene.vsg, k[4:])
            else:
                _, view, name = k.split(".", 2)
                p = getattr(scene.vdg[view], name)
            if m.shape != p.shape or self.v[k].shape != p.shape:
                raise AssertionError(f"optimizer state {k} {m.shape} out of step with {p.shape}")


def scene_background(views: list[ViewRecord]) -> np.ndarray:
    """Median colour of unmasked pixels, black if every pixel is masked."""
    px = [v.rgb[v.mask == 0] for v in views if v.rgb is not None and v.mask is not None]
    px = [p for p in px if len(p)]
    return np.median(np.concatenate(px), axis=0) if px else np.zeros(3)


def initialize_scene(points, views: list[ViewRecord], config: TrainConfig,
                     background=None) -> SceneModel:
    vsg = init_vsg(points, views, config.extra_per_view, config.seed, sh_degree=config.sh_degree)
    vdg = {}
    if config.use_vdg and config.vdg_per_view > 0:
        for i, v in enumerate(views):
            vdg[v.view_id] = init_vdg(v, config.vdg_per_view, config.seed * 1000003 + i)
    bg = scene_background(views) if background is None else np.asarray(background, dtype=np.float64)
    return SceneModel(vsg, vdg, sh_degree=config.sh_degree, background=bg)


def camera_extent(views: list[ViewRecord]) -> float:
    centers = np.array([v.pose.center for v in views])
    return 1.1 * float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()) or 1.0


# -- per-step pieces ---------------------------------------------------------


@dataclass
class StepResult:
    losses: LossBreakdown
    grads: object
    render: object


def compute_step(scene: SceneModel, view: ViewRecord, config: TrainConfig, active_degree: int,
                 geometry_losses: bool = True) -> StepResult:
    """Render one view, evaluate every loss term and backpropagate to the parameters."""
    w = config.losses
    cam = view.camera
    use_vdg = config.use_vdg and view.view_id in scene.vdg
    pv = prepare_view(scene, cam, view.view_id, ChannelConfig(True, True, use_vdg),
                      active_degree, config.tile_size)
    out = rasterize(pv)
    l_c, g_rgb = loss_color(out.rgb, view.rgb, None, w.lambda_dssim)
    grads = RenderGrads(rgb=g_rgb)
    l_n = 0.0
    gate = None
    if geometry_losses and view.normals is not None and (w.w_ds > 0 or w.w_n_base > 0):
        a = out.geometry_alpha
        valid = a > config.min_geometry_alpha
        if view.mask is not None:
            valid &= view.mask > 0
        safe_a = np.where(valid, a, 1.0)
        depth = np.where(valid, out.expected_depth / safe_a, 0.0)
        n_d, ok, ctx = depth_to_normal(depth, cam.intrinsics, valid)
        n_s, n_back = normalize_with_grad(out.normal)
        sel = valid & ok
        l_n, g_nd, g_ns, gate = loss_normal(n_d, n_s, view.normals, sel, w,
                                            rays=cam.unit_pixel_rays(), use_qsm=config.use_qsm)
        g_depth = np.where(valid, depth_to_normal_backward(ctx, g_nd), 0.0)
        grads.expected_depth = g_depth / safe_a
        grads.geometry_alpha = -g_depth * depth / safe_a
        grads.normal = n_back(g_ns)
    sg = render_backward(scene, pv, grads)
    l_vdg = 0.0
    if use_vdg and sg.vdg is not None:
        l_vdg, g = loss_vdg(scene.vdg[view.view_id].raw_opacity, w.w_vdg)
        sg.vdg["raw_opacity"] += g
    l_lho, g_o, g_g = loss_lho(scene.vsg.raw_opacity, scene.vsg.raw_geo_opacity, w.w_lho)
    sg.vsg["raw_opacity"] += g_o
    sg.vsg["raw_geo_opacity"] += g_g
    return StepResult(loss_total(l_c, l_n, l_vdg, l_lho, gate), sg, out)


def _lr_table(config: TrainConfig, it: int, spatial: float) -> dict[str, float]:
    frac = min(max(it / max(config.iterations, 1), 0.0), 1.0)
    lr_c = math.exp((1 - frac) * math.log(config.lr_center) + frac * math.log(config.lr_center_final))
    return {
        "centers": lr_c * spatial,
        "quats": config.lr_rotation,
        "log_scales": config.lr_log_scale,
        "sh": config.lr_sh,
        "raw_opacity": config.lr_raw_opacity,
        "raw_geo_opacity": config.lr_raw_geo_opacity,
    }


def _apply(opt: OptimizerState, prefix: str, target, grads: dict, lrs: dict, config: TrainConfig,
           names) -> None:
    opt.steps[prefix] = step = opt.steps.get(prefix, 0) + 1
    for name in names:
        param = getattr(target, name)
        if name == "sh":
            lr = np.full((param.shape[1], 1), lrs["sh"] * config.sh_rest_lr_factor)
            lr[0] = lrs["sh"]
            opt.update(prefix + name, param, grads[name], lr, step)
        else:
            opt.update(prefix + name, param, grads[name], lrs[name], step)


# -- density control ---------------------------------------------------------


def prune_mask(vsg: VsgSet, eps: float) -> np.ndarray:
    """True for primitives to remove: both opacities below ``eps``."""
    return np.maximum(vsg.opacity, vsg.geo_opacity) < eps


def densify_and_prune(vsg: VsgSet, config: TrainConfig, extent: float = 1.0,
                      opt: OptimizerState | None = None, rng: np.random.Generator | None = None,
                      ) -> VsgSet:
    """Clone small / split large high-gradient splats, then drop faint ones."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    n = len(vsg)
    mean_grad = np.where(vsg.grad_count > 0, vsg.grad_accum / np.maximum(vsg.grad_count, 1), 0.0)
    hot = mean_grad > config.densify_grad_threshold
    room = max(config.max_vsg - n, 0)
    if hot.sum() > room:
        order = np.argsort(-mean_grad, kind="stable")
        hot = np.zeros(n, dtype=bool)
        hot[order[:room]] = True
    big = vsg.scales.max(axis=1) > config.percent_dense * extent
    clone = hot & ~big
    split = hot & big
    parts = [vsg.select(clone)]
    if split.any():
        src = vsg.select(np.repeat(np.nonzero(split)[0], 2))
        rot = src.rotations()
        local = rng.normal(size=(len(src), 2)) * src.scales
        src.centers = src.centers + rot[:, :, 0] * local[:, :1] + rot[:, :, 1] * local[:, 1:]
        src.log_scales = src.log_scales - math.log(1.6)
        parts.append(src)
    keep = ~split
    out = vsg.select(keep)
    if opt is not None:
        opt.keep_rows("vsg.", keep)
    added = 0
    for p in parts:
        if len(p):
            out = out.concat(p)
            added += len(p)
    if opt is not None and added:
        opt.add_rows("vsg.", added)
    dead = prune_mask(out, config.prune_opacity)
    if dead.any():
        out = out.select(~dead)
        if opt is not None:
            opt.keep_rows("vsg.", ~dead)
    out.reset_stats()
    return out


def reset_hybrid_opacity(vsg: VsgSet, config: TrainConfig | None = None,
                         opt: OptimizerState | None = None) -> VsgSet:
    """Clamp both opacities down to RESET_OPACITY; VDGs are never passed here."""
    cap = logit(RESET_OPACITY)
    vsg.raw_opacity = np.minimum(vsg.raw_opacity, cap)
    vsg.raw_geo_opacity = np.minimum(vsg.raw_geo_opacity, cap)
    if opt is not None:
        opt.zero("vsg.raw_opacity")
        opt.zero("vsg.raw_geo_opacity")
    return vsg


# -- main loop ----------------------------------------------------------------


@dataclass
class TrainResult:
    scene: SceneModel
    log: list[dict]
    optimizer: OptimizerState


def _finite(sg) -> bool:
    arrays = list(sg.vsg.values()) + (list(sg.vdg.values()) if sg.vdg else [])
    return all(np.all(np.isfinite(a)) for a in arrays)


def train(scene: SceneModel, views: list[ViewRecord], config: TrainConfig,
          out_dir: str | Path | None = None, log_path: str | Path | None = None,
          callback=None) -> TrainResult:
    """Optimize a copy of ``scene``; the input is left untouched."""
    scene = scene.copy()
    opt = OptimizerState(config.adam_beta1, config.adam_beta2, config.adam_eps)
    rows: list[dict] = []
    if config.iterations == 0:
        return TrainResult(scene, rows, opt)
    if not views:
        raise TrainingError("no training views")
    for v in views:
        if v.rgb is None:
            raise TrainingError(f"view {v.view_id} has no image")
    out_dir = Path(out_dir) if out_dir is not None else None
    rng = np.random.default_rng(config.seed)
    extent = camera_extent(views)
    n_vdg_total = sum(len(v) for v in scene.vdg.values())
    writer = fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
    order: list[int] = []
    vdg_names = ("sh", "raw_opacity") if config.freeze_vdg_geometry else \
        ("centers", "quats", "log_scales", "sh", "raw_opacity")
    try:
        for it in range(1, config.iterations + 1):
            if not order:
                order = list(rng.permutation(len(views)))
            view = views[order.pop(0)]
            degree = min(config.sh_degree, (it - 1) // max(config.sh_degree_interval, 1))
            step = compute_step(scene, view, config, degree, geometry_losses=it > config.normal_start)
            lb = step.losses
            if not (math.isfinite(lb.l_total) and _finite(step.grads)):
                if out_dir is not None:
                    # parameters are untouched by the failing step, so they are the last good state
                    save_checkpoint(scene, out_dir / "last_good.ckpt")
                raise TrainingError(f"non-finite loss or gradient at iteration {it}")
            lrs = _lr_table(config, it, extent)
            _apply(opt, "vsg.", scene.vsg, step.grads.vsg, lrs, config, VsgSet.param_names)
            if step.grads.vdg is not None:
                vdg = scene.vdg[view.view_id]
                _apply(opt, f"vdg.{view.view_id}.", vdg, step.grads.vdg, lrs, config, vdg_names)
                vdg.normalize_quats()
            scene.vsg.normalize_quats()
            scene.revision += 1
            vsg = scene.vsg
            vis = step.grads.visible
            vsg.grad_accum[vis] += step.grads.viewspace_grad[vis]
            vsg.grad_count[vis] += 1
            if config.densify_start <= it <= config.densify_stop:
                if it % config.densify_interval == 0:
                    scene.vsg = densify_and_prune(vsg, config, extent, opt, rng)
                    opt.check_lockstep(scene)
                    if len(scene.vsg) == 0:
                        raise TrainingError(f"every VSG primitive was pruned at iteration {it}")
                if config.opacity_reset_interval and it % config.opacity_reset_interval == 0:
                    scene.vsg = reset_hybrid_opacity(scene.vsg, config, opt)
            assert sum(len(v) for v in scene.vdg.values()) == n_vdg_total
            row = {
                "iter": it, "l_c": lb.l_c, "l_normal": lb.l_normal, "l_vdg": lb.l_vdg,
                "l_lho": lb.l_lho, "l_total": lb.l_total, "N": len(scene.vsg),
                "mean_o": float(scene.vsg.opacity.mean()),
                "mean_geo_o": float(scene.vsg.geo_opacity.mean()),
            }
            rows.append(row)
            if writer is not None:
                writer.writerow([row[k] if isinstance(row[k], int) else repr(float(row[k]))
                                 for k in LOG_COLUMNS])
            if out_dir is not None and config.checkpoint_interval and it % config.checkpoint_interval == 0:
                save_checkpoint(scene, out_dir / f"iter_{it:06d}.ckpt")
            if callback is not None:
                callback(it, scene, row)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(scene, rows, opt)


def with_losses(config: TrainConfig, **weights) -> TrainConfig:
    return replace(config, losses=replace(config.losses, **weights))
