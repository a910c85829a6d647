"""Acceptance suite: one or more tests per criterion, summarised per criterion at the end.

The end-to-end criteria train on oracle scenes at the desk preset (2000 iterations each,
six runs). Set SPLATCAR_ACCEPT_ITERS to a small number for a quick plumbing check; the
thresholds are unchanged, so a shortened run is expected to fail the quality criteria.
Wall-clock budgets are stated for an 8-core machine and are asserted only there.
"""
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import make_scene, make_vsg, pinhole, three_splat_scene
from oracles import brute_chamfer, numeric_grad, rel_error, render_gradcheck, ring_cameras, sphere_depth
from splatcar.config import RunConfig
from splatcar.evaluation import chamfer, psnr, ssim_metric
from splatcar.losses import (
    LossWeights,
    depth_to_normal,
    depth_to_normal_backward,
    loss_color,
    loss_lho,
    loss_normal,
    loss_vdg,
)
from splatcar.meshing import TsdfVolume, extract_mesh, integrate_depth
from splatcar.camera import CameraIntrinsics
from splatcar.rasterizer import prepare_view, rasterize, render_view, trace_pixel
from splatcar.splat_model import logit
from splatcar.trainer import TrainConfig, prune_mask

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "scripts"))
import experiments as ex  # noqa: E402

ITERS = int(os.environ["SPLATCAR_ACCEPT_ITERS"]) if "SPLATCAR_ACCEPT_ITERS" in os.environ else None
MANY_CORES = (os.cpu_count() or 1) >= 8


def budget(record_property, seconds, limit):
    record_property("seconds", round(seconds, 1))
    if MANY_CORES:
        assert seconds < limit, f"{seconds:.1f}s exceeds {limit}s"
    else:
        record_property("budget", f"{limit}s on 8 cores (not asserted, {os.cpu_count()} core)")


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("accept")


# 1 ---------------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_readme_states_benchmark_scope():
    text = (ROOT / "README.md").read_text().lower()
    assert "not reproducible" in text and "oracle" in text


# 2 ---------------------------------------------------------------------------

H = 1e-4
TOL = 1e-5


@pytest.mark.criterion(2)
def test_gradients_match_finite_differences(record_property):
    t0 = time.perf_counter()
    worst = {}
    for ch in ("rgb", "expected_depth", "normal"):
        errs = render_gradcheck(three_splat_scene(), pinhole(), channels=(ch,), h=H)
        worst[ch] = max(errs.values())
        assert worst[ch] < TOL, (ch, errs)

    rng = np.random.default_rng(11)
    gt = rng.uniform(size=(8, 8, 3))
    pred = np.clip(gt + rng.normal(0, 0.1, gt.shape), 0, 1)
    mask = rng.uniform(size=(8, 8)) > 0.2
    _, g = loss_color(pred, gt, mask)
    worst["l_c"] = rel_error(g, numeric_grad(lambda x: loss_color(x, gt, mask)[0], pred, H))

    def unit(shape):
        v = rng.normal(size=shape + (3,))
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    n_d, n_s, n_hat, rays = unit((8, 8)), unit((8, 8)), unit((8, 8)), unit((8, 8))
    w = LossWeights()
    _, g_d, g_s, _ = loss_normal(n_d, n_s, n_hat, mask, w, rays)
    worst["l_normal/n_d"] = rel_error(g_d, numeric_grad(lambda x: loss_normal(x, n_s, n_hat, mask, w, rays)[0], n_d, H))
    worst["l_normal/n_s"] = rel_error(g_s, numeric_grad(lambda x: loss_normal(n_d, x, n_hat, mask, w, rays)[0], n_s, H))

    depth = 3.0 + rng.uniform(-0.2, 0.2, (8, 8))
    intr = CameraIntrinsics(8.0, 8.0, 4.0, 4.0, 8, 8)
    wn = rng.normal(size=(8, 8, 3))
    _, _, ctx = depth_to_normal(depth, intr)
    worst["depth_to_normal"] = rel_error(
        depth_to_normal_backward(ctx, wn),
        numeric_grad(lambda d: float(np.sum(wn * depth_to_normal(d, intr)[0])), depth, H))

    ro, rg = rng.normal(size=(2, 5))
    _, gv = loss_vdg(ro, w.w_vdg)
    worst["l_vdg"] = rel_error(gv, numeric_grad(lambda x: loss_vdg(x, w.w_vdg)[0], ro, H))
    _, go, gg = loss_lho(ro, rg, w.w_lho)
    worst["l_lho/o"] = rel_error(go, numeric_grad(lambda x: loss_lho(x, rg, w.w_lho)[0], ro, H))
    worst["l_lho/geo"] = rel_error(gg, numeric_grad(lambda x: loss_lho(ro, x, w.w_lho)[0], rg, H))

    record_property("max_rel_err", f"{max(worst.values()):.2e}")
    assert max(worst.values()) < TOL, worst
    budget(record_property, time.perf_counter() - t0, 10)


# 3 ---------------------------------------------------------------------------

def _random_scene(rng):
    n = int(rng.integers(1, 10))
    centers = np.column_stack([rng.uniform(-0.5, 0.5, (n, 2)), rng.uniform(1.0, 4.0, n)])
    vsg = make_vsg(centers, normals=rng.normal(size=(n, 3)) + [0, 0, -2],
                   scales=rng.uniform(0.05, 0.6, (n, 2)), colors=rng.uniform(size=(n, 3)),
                   opacity=rng.uniform(0.01, 0.99, n), geo_opacity=rng.uniform(0.01, 0.99, n))
    return make_scene(vsg, rng.uniform(size=3))


@pytest.mark.criterion(3)
def test_compositing_invariants(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    cam = pinhole(4, 4, 4.0)
    for _ in range(1000):
        scene = _random_scene(rng)
        pv = prepare_view(scene, cam)
        for i in range(4):
            for j in range(4):
                tr = trace_pixel(pv, i, j)
                for ch in ("appearance", "geometry"):
                    assert np.all(tr[ch] >= 0) and tr[ch].sum() <= 1.0
        ghost = make_vsg(rng.uniform([-0.3, -0.3, 1], [0.3, 0.3, 4], (1, 3)), scales=0.4)
        ghost.raw_opacity[:] = -np.inf
        ghost.raw_geo_opacity[:] = -np.inf
        k = int(rng.integers(0, len(scene.vsg) + 1))
        v = scene.vsg
        merged = v.select(np.arange(k)).concat(ghost).concat(v.select(np.arange(k, len(v))))
        a = rasterize(pv)
        b = render_view(make_scene(merged, scene.background), None, cam)
        for c in ("rgb", "expected_depth", "normal", "appearance_alpha", "geometry_alpha"):
            assert getattr(a, c).tobytes() == getattr(b, c).tobytes()
    budget(record_property, time.perf_counter() - t0, 60)


# 4 and 10 ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def glass_runs(work):
    data = ex.build_dataset("glass_pane", work / "data_glass")
    runs = {}
    for name in ("a", "b"):
        secs = ex.train_cli(data, work / f"glass_{name}", ITERS)
        ex.mesh_cli(work / f"glass_{name}" / "final.ckpt", data, work / f"glass_{name}" / "mesh.ply")
        runs[name] = secs
    report = ex.glass_report(work / "glass_a" / "final.ckpt", data)
    return data, runs, report


@pytest.mark.criterion(4)
@pytest.mark.slow
def test_glass_rgb_through_pane(glass_runs, record_property):
    _, runs, rep = glass_runs
    record_property("glass_psnr", f"{rep['glass_psnr']:.2f}dB")
    assert rep["glass_psnr"] >= 25.0
    budget(record_property, runs["a"], 15 * 60)


@pytest.mark.criterion(4)
@pytest.mark.slow
def test_glass_geometry_stops_at_pane(glass_runs, record_property):
    rep = glass_runs[2]
    record_property("pane_depth_fraction", f"{rep['glass_depth_fraction']:.3f}")
    assert rep["glass_depth_fraction"] >= 0.80


@pytest.mark.criterion(10)
@pytest.mark.slow
def test_deterministic_runs_are_byte_identical(glass_runs, work):
    for f in ("final.ckpt", "mesh.ply"):
        assert (work / "glass_a" / f).read_bytes() == (work / "glass_b" / f).read_bytes(), f


# 5 ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def mirror_runs(work):
    data = ex.build_dataset("mirror_quad", work / "data_mirror", n_test=ex.N_TEST)
    res = {}
    for name, flag in (("on", "true"), ("off", "false")):
        out = work / f"mirror_vdg_{name}"
        secs = ex.train_cli(data, out, ITERS, sets={"train.use_vdg": flag})
        res[name] = {"seconds": secs, **ex.mirror_report(out / "final.ckpt", data, out / "mesh.ply")}
    return res


@pytest.mark.criterion(5)
@pytest.mark.slow
def test_vdg_lowers_chamfer(mirror_runs, record_property):
    on, off = mirror_runs["on"], mirror_runs["off"]
    record_property("cd_vdg_on", f"{on['cd']:.4f}")
    record_property("cd_vdg_off", f"{off['cd']:.4f}")
    assert on["cd"] <= 0.8 * off["cd"]


@pytest.mark.criterion(5)
@pytest.mark.slow
def test_heldout_psnr_close_to_training(mirror_runs, record_property):
    on = mirror_runs["on"]
    record_property("train_psnr", f"{on['train_psnr']:.2f}")
    record_property("test_psnr", f"{on['test_psnr']:.2f}")
    assert abs(on["train_psnr"] - on["test_psnr"]) <= 1.0
    budget(record_property, on["seconds"] + mirror_runs["off"]["seconds"], 20 * 60)


# 6 ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def qsm_runs(work):
    data = ex.build_dataset("glass_pane", work / "data_glass_corrupt", corrupt=True)
    res = {}
    for name, flag in (("on", "true"), ("off", "false")):
        out = work / f"qsm_{name}"
        secs = ex.train_cli(data, out, ITERS, sets={"train.use_qsm": flag})
        res[name] = {"seconds": secs, **ex.glass_report(out / "final.ckpt", data, tau_deg=30.0)}
    return res


@pytest.mark.criterion(6)
@pytest.mark.slow
def test_corrupted_normals_are_gated(qsm_runs, record_property):
    on = qsm_runs["on"]
    record_property("gated_fraction", f"{on['corrupt_gated_fraction']:.4f}")
    record_property("gated_fraction_gt_normals", f"{on['corrupt_gated_fraction_gt_normals']:.4f}")
    assert on["corrupt_pixels"] > 0
    assert on["corrupt_gated_fraction"] >= 0.99


@pytest.mark.criterion(6)
@pytest.mark.slow
def test_qsm_lowers_normal_error(qsm_runs, record_property):
    on, off = qsm_runs["on"], qsm_runs["off"]
    record_property("normal_mae_qsm_on", f"{on['normal_mae_deg']:.2f}")
    record_property("normal_mae_qsm_off", f"{off['normal_mae_deg']:.2f}")
    assert on["normal_mae_deg"] <= 0.9 * off["normal_mae_deg"]
    budget(record_property, on["seconds"] + off["seconds"], 20 * 60)


# 7 ---------------------------------------------------------------------------

@pytest.mark.criterion(7)
def test_lho_hand_example():
    value, *_ = loss_lho(logit([0.3, 0.7]), logit([0.5, 0.7]), 3.0)
    assert value == pytest.approx(0.3, abs=1e-12)


@pytest.mark.criterion(7)
@pytest.mark.parametrize("o, g, pruned", [
    (0.001, 0.001, True), (0.001, 0.9, False), (0.9, 0.001, False), (0.9, 0.9, False)])
def test_prune_truth_table(o, g, pruned):
    vsg = make_vsg([[0, 0, 2.0]], opacity=o, geo_opacity=g)
    assert prune_mask(vsg, TrainConfig().prune_opacity)[0] == pruned


# 8 ---------------------------------------------------------------------------

@pytest.mark.criterion(8)
@pytest.mark.parametrize("seed", range(5))
def test_chamfer_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.uniform(-1, 1, (200, 3)), rng.uniform(-1, 1, (200, 3))
    rep = chamfer(p, g, d_thr=0.2)
    assert (rep.cd, rep.accuracy, rep.completeness, rep.f1) == brute_chamfer(p, g, 0.2)


@pytest.mark.criterion(8)
def test_image_metric_closed_forms():
    gt = np.zeros((4, 4, 3))
    assert psnr(gt + 0.1, gt) == 20.0
    img = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert abs(ssim_metric(img, img) - 1.0) <= 1e-9


# 9 ---------------------------------------------------------------------------

R, VOX = 0.2, 0.01


@pytest.mark.criterion(9)
def test_tsdf_sphere_radius(record_property):
    vol = TsdfVolume.from_bounds([-R] * 3, [R] * 3, VOX, 4 * VOX)
    for cam in ring_cameras(16, 1.0, size=96, fov_deg=30, elevations=(60, 20, -20, -60)):
        integrate_depth(vol, sphere_depth(cam, (0, 0, 0), R), cam)
    err = np.abs(np.linalg.norm(extract_mesh(vol).vertices, axis=1) - R)
    record_property("radius_err_voxels", f"mean {err.mean() / VOX:.2f} max {err.max() / VOX:.2f}")
    assert err.mean() <= VOX and err.max() <= 2 * VOX


@pytest.mark.criterion(9)
def test_tsdf_double_fusion_idempotent():
    cam = ring_cameras(1, 1.0, size=48, fov_deg=30)[0]
    depth = sphere_depth(cam, (0, 0, 0), R)
    once = TsdfVolume.from_bounds([-R] * 3, [R] * 3, VOX, 4 * VOX)
    twice = TsdfVolume.from_bounds([-R] * 3, [R] * 3, VOX, 4 * VOX)
    integrate_depth(once, depth, cam)
    for _ in range(2):
        integrate_depth(twice, depth, cam)
    assert np.abs(once.tsdf - twice.tsdf).max() <= 1e-7


# 11 --------------------------------------------------------------------------

@pytest.mark.criterion(11)
def test_default_config_values():
    lines = RunConfig().dumps().splitlines()
    for want in ("loss.w_ds = 0.1", "loss.w_n_base = 0.1", "loss.w_vdg = 0.2", "loss.w_lho = 3.0",
                 "train.vdg_per_view = 10000", "mesh.voxel_size = 0.004", "mesh.truncation = 0.02"):
        assert want in lines
