import numpy as np
import pytest

from splatcar.camera import Camera, CameraIntrinsics, CameraPose
from splatcar.splat_model import SceneModel, VsgSet, frame_from_normal, logit, rgb_to_sh_dc


def make_vsg(centers, normals=None, scales=0.3, colors=0.5, opacity=0.5, geo_opacity=None,
             sh_degree=0) -> VsgSet:
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    n = len(centers)
    if normals is None:
        normals = np.tile([0.0, 0.0, -1.0], (n, 1))
    scales = np.asarray(scales, dtype=np.float64)
    if scales.ndim < 2:
        scales = np.stack([np.broadcast_to(scales, (n,))] * 2, axis=1)
    sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
    sh[:, 0] = rgb_to_sh_dc(np.broadcast_to(colors, (n, 3)))
    ro = logit(np.broadcast_to(np.asarray(opacity, dtype=np.float64), (n,)))
    rg = ro if geo_opacity is None else logit(np.broadcast_to(np.asarray(geo_opacity, dtype=np.float64), (n,)))
    return VsgSet(centers, frame_from_normal(normals), np.log(scales), sh, ro.copy(),
                  raw_geo_opacity=np.array(rg, copy=True))


def make_scene(vsg: VsgSet, background=(0.0, 0.0, 0.0)) -> SceneModel:
    return SceneModel(vsg, sh_degree=vsg.sh_degree, background=np.asarray(background, dtype=np.float64))


def pinhole(width=8, height=8, f=8.0, pose=None) -> Camera:
    intr = CameraIntrinsics(f, f, width / 2.0, height / 2.0, width, height)
    return Camera(intr, pose or CameraPose.identity())


def three_splat_scene(seed=0) -> SceneModel:
    """Three overlapping, slightly tilted splats in front of an 8x8 identity camera."""
    rng = np.random.default_rng(seed)
    centers = np.array([[0.05, 0.02, 2.0], [-0.1, 0.05, 2.6], [0.02, -0.08, 3.2]])
    normals = np.array([[0.1, 0.2, -1.0], [-0.3, 0.1, -1.0], [0.2, -0.2, -1.0]])
    quats = frame_from_normal(normals) + rng.normal(0, 0.05, (3, 4))
    log_scales = np.log([[0.5, 0.35], [0.6, 0.45], [0.7, 0.55]])
    sh = rng.normal(0, 0.3, (3, 16, 3))
    sh[:, 0] += 0.5
    vsg = VsgSet(centers, quats, log_scales, sh, np.array([0.2, -0.3, 0.8]),
                 raw_geo_opacity=np.array([-0.2, 0.5, 1.0]))
    return SceneModel(vsg, sh_degree=3, background=np.array([0.1, 0.2, 0.3]))


@pytest.fixture
def cam8():
    return pinhole()


@pytest.fixture
def scene3():
    return three_splat_scene()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    entry = _CRITERIA.setdefault(mark.args[0], {"ok": True, "tests": [], "notes": []})
    entry["ok"] &= not rep.failed
    if rep.when == "call" or rep.failed:
        entry["tests"].append(f"{item.name}:{'FAIL' if rep.failed else 'ok'}")
    entry["notes"] += [f"{k}={v}" for k, v in rep.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        failed = [t.rsplit(":", 1)[0] for t in e["tests"] if t.endswith("FAIL")]
        detail = "; ".join(dict.fromkeys(e["notes"])) or f"{len(e['tests'])} checks"
        if failed:
            detail += "  failed: " + ", ".join(failed)
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if e['ok'] else 'FAIL'}  {detail}")
