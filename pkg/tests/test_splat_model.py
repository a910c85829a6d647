import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_vsg
from splatcar.splat_model import (
    SH_C1,
    SceneModel,
    SplatPrimitive,
    VdgSet,
    eval_sh,
    load_checkpoint,
    local_gaussian_weight,
    logit,
    quat_to_rotmat,
    quat_to_rotmat_backward,
    rotmat_to_quat,
    save_checkpoint,
    sh_basis,
    sh_basis_grad,
    sigmoid,
    splat_normal,
)


def _prim(q):
    return SplatPrimitive(np.zeros(3), np.asarray(q, float), np.zeros(2), np.zeros((1, 3)), 0.0, 0.0)


def _unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


class TestSH:
    def test_degree0_is_direction_independent(self):
        sh = np.zeros((16, 3))
        sh[0] = [0.3, -0.2, 0.1]
        a = eval_sh(sh, _unit([1, 2, 3]), 0)
        b = eval_sh(sh, _unit([-3, 0.5, -1]), 0)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(a, 0.28209479177387814 * sh[0] + 0.5)

    def test_zero_coefficients_give_half_grey(self):
        np.testing.assert_array_equal(eval_sh(np.zeros((16, 3)), _unit([0.3, -0.4, 1]), 3), [0.5] * 3)

    def test_degree1_z_band(self):
        sh = np.zeros((4, 3))
        sh[2] = [0.2, 0.1, 0.05]
        up = eval_sh(sh, [0, 0, 1.0], 1)
        down = eval_sh(sh, [0, 0, -1.0], 1)
        np.testing.assert_allclose(up - down, 2 * sh[2] * 0.4886, atol=1e-4)
        assert SH_C1 == pytest.approx(0.4886, abs=1e-4)

    def test_output_is_clamped(self):
        sh = np.zeros((1, 3))
        sh[0] = -10
        np.testing.assert_array_equal(eval_sh(sh, [0, 0, 1.0], 0), 0)

    def test_active_degree_truncates(self):
        rng = np.random.default_rng(1)
        sh = rng.normal(size=(16, 3))
        d = _unit([0.2, 0.5, 0.7])
        np.testing.assert_allclose(eval_sh(sh, d, 1), eval_sh(sh[:4], d, 3))

    def test_basis_orthonormal(self):
        # Monte Carlo check of orthonormality on the sphere
        rng = np.random.default_rng(0)
        d = rng.normal(size=(200000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        b = sh_basis(d, 3)
        gram = 4 * np.pi * b.T @ b / len(d)
        np.testing.assert_allclose(gram, np.eye(16), atol=0.03)

    def test_basis_grad_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        d = rng.normal(size=(5, 3))
        g = sh_basis_grad(d, 3)
        h = 1e-6
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            fd = (sh_basis(d + e, 3) - sh_basis(d - e, 3)) / (2 * h)
            np.testing.assert_allclose(g[:, :, k], fd, atol=1e-7)


class TestFrames:
    def test_identity_normal(self):
        np.testing.assert_allclose(splat_normal(_prim([1, 0, 0, 0])), [0, 0, 1])

    def test_quarter_turn_about_x(self):
        c = np.cos(np.pi / 4)
        n = splat_normal(_prim([c, c, 0, 0]))
        np.testing.assert_allclose(n, [0, -1, 0], atol=1e-12)
        rx = np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]])
        np.testing.assert_allclose(n, rx @ [0, 0, 1], atol=1e-12)

    @given(arrays(np.float64, 4, elements=st.floats(-1, 1)))
    def test_normal_is_unit(self, q):
        if np.linalg.norm(q) < 1e-3:
            q = np.array([1.0, 0, 0, 0])
        assert np.linalg.norm(splat_normal(_prim(q))) == pytest.approx(1.0, abs=1e-12)

    @given(arrays(np.float64, 4, elements=st.floats(-1, 1)))
    def test_rotmat_quat_round_trip(self, q):
        if np.linalg.norm(q) < 1e-3:
            return
        r = quat_to_rotmat(q)[0]
        np.testing.assert_allclose(quat_to_rotmat(rotmat_to_quat(r))[0], r, atol=1e-9)

    def test_rotmat_backward(self):
        rng = np.random.default_rng(3)
        q = rng.normal(size=(4, 4))
        w = rng.normal(size=(4, 3, 3))
        g = quat_to_rotmat_backward(q, w)
        h = 1e-6
        for k in range(4):
            e = np.zeros(4)
            e[k] = h
            fd = np.sum(w * (quat_to_rotmat(q + e) - quat_to_rotmat(q - e)), axis=(1, 2)) / (2 * h)
            np.testing.assert_allclose(g[:, k], fd, atol=1e-7)


class TestKernel:
    def test_peak(self):
        assert local_gaussian_weight(0, 0) == 1.0

    def test_one_sigma(self):
        assert local_gaussian_weight(1, 0) == pytest.approx(0.6065, abs=1e-4)
        assert local_gaussian_weight(1, 0) == np.exp(-0.5)

    def test_far(self):
        assert local_gaussian_weight(3, 4) == np.exp(-12.5)

    @given(st.floats(-50, 50), st.floats(-50, 50))
    def test_range(self, u, v):
        g = local_gaussian_weight(u, v)
        assert 0 <= g <= 1


@given(st.floats(1e-6, 1 - 1e-6))
def test_sigmoid_logit_round_trip(x):
    assert sigmoid(logit(x)) == pytest.approx(x, abs=1e-6)


def test_vdg_has_no_geometry_opacity():
    vdg = VdgSet(np.zeros((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)), np.zeros((2, 2)),
                 np.zeros((2, 1, 3)), np.zeros(2), view_id="v0")
    with pytest.raises(AttributeError):
        vdg.geo_opacity
    with pytest.raises(AttributeError):
        vdg.raw_geo_opacity
    p = vdg.primitive(0)
    with pytest.raises(AttributeError):
        p.geo_opacity


def test_geo_opacity_defaults_to_appearance_opacity():
    v = make_vsg(np.zeros((3, 3)) + [0, 0, 2], opacity=0.3)
    np.testing.assert_array_equal(v.raw_geo_opacity, v.raw_opacity)
    assert v.raw_geo_opacity is not v.raw_opacity


def test_mismatched_rows_rejected():
    with pytest.raises(ValueError, match="rows"):
        VdgSet(np.zeros((2, 3)), np.zeros((3, 4)), np.zeros((2, 2)), np.zeros((2, 1, 3)), np.zeros(2), "v")


def _random_scene(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    vsg = make_vsg(rng.normal(size=(n, 3)), normals=rng.normal(size=(n, 3)),
                   scales=rng.uniform(0.1, 1, n), opacity=rng.uniform(0.01, 0.99, n),
                   geo_opacity=rng.uniform(0.01, 0.99, n), sh_degree=int(rng.integers(0, 4)))
    vsg.sh[:] = rng.normal(size=vsg.sh.shape)
    vdg = {}
    for k in range(int(rng.integers(0, 3))):
        m = int(rng.integers(1, 4))
        vdg[f"view_{k}"] = VdgSet(rng.normal(size=(m, 3)), rng.normal(size=(m, 4)),
                                  rng.normal(size=(m, 2)), rng.normal(size=(m, 1, 3)),
                                  rng.normal(size=m), view_id=f"view_{k}")
    return SceneModel(vsg, vdg, sh_degree=vsg.sh_degree, background=rng.uniform(size=3))


def _assert_same(a: SceneModel, b: SceneModel):
    pa, pb = a.pack(), b.pack()
    assert pa.keys() == pb.keys()
    for k in pa:
        np.testing.assert_array_equal(pa[k], pb[k])


@given(st.integers(0, 10_000))
@settings(max_examples=30)
def test_pack_unpack_identity(seed):
    scene = _random_scene(seed)
    _assert_same(SceneModel.unpack(scene.pack()), scene)


@given(st.integers(0, 10_000))
@settings(max_examples=10, deadline=None)
def test_checkpoint_round_trip(tmp_path_factory, seed):
    scene = _random_scene(seed)
    path = tmp_path_factory.mktemp("ckpt") / "scene.ckpt"
    save_checkpoint(scene, path)
    _assert_same(load_checkpoint(path), scene)
    assert load_checkpoint(path, with_vdg=False).vdg == {}


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"hello\nend_header\n")
    with pytest.raises(ValueError, match="not a splatcar checkpoint"):
        load_checkpoint(p)
