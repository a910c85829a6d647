import logging

import numpy as np
import pytest

from conftest import make_scene, make_vsg, pinhole
from oracles import ring_cameras, sphere_depth
from splatcar.camera import CameraPose
from splatcar.meshing import (
    DEFAULT_TRUNCATION,
    DEFAULT_VOXEL,
    TriangleMesh,
    TsdfVolume,
    cleanup_mesh,
    extract_mesh,
    fuse_scene,
    integrate_depth,
    read_mesh,
    read_ply,
    volume_for_splats,
    write_mesh,
    write_ply,
)

RADIUS = 0.2
VOXEL = 0.01


def _tetra() -> TriangleMesh:
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]
    f = [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]
    return TriangleMesh(v, f)


def _fused_sphere(voxel=VOXEL, trunc=4 * VOXEL):
    vol = TsdfVolume.from_bounds([-RADIUS] * 3, [RADIUS] * 3, voxel, trunc)
    for cam in ring_cameras(16, 1.0, size=96, fov_deg=30, elevations=(60, 20, -20, -60)):
        integrate_depth(vol, sphere_depth(cam, (0, 0, 0), RADIUS), cam)
    return vol


@pytest.fixture(scope="module")
def sphere_volume():
    return _fused_sphere()


class TestIntegrate:
    def _single(self, z_voxel, depth=1.0, trunc=0.02):
        vol = TsdfVolume(np.array([0.0, 0.0, z_voxel]), (1, 1, 1), voxel_size=0.004, truncation=trunc)
        cam = pinhole(4, 4, 4.0)
        integrate_depth(vol, np.full((4, 4), depth), cam)
        return vol

    def test_on_surface(self):
        vol = self._single(1.0)
        assert vol.tsdf[0, 0, 0] == 0.0 and vol.weight[0, 0, 0] == 1

    def test_linear_ramp(self):
        assert self._single(0.99).tsdf[0, 0, 0] == pytest.approx(0.5, abs=1e-5)

    def test_clamped_in_front(self):
        assert self._single(0.9).tsdf[0, 0, 0] == 1.0

    def test_behind_truncation_untouched(self):
        vol = self._single(1.03)
        assert vol.weight[0, 0, 0] == 0 and vol.tsdf[0, 0, 0] == 1.0

    def test_alpha_gate(self):
        vol = TsdfVolume(np.array([0.0, 0.0, 1.0]), (1, 1, 1), 0.004, 0.02)
        integrate_depth(vol, np.full((4, 4), 1.0), pinhole(4, 4, 4.0), alpha=np.full((4, 4), 0.5))
        assert vol.weight[0, 0, 0] == 0

    def test_camera_behind_volume(self, caplog):
        vol = TsdfVolume(np.array([0.0, 0.0, -2.0]), (2, 2, 2), 0.004, 0.02)
        with caplog.at_level(logging.WARNING):
            integrate_depth(vol, np.ones((4, 4)), pinhole(4, 4, 4.0))
        assert "behind" in caplog.text and not vol.weight.any()

    def test_double_fusion_idempotent(self):
        cam = ring_cameras(1, 1.0, size=48, fov_deg=30)[0]
        depth = sphere_depth(cam, (0, 0, 0), RADIUS)
        once = TsdfVolume.from_bounds([-RADIUS] * 3, [RADIUS] * 3, VOXEL, 4 * VOXEL)
        twice = TsdfVolume.from_bounds([-RADIUS] * 3, [RADIUS] * 3, VOXEL, 4 * VOXEL)
        integrate_depth(once, depth, cam)
        integrate_depth(twice, depth, cam)
        integrate_depth(twice, depth, cam)
        assert np.abs(once.tsdf - twice.tsdf).max() <= 1e-7
        np.testing.assert_array_equal(twice.weight, 2 * once.weight)


class TestExtract:
    def test_sphere_radius(self, sphere_volume):
        mesh = extract_mesh(sphere_volume)
        err = np.abs(np.linalg.norm(mesh.vertices, axis=1) - RADIUS)
        assert err.mean() < VOXEL and err.max() < 2 * VOXEL

    def test_sphere_watertight(self, sphere_volume):
        mesh = extract_mesh(sphere_volume)
        assert mesh.is_watertight()
        assert set(mesh.edge_counts().values()) == {2}
        assert len(np.unique(mesh.components())) == 1

    def test_vertices_near_sign_change(self, sphere_volume):
        vol = sphere_volume
        mesh = extract_mesh(vol)
        idx = np.round((mesh.vertices - vol.origin) / vol.voxel_size).astype(int)
        idx = np.clip(idx, 1, np.array(vol.dims) - 2)
        sign = np.sign(vol.tsdf)
        ok = np.zeros(len(idx), bool)
        for off in np.ndindex(3, 3, 3):
            nb = idx + np.array(off) - 1
            ok |= sign[nb[:, 0], nb[:, 1], nb[:, 2]] != sign[idx[:, 0], idx[:, 1], idx[:, 2]]
        assert ok.all()

    def test_all_positive_is_empty(self):
        vol = TsdfVolume(np.zeros(3), (5, 5, 5), 0.01, 0.02)
        vol.weight[:] = 1
        assert extract_mesh(vol).empty

    def test_unobserved_voxels_produce_no_faces(self):
        vol = TsdfVolume(np.zeros(3), (6, 6, 6), 0.01, 0.02)
        vol.tsdf[:, :, :3] = -1  # a crossing exists, but no voxel was observed
        assert extract_mesh(vol).empty
        vol.weight[:] = 1
        assert not extract_mesh(vol).empty


class TestVolume:
    def test_from_bounds_pads(self):
        vol = TsdfVolume.from_bounds([0, 0, 0], [1, 1, 1], 0.05, 0.1)
        assert np.all(vol.origin < 0)
        assert np.all(vol.origin + (np.array(vol.dims) - 1) * vol.voxel_size >= 1)

    def test_from_bounds_caps_size(self, caplog):
        with caplog.at_level(logging.WARNING):
            vol = TsdfVolume.from_bounds([0, 0, 0], [1, 1, 1], 0.001, 0.02, max_voxels=40 ** 3)
        assert np.prod(vol.dims) <= 40 ** 3 and vol.voxel_size > 0.001
        assert "voxel size grown" in caplog.text

    def test_volume_for_splats_ignores_faint(self):
        centers = np.array([[0, 0, 0], [0.1, 0.1, 0.1], [5, 5, 5.0]])
        vol = volume_for_splats(centers, 0.01, 0.02, weights=np.array([1, 1, 0.0]))
        assert np.all(vol.origin + np.array(vol.dims) * vol.voxel_size < 1)

    def test_defaults(self):
        assert (DEFAULT_VOXEL, DEFAULT_TRUNCATION) == (0.004, 0.02)
        vol = TsdfVolume(np.zeros(3), (2, 2, 2))
        assert (vol.voxel_size, vol.truncation) == (0.004, 0.02)

    def test_rejects_truncation_below_voxel(self):
        with pytest.raises(ValueError):
            TsdfVolume(np.zeros(3), (2, 2, 2), voxel_size=0.05, truncation=0.02)


def test_fuse_scene_plane():
    # a wall of opaque splats seen head-on fuses into a plane at its depth
    g = np.linspace(-0.6, 0.6, 25)
    xy = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
    vsg = make_vsg(np.column_stack([xy, np.full(len(xy), 2.0)]), scales=0.05, opacity=0.99)
    cams = [pinhole(32, 32, 32.0, CameraPose(np.eye(3), [dx, 0, 0])) for dx in (-0.05, 0.0, 0.05)]
    mesh = extract_mesh(fuse_scene(make_scene(vsg), cams, voxel_size=0.02, truncation=0.06))
    assert not mesh.empty
    np.testing.assert_allclose(mesh.vertices[:, 2], 2.0, atol=0.02)


class TestMeshIO:
    @pytest.mark.parametrize("suffix", [".ply", ".obj"])
    def test_round_trip(self, tmp_path, suffix):
        mesh = _tetra()
        write_mesh(tmp_path / f"m{suffix}", mesh)
        back = read_mesh(tmp_path / f"m{suffix}")
        np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-6)
        np.testing.assert_array_equal(back.faces, mesh.faces)

    def test_ascii_ply(self, tmp_path):
        p = tmp_path / "a.ply"
        p.write_text("ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\n"
                     "property float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n"
                     "0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
        mesh = read_ply(p)
        assert len(mesh.vertices) == 4 and len(mesh.faces) == 2

    def test_binary_is_little_endian(self, tmp_path):
        write_ply(tmp_path / "m.ply", _tetra())
        assert b"format binary_little_endian 1.0" in (tmp_path / "m.ply").read_bytes()[:200]

    def test_unknown_suffix(self, tmp_path):
        with pytest.raises(ValueError):
            write_mesh(tmp_path / "m.stl", _tetra())


class TestTriangleMesh:
    def test_watertight_tetra(self):
        assert _tetra().is_watertight()
        open_mesh = TriangleMesh(_tetra().vertices, _tetra().faces[:3])
        assert not open_mesh.is_watertight()

    def test_sample_is_on_surface_and_seeded(self):
        mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        a = mesh.sample(500, seed=3)
        assert np.all(a[:, 2] == 0) and np.all(a[:, 0] + a[:, 1] <= 1 + 1e-12)
        np.testing.assert_array_equal(a, mesh.sample(500, seed=3))

    def test_sample_area_weighted(self):
        big = [[0, 0, 0], [2, 0, 0], [0, 2, 0]]
        small = [[5, 0, 0], [6, 0, 0], [5, 1, 0]]
        mesh = TriangleMesh(big + small, [[0, 1, 2], [3, 4, 5]])
        pts = mesh.sample(20000, seed=0)
        assert np.mean(pts[:, 0] >= 5) == pytest.approx(0.2, abs=0.02)

    def test_cleanup(self):
        v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [9, 9, 9], [2, 0, 0]]
        mesh = TriangleMesh(v, [[0, 1, 2], [0, 1, 4]])  # second face is degenerate
        clean = cleanup_mesh(mesh)
        assert len(clean.faces) == 1 and len(clean.vertices) == 3

    def test_bad_face_index(self):
        with pytest.raises(ValueError):
            TriangleMesh([[0, 0, 0]], [[0, 1, 2]])
