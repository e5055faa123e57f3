import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from foldrare import explore as ex
from foldrare import vae
from foldrare.grid import VoxelGrid
from foldrare.preprocess import chamfer_dt, normalize_map

SMALL = vae.ModelConfig(input_dims=(8, 8, 8), channels=(2, 2, 2), latent_dim=3)
vec = st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3)


class TestLatentMean:
    def test_single(self):
        assert np.array_equal(ex.latent_mean([[1.0, 2.0]]), [1.0, 2.0])

    def test_opposites(self):
        v = np.array([0.5, -2.0, 3.0])
        assert np.array_equal(ex.latent_mean([v, -v]), np.zeros(3))

    def test_order_free(self):
        c = np.random.default_rng(0).normal(size=(10, 4))
        np.testing.assert_allclose(ex.latent_mean(c), ex.latent_mean(c[::-1]), rtol=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            ex.latent_mean(np.zeros((0, 3)))


class TestInterpolate:
    def test_endpoints_and_midpoint(self):
        z1, z2 = np.array([0.0, 1.0]), np.array([2.0, -1.0])
        path = ex.interpolate(z1, z2, 3)
        assert np.array_equal(path[0], z1) and np.array_equal(path[-1], z2)
        np.testing.assert_allclose(path[1], (z1 + z2) / 2)

    def test_constant(self):
        z = np.array([1.5, 2.5])
        assert all(np.array_equal(p, z) for p in ex.interpolate(z, z, 5))

    @given(vec, vec, st.integers(2, 20))
    def test_on_segment(self, z1, z2, steps):
        z1, z2 = np.array(z1), np.array(z2)
        for p in ex.interpolate(z1, z2, steps):
            assert np.all(np.minimum(z1, z2) <= p) and np.all(p <= np.maximum(z1, z2))

    def test_errors(self):
        with pytest.raises(ValueError):
            ex.interpolate([0, 1], [0, 1, 2], 3)
        with pytest.raises(ValueError):
            ex.interpolate([0], [1], 1)


class TestTraversal:
    def test_fixed_value(self):
        m = vae.build_model(SMALL)
        tr = ex.dimension_traversal(np.zeros(3), 1, 0.7, 0.7, 4, m)
        assert len(tr.volumes) == len(tr.values) == 4
        assert all(v == tr.volumes[0] for v in tr.volumes)

    def test_endpoints_match_decode(self):
        m = vae.build_model(SMALL)
        base = np.array([0.1, -0.2, 0.3])
        tr = ex.dimension_traversal(base, 2, -1.0, 1.0, 5, m)
        for v, vol in ((tr.values[0], tr.volumes[0]), (tr.values[-1], tr.volumes[-1])):
            z = base.copy()
            z[2] = v
            np.testing.assert_allclose(vol.data, vae.decode(m, z)[0], rtol=1e-6)

    def test_errors(self):
        m = vae.build_model(SMALL)
        with pytest.raises(IndexError):
            ex.dimension_traversal(np.zeros(3), 3, 0, 1, 3, m)
        with pytest.raises(ValueError):
            ex.dimension_traversal(np.zeros(3), 0, 1, 0, 3, m)


class TestBinarize:
    def test_boundary_inclusive(self):
        out = ex.binarize(VoxelGrid(np.array([0.4, 0.39999, 0.9]).reshape(3, 1, 1))).data.ravel()
        assert out.tolist() == [1, 0, 1]

    def test_all_below(self):
        assert ex.binarize(VoxelGrid(np.full((3, 3, 3), 0.2))).data.sum() == 0

    @given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 1000))
    def test_monotone(self, t1, t2, seed):
        t1, t2 = min(t1, t2), max(t1, t2)
        x = VoxelGrid(np.random.default_rng(seed).random((4, 4, 4)))
        assert np.all(ex.binarize(x, t2).data <= ex.binarize(x, t1).data)

    def test_skeleton_recovery_at_0_6(self):
        rng = np.random.default_rng(0)
        skel = np.zeros((10, 10, 10), np.uint8)
        skel[tuple(rng.integers(0, 10, (3, 12)))] = 1
        x = normalize_map(chamfer_dt(VoxelGrid(skel, kind="binary")))
        assert np.array_equal(ex.binarize(x, 0.6).data, skel)
        # face neighbours sit at 2 sigmoid(-1) ~ 0.538, so a 0.5 threshold keeps them
        assert ex.binarize(x, 0.5).data.sum() > skel.sum()


class TestRender:
    def test_constant_is_zero(self):
        img = ex.render_slices(VoxelGrid(np.full((4, 5, 6), 0.3)), 2, [0])[0]
        assert img.shape == (4, 5) and np.all(img == 0)

    def test_impulse(self):
        a = np.zeros((4, 5, 6))
        a[1, 3, 2] = 1.0
        img = ex.render_slices(VoxelGrid(a), 2, [2, 3])
        assert img[0][1, 3] == 255 and img[0].sum() == 255
        assert img[1].sum() == 0

    def test_volume_scaling(self):
        a = np.zeros((2, 2, 2))
        a[0, 0, 0] = 1.0
        a[0, 0, 1] = 0.5
        assert ex.render_slices(VoxelGrid(a), 2, [1])[0][0, 0] == 128

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            ex.render_slices(VoxelGrid(np.zeros((2, 2, 2))), 2, [2])

    def test_pgm_bytes_repeatable(self, tmp_path):
        a = np.random.default_rng(0).random((6, 7, 8))
        img = ex.render_slices(VoxelGrid(a), 2, [4])[0]
        p1 = ex.write_pgm(img, tmp_path / "a.pgm")
        p2 = ex.write_pgm(ex.render_slices(VoxelGrid(a), 2, [4])[0], tmp_path / "b.pgm")
        assert p1.read_bytes() == p2.read_bytes()
        assert p1.read_bytes().startswith(b"P5\n7 6\n255\n")
        assert np.array_equal(ex.read_pgm(p1), img)


def test_traversal_manifest(tmp_path):
    m = vae.build_model(SMALL)
    tr = ex.dimension_traversal(np.zeros(3), 0, -2, 2, 3, m)
    path = ex.write_traversal(tr, tmp_path, axis=2, depths=[1, 4])
    manifest = json.loads(path.read_text())
    assert [f["index"] for f in manifest["frames"]] == [0, 1, 2]
    for f in manifest["frames"]:
        assert len(f["slices"]) == 2
        assert all((tmp_path / s).exists() for s in f["slices"])
