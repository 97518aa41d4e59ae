import numpy as np
import pytest
from hypothesis import given, strategies as st

from bevfuse.branches import (BevCompressor, DepthBranch, ImageBackboneStub, ImageFeatures, PointCloud,
                              VoxelEncoder, compress_to_bev, depth_branch, fold_z, image_backbone_stub,
                              lidar_encoder_voxel, load_point_cloud, load_tensor, save_point_cloud, save_tensor,
                              unfold_z, voxelize)
from bevfuse.geometry import DepthBinSpec, LidarFrame
from bevfuse.gradcheck import check_branches, check_depth

FRAME = LidarFrame(np.eye(4), (-4.0, -4.0, -1.0), 1.0, (3, 8, 8))


def test_point_at_voxel_center():
    res = voxelize(PointCloud([[0.5, -1.5, 0.5, 0.7]]), FRAME)
    # x -> row 4, y -> col 2, z -> slice 1
    nz = np.argwhere(res.grid.any(axis=0))
    assert nz.tolist() == [[1, 4, 2]]
    np.testing.assert_allclose(res.grid[:, 1, 4, 2], [0, 0, 0, 0.7, 1.0], atol=1e-15)


def test_duplicate_point_same_as_single():
    p = [[0.2, 0.3, 0.1, 0.4]]
    a = voxelize(PointCloud(p), FRAME).grid
    b = voxelize(PointCloud(p + p), FRAME).grid
    assert np.array_equal(a, b)


@given(st.integers(0, 2 ** 31 - 1))
def test_voxelize_permutation_invariant_and_counts(seed):
    r = np.random.default_rng(seed)
    pts = np.c_[r.uniform(-6, 6, size=(60, 3)), r.uniform(0, 1, 60)]
    pts[::7, 1] = np.nan
    a = voxelize(PointCloud(pts), FRAME)
    b = voxelize(PointCloud(pts[r.permutation(60)]), FRAME)
    np.testing.assert_allclose(a.grid, b.grid, atol=1e-14)
    assert a.counts.sum() + a.rejected + a.outside == 60
    assert a.rejected == int(np.isnan(pts).any(axis=1).sum())


def test_zero_input_zero_bias_gives_zero(rng):
    enc = VoxelEncoder(5, 4, 3, rng)
    y, _ = enc.forward(np.zeros((5, 3, 6, 6)))
    assert np.array_equal(y, np.zeros_like(y))


def test_voxel_encoder_translation_equivariant(rng):
    enc = VoxelEncoder(5, 4, 3, rng)
    x = np.zeros((5, 4, 10, 10))
    x[:, :, 3:6, 3:6] = rng.normal(size=(5, 4, 3, 3))
    shifted = np.roll(x, 1, axis=2)
    a = lidar_encoder_voxel(x, LidarFrame(dims=(4, 10, 10)), enc).grid
    b = lidar_encoder_voxel(shifted, LidarFrame(dims=(4, 10, 10)), enc).grid
    np.testing.assert_allclose(b[:, :, 1:], a[:, :, :-1], atol=1e-13)


def test_fold_z_bijective(rng):
    g = rng.normal(size=(2, 3, 4, 5))
    assert fold_z(g).shape == (6, 4, 5)
    assert np.array_equal(unfold_z(fold_z(g), 3), g)


def test_identity_compressor_is_reshape(rng):
    comp = BevCompressor(2, 3, 6, rng)
    comp.conv.identity_init()
    g = rng.normal(size=(2, 3, 4, 5))
    from bevfuse.branches import VoxelFeatures
    out = compress_to_bev(VoxelFeatures(g, FRAME), comp).map
    assert np.array_equal(out, fold_z(g))


def test_zero_image_zero_features(rng):
    bb = ImageBackboneStub(4, rng)
    feats = image_backbone_stub(np.zeros((2, 3, 13, 22)), bb)
    assert all(np.array_equal(lv, np.zeros_like(lv)) for lv in feats.levels)
    assert [lv.shape[2:] for lv in feats.levels] == [(7, 11), (4, 6)]


def test_depth_distribution(rng):
    bins = DepthBinSpec()
    br = DepthBranch(4, bins, 3, 2, rng)
    feats = ImageFeatures([rng.normal(size=(2, 4, 5, 6))], (2,))
    out = depth_branch(feats, br)
    np.testing.assert_allclose(out.dist.sum(axis=1), 1.0, atol=1e-12)
    assert out.dist.shape == (2, 40, 5, 6)
    br.logits.w.data[...] = 0.0
    br.logits.b.data[...] = 0.0
    np.testing.assert_allclose(depth_branch(feats, br).dist, 1.0 / 40, atol=1e-15)


def test_branch_gradients():
    assert check_branches(seed=3).passed(1e-4)
    assert check_depth(seed=3).passed(1e-4)


def test_point_cloud_file_roundtrip(tmp_path, rng):
    pc = PointCloud(rng.normal(size=(17, 4)))
    save_point_cloud(tmp_path / "p.bin", pc)
    assert np.array_equal(load_point_cloud(tmp_path / "p.bin").points, pc.points)
    blob = (tmp_path / "p.bin").read_bytes()
    assert blob[:5] == b"FBPC1" and len(blob) == 5 + 8 + 17 * 32


def test_tensor_file_roundtrip(tmp_path, rng):
    arr = rng.normal(size=(2, 3, 4))
    save_tensor(tmp_path / "t.bin", arr)
    assert np.array_equal(load_tensor(tmp_path / "t.bin"), arr)


def test_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nope" * 4)
    with pytest.raises(ValueError):
        load_point_cloud(tmp_path / "x.bin")


def test_voxelize_empty_cloud():
    from bevfuse.branches import PointCloud, voxelize
    from bevfuse.geometry import LidarFrame
    g = voxelize(PointCloud(), LidarFrame(np.eye(4), (-4.0, -4.0, -1.0), 1.0, (2, 8, 8))).grid
    assert g.dtype == np.float64 and not g.any()
