import numpy as np
import pytest

from bevfuse.attention import ConfigError, ReferencePoints, deform_attn_oracle
from bevfuse.branches import DepthFeatures, ImageFeatures
from bevfuse.geometry import BevGrid, CameraRig, LidarFrame, make_reference_points_3d
from bevfuse.gradcheck import small_world
from bevfuse.mmfe import (AttnSublayer, InputError, MmfeConfig, ModalInputs, MultiModalEncoder, SelfAttnSublayer,
                          depth_refs, hit_counts, image_refs, init_bev_queries, lidar_bev_refs, lidar_voxel_refs,
                          mmfe_forward, self_refs, sinusoidal_2d, sinusoidal_2d_backward, sublayer_increment)
from bevfuse.numerics import layer_norm

from oracles import project_homogeneous

DIMS = {"points": 7, "image": 6, "depth": 5}


def encoder(order=("points", "image", "depth"), layers=2, seed=0, **kw):
    grid, inputs, _ = small_world(seed)
    cfg = MmfeConfig(num_layers=layers, embed_dim=16, modality_order=order, **kw)
    return MultiModalEncoder(cfg, grid, DIMS, np.random.default_rng(seed + 100)), inputs


def jitter(enc, seed=1, scale=0.1):
    r = np.random.default_rng(seed)
    for p in enc.params():
        p.data += r.normal(0.0, scale, p.shape)


def copy_weights(src, dst):
    theirs = src.named_params()
    for k, v in dst.named_params().items():
        v.data[...] = theirs[k].data


# --------------------------------------------------------------------------- queries

def test_bev_queries_small_grid():
    g = BevGrid(2, 2, (-1, 1, -1, 1))
    q = init_bev_queries(g, 8)
    assert q.Q.shape == (4, 8)
    assert len({tuple(r) for r in np.round(q.pos_enc, 12)}) == 4
    assert np.array_equal(q.pos_enc, init_bev_queries(g, 8, np.random.default_rng(5)).pos_enc)


def test_pos_enc_injective_on_grid():
    g = BevGrid(16, 16, (-8, 8, -8, 8))
    pos = init_bev_queries(g, 16).pos_enc
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    assert d[~np.eye(256, dtype=bool)].min() > 1e-3


def test_sinusoid_backward(rng):
    rows, cols = rng.uniform(0, 8, 5), rng.uniform(0, 8, 5)
    R = rng.normal(size=(5, 16))
    g = sinusoidal_2d_backward(R, rows, cols)
    h = 1e-6
    num_r = ((sinusoidal_2d(rows + h, cols, 16) - sinusoidal_2d(rows - h, cols, 16)) * R).sum(1) / (2 * h)
    num_c = ((sinusoidal_2d(rows, cols + h, 16) - sinusoidal_2d(rows, cols - h, 16)) * R).sum(1) / (2 * h)
    np.testing.assert_allclose(g, np.c_[num_r, num_c], rtol=1e-6, atol=1e-8)


# --------------------------------------------------------------------------- self attention

def test_self_attention_init_collapse(rng):
    g = BevGrid(4, 4, (-2, 2, -2, 2))
    sub = SelfAttnSublayer(8, 2, 4, rng)
    x = rng.normal(size=(16, 8))
    y, _ = sub.increment(x, self_refs(g), g)
    h, _ = layer_norm(x, sub.norm.gamma.data, sub.norm.beta.data)
    a = sub.attn
    np.testing.assert_allclose(y, (h @ a.value_w.data + a.value_b.data) @ a.out_w.data + a.out_b.data, atol=1e-13)
    assert y.shape == (16, 8)


def test_self_attention_matches_oracle_composition(rng):
    g = BevGrid(4, 4, (-2, 2, -2, 2))
    sub = SelfAttnSublayer(8, 2, 3, rng)
    jitter(sub, 3, 0.3)
    x = rng.normal(size=(16, 8))
    y, _ = sub.increment(x, self_refs(g), g)
    h, _ = layer_norm(x, sub.norm.gamma.data, sub.norm.beta.data)
    ref = deform_attn_oracle(h, self_refs(g), h.T.reshape(8, 4, 4), sub.attn)
    np.testing.assert_allclose(y, ref, atol=1e-12)


# --------------------------------------------------------------------------- points

def test_aligned_lidar_bev_refs_are_cells():
    g = BevGrid(8, 8, (-16, 16, -16, 16))
    fr = LidarFrame(np.eye(4), (-16.0, -16.0, -1.0), 4.0, (2, 8, 8))
    refs = lidar_bev_refs(g, fr)
    n = np.arange(64)
    np.testing.assert_allclose(refs.loc[:, 0], np.c_[n // 8, n % 8], atol=1e-12)
    assert refs.valid.all()


def test_uniform_lidar_map_gives_identical_increments(rng):
    g = BevGrid(8, 8, (-16, 16, -16, 16))
    fr = LidarFrame(np.eye(4), (-16.0, -16.0, -1.0), 4.0, (2, 8, 8))
    sub = AttnSublayer(16, 4, 4, 2, 3, rng)
    vol = np.ones((1, 8, 8, 3)) * np.array([0.3, -1.0, 2.0])
    y, _ = sub.increment(rng.normal(size=(64, 16)), lidar_bev_refs(g, fr), vol)
    np.testing.assert_allclose(y, np.broadcast_to(y[0], y.shape), atol=1e-13)


def test_voxel_grid_elsewhere_gives_zero_increment(rng):
    g = BevGrid(8, 8, (-16, 16, -16, 16))
    far = LidarFrame(np.eye(4), (200.0, 200.0, -1.0), 4.0, (2, 8, 8))
    refs = lidar_voxel_refs(g, far)
    assert not refs.valid.any()
    sub = AttnSublayer(16, 4, 4, 3, 7, rng)
    jitter(sub)
    y, _ = sub.increment(rng.normal(size=(64, 16)), refs, rng.normal(size=(1, 2, 8, 8, 7)))
    assert np.array_equal(y, np.zeros_like(y))


def test_single_anchor_voxel_path_is_one_sample_per_query(rng):
    g = BevGrid(8, 8, (-16, 16, -16, 16), (0.6,))
    fr = LidarFrame(np.eye(4), (-16.0, -16.0, -1.0), 4.0, (2, 8, 8))
    refs = lidar_voxel_refs(g, fr)
    assert refs.loc.shape == (64, 1, 3)
    sub = AttnSublayer(16, 4, 4, 3, 7, rng)
    jitter(sub, 4, 0.2)
    x = rng.normal(size=(64, 16))
    vol = rng.normal(size=(7, 2, 8, 8))
    y, _ = sub.increment(x, refs, np.moveaxis(vol, 0, -1)[None])
    h, _ = layer_norm(x, sub.norm.gamma.data, sub.norm.beta.data)
    np.testing.assert_allclose(y, deform_attn_oracle(h, refs, vol, sub.attn), atol=1e-12)


def test_single_slab_voxel_path_collapses_to_bev_path(rng):
    # Z=1, the anchor at the slab center and no vertical offsets: 3-D sampling == 2-D sampling
    g = BevGrid(8, 8, (-16, 16, -16, 16), (1.0,))
    fr = LidarFrame(np.eye(4), (-16.0, -16.0, -1.0), 4.0, (1, 8, 8))
    s3 = AttnSublayer(16, 4, 4, 3, 5, np.random.default_rng(0))
    s2 = AttnSublayer(16, 4, 4, 2, 5, np.random.default_rng(0))
    jitter(s3, 5, 0.2)
    for name, t in s2.named_params().items():
        src = s3.named_params()[name].data
        if name.endswith("offset_w") or name.endswith("offset_b"):
            t.data[...] = src.reshape(src.shape[:-1] + (-1, 3))[..., 1:].reshape(t.shape)
            src.reshape(src.shape[:-1] + (-1, 3))[..., 0] = 0.0
        else:
            t.data[...] = src
    x = rng.normal(size=(64, 16))
    bev = rng.normal(size=(1, 8, 8, 5))
    y3, _ = s3.increment(x, lidar_voxel_refs(g, fr), bev[:, None])
    y2, _ = s2.increment(x, lidar_bev_refs(g, fr), bev)
    np.testing.assert_allclose(y3, y2, atol=1e-12)


def test_missing_lidar_raises():
    enc, inputs = encoder(("points", "image"))
    inputs.lidar = None
    with pytest.raises(InputError):
        enc.forward(inputs)


# --------------------------------------------------------------------------- cameras

def _oracle_hits(grid, rig, depth_range=None):
    pts = make_reference_points_3d(grid).reshape(-1, 3)
    h, w = rig.image_hw
    out = np.zeros(grid.num_cells, dtype=int)
    for j in range(rig.num_cams):
        uv, d = project_homogeneous(rig.K[j], rig.T_ego_cam[j], pts)
        with np.errstate(invalid="ignore"):
            ok = (d > 0.1) & (uv[:, 0] >= -0.5) & (uv[:, 0] < w - 0.5) & (uv[:, 1] >= -0.5) & (uv[:, 1] < h - 0.5)
        if depth_range is not None:
            ok &= (d >= depth_range[0]) & (d <= depth_range[1])
        out += ok.reshape(grid.num_cells, -1).any(axis=1)
    return out


def test_hit_counts_match_projection_oracle():
    grid = BevGrid(12, 12, (-12, 12, -12, 12), (0.0, 0.6, 1.2, 1.8))
    rig = CameraRig.symmetric(6, (24, 48))
    refs = image_refs(grid, rig, 0)
    counts = hit_counts(refs, 6)
    np.testing.assert_array_equal(counts, _oracle_hits(grid, rig))
    assert (counts == 2).any()
    np.testing.assert_allclose(refs.scale[refs.valid], np.repeat(1.0 / counts, refs.loc.shape[1]).reshape(
        refs.valid.shape)[refs.valid], atol=0)


def test_depth_hits_exclude_out_of_range():
    from bevfuse.geometry import DepthBinSpec
    grid = BevGrid(12, 12, (-12, 12, -12, 12), (0.0, 1.8))
    rig = CameraRig.symmetric(3, (24, 48))
    bins = DepthBinSpec(tuple(np.arange(2.0, 11.0)))
    counts = hit_counts(depth_refs(grid, rig, bins, 0), 3)
    np.testing.assert_array_equal(counts, _oracle_hits(grid, rig, (2.0, 10.0)))


def test_single_camera_divisor_one():
    grid = BevGrid(8, 8, (-8, 8, -8, 8), (0.0, 1.0))
    rig = CameraRig.symmetric(1, (24, 48))
    refs = image_refs(grid, rig, 0)
    assert hit_counts(refs, 1).max() == 1
    assert np.all(refs.scale[refs.valid] == 1.0)


def test_zero_image_features_zero_increment(rng):
    grid, inputs, _ = small_world(0)
    sub = AttnSublayer(16, 4, 4, 2, 6, rng)
    refs = image_refs(grid, inputs.rig, 0)
    y, _ = sub.increment(rng.normal(size=(64, 16)), refs, np.zeros((2, 12, 24, 6)))
    assert np.array_equal(y, np.zeros_like(y))


@pytest.mark.parametrize("modality", ["image", "depth"])
def test_duplicated_camera_leaves_increment_unchanged(modality):
    enc, inputs = encoder()
    jitter(enc)
    x = np.random.default_rng(2).normal(size=(64, 16))
    base = sublayer_increment(enc, modality, x, inputs)
    for j in range(2):
        dup = ModalInputs(inputs.lidar, inputs.lidar_frame,
                          ImageFeatures([np.concatenate([lv, lv[j:j + 1]]) for lv in inputs.image.levels],
                                        inputs.image.strides),
                          DepthFeatures(np.concatenate([inputs.depth.grids, inputs.depth.grids[j:j + 1]]), None,
                                        inputs.depth.bins),
                          inputs.rig.duplicate(j))
        assert np.abs(sublayer_increment(enc, modality, x, dup) - base).max() <= 1e-12


# --------------------------------------------------------------------------- encoder

@pytest.mark.parametrize("drop", ["image", "points", "depth"])
def test_mask_equals_encoder_without_sublayer(drop):
    full, inputs = encoder()
    jitter(full)
    order = tuple(m for m in ("points", "image", "depth") if m != drop)
    small, _ = encoder(order)
    copy_weights(full, small)
    a = mmfe_forward(full, inputs, frozenset([drop]))
    b = mmfe_forward(small, inputs)
    assert np.array_equal(a, b)


def test_config_mask_matches_call_mask():
    enc, inputs = encoder(modality_mask=frozenset(["image"]))
    assert np.array_equal(mmfe_forward(enc, inputs), mmfe_forward(enc, inputs, frozenset(["image"])))


def test_mask_everything_raises():
    enc, inputs = encoder()
    with pytest.raises(ConfigError):
        enc.forward(inputs, frozenset(["points", "image", "depth"]))
    with pytest.raises(ConfigError):
        MmfeConfig(modality_order=("image",), modality_mask=frozenset(["image"]))


def test_zero_init_encoder_returns_normalized_queries():
    grid, inputs, _ = small_world(0)
    cfg = MmfeConfig(num_layers=1, embed_dim=16, modality_order=("points", "image"))
    enc = MultiModalEncoder(cfg, grid, DIMS, np.random.default_rng(0), zero_init=True)
    out = mmfe_forward(enc, inputs)
    want, _ = layer_norm(enc.queries.initial(), np.ones(16), np.zeros(16))
    np.testing.assert_allclose(out, want.T.reshape(16, 8, 8), atol=1e-12)


def test_order_changes_output():
    lc, inputs = encoder(("points", "image"))
    jitter(lc)
    cl, _ = encoder(("image", "points"))
    copy_weights(lc, cl)
    a, b = mmfe_forward(lc, inputs), mmfe_forward(cl, inputs)
    assert np.all(np.isfinite(a)) and np.all(np.isfinite(b))
    assert np.abs(a - b).max() > 1e-6


def test_forward_deterministic():
    enc, inputs = encoder()
    jitter(enc)
    assert np.array_equal(mmfe_forward(enc, inputs), mmfe_forward(enc, inputs))


def test_empty_inputs_finite():
    enc, inputs = encoder()
    jitter(enc)
    inputs.lidar = np.zeros_like(inputs.lidar)
    inputs.image.levels = [np.zeros_like(lv) for lv in inputs.image.levels]
    inputs.depth.grids = np.zeros_like(inputs.depth.grids)
    assert np.all(np.isfinite(mmfe_forward(enc, inputs)))


def test_bev_lidar_form_runs():
    grid, inputs, _ = small_world(0)
    inputs.lidar = inputs.lidar[:, 0]
    cfg = MmfeConfig(num_layers=1, embed_dim=16, modality_order=("points",), lidar_form="bev")
    out = mmfe_forward(MultiModalEncoder(cfg, grid, DIMS), inputs)
    assert out.shape == (16, 8, 8)
