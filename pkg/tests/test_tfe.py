import numpy as np
import pytest

from bevfuse.geometry import BevGrid, EgoPose
from bevfuse.gradcheck import check_tfe
from bevfuse.numerics import layer_norm
from bevfuse.tfe import (BevHistory, HistoryError, TemporalConcat, TemporalConfig, TemporalEncoder, aligned_frames,
                         load_history, push_history, save_history, temporal_refs, tfe_forward)

GRID = BevGrid(8, 8, (-16.0, 16.0, -16.0, 16.0))


def encoder(frames=4, zero=False, seed=0, **kw):
    r = np.random.default_rng(seed)
    te = TemporalEncoder(TemporalConfig(num_layers=1, frames=frames, **kw), GRID, 16, rng=r, zero_init=zero)
    if not zero:
        for p in te.params():
            p.data += r.normal(0.0, 0.1, p.shape)
    return te


def test_push_into_empty():
    buf = push_history(BevHistory(8), np.zeros((2, 8, 8)), EgoPose.planar(0, 0, 0, 0))
    assert len(buf) == 1


def test_capacity_evicts_oldest_in_order():
    buf = BevHistory(8)
    for t in range(10):
        buf.push(np.full((1, 2, 2), t), EgoPose.planar(t, 0, 0, 0))
    assert len(buf) == 8
    assert buf.timestamps == list(range(2, 10))
    assert [float(b[0, 0, 0]) for b, _ in buf.latest(3)] == [9.0, 8.0, 7.0]


def test_non_monotone_timestamp_rejected():
    buf = BevHistory(4).push(np.zeros((1, 2, 2)), EgoPose.planar(5, 0, 0, 0))
    with pytest.raises(HistoryError):
        buf.push(np.zeros((1, 2, 2)), EgoPose.planar(5, 0, 0, 0))


def test_cold_start_finite(rng):
    te = encoder()
    out = tfe_forward(rng.normal(size=(16, 8, 8)), BevHistory(8), EgoPose.planar(0, 0, 0, 0), te)
    assert out.shape == (16, 8, 8) and np.all(np.isfinite(out))


@pytest.mark.parametrize("T", [2, 4, 8])
def test_identical_frames_scale_attention_term(T, rng):
    te = encoder(T)
    cur = rng.normal(size=(16, 8, 8))
    pose = EgoPose.planar(10, 1.0, 2.0, 0.3)
    buf = BevHistory(8)
    for k in range(T - 1):
        buf.push(cur, EgoPose(k, pose.T_world_ego.copy()))
    frames = aligned_frames(cur, buf, pose, GRID, T)
    assert len(frames) == T
    assert np.array_equal(te.attention_term(frames), T * te.attention_term([cur]))


def test_mean_toggle_divides_by_frame_count(rng):
    te = encoder(4, mean=True)
    cur = rng.normal(size=(16, 8, 8))
    np.testing.assert_allclose(te.attention_term([cur] * 4), te.attention_term([cur]), atol=1e-13)
    assert np.allclose(temporal_refs(GRID, 4, True).scale, 0.25)


def test_zero_init_reproduces_current_map(rng):
    te = encoder(3, zero=True)
    cur = rng.normal(size=(16, 8, 8))
    out = tfe_forward(cur, BevHistory(8), EgoPose.planar(0, 0, 0, 0), te)
    x = cur.reshape(16, -1).T + te._pos
    want, _ = layer_norm(x, np.ones(16), np.zeros(16))
    np.testing.assert_allclose(out, want.T.reshape(cur.shape), atol=1e-12)


def test_concat_baseline_same_shape(rng):
    cfg = TemporalConfig(num_layers=1, frames=3, method="concat")
    cur = rng.normal(size=(16, 8, 8))
    a, _ = TemporalConcat(cfg, 16, rng).forward([cur, cur])
    b, _ = encoder(3).forward([cur, cur])
    assert a.shape == b.shape == cur.shape


def test_gradients():
    assert check_tfe(seed=2, frames=3).passed(1e-4)


def test_history_file_roundtrip(tmp_path, rng):
    buf = BevHistory(3)
    for t in range(4):
        buf.push(rng.normal(size=(2, 4, 4)), EgoPose.planar(t * 500000, 0.1 * t, 0.0, 0.05 * t))
    save_history(tmp_path / "h.bin", buf)
    back = load_history(tmp_path / "h.bin")
    assert back.capacity == 3 and back.timestamps == buf.timestamps
    for (a, pa), (b, pb) in zip(buf, back):
        assert np.array_equal(a, b) and np.array_equal(pa.T_world_ego, pb.T_world_ego)
