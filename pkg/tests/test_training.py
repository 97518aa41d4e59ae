import numpy as np
import pytest

from bevfuse.head import HeadConfig
from bevfuse.mmfe import MmfeConfig
from bevfuse.model import Detector, ModelConfig, empty_sample, prepare
from bevfuse.numerics import load_into
from bevfuse.scene import SceneConfig, generate_scene
from bevfuse.training import Adam, TrainConfig, lr_at, predict, save_checkpoint, train_toy
from bevfuse.numerics import Tensor

TINY = ModelConfig(bev_hw=(8, 8), roi=8.0, voxel_size=2.0, image_hw=(24, 48), image_channels=8,
                   mmfe=MmfeConfig(num_layers=1, embed_dim=16), head=HeadConfig(num_queries=10, num_layers=2))
TINY_SCENE = SceneConfig(roi=8.0, image_hw=(24, 48), density=100, ground_points=100)


@pytest.fixture(scope="module")
def sample():
    return prepare(generate_scene(3, 3, False, TINY_SCENE), TINY)


def test_overfits_single_scene(sample):
    res = train_toy(TINY, TrainConfig(steps=300, warmup=20, log_every=0), [sample])
    losses = np.array(res.losses)
    assert losses[-10:].mean() <= 0.1 * losses[0]


def test_fixed_seed_reproduces_curve(sample):
    cfg = TrainConfig(steps=15, warmup=5, log_every=0)
    a = train_toy(TINY, cfg, [sample]).losses
    b = train_toy(TINY, cfg, [sample]).losses
    assert a == b


def test_lr_schedule():
    cfg = TrainConfig(steps=1000, lr=1e-3, warmup=100, min_lr_ratio=0.1)
    assert lr_at(0, cfg) == pytest.approx(1e-5)
    assert lr_at(99, cfg) == pytest.approx(1e-3)
    assert lr_at(100, cfg) == pytest.approx(1e-3)
    assert lr_at(999, cfg) == pytest.approx(1e-4, rel=1e-4)
    lrs = [lr_at(s, cfg) for s in range(100, 1000)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_adam_first_step_moves_by_lr():
    t = Tensor(np.array([1.0, -2.0, 3.0]))
    t.grad[...] = [0.5, -4.0, 1e-3]
    Adam([t]).step(0.1)
    np.testing.assert_allclose(t.data, [0.9, -1.9, 2.9], atol=1e-6)


def test_all_missing_inputs_finite():
    model = Detector(TINY)
    boxes = predict(model, empty_sample(TINY))
    assert len(boxes) == TINY.head.num_queries
    assert all(np.all(np.isfinite(b.center)) and np.all(np.isfinite(b.size)) for b in boxes)


def test_all_missing_inputs_finite_with_history():
    from bevfuse.tfe import TemporalConfig
    cfg = ModelConfig(**{**TINY.__dict__, "temporal": TemporalConfig(num_layers=1, frames=3)})
    model = Detector(cfg)
    assert np.all(np.isfinite(model.bev(empty_sample(cfg, frames=3))))


def test_checkpoint_roundtrip(tmp_path, sample):
    model = Detector(TINY, seed=1)
    save_checkpoint(tmp_path / "m.ckpt", model)
    other = Detector(TINY, seed=2)
    load_into(other, tmp_path / "m.ckpt")
    assert np.array_equal(model.bev(sample), other.bev(sample))
