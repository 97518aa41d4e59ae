import numpy as np
import pytest
from hypothesis import given, strategies as st

from bevfuse.evaluation import average_precision, evaluate
from bevfuse.head import Box3D


def box(x, y, label=0, score=1.0, yaw=0.0, vel=(0.0, 0.0)):
    return Box3D((x, y, 0.5), (1.0, 2.0, 1.5), yaw, vel, label, score)


def test_identity_predictions_score_one():
    gts = [[box(0, 0), box(5, 5, 1)], [box(-3, 2, 2)]]
    rep = evaluate(gts, gts)
    assert all(v == 1.0 for v in rep.map_at.values())
    assert rep.mate == 0.0 and rep.maoe == 0.0 and rep.mave == 0.0


def test_no_predictions_score_zero():
    rep = evaluate([[]], [[box(0, 0)]])
    assert all(v == 0.0 for v in rep.map_at.values())
    assert rep.mate == rep.maoe == rep.mave == 1.0


def test_lowest_scored_miss():
    gts = [[box(0, 0), box(10, 0), box(0, 10)]]
    preds = [[box(0.2, 0, score=0.9), box(10.1, 0, score=0.8), box(1.5, 10, score=0.7)]]
    rep = evaluate(preds, gts)
    assert rep.map_at[1.0] == pytest.approx(2 / 3, abs=1e-12)
    assert rep.map_at[2.0] == pytest.approx(1.0, abs=1e-12)


def test_false_positive_ranked_first():
    gts = [[box(0, 0)]]
    preds = [[box(8, 8, score=0.9), box(0, 0, score=0.5)]]
    assert evaluate(preds, gts).map_at[2.0] == pytest.approx(0.5)


def test_label_mismatch_is_not_a_match():
    rep = evaluate([[box(0, 0, label=1)]], [[box(0, 0, label=0)]])
    assert rep.map_at[2.0] == 0.0


def test_tp_errors():
    gts = [[box(0, 0, yaw=0.0, vel=(1.0, 0.0))]]
    preds = [[box(0.3, 0.4, yaw=0.5, vel=(1.0, 2.0))]]
    rep = evaluate(preds, gts)
    assert rep.mate == pytest.approx(0.5) and rep.maoe == pytest.approx(0.5) and rep.mave == pytest.approx(2.0)


def test_mismatched_lengths_rejected():
    with pytest.raises(ValueError):
        evaluate([[]], [[], []])


def _ap_oracle(tp, n_gt):
    """Precision envelope sampled at every recall step (interpolated AP, all points)."""
    tp = list(tp)
    total = 0.0
    prev_r = 0.0
    for k in range(len(tp)):
        r = sum(tp[:k + 1]) / n_gt
        if r > prev_r:
            best = max(sum(tp[:j + 1]) / (j + 1) for j in range(k, len(tp)))
            total += (r - prev_r) * best
            prev_r = r
    return total


@given(st.lists(st.booleans(), min_size=1, max_size=25), st.integers(0, 5))
def test_ap_matches_oracle(tp, extra):
    n_gt = sum(tp) + extra
    if n_gt == 0:
        assert average_precision(np.array(tp), n_gt) == 0.0
        return
    assert average_precision(np.array(tp), n_gt) == pytest.approx(_ap_oracle(tp, n_gt), abs=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_map_bounded_and_monotone_in_threshold(seed):
    rng = np.random.default_rng(seed)
    gts = [[box(*rng.uniform(-10, 10, 2), int(rng.integers(3))) for _ in range(rng.integers(1, 5))]
           for _ in range(3)]
    preds = [[box(*(np.array(g.center[:2]) + rng.normal(0, 1.0, 2)), g.label, rng.uniform()) for g in gs]
             for gs in gts]
    rep = evaluate(preds, gts)
    vals = [rep.map_at[t] for t in sorted(rep.map_at)]
    assert all(0.0 <= v <= 1.0 for v in vals)
    assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))
