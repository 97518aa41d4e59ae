"""Center-distance detection metrics (a light nuScenes-style variant)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .head import Box3D, wrap_angle

THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0


@dataclass
class EvalReport:
    ap: dict[int, dict[float, float]]                 # class -> threshold -> AP
    mean_ap: float
    map_at: dict[float, float]
    mate: float
    maoe: float
    mave: float
    class_names: tuple[str, ...] = ()
    tp_errors: dict[int, tuple[float, float, float]] = field(default_factory=dict)

    def name(self, c: int) -> str:
        return self.class_names[c] if c < len(self.class_names) else f"class{c}"

    def table(self) -> str:
        th = sorted(next(iter(self.ap.values())).keys()) if self.ap else list(THRESHOLDS)
        head = f"{'class':<12}" + "".join(f"AP@{t:g}m".rjust(9) for t in th) + "   ATE    AOE    AVE"
        rows = [head, "-" * len(head)]
        for c in sorted(self.ap):
            e = self.tp_errors.get(c, (np.nan,) * 3)
            rows.append(f"{self.name(c):<12}" + "".join(f"{self.ap[c][t]:9.3f}" for t in th)
                        + f" {e[0]:6.3f} {e[1]:6.3f} {e[2]:6.3f}")
        rows.append(f"{'mean':<12}" + "".join(f"{self.map_at[t]:9.3f}" for t in th)
                    + f" {self.mate:6.3f} {self.maoe:6.3f} {self.mave:6.3f}")
        rows.append(f"mAP {self.mean_ap:.4f}")
        return "\n".join(rows)

    def to_kv(self) -> str:
        lines = [f"mAP={self.mean_ap!r}", f"mATE={self.mate!r}", f"mAOE={self.maoe!r}", f"mAVE={self.mave!r}"]
        for t, v in sorted(self.map_at.items()):
            lines.append(f"mAP@{t:g}={v!r}")
        for c in sorted(self.ap):
            for t, v in sorted(self.ap[c].items()):
                lines.append(f"AP.{self.name(c)}@{t:g}={v!r}")
        return "\n".join(lines) + "\n"


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """Area under the monotone precision envelope for score-ordered ``tp`` flags."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    dr = np.diff(np.r_[0.0, recall])
    return float(np.sum(dr * env))


def _match_class(preds, gts, cls: int, thr: float):
    """Greedy score-ordered matching of one class; returns tp flags and matched pairs."""
    items = [(-p.score, s, i) for s, ps in enumerate(preds) for i, p in enumerate(ps) if p.label == cls]
    items.sort()
    taken = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(items), dtype=bool)
    pairs = []
    for k, (_, s, i) in enumerate(items):
        p = preds[s][i]
        best, best_d = -1, np.inf
        for j, g in enumerate(gts[s]):
            if g.label != cls or taken[s][j]:
                continue
            d = np.hypot(p.center[0] - g.center[0], p.center[1] - g.center[1])
            if d < best_d:
                best, best_d = j, d
        if best >= 0 and best_d <= thr:
            taken[s][best] = True
            tp[k] = True
            pairs.append((p, gts[s][best]))
    return tp, pairs


def evaluate(preds: list[list[Box3D]], gts: list[list[Box3D]], thresholds=THRESHOLDS,
             class_names: tuple[str, ...] = ()) -> EvalReport:
    """Per-scene prediction and ground-truth lists, aligned by index."""
    if len(preds) != len(gts):
        raise ValueError("need one prediction list per ground-truth scene")
    classes = sorted({g.label for gs in gts for g in gs})
    ap = {}
    errs = {}
    for c in classes:
        n_gt = sum(g.label == c for gs in gts for g in gs)
        ap[c] = {}
        for t in thresholds:
            tp, pairs = _match_class(preds, gts, c, t)
            ap[c][t] = average_precision(tp, n_gt)
            if t == TP_THRESHOLD:
                errs[c] = _tp_errors(pairs)
        if TP_THRESHOLD not in thresholds:
            errs[c] = _tp_errors(_match_class(preds, gts, c, TP_THRESHOLD)[1])
    map_at = {t: float(np.mean([ap[c][t] for c in classes])) if classes else 0.0 for t in thresholds}
    mean_ap = float(np.mean(list(map_at.values()))) if map_at else 0.0
    agg = [float(np.mean([errs[c][k] for c in classes])) if classes else 1.0 for k in range(3)]
    return EvalReport(ap, mean_ap, map_at, agg[0], agg[1], agg[2], tuple(class_names), errs)


def _tp_errors(pairs) -> tuple[float, float, float]:
    """Mean translation, orientation and velocity error; 1.0 when nothing matched."""
    if not pairs:
        return 1.0, 1.0, 1.0
    ate = np.mean([np.hypot(p.center[0] - g.center[0], p.center[1] - g.center[1]) for p, g in pairs])
    aoe = np.mean([abs(float(wrap_angle(p.yaw - g.yaw))) for p, g in pairs])
    vel = [np.hypot(p.velocity[0] - g.velocity[0], p.velocity[1] - g.velocity[1])
           for p, g in pairs if p.velocity is not None and g.velocity is not None]
    ave = float(np.mean(vel)) if vel else 1.0
    return float(ate), float(aoe), ave
