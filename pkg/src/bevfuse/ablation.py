"""Desk-scale ablation runners.

Every arm trains a fresh model on generated scenes and is scored on a
held-out set.  The tables list the published reference numbers beside the
toy results and state whether the ordering agrees; nothing is asserted.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .evaluation import EvalReport, evaluate
from .model import Sample, prepare
from .scene import CLASS_NAMES, cbgs_resample, generate_dataset
from .training import predict, train_toy

log = logging.getLogger(__name__)

# published reference rows: arm label -> (mAP, NDS)
PUBLISHED_ROWS = {
    "fusion_method": {"Add": (59.3, 64.6), "Concate": (59.2, 64.5), "Ours": (62.7, 67.3)},
    "lidar_form": {"BEV": (61.3, 66.1), "Voxel": (62.7, 67.3)},
    "order": {"LC": (62.7, 67.3), "CL": (62.5, 67.1)},
    "voxel_size": {"fine": (63.2, 67.8), "coarse": (62.5, 67.1)},
    "image_size": {"large": (64.4, 68.1), "small": (62.5, 67.1)},
    "cbgs": {"on": (66.5, 70.4), "off": (62.7, 67.3)},
    "temporal": {"T=1": (66.48, 66.48), "T=2": (67.71, 67.85), "T=4": (68.18, 68.24), "T=8": (68.31, 68.56)},
}
NAMES = tuple(PUBLISHED_ROWS)
# toy checks without a published table of their own
CHECKS = ("sparse_fusion", "temporal_velocity")


@dataclass
class Arm:
    label: str
    cfg: RunConfig
    prefix: str = ""     # column group, used by the temporal table


@dataclass
class AblationReport:
    name: str
    rows: list[tuple[str, dict[str, float]]] = field(default_factory=list)
    columns: tuple[str, ...] = ("mAP@2m", "mAP", "mATE", "mAOE", "mAVE")

    def table(self) -> str:
        pub = PUBLISHED_ROWS.get(self.name, {})
        ref_name = "published (concat/ours)" if self.name == "temporal" else "published (mAP/NDS)"
        widths = [max(10, len(c) + 2) for c in self.columns]
        head = f"{'arm':<14}" + "".join(f"{c:>{w}}" for c, w in zip(self.columns, widths)) + f"   {ref_name}"
        lines = [f"ablation: {self.name}", head, "-" * len(head)]
        for label, m in self.rows:
            ref = pub.get(label.split(" ")[0])
            ref_s = f"{ref[0]:.2f} / {ref[1]:.2f}" if ref else "-"
            lines.append(f"{label:<14}" + "".join(f"{m.get(c, np.nan):{w}.3f}" for c, w in zip(self.columns, widths))
                         + f"   {ref_s}")
        lines.append(f"direction: {self.direction()}")
        return "\n".join(lines)

    def direction(self) -> str:
        """Does the best toy arm (by mAP@2m) match the best published arm?"""
        pub = PUBLISHED_ROWS.get(self.name, {})
        scored = [(m["mAP@2m"], label.split(" ")[0]) for label, m in self.rows if label.split(" ")[0] in pub]
        if len(scored) < 2:
            return "n/a"
        top = max(score for score, _ in scored)
        if sum(score == top for score, _ in scored) > 1:
            return "tie among toy arms"
        toy_best = max(scored)[1]
        idx = 1 if self.name == "temporal" else 0
        present = {label for _, label in scored}
        pub_best = max((kv for kv in pub.items() if kv[0] in present), key=lambda kv: kv[1][idx])[0]
        verdict = "consistent" if toy_best == pub_best else "not consistent"
        return f"{verdict} (toy best {toy_best}, published best {pub_best})"


def report_metrics(rep: EvalReport) -> dict[str, float]:
    return {"mAP@2m": rep.map_at[2.0], "mAP": rep.mean_ap, "mATE": rep.mate, "mAOE": rep.maoe, "mAVE": rep.mave}


def _variant(cfg: RunConfig, **changes) -> RunConfig:
    out = copy.deepcopy(cfg)
    for key, val in changes.items():
        node = out
        parts = key.split("__")
        for p in parts[:-1]:
            node = getattr(node, p)
        setattr(node, parts[-1], val)
    out.model.mmfe.__post_init__()
    out.model.temporal.__post_init__()
    return out


def arms(name: str, cfg: RunConfig) -> list[Arm]:
    if name == "temporal":
        out = []
        for T in (1, 2, 4, 8):
            for method, prefix in (("concat", "concat"), ("attention", "ours")):
                c = _variant(cfg, model__temporal__frames=T, model__temporal__method=method,
                             data__motion=True, data__scene__frames=8)
                out.append(Arm(f"T={T}", c, prefix))
        return out
    if name == "fusion_method":
        return [Arm("Add", _variant(cfg, model__fusion="add")), Arm("Concate", _variant(cfg, model__fusion="concat")),
                Arm("Ours", _variant(cfg, model__fusion="mmfe"))]
    if name == "lidar_form":
        return [Arm("BEV", _variant(cfg, model__mmfe__lidar_form="bev")),
                Arm("Voxel", _variant(cfg, model__mmfe__lidar_form="voxel"))]
    if name == "order":
        return [Arm("LC", _variant(cfg, model__mmfe__modality_order=("points", "image"))),
                Arm("CL", _variant(cfg, model__mmfe__modality_order=("image", "points")))]
    if name == "voxel_size":
        vs = cfg.model.voxel_size
        return [Arm("fine", _variant(cfg, model__voxel_size=vs / 2)), Arm("coarse", _variant(cfg, model__voxel_size=vs))]
    if name == "image_size":
        h, w = cfg.model.image_hw
        small = (h // 2, w // 2)
        return [Arm("large", cfg), Arm("small", _variant(cfg, model__image_hw=small, data__scene__image_hw=small))]
    if name == "cbgs":
        return [Arm("on", _variant(cfg, train__cbgs=True, data__scene__class_probs=(0.8, 0.15, 0.05))),
                Arm("off", _variant(cfg, train__cbgs=False, data__scene__class_probs=(0.8, 0.15, 0.05)))]
    if name == "sparse_fusion":
        # held-out and training scenes both leave some camera-visible objects nearly point-free
        base = _variant(cfg, data__scene__sparse_fraction=0.2)
        return [Arm("LiDAR-only", _variant(base, model__mmfe__modality_order=("points",))),
                Arm("LiDAR+camera", base)]
    if name == "temporal_velocity":
        out = []
        for T in (1, 4):
            c = _variant(cfg, model__temporal__frames=T, model__temporal__method="attention", data__motion=True,
                         data__scene__frames=4)
            out.append(Arm(f"T={T}", c, "ours"))
        return out
    raise KeyError(f"unknown ablation {name!r}; choose from {', '.join(NAMES + CHECKS)}")


def build_data(cfg: RunConfig) -> tuple[list[Sample], list[Sample]]:
    d = cfg.data
    train = generate_dataset(d.train_scenes, d.seed, tuple(d.objects), d.motion, d.scene)
    test = generate_dataset(d.test_scenes, d.test_seed, tuple(d.objects), d.motion, d.scene)
    return [prepare(s, cfg.model) for s in train], [prepare(s, cfg.model) for s in test]


def train_and_eval(cfg: RunConfig, data=None):
    train, test = data if data is not None else build_data(cfg)
    weights = cbgs_resample(train) if cfg.train.cbgs else None
    res = train_toy(cfg.model, cfg.train, train, weights)
    rep = evaluate([predict(res.model, s) for s in test], [s.boxes for s in test], class_names=CLASS_NAMES)
    return res, rep


def run_ablation(name: str, cfg: RunConfig | None = None) -> AblationReport:
    cfg = cfg if cfg is not None else RunConfig()
    report = AblationReport("temporal" if name == "temporal_velocity" else name)
    if name == "temporal":
        report.columns = ("concat mAP@2m", "concat mAVE", "ours mAP@2m", "ours mAVE")
    elif name == "temporal_velocity":
        report.columns = ("ours mAP@2m", "ours mAVE")
    cache: dict = {}
    rows: dict[str, dict[str, float]] = {}
    done: dict[str, dict[str, float]] = {}
    for arm in arms(name, cfg):
        key = repr((arm.cfg.data, arm.cfg.model.image_hw, arm.cfg.model.voxel_size))
        if key not in cache:
            cache[key] = build_data(arm.cfg)
        log.info("ablation %s: arm %s %s", name, arm.label, arm.prefix)
        # with a single frame both temporal variants are the same model
        reuse = name == "temporal" and arm.cfg.model.temporal.frames == 1 and arm.label in done
        metrics = done[arm.label] if reuse else report_metrics(train_and_eval(arm.cfg, cache[key])[1])
        done[arm.label] = metrics
        row = rows.setdefault(arm.label, {})
        if arm.prefix:
            row[f"{arm.prefix} mAP@2m"] = metrics["mAP@2m"]
            row[f"{arm.prefix} mAVE"] = metrics["mAVE"]
            row["mAP@2m"] = row.get("ours mAP@2m", metrics["mAP@2m"])
        else:
            row.update(metrics)
    report.rows = list(rows.items())
    return report
