"""Command line entry point: ``bevfuse <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import RunConfig, dump_config, load_config, write_manifest

log = logging.getLogger("bevfuse")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config (defaults: toy setup)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set model.mmfe.num_layers=4")
    p.add_argument("--out", default="runs/latest", help="output directory")
    p.add_argument("--seed", type=int, help="shortcut for --set train.seed=N")


def _cfg(args) -> RunConfig:
    sets = list(args.set)
    if args.seed is not None:
        sets.append(f"train.seed={args.seed}")
    return load_config(args.config, sets)


def _load_model(cfg: RunConfig, ckpt: str | None):
    from .model import Detector
    from .numerics import load_into
    model = Detector(cfg.model, seed=cfg.train.seed)
    if ckpt:
        load_into(model, ckpt)
    return model


def _scene_samples(args, cfg):
    from .model import prepare
    from .scene import load_scene
    return [prepare(load_scene(p), cfg.model) for p in args.scene]


# ---------------------------------------------------------------------------


def cmd_gen(args, cfg: RunConfig) -> dict:
    from .scene import generate_dataset, save_scene
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.data
    n = args.n if args.n is not None else (d.train_scenes if args.split == "train" else d.test_scenes)
    seed = d.seed if args.split == "train" else d.test_seed
    scenes = generate_dataset(n, seed, tuple(d.objects), d.motion, d.scene)
    for i, s in enumerate(scenes):
        save_scene(out / f"scene_{i:04d}.bin", s)
    print(f"wrote {len(scenes)} scenes to {out}")
    return {"scenes": len(scenes)}


def cmd_train(args, cfg: RunConfig) -> dict:
    from .ablation import build_data, train_and_eval
    from .training import save_checkpoint
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    res, rep = train_and_eval(cfg, build_data(cfg))
    save_checkpoint(out / "model.ckpt", res.model)
    res.save_curve(out / "loss_curve.txt")
    (out / "eval.txt").write_text(rep.table() + "\n")
    (out / "eval.kv").write_text(rep.to_kv())
    print(rep.table())
    return {"seconds": time.time() - t0, "final_loss": res.losses[-1], "initial_loss": res.losses[0],
            "mAP@2m": rep.map_at[2.0]}


def cmd_eval(args, cfg: RunConfig) -> dict:
    from .evaluation import evaluate
    from .scene import CLASS_NAMES
    from .training import predict
    model = _load_model(cfg, args.ckpt)
    test = _scene_samples(args, cfg) if args.scene else build_data_test(cfg)
    mask = frozenset(args.mask or [])
    rep = evaluate([predict(model, s, mask) for s in test], [s.boxes for s in test], class_names=CLASS_NAMES)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.txt").write_text(rep.table() + "\n")
    (out / "eval.kv").write_text(rep.to_kv())
    print(rep.table())
    return {"mAP@2m": rep.map_at[2.0], "mAP": rep.mean_ap}


def build_data_test(cfg: RunConfig):
    from .model import prepare
    from .scene import generate_dataset
    d = cfg.data
    return [prepare(s, cfg.model) for s in generate_dataset(d.test_scenes, d.test_seed, tuple(d.objects),
                                                            d.motion, d.scene)]


def cmd_forward(args, cfg: RunConfig) -> dict:
    from .head import save_detections
    from .training import predict
    model = _load_model(cfg, args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = _scene_samples(args, cfg) if args.scene else build_data_test(cfg)[:1]
    n = 0
    for i, s in enumerate(samples):
        boxes = predict(model, s, frozenset(args.mask or []), args.min_score)
        save_detections(out / f"detections_{i:04d}.txt", boxes)
        n += len(boxes)
    print(f"wrote {n} detections for {len(samples)} scene(s) to {out}")
    return {"detections": n}


def cmd_gradcheck(args, cfg: RunConfig) -> dict:
    from .gradcheck import STAGES, run_suite
    names = args.stage or list(STAGES)
    reports = run_suite(names, seed=cfg.train.seed)
    ok = True
    for name, r in reports.items():
        good = r.passed(args.tol)
        ok &= good
        print(f"{name:<10} max_rel={r.max_rel_err:.3e} max_abs={r.max_abs_err:.3e} "
              f"checked={r.n_checked}/{r.n_total} skipped={r.n_skipped} worst={r.worst_name} {'PASS' if good else 'FAIL'}")
    if not ok:
        raise SystemExit(1)
    return {name: r.max_rel_err for name, r in reports.items()}


def cmd_ablate(args, cfg: RunConfig) -> dict:
    from .ablation import run_ablation
    rep = run_ablation(args.name, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"ablation_{args.name}.txt").write_text(rep.table() + "\n")
    print(rep.table())
    return {"rows": {label: m for label, m in rep.rows}}


def cmd_heatmap(args, cfg: RunConfig) -> dict:
    from .viz import dump_bev_heatmap
    model = _load_model(cfg, args.ckpt)
    samples = _scene_samples(args, cfg) if args.scene else build_data_test(cfg)[:1]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mask = frozenset(args.mask or [])
    for i, s in enumerate(samples):
        dump_bev_heatmap(model.bev(s, mask), out / f"bev_{i:04d}.pgm", args.reduce)
    print(f"wrote {len(samples)} heatmap(s) to {out}")
    return {"heatmaps": len(samples)}


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "forward": cmd_forward,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate, "heatmap": cmd_heatmap}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bevfuse", description="LiDAR-camera BEV fusion detector (desk scale)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen", help="generate synthetic scenes")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p = sub.add_parser("train", help="train on generated scenes and evaluate")
    _common(p)
    for name in ("eval", "forward", "heatmap"):
        p = sub.add_parser(name, help=f"{name} with a trained checkpoint")
        _common(p)
        p.add_argument("--ckpt", help="checkpoint written by 'train'")
        p.add_argument("--scene", nargs="*", help="scene files (default: generated test split)")
        p.add_argument("--mask", nargs="*", choices=("points", "image", "depth"), help="drop modalities")
        if name == "forward":
            p.add_argument("--min-score", type=float, default=0.0)
        if name == "heatmap":
            p.add_argument("--reduce", choices=("l2", "max"), default="l2")
    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--stage", nargs="*", help="subset of stages")
    p.add_argument("--tol", type=float, default=1e-4)
    p = sub.add_parser("ablate", help="run a named ablation")
    _common(p)
    p.add_argument("name", choices=("temporal", "fusion_method", "lidar_form", "order", "voxel_size",
                                    "image_size", "cbgs", "sparse_fusion", "temporal_velocity"))
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    cfg = _cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    result = COMMANDS[args.command](args, cfg)
    write_manifest(out, args.command, cfg, cfg.train.seed, {"result": json.loads(json.dumps(result, default=float))})
    return 0


if __name__ == "__main__":
    sys.exit(main())
