"""Train and evaluate the toy LiDAR+camera detector, then dump a BEV heatmap.

    python3 scripts/run_toy.py --out runs/toy [--set train.steps=1000]
"""
import argparse
import sys

from bevfuse.cli import main


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--config", default="configs/toy.yaml")
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args(argv)
    sets = [x for s in args.set for x in ("--set", s)]
    main(["train", "--out", args.out, "--config", args.config, *sets])
    main(["heatmap", "--out", f"{args.out}/heatmap", "--config", args.config, "--ckpt", f"{args.out}/model.ckpt", *sets])
    return 0


if __name__ == "__main__":
    sys.exit(run())
