"""Run every ablation (or a chosen few) and collect the tables in one file.

Each arm trains from scratch, so the full set takes hours on one core.
Lower ``train.steps`` / ``data.train_scenes`` with --set for a quick look.
"""
import argparse
import sys
from pathlib import Path

from bevfuse.ablation import NAMES
from bevfuse.cli import main


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", nargs="*", default=list(NAMES))
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--config", default="configs/toy.yaml")
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args(argv)
    sets = [x for s in args.set for x in ("--set", s)]
    out = Path(args.out)
    tables = []
    for name in args.names:
        main(["ablate", name, "--out", str(out / name), "--config", args.config, *sets])
        tables.append((out / name / f"ablation_{name}.txt").read_text())
    (out / "all_tables.txt").write_text("\n".join(tables))
    return 0


if __name__ == "__main__":
    sys.exit(run())
