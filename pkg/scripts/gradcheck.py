"""Finite-difference gradient suite over every learned stage."""
import sys

from bevfuse.cli import main

if __name__ == "__main__":
    sys.exit(main(["gradcheck", "--out", "runs/gradcheck", *sys.argv[1:]]))
