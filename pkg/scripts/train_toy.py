"""Train (or load) the cached toy model on the sinusoidal-Linear prior."""

import argparse
import logging

import numpy as np

from amortized_cate.experiments import ToyConfig, train_toy
from amortized_cate.training import smoothed


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cache", default=".cache")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = ToyConfig()
    _, trace = train_toy(cfg, args.cache, args.workers)
    s = smoothed([r["loss"] for r in trace])
    print(f"toy model {cfg.digest()}: smoothed loss {s[0]:.3f} -> {s[-1]:.3f} over {len(trace)} steps")


if __name__ == "__main__":
    main()
