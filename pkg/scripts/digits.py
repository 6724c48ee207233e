"""Scaled digit classification: SVAE, SVAE-refit, SOS-VAE and SOS-DVAE test accuracy.

Needs the IDX files under data/mnist (see fetch_mnist_npm.py).

    python3 scripts/digits.py --seed 0
"""

import argparse
import json

from sosvae.experiments import DigitsSetup, digits_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--root", default=".", help="directory holding data/mnist")
    ap.add_argument("--methods", default="svae,svae-refit,sos-vae,sos-dvae")
    args = ap.parse_args()
    res = digits_run(args.seed, DigitsSetup(root=args.root), methods=tuple(args.methods.split(",")))
    print(json.dumps(res, indent=2))


if __name__ == "__main__":
    main()
