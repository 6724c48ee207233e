"""Encoder stationarity on the testbed: generative-loss gradient norm after annealed training.

    python3 scripts/residuals.py --seed 0
"""

import argparse

from sosvae.experiments import residual_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    res = residual_run(args.seed)
    for method, value in res.items():
        print(f"{method:8s} {value:.4f}  ({value / res['vae']:.2f}x VAE)")


if __name__ == "__main__":
    main()
