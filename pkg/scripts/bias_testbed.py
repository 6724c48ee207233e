"""Encoder bias on the linear-Gaussian testbed: VAE vs SVAE vs SOS-VAE.

    python3 scripts/bias_testbed.py --seeds 0,1,2,3,4 --out runs/bias.csv
"""

import argparse
import csv
from pathlib import Path

from sosvae.experiments import bias_run

FIELDS = ("seed", "method", "acc", "refit_acc", "posterior_kl", "utility", "seconds")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--out", default="runs/bias.csv")
    args = ap.parse_args()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, FIELDS, lineterminator="\n")
        w.writeheader()
        for seed in (int(s) for s in args.seeds.split(",")):
            res = bias_run(seed)
            for method, row in res.items():
                w.writerow({"seed": seed, "method": method, **row})
                fh.flush()
            kl = res["svae"]["posterior_kl"] / res["sos-vae"]["posterior_kl"]
            ut = res["svae"]["utility"] / res["sos-vae"]["utility"]
            print(f"seed {seed}: KL ratio {kl:.1f}, utility ratio {ut:.1f}, "
                  f"SVAE acc {res['svae']['acc']:.3f} -> refit {res['svae']['refit_acc']:.3f}, "
                  f"SOS-VAE acc {res['sos-vae']['acc']:.3f}", flush=True)


if __name__ == "__main__":
    main()
