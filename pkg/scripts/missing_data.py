"""Masked spectral surrogate: per-experiment encoders with and without the second-order step.

    python3 scripts/missing_data.py --seeds 0,1,2,3,4 --out runs/missing.csv
"""

import argparse
import csv
from pathlib import Path

from sosvae.experiments import missing_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--out", default="runs/missing.csv")
    args = ap.parse_args()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, ("seed", "sos_dvae_acc", "sdvae_acc"), lineterminator="\n")
        w.writeheader()
        for seed in (int(s) for s in args.seeds.split(",")):
            res = missing_run(seed)
            w.writerow({"seed": seed, "sos_dvae_acc": res["sos-dvae"], "sdvae_acc": res["sdvae"]})
            fh.flush()
            print(f"seed {seed}: SOS-DVAE {res['sos-dvae']:.3f}  SDVAE {res['sdvae']:.3f}", flush=True)


if __name__ == "__main__":
    main()
