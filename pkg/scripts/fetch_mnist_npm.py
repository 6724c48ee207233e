"""Build IDX files from the 10,000 MNIST digits bundled in the npm package ``mnist``.

The canonical IDX files are not reachable from every machine, but the npm
registry is. The package stores each class as JSON (flat 784-vectors in
[0, 1], three decimals). We round back to uint8 and write a gzipped IDX pair
``digits-{images-idx3,labels-idx1}-ubyte.gz`` that ``sosvae`` reads like the
canonical files.

    python3 scripts/fetch_mnist_npm.py --out data/mnist
    python3 scripts/fetch_mnist_npm.py --source /path/to/package/src/digits --out data/mnist
"""

import argparse
import json
import subprocess
import tarfile
import tempfile
from pathlib import Path

import numpy as np

from sosvae.data import write_idx

PACKAGE = "mnist@1.1.0"


def npm_digits(workdir: Path) -> Path:
    subprocess.run(["npm", "pack", PACKAGE, "--silent"], cwd=workdir, check=True, capture_output=True)
    tgz = next(workdir.glob("mnist-*.tgz"))
    with tarfile.open(tgz) as tf:
        tf.extractall(workdir, filter="data")
    return workdir / "package" / "src" / "digits"


def convert(source: Path, out: Path) -> int:
    images, labels = [], []
    for digit in range(10):
        rows = json.loads((source / f"{digit}.json").read_text())["data"]
        arr = np.asarray(rows, dtype=np.float64).reshape(-1, 28, 28)
        images.append(np.rint(arr * 255.0).clip(0, 255).astype(np.uint8))
        labels.append(np.full(len(arr), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    # interleave classes with a fixed permutation so file order is not sorted by label
    perm = np.random.default_rng(20230601).permutation(len(labels))
    out.mkdir(parents=True, exist_ok=True)
    write_idx(images[perm], labels[perm], out / "digits-images-idx3-ubyte.gz", out / "digits-labels-idx1-ubyte.gz")
    return len(labels)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--source", help="directory holding 0.json .. 9.json (skips npm)")
    args = ap.parse_args()
    if args.source:
        n = convert(Path(args.source), Path(args.out))
    else:
        with tempfile.TemporaryDirectory() as tmp:
            n = convert(npm_digits(Path(tmp)), Path(args.out))
    print(f"wrote {n} digits to {args.out}")


if __name__ == "__main__":
    main()
