"""Build the bundled MNIST subset (IDX, gzip) from the 5000-image CSV sample
shipped inside the mlxtend wheel (mlxtend/data/data/mnist_5k.csv.gz).

Each CSV row is 784 pixel values followed by the label. The split is
stratified: 400 training and 100 test images per digit.

    python3 scripts/make_mnist_subset.py path/to/mnist_5k.csv.gz data/mnist5k
"""

import argparse
import gzip
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from ngpflow.mnist import write_idx  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("csv")
    ap.add_argument("out")
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    with gzip.open(args.csv, "rt") as fh:
        data = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    x, y = data[:, :784].astype(np.uint8), data[:, 784].astype(np.uint8)
    rng = np.random.default_rng(args.seed)
    train, test = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(y == c))
        test.extend(idx[:args.test_per_class])
        train.extend(idx[args.test_per_class:])
    train, test = np.sort(train), np.sort(test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, sel in (("train", train), ("test", test)):
        write_idx(out / f"{name}-images-idx3-ubyte.gz", x[sel].reshape(-1, 28, 28))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", y[sel])
        print(name, len(sel))


if __name__ == "__main__":
    main()
