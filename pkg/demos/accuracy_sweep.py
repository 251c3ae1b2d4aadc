"""Test accuracy against eps for a two-layer quadratic network.

Each row is an average over training subsamples; the spread between
subsamples sets the noise floor for comparing eps values.

    python demos/accuracy_sweep.py [--seeds 5] [--test 500] [--train 100]
"""

import argparse

import numpy as np

from ngpflow import Activation
from ngpflow.experiments import accuracy_curve, bundled_mnist_dir
from ngpflow.mnist import read_images, read_labels

parser = argparse.ArgumentParser()
parser.add_argument("--seeds", type=int, default=5)
parser.add_argument("--test", type=int, default=500)
parser.add_argument("--train", type=int, default=100)
args = parser.parse_args()

base = bundled_mnist_dir()
train_x = read_images(base / "train-images-idx3-ubyte.gz").reshape(-1, 784).astype(np.float64)
train_y = read_labels(base / "train-labels-idx1-ubyte.gz").astype(np.int64)
test_x = read_images(base / "test-images-idx3-ubyte.gz").reshape(-1, 784).astype(np.float64)[:args.test]
test_y = read_labels(base / "test-labels-idx1-ubyte.gz").astype(np.int64)[:args.test]

eps = [0.0, 0.001, 0.002, 0.005, 0.01]
curve = accuracy_curve(train_x, train_y, test_x, test_y, Activation.quadratic(), 0.0, 1 / 3,
                       args.train, eps, list(range(args.seeds)))

print(f"{args.train} training points, {args.test} test points, {args.seeds} subsamples\n")
print("   eps    mean acc   stderr")
for e, m, s in zip(curve.epsilons, curve.mean, curve.stderr):
    print(f"  {e:5.3f}   {m:.4f}    {s:.4f}")

diff = curve.accuracy[:, -1] - curve.accuracy[:, 0]
if diff.size > 1:
    se = diff.std(ddof=1) / np.sqrt(diff.size)
    print(f"\npaired change at eps = {eps[-1]}: {diff.mean():+.4f} +- {se:.4f}")
