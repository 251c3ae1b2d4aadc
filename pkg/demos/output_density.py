"""Output density of a narrow ReLU network at one input.

Compares the corrected densities (exponentiated and linearized) with a
histogram of sampled networks, then repeats at infinite width, where the
Gaussian is exact.

    python demos/output_density.py [--samples 200000]
"""

import argparse

import numpy as np

from ngpflow.experiments import bundled_mnist_dir, density_panel
from ngpflow.mnist import read_images

parser = argparse.ArgumentParser()
parser.add_argument("--samples", type=int, default=200_000)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

x = read_images(bundled_mnist_dir() / "train-images-idx3-ubyte.gz")[:1].reshape(1, -1).astype(np.float64)
net = {"shape": "deep", "bias_var": 0.0, "weight_var": 2.0, "activation": "relu"}

for width in (30, 100, None):
    panel = density_panel(x, net, width, args.samples, args.seed)
    label = "inf" if width is None else str(width)
    hist = panel.histogram
    sd = np.sqrt(panel.kernel)
    print(f"\nwidth {label}: K = {panel.kernel:.4g}, eps = {panel.potential.epsilon:.4f}, "
          f"{hist.n_samples} samples")
    print(f"  bins within 3 se:  exp {panel.fraction['exp']:.3f}   lin {panel.fraction['lin']:.3f}")
    # a few bins across the bulk and the shoulders
    print("     y/sd    sampled     exp theory   lin theory")
    for b in np.linspace(10, hist.density.size - 11, 9).astype(int):
        print(f"  {hist.centers[b] / sd:7.2f}  {hist.density[b] * sd:8.5f} +- {hist.std_error[b] * sd:.5f}"
              f"  {panel.theory['exp'][b] * sd:8.5f}  {panel.theory['lin'][b] * sd:8.5f}")

print("\ndensities are shown on the standardized scale y / sqrt(K).")
