"""Walk a handful of MNIST digits through a deep ReLU network.

Shows what the layer flow produces (kernel, self-energy, vertex), how the
expansion parameter shrinks with width, and that the Wick and quadrature
backends agree on a polynomial network.

    python demos/flow_walkthrough.py
"""

import numpy as np

from ngpflow import Activation, Dataset, NetworkConfig, run_flow
from ngpflow.experiments import bundled_mnist_dir
from ngpflow.mnist import read_images

images = read_images(bundled_mnist_dir() / "train-images-idx3-ubyte.gz")
x = images[:3].reshape(3, -1).astype(np.float64) / 255.0
data = Dataset(x)

print("three digits, 784 pixels each, scaled to [0, 1]\n")

# a three-layer ReLU stack at critical weight variance
for n in (50, 200, 800):
    cfg = NetworkConfig((784, n, 2 * n, 1), 0.0, 2.0, Activation.relu())
    trace = run_flow(data, cfg)
    last = trace.last
    print(f"width {n:4d}  eps = {cfg.epsilon:.5f}")
    print("  output kernel diag  ", np.round(np.diag(last.kernel), 5))
    print("  self-energy diag    ", np.round(np.diag(last.self_energy), 5))
    print("  vertex (1,1;1,1)    ", round(float(last.vertex[0, 0]), 5))
    # eps * V is the size of the leading non-Gaussian term relative to K^2
    print("  eps V / K^2         ", round(float(cfg.epsilon * last.vertex[0, 0] / last.kernel[0, 0] ** 2), 6))
print()

# the kernel does not depend on width; only eps does
print("kernel, self-energy and vertex are width-independent once eps is factored out,")
print("so wider networks are closer to the Gaussian process by exactly 1/n.\n")

# two ways of evaluating the Gaussian expectations
quad = NetworkConfig((784, 20, 30, 25, 1), 0.1, 0.8, Activation.polynomial([0.0, 1.0, 0.3]))
a = run_flow(data, quad, "wick").last
b = run_flow(data, quad, "quad").last
for name in ("kernel", "self_energy", "vertex"):
    u, v = getattr(a, name), getattr(b, name)
    print(f"wick vs quad {name:12s} max rel diff {np.abs(u - v).max() / np.abs(v).max():.1e}")
