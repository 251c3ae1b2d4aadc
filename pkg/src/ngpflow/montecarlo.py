"""Brute-force sampling of finite-width networks from the Gaussian prior.

Given the activations of layer l, the preactivations of layer l + 1 are
exactly Gaussian, independent across neurons, with covariance

    C_b + (C_W / n_l) sum_j sigma_j(x_a) sigma_j(x_b)

over the D inputs. Sampling that covariance directly ("gram" method) is
distributionally identical to drawing all weights and biases ("weights"
method) but costs O(n D) per layer instead of O(n^2 D); both are provided.

Random streams are attached to fixed-size blocks of samples, each seeded
from (seed, block index), so output is bit-identical whatever the number
of worker threads.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import Dataset, NetworkConfig

BLOCK = 4096
MAGIC = b"NGPSAMP0"
MIN_SAMPLES = 100


def thread_count() -> int:
    env = os.environ.get("NGPFLOW_THREADS")
    n = os.cpu_count() or 1
    if env:
        n = max(1, min(n, int(env)))
    return n


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(block)])))


def _batched_sqrt(G: np.ndarray) -> np.ndarray:
    """Factors F with F F^T = G for a stack of PSD matrices."""
    if G.shape[-1] == 1:
        return np.sqrt(np.clip(G, 0.0, None))
    try:
        return np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(G)
        return v * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


def _gram_block(x: np.ndarray, config: NetworkConfig, rng: np.random.Generator, B: int) -> np.ndarray:
    act = config.activation
    n0 = config.widths[0]
    D = x.shape[0]
    K1 = config.bias_vars[0] + config.weight_vars[0] * (x @ x.T) / n0
    F = _batched_sqrt(K1[None])[0]
    z = rng.standard_normal((B, config.widths[1], D)) @ F.T
    for l in range(1, config.depth):
        s = act(z)
        G = config.bias_vars[l] + config.weight_vars[l] / config.widths[l] * np.einsum("bja,bjc->bac", s, s)
        F = _batched_sqrt(G)
        g = rng.standard_normal((B, config.widths[l + 1], D))
        z = np.einsum("bad,bid->bia", F, g)
    return z  # (B, n_L, D)


def _weights_block(x: np.ndarray, config: NetworkConfig, rng: np.random.Generator, B: int) -> np.ndarray:
    act = config.activation
    h = np.broadcast_to(x.T, (B,) + x.T.shape)  # (B, n0, D)
    for l in range(config.depth):
        n_in, n_out = config.widths[l], config.widths[l + 1]
        W = rng.standard_normal((B, n_out, n_in)) * np.sqrt(config.weight_vars[l] / n_in)
        b = rng.standard_normal((B, n_out, 1)) * np.sqrt(config.bias_vars[l])
        z = W @ h + b
        h = act(z)
    return z  # (B, n_L, D)


def sample_outputs(dataset: Dataset, config: NetworkConfig, n_samples: int, seed: int,
                   method: str = "gram", threads: int | None = None) -> np.ndarray:
    """Matrix (n_samples, D * n_L) of last-layer preactivations.

    Column a * n_L + i holds channel i at input a.
    """
    x = dataset.inputs
    if x.shape[1] != config.widths[0]:
        raise ValueError("input dimension does not match n0")
    block_fn = {"gram": _gram_block, "weights": _weights_block}[method]
    D, nL = x.shape[0], config.n_out
    nblocks = -(-int(n_samples) // BLOCK)
    out = np.empty((int(n_samples), D * nL))

    def work(k):
        B = min(BLOCK, n_samples - k * BLOCK)
        z = block_fn(x, config, _block_rng(seed, k), BLOCK)[:B]
        out[k * BLOCK:k * BLOCK + B] = z.transpose(0, 2, 1).reshape(B, D * nL)

    n_threads = threads or thread_count()
    if n_threads == 1 or nblocks == 1:
        for k in range(nblocks):
            work(k)
    else:
        with ThreadPoolExecutor(n_threads) as pool:
            list(pool.map(work, range(nblocks)))
    return out


def sample_gaussian(kernel, n_out: int, n_samples: int, seed: int) -> np.ndarray:
    """Exact draws from the infinite-width limit, same column layout."""
    K = np.atleast_2d(np.asarray(kernel, dtype=np.float64))
    D = K.shape[0]
    F = _batched_sqrt(K[None])[0]
    out = np.empty((n_samples, D * n_out))
    for k in range(-(-n_samples // BLOCK)):
        B = min(BLOCK, n_samples - k * BLOCK)
        g = _block_rng(seed, k).standard_normal((BLOCK, n_out, D))[:B]
        out[k * BLOCK:k * BLOCK + B] = (g @ F.T).transpose(0, 2, 1).reshape(B, D * n_out)
    return out


# ---------------------------------------------------------------------------
# estimators


@dataclass(frozen=True)
class McEstimate:
    value: float
    std_error: float
    n_samples: int
    estimator: str

    def __post_init__(self):
        if self.std_error < 0 or self.n_samples < 2:
            raise ValueError("invalid estimate")

    def agrees(self, target: float, nsigma: float = 3.0) -> bool:
        return abs(self.value - target) <= nsigma * self.std_error


def _check(samples):
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {s.shape[0] if s.ndim == 2 else 0}")
    return s


def estimate_moment2(samples, cols) -> McEstimate:
    s = _check(samples)
    a, b = cols
    prod = s[:, a] * s[:, b]
    N = prod.size
    return McEstimate(float(prod.mean()), float(prod.std(ddof=1) / np.sqrt(N)), N, "moment2")


def estimate_connected4(samples, cols) -> McEstimate:
    """E[z1 z2 z3 z4] - E[z1 z2]E[z3 z4] - E[z1 z3]E[z2 z4] - E[z1 z4]E[z2 z3]
    from raw (zero-mean) moments, delete-one jackknife standard error."""
    s = _check(samples)
    c1, c2, c3, c4 = cols
    z = [s[:, c] for c in cols]
    N = s.shape[0]
    terms = {
        "m4": z[0] * z[1] * z[2] * z[3],
        "12": z[0] * z[1], "34": z[2] * z[3],
        "13": z[0] * z[2], "24": z[1] * z[3],
        "14": z[0] * z[3], "23": z[1] * z[2],
    }
    full = {k: v.mean() for k, v in terms.items()}
    loo = {k: (N * full[k] - v) / (N - 1) for k, v in terms.items()}

    def stat(m):
        return m["m4"] - m["12"] * m["34"] - m["13"] * m["24"] - m["14"] * m["23"]

    value = stat(full)
    th = stat(loo)
    se = np.sqrt((N - 1) / N * np.sum((th - th.mean()) ** 2))
    tag = "cumulant4" if len(set(cols)) == 1 else "connected4"
    return McEstimate(float(value), float(se), N, tag)


def estimate_cumulant4(samples, col: int) -> McEstimate:
    return estimate_connected4(samples, (col,) * 4)


@dataclass(frozen=True, eq=False)
class Histogram:
    edges: np.ndarray
    density: np.ndarray
    std_error: np.ndarray
    n_in_window: int
    n_samples: int

    @property
    def centers(self) -> np.ndarray:
        return (self.edges[:-1] + self.edges[1:]) / 2

    def rows(self):
        return list(zip(self.centers.tolist(), self.density.tolist(), self.std_error.tolist()))


def histogram(samples, channel: int, bins: int = 101, half_width_sd: float = 5.0,
              edges=None) -> Histogram:
    """Density histogram normalized over its window (integrates to 1)."""
    if bins < 10:
        raise ValueError("need at least 10 bins")
    s = np.asarray(samples, dtype=np.float64)
    z = s[:, channel] if s.ndim == 2 else s
    if edges is None:
        half = half_width_sd * z.std()
        edges = np.linspace(-half, half, bins + 1)
    edges = np.asarray(edges, dtype=np.float64)
    counts, _ = np.histogram(z, edges)
    n_in = int(counts.sum())
    w = np.diff(edges)
    dens = counts / n_in / w
    se = np.sqrt(counts * (1.0 - counts / n_in)) / n_in / w
    return Histogram(edges, dens, se, n_in, z.size)


# ---------------------------------------------------------------------------
# raw dump


def write_samples(path, samples) -> None:
    s = np.asarray(samples, dtype="<f8")
    rows, cols = s.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", rows, cols))
        fh.write(np.asfortranarray(s).tobytes(order="F"))


def read_samples(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:8] != MAGIC:
            raise ValueError("not a sample dump (bad magic at offset 0)")
        rows, cols = struct.unpack("<II", head[8:])
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != rows * cols:
        raise ValueError(f"truncated sample dump: expected {rows * cols} values after offset 16")
    return data.reshape((rows, cols), order="F").astype(np.float64)
