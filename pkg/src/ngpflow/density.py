"""Weakly non-Gaussian output distribution at the last layer.

p[z] is proportional to exp(-H0[z] - eps H1[z]), with

    H0 = 1/2 sum K^{ab} (z_a . z_b)
    H1 = -1/2 sum J^{ab} (z_a . z_b) - 1/8 sum V^{(ab)(cd)} (z_a . z_b)(z_c . z_d)

where upper indices are raised with the inverse last-layer kernel and the
dot runs over output channels. For one input and one channel the density is
evaluated on a grid, either exponentiated or linearized in eps.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import simpson

from .core import expand_vertex, raise_indices
from .flow import FlowTrace

NORMALIZATION_TOL = 1e-6
DEFAULT_POINTS = 2001
DEFAULT_HALF_WIDTH_SD = 6.0


class DensityError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class OutputPotential:
    kernel: np.ndarray
    raised_S: np.ndarray
    raised_V: np.ndarray  # pair-encoded
    j_tilde: np.ndarray
    epsilon: float
    n_out: int
    kernel_inverse: np.ndarray

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    @property
    def size(self) -> int:
        return self.kernel.shape[0]

    def with_epsilon(self, epsilon: float) -> "OutputPotential":
        """Same couplings at another expansion parameter (0 gives the Gaussian limit)."""
        return replace(self, epsilon=float(epsilon))

    def h0(self, z: np.ndarray) -> np.ndarray:
        """z has shape (..., n_out, D)."""
        g = np.einsum("...ia,...ib->...ab", z, z)
        return 0.5 * np.einsum("ab,...ab->...", self.kernel_inverse, g)

    def h1(self, z: np.ndarray) -> np.ndarray:
        g = np.einsum("...ia,...ib->...ab", z, z)
        V4 = expand_vertex(self.raised_V, self.size)
        return (-0.5 * np.einsum("ab,...ab->...", self.j_tilde, g)
                - 0.125 * np.einsum("abcd,...ab,...cd->...", V4, g, g))

    def scalar_couplings(self) -> tuple[float, float, float]:
        """(K, J, V^) for a single input and channel."""
        if self.size != 1 or self.n_out != 1:
            raise DensityError("scalar density needs one input and one output channel")
        return float(self.kernel[0, 0]), float(self.j_tilde[0, 0]), float(self.raised_V[0, 0])

    def safe_half_width(self) -> float:
        """Largest |y| up to which exp(-H) is decreasing in |y|."""
        K, J, Vr = self.scalar_couplings()
        a = 1.0 / K - self.epsilon * J
        b = self.epsilon * Vr
        if a <= 0:
            raise DensityError("quadratic part of the potential is not confining")
        if b <= 0:
            return np.inf
        return float(np.sqrt(2.0 * a / b))


def j_tilde(kernel, raised_S, raised_V, n_out: int) -> np.ndarray:
    K = np.asarray(kernel)
    V4 = expand_vertex(raised_V, K.shape[0])
    J = (raised_S - np.einsum("cd,acbd->ab", K, V4)
         - 0.5 * n_out * np.einsum("cd,abcd->ab", K, V4))
    return (J + J.T) / 2.0


def build_potential(trace: FlowTrace, jitter: float = 0.0) -> OutputPotential:
    state = trace.last
    raised = raise_indices(state, jitter)
    n_out = trace.config.n_out
    J = j_tilde(state.kernel, raised.self_energy, raised.vertex, n_out)
    return OutputPotential(state.kernel, raised.self_energy, raised.vertex, J,
                           trace.epsilon, n_out, raised.kernel_inverse)


def default_grid(potential: OutputPotential, points: int = DEFAULT_POINTS,
                 half_width_sd: float = DEFAULT_HALF_WIDTH_SD, mode: str = "exp") -> np.ndarray:
    K = potential.scalar_couplings()[0]
    half = half_width_sd * np.sqrt(K)
    if mode == "exp" and potential.epsilon > 0:
        half = min(half, potential.safe_half_width())
    y = np.linspace(-half, half, points)
    return (y - y[::-1]) / 2.0  # exactly mirror-symmetric


def _unnormalized(potential: OutputPotential, y: np.ndarray, mode: str) -> np.ndarray:
    K, J, Vr = potential.scalar_couplings()
    eps = potential.epsilon
    y2 = y * y
    h0 = y2 / (2.0 * K)
    h1 = -0.5 * J * y2 - 0.125 * Vr * y2 * y2
    if mode == "exp":
        return np.exp(-h0 - eps * h1)
    if mode == "lin":
        p = np.exp(-h0) * (1.0 - eps * h1)
        if np.any(p < 0):
            raise DensityError("linearized density turns negative on the grid")
        return p
    raise ValueError(f"unknown mode {mode!r}; expected 'exp' or 'lin'")


def marginal_density(potential: OutputPotential, grid=None, mode: str = "exp"):
    """(y, p) on ``grid``, normalized by the trapezoid rule."""
    y = default_grid(potential, mode=mode) if grid is None else np.asarray(grid, dtype=np.float64)
    if y.ndim != 1 or y.size < 3 or np.any(np.diff(y) <= 0):
        raise DensityError("grid must be strictly increasing with at least 3 points")
    if mode == "exp" and potential.epsilon > 0:
        safe = potential.safe_half_width()
        if np.max(np.abs(y)) > safe * (1 + 1e-12):
            raise DensityError(f"grid extends past the safe truncation |y| <= {safe:.6g}")
    u = _unnormalized(potential, y, mode)
    z_trap = np.trapezoid(u, y)
    z_simp = simpson(u, x=y)
    if not np.isfinite(z_trap) or z_trap <= 0:
        raise DensityError("density is not normalizable on this grid")
    if abs(z_trap - z_simp) > NORMALIZATION_TOL * z_trap:
        raise DensityError("grid too coarse: trapezoid and Simpson normalizations disagree")
    return y, u / z_trap


def bin_densities(potential: OutputPotential, edges, mode: str = "exp", sub: int = 64) -> np.ndarray:
    """Average density per bin, conditioned on the window spanned by ``edges``.

    Bins past the exponentiated truncation get zero mass.
    """
    edges = np.asarray(edges, dtype=np.float64)
    lo, hi = edges[:-1], edges[1:]
    if mode == "exp" and potential.epsilon > 0:
        safe = potential.safe_half_width()
        lo, hi = np.clip(lo, -safe, safe), np.clip(hi, -safe, safe)
    x, w = np.polynomial.legendre.leggauss(sub)
    mass = np.zeros(lo.size)
    for k, (a, b) in enumerate(zip(lo, hi)):
        if b > a:
            pts = (a + b) / 2 + (b - a) / 2 * x
            mass[k] = (b - a) / 2 * w @ _unnormalized(potential, pts, mode)
    total = mass.sum()
    return mass / total / np.diff(edges)


def density_moments(y: np.ndarray, p: np.ndarray) -> dict:
    """Mean, second moment and fourth cumulant of a gridded density."""
    m1 = np.trapezoid(y * p, y)
    m2 = np.trapezoid(y ** 2 * p, y)
    c = y - m1
    v = np.trapezoid(c ** 2 * p, y)
    k4 = np.trapezoid(c ** 4 * p, y) - 3.0 * v ** 2
    return {"norm": float(np.trapezoid(p, y)), "mean": float(m1), "second": float(m2),
            "variance": float(v), "cumulant4": float(k4)}
