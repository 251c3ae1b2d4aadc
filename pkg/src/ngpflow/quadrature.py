"""Numerical Gaussian expectations <f(z)> with z ~ N(0, K), dim(z) <= 4.

Smooth integrands use a tensor Gauss-Hermite rule on whitened variables
z = L u. Integrands with a kink at z_k = 0 (ReLU) lose the spectral
convergence of Gauss-Hermite, so for them the domain is cut along the kink
hyperplanes:

* 1 variable: two half-lines, each with a Gauss rule for exp(-t^2/2) on [0, inf).
* 2 variables: polar coordinates; Gauss-Legendre in the angle on every arc
  between kink directions, a Gauss rule for r exp(-r^2/2) in the radius.
* 3-4 variables: iterated integration over the triangular variables
  u_1, u_2, ...; at each level the line is cut where a component whose last
  dependence is on that level changes sign.

Rank-deficient kernels are handled by integrating over the column space of
a rank-revealing Cholesky factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import mpmath
import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss
from scipy.linalg import eigh_tridiagonal

DEFAULT_ORDER_LOW = 40   # d <= 2
DEFAULT_ORDER_HIGH = 20  # d = 3, 4
DEFAULT_ORDER_KINKED_HIGH = 12  # iterated kink-aware rule, d = 3, 4
PSD_TOL = 1e-10
_TAIL_CLIP = 9.0
_SQRT2PI = math.sqrt(2.0 * math.pi)


class NotPSDError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Gauss-Hermite rule for the standard normal weight (weights sum to 1)."""

    order: int
    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def gauss_hermite(cls, order: int) -> "QuadratureRule":
        x, w = _hermite(order)
        return cls(order, x, w)


@lru_cache(maxsize=None)
def _hermite(order: int):
    x, w = hermegauss(order)
    w = w / w.sum()
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


@lru_cache(maxsize=None)
def _half_line_rule(order: int, power: int):
    """Gauss rule for the weight t^power exp(-t^2/2) on [0, inf).

    Recurrence coefficients come from exact moments through the modified
    Chebyshev algorithm in extended precision; nodes from the Jacobi matrix,
    weights from the Christoffel function in double precision.
    """
    n = 2 * order
    with mpmath.workdps(40 + 3 * order):
        mom = [mpmath.power(2, mpmath.mpf(k + power - 1) / 2) * mpmath.gamma(mpmath.mpf(k + power + 1) / 2)
               for k in range(n)]
        a = [mpmath.mpf(0)] * order
        b = [mpmath.mpf(0)] * order
        prev = [mpmath.mpf(0)] * n
        cur = list(mom)
        a[0] = mom[1] / mom[0]
        b[0] = mom[0]
        for k in range(1, order):
            new = [mpmath.mpf(0)] * n
            for l in range(k, n - k):
                new[l] = cur[l + 1] - a[k - 1] * cur[l] - b[k - 1] * prev[l]
            a[k] = new[k + 1] / new[k] - cur[k] / cur[k - 1]
            b[k] = new[k] / cur[k - 1]
            prev, cur = cur, new
        A = np.array([float(v) for v in a])
        B = np.array([float(v) for v in b])
    x = eigh_tridiagonal(A, np.sqrt(B[1:]), eigvals_only=True)
    p_prev = np.zeros_like(x)
    p = np.full_like(x, 1.0 / math.sqrt(B[0]))
    s = p * p
    for k in range(order - 1):
        p_next = ((x - A[k]) * p - (math.sqrt(B[k]) if k else 0.0) * p_prev) / math.sqrt(B[k + 1])
        p_prev, p = p, p_next
        s += p * p
    w = 1.0 / s
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


def default_order(d: int, kinked: bool = False) -> int:
    if d <= 2:
        return DEFAULT_ORDER_LOW
    return DEFAULT_ORDER_KINKED_HIGH if kinked else DEFAULT_ORDER_HIGH


# ---------------------------------------------------------------------------
# factorization


def psd_factor(K) -> np.ndarray:
    """Rank-revealing lower factor L (d x r) with K = L L^T.

    Tiny negative eigenvalues from upstream roundoff are clipped to zero;
    anything below -PSD_TOL (relative to the largest eigenvalue) is an error.
    """
    K = np.atleast_2d(np.asarray(K, dtype=np.float64))
    K = (K + K.T) / 2.0
    d = K.shape[0]
    ev, vec = np.linalg.eigh(K)
    scale = max(abs(ev[-1]), 1.0)
    if ev[0] < -PSD_TOL * scale:
        raise NotPSDError(f"kernel block has eigenvalue {ev[0]:.3e} < -{PSD_TOL:g}")
    if ev[0] < 0:
        K = (vec * np.clip(ev, 0.0, None)) @ vec.T
    tol = 1e-13 * max(float(np.max(np.diag(K))), 1e-300)
    L = np.zeros((d, d))
    cols = []
    for k in range(d):
        r = K[k, k] - L[k, :k] @ L[k, :k]
        if r <= tol:
            continue
        piv = math.sqrt(r)
        L[k, k] = piv
        L[k + 1:, k] = (K[k + 1:, k] - L[k + 1:, :k] @ L[k, :k]) / piv
        cols.append(k)
    return L[:, cols]


# ---------------------------------------------------------------------------
# node sets in whitened coordinates


def _tensor_nodes(r: int, order: int):
    x, w = _hermite(order)
    grids = np.meshgrid(*([x] * r), indexing="ij")
    U = np.stack([g.ravel() for g in grids], axis=1)
    W = np.ones(1)
    for _ in range(r):
        W = np.multiply.outer(W, w).ravel()
    return U, W


def _half_nodes(order: int):
    t, w = _half_line_rule(order, 0)
    return t, w / _SQRT2PI


def _nodes_1d_kinked(order: int):
    t, w = _half_nodes(order)
    return np.concatenate([-t[::-1], t])[:, None], np.concatenate([w[::-1], w])


def _nodes_2d_kinked(L: np.ndarray, order: int):
    # kink directions: angles where L_k . (cos th, sin th) = 0
    angles = [0.0]
    for row in L:
        if np.hypot(row[0], row[1]) == 0:
            continue
        th = math.atan2(-row[0], row[1])
        angles += [th % (2 * math.pi), (th + math.pi) % (2 * math.pi)]
    angles = np.unique(np.round(np.array(angles), 15))
    edges = np.append(angles, angles[0] + 2 * math.pi)
    gx, gw = leggauss(order)
    rt, rw = _half_line_rule(order, 1)
    th_list, thw_list = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        if b - a <= 1e-15:
            continue
        th_list.append((a + b) / 2 + (b - a) / 2 * gx)
        thw_list.append((b - a) / 2 * gw)
    th = np.concatenate(th_list)
    thw = np.concatenate(thw_list) / (2 * math.pi)
    R, T = np.meshgrid(rt, th, indexing="ij")
    U = np.stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel()], axis=1)
    W = np.multiply.outer(rw, thw).ravel()
    return U, W


def _nodes_nested_kinked(L: np.ndarray, order: int):
    d, r = L.shape
    # level of each component: its last nonzero column
    level = np.array([max((j for j in range(r) if L[k, j] != 0.0), default=-1) for k in range(d)])
    ht, hw = _half_nodes(order)
    gx, gw = leggauss(order)
    U = np.zeros((1, 0))
    W = np.ones(1)
    for j in range(r):
        rows = [k for k in range(d) if level[k] == j]
        cuts = [np.zeros(U.shape[0])]
        for k in rows:
            s = U @ L[k, :j]
            cuts.append(-s / L[k, j])
        cuts = np.clip(np.sort(np.stack(cuts, axis=1), axis=1), -_TAIL_CLIP, _TAIL_CLIP)
        lo, hi = cuts[:, 0], cuts[:, -1]
        pieces = []
        # tails beyond the outermost cuts; each outer cut lies on the far side of 0
        u = hi[:, None] + ht[None, :]
        pieces.append((u, hw[None, :] * np.exp(-hi[:, None] * ht[None, :] - hi[:, None] ** 2 / 2)))
        u = lo[:, None] - ht[None, :]
        pieces.append((u, hw[None, :] * np.exp(lo[:, None] * ht[None, :] - lo[:, None] ** 2 / 2)))
        for c in range(cuts.shape[1] - 1):
            a, b = cuts[:, c], cuts[:, c + 1]
            u = (a + b)[:, None] / 2 + (b - a)[:, None] / 2 * gx[None, :]
            w = (b - a)[:, None] / 2 * gw[None, :] * np.exp(-u ** 2 / 2) / _SQRT2PI
            pieces.append((u, w))
        newU, newW = [], []
        for u, w in pieces:
            newU.append(np.concatenate([np.repeat(U, order, axis=0), u.reshape(-1, 1)], axis=1))
            newW.append((W[:, None] * w).ravel())
        U = np.concatenate(newU)
        W = np.concatenate(newW)
        keep = W > 0
        U, W = U[keep], W[keep]
    return U, W


def gaussian_nodes(K, order: int | None = None, kinked: bool = False):
    """Nodes Z (n x d) and weights w with sum_i w_i f(Z_i) ~ <f(z)>_K."""
    K = np.atleast_2d(np.asarray(K, dtype=np.float64))
    d = K.shape[0]
    if d > 4:
        raise ValueError("expectations are limited to four Gaussian components")
    L = psd_factor(K)
    r = L.shape[1]
    if order is None:
        order = default_order(r, kinked)
    if r == 0:
        return np.zeros((1, d)), np.ones(1)
    if not kinked:
        U, W = _tensor_nodes(r, order)
    elif r == 1:
        U, W = _nodes_1d_kinked(order)
    elif r == 2:
        U, W = _nodes_2d_kinked(L, order)
    else:
        U, W = _nodes_nested_kinked(L, order)
    return U @ L.T, W


# ---------------------------------------------------------------------------
# public expectations


def expect(f, kernel_sub, rule: QuadratureRule | None = None, kinked: bool = False) -> float:
    """<f(z)> for z ~ N(0, kernel_sub); f maps an (n, d) array to n values.

    With ``kinked`` the domain is cut where any component crosses zero.
    """
    order = rule.order if rule is not None else None
    Z, W = gaussian_nodes(kernel_sub, order, kinked)
    return float(W @ np.asarray(f(Z), dtype=np.float64))


def _subproblem(K, idx):
    """Distinct-variable reduction: kernel block and slot -> column map."""
    uniq = sorted(set(idx))
    pos = {v: i for i, v in enumerate(uniq)}
    K = np.asarray(K, dtype=np.float64)
    return K[np.ix_(uniq, uniq)], [pos[v] for v in idx]


def expect_centered_pair(f, sigma_vars, pair_vars, kernel, rule=None, kinked=False) -> float:
    """<f(z_a, z_b) (z_c z_d - K_cd)> with (a, b) = sigma_vars, (c, d) = pair_vars."""
    idx = list(sigma_vars) + list(pair_vars)
    sub, cols = _subproblem(kernel, idx)
    a, b, c, d = cols
    kcd = sub[c, d]
    return expect(lambda Z: f(Z[:, a], Z[:, b]) * (Z[:, c] * Z[:, d] - kcd), sub, rule, kinked)


def quartic_bracket(Z, K, i, j, k, l):
    """The centred quartic combination multiplying the vertex in the
    self-energy recursion, evaluated at columns (i, j, k, l) of Z."""
    return (Z[:, i] * Z[:, j] * Z[:, k] * Z[:, l]
            - 2.0 * Z[:, i] * Z[:, j] * K[k, l]
            - 4.0 * Z[:, i] * Z[:, k] * K[j, l]
            + K[i, j] * K[k, l] + 2.0 * K[i, k] * K[j, l])


def expect_quartic_combination(f, sigma_vars, quad_vars, kernel, rule=None, kinked=False) -> float:
    """<f(z_a, z_b) * bracket(z_i, z_j, z_k, z_l)> at the full distinct-index
    dimension (at most 6 components are allowed only if they collapse to 4)."""
    idx = list(sigma_vars) + list(quad_vars)
    sub, cols = _subproblem(kernel, idx)
    a, b, i, j, k, l = cols
    if sub.shape[0] > 4:
        # condition on the activation arguments: z = P u + r, r independent
        return _quartic_by_conditioning(f, a, b, (i, j, k, l), sub, rule, kinked)
    return expect(lambda Z: f(Z[:, a], Z[:, b]) * quartic_bracket(Z, sub, i, j, k, l),
                  sub, rule, kinked)


def _quartic_by_conditioning(f, a, b, quad, K, rule, kinked):
    """Exact reduction of a polynomial-in-z factor to a 2-D expectation.

    Given the activation arguments (z_a, z_b) = Lw u, every other component is
    z = P u + r with r ~ N(0, R) independent of u, so the Gaussian average
    over r is done in closed form and only u is integrated numerically.
    """
    ab = [a] if a == b else [a, b]
    Kab = K[np.ix_(ab, ab)]
    Lw = psd_factor(Kab)
    P = np.linalg.lstsq(Lw, K[ab, :], rcond=None)[0].T  # d x r
    R = K - P @ P.T
    U, W = gaussian_nodes(np.eye(Lw.shape[1]), None if rule is None else rule.order, False) \
        if not kinked else _whitened_kinked(Lw, rule)
    Zab = U @ Lw.T
    fa = f(Zab[:, 0], Zab[:, -1])
    Y = U @ P.T  # conditional means of every component
    i, j, k, l = quad

    def m2(p, q):
        return Y[:, p] * Y[:, q] + R[p, q]

    m4 = (Y[:, i] * Y[:, j] * Y[:, k] * Y[:, l]
          + R[i, j] * Y[:, k] * Y[:, l] + R[i, k] * Y[:, j] * Y[:, l] + R[i, l] * Y[:, j] * Y[:, k]
          + R[j, k] * Y[:, i] * Y[:, l] + R[j, l] * Y[:, i] * Y[:, k] + R[k, l] * Y[:, i] * Y[:, j]
          + R[i, j] * R[k, l] + R[i, k] * R[j, l] + R[i, l] * R[j, k])
    br = (m4 - 2.0 * m2(i, j) * K[k, l] - 4.0 * m2(i, k) * K[j, l]
          + K[i, j] * K[k, l] + 2.0 * K[i, k] * K[j, l])
    return float(W @ (fa * br))


def _whitened_kinked(Lw, rule):
    r = Lw.shape[1]
    order = rule.order if rule is not None else DEFAULT_ORDER_LOW
    if r == 1:
        return _nodes_1d_kinked(order)
    return _nodes_2d_kinked(Lw, order)


# ---------------------------------------------------------------------------
# moments of an activation pair against whitened coordinates


def pair_moments(act, kernel_pair, order: int | None = None):
    """Moments mu[alpha] = <sigma(z_a) sigma(z_b) u^alpha> for |alpha| <= 4.

    (z_a, z_b) = L u with L the rank-revealing factor of ``kernel_pair``.
    Returns (L, mu) where mu maps exponent tuples to floats.
    """
    L = psd_factor(kernel_pair)
    r = L.shape[1]
    kinked = act.kinked
    if order is None:
        order = DEFAULT_ORDER_LOW
    if r == 0:
        U, W = np.zeros((1, 0)), np.ones(1)
    elif not kinked:
        U, W = _tensor_nodes(r, order)
    elif r == 1:
        U, W = _nodes_1d_kinked(order)
    else:
        U, W = _nodes_2d_kinked(L, order)
    Z = U @ L.T
    g = W * act(Z[:, 0]) * act(Z[:, -1])
    mu = {}
    if r == 0:
        mu[()] = float(g.sum())
    elif r == 1:
        for p in range(5):
            mu[(p,)] = float(g @ U[:, 0] ** p)
    else:
        for p in range(5):
            for q in range(5 - p):
                mu[(p, q)] = float(g @ (U[:, 0] ** p * U[:, 1] ** q))
    return L, mu
