"""Exact Gaussian moments of polynomials by pairing enumeration.

A moment <prod_v z_v^{e_v}> of a zero-mean Gaussian vector is a sum over
perfect pairings of the slots, each pairing contributing the product of its
kernel entries. Pairings are grouped by the multiset of variable pairs they
produce, so each exponent pattern is expanded once into integer-weighted
kernel monomials and cached; the floating-point kernel only enters at
evaluation time.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from functools import lru_cache
from itertools import product

import numpy as np

MAX_DEGREE = 16


class DegreeError(ValueError):
    pass


@lru_cache(maxsize=None)
def pairing_pattern(exponents: tuple[int, ...]) -> tuple[tuple[int, tuple[tuple[int, int], ...]], ...]:
    """Kernel monomials of <prod_v z_v^{e_v}> as (count, pairs) tuples.

    ``pairs`` lists (v, w), v <= w, one entry per kernel factor K_{vw}.
    Odd total degree gives an empty expansion.
    """
    if sum(exponents) % 2:
        return ()
    if sum(exponents) > MAX_DEGREE:
        raise DegreeError(f"degree {sum(exponents)} exceeds the cap of {MAX_DEGREE}")
    if not any(exponents):
        return ((1, ()),)
    e = list(exponents)
    i = next(k for k, x in enumerate(e) if x)
    e[i] -= 1
    acc: dict[tuple, int] = defaultdict(int)
    for j, ej in enumerate(e):
        if ej == 0:
            continue
        rest = list(e)
        rest[j] -= 1
        for count, pairs in pairing_pattern(tuple(rest)):
            key = tuple(sorted(pairs + ((i, j),)))
            acc[key] += ej * count
    return tuple((c, p) for p, c in sorted(acc.items()))


@lru_cache(maxsize=None)
def _pattern_arrays(exponents: tuple[int, ...]):
    pat = pairing_pattern(exponents)
    if not pat:
        return None
    counts = np.array([c for c, _ in pat], dtype=np.float64)
    npairs = sum(exponents) // 2
    left = np.zeros((len(pat), npairs), dtype=np.intp)
    right = np.zeros((len(pat), npairs), dtype=np.intp)
    for m, (_, pairs) in enumerate(pat):
        for q, (v, w) in enumerate(pairs):
            left[m, q] = v
            right[m, q] = w
    return counts, left, right


def pattern_moment(exponents, index_arrays, kernel) -> np.ndarray:
    """<prod_s z_{idx_s}^{e_s}> for many index tuples at once.

    ``index_arrays[s]`` gives the sample index of slot s for each tuple;
    slots may coincide in sample index, the pairing sum handles that.
    """
    exponents = tuple(int(x) for x in exponents)
    idx = np.asarray(index_arrays, dtype=np.intp).reshape(len(exponents), -1)
    arr = _pattern_arrays(exponents)
    if arr is None:
        return np.zeros(idx.shape[1])
    counts, left, right = arr
    if left.shape[1] == 0:
        return np.full(idx.shape[1], counts[0])
    K = np.asarray(kernel, dtype=np.float64)
    vals = K[idx[left], idx[right]]  # (monomials, pairs, tuples)
    return counts @ np.prod(vals, axis=1)


@dataclass(frozen=True)
class WickExpression:
    """Polynomial sum_t c_t prod_v z_v^{e_{t,v}} in Gaussian variables."""

    terms: tuple[tuple[float, tuple[int, ...]], ...]

    def __post_init__(self):
        clean = []
        width = None
        for c, e in self.terms:
            e = tuple(int(x) for x in e)
            if any(x < 0 for x in e):
                raise ValueError("exponents must be non-negative")
            if sum(e) > MAX_DEGREE:
                raise DegreeError(f"term degree {sum(e)} exceeds the cap of {MAX_DEGREE}")
            if width is not None and len(e) != width:
                raise ValueError("all exponent vectors must have the same length")
            width = len(e)
            clean.append((float(c), e))
        object.__setattr__(self, "terms", tuple(clean))

    @classmethod
    def monomial(cls, exponents, coefficient: float = 1.0) -> "WickExpression":
        return cls(((coefficient, tuple(exponents)),))

    def __add__(self, other: "WickExpression") -> "WickExpression":
        return WickExpression(self.terms + other.terms)

    def __mul__(self, other: "WickExpression") -> "WickExpression":
        out = []
        for c1, e1 in self.terms:
            for c2, e2 in other.terms:
                out.append((c1 * c2, tuple(a + b for a, b in zip(e1, e2))))
        return WickExpression(tuple(out))


def gaussian_moment(expr: WickExpression, kernel) -> float:
    K = np.atleast_2d(np.asarray(kernel, dtype=np.float64))
    D = K.shape[0]
    total = 0.0
    for c, e in expr.terms:
        if len(e) != D:
            raise ValueError(f"exponent vector length {len(e)} does not match kernel size {D}")
        if sum(e) % 2 or c == 0.0:
            continue
        active = [v for v in range(D) if e[v]]
        if not active:
            total += c
            continue
        sub = tuple(e[v] for v in active)
        total += c * float(pattern_moment(sub, [[v] for v in active], K)[0])
    return total


def connected_four_point(m4: float, m2_pairs) -> float:
    """Full four-point moment minus its three disconnected pair products."""
    a, b, c = m2_pairs
    return m4 - a - b - c


def activation_moment(coeffs, sigma_idx, bare_idx, kernel) -> np.ndarray:
    """<prod_s sigma(z_{sigma_idx[s]}) prod_t z_{bare_idx[t]}> for polynomial sigma.

    Index arguments are sequences of index arrays (one array per factor),
    broadcast together, so whole tables are evaluated in one call.
    """
    coeffs = [float(a) for a in coeffs]
    ns, nb = len(sigma_idx), len(bare_idx)
    if ns > 4 or nb > 4:
        raise ValueError("at most four activation factors and four bare factors")
    arrays = np.broadcast_arrays(*[np.asarray(a, dtype=np.intp) for a in (*sigma_idx, *bare_idx)])
    shape = arrays[0].shape
    idx = [a.ravel() for a in arrays]
    total = np.zeros(idx[0].size if idx else 1)
    powers = [k for k, a in enumerate(coeffs) if a != 0.0]
    for ks in product(powers, repeat=ns):
        c = np.prod([coeffs[k] for k in ks])
        exps = tuple(ks) + (1,) * nb
        if sum(exps) % 2:
            continue
        total += c * pattern_moment(exps, idx, kernel)
    return total.reshape(shape)


def polynomial_activation_moment(coeffs, sigma_vars, bare_vars, kernel) -> float:
    """Scalar version of :func:`activation_moment`.

    ``sigma_vars`` lists the variables carrying an activation factor,
    ``bare_vars`` those carrying a plain z factor (repeats allowed).
    """
    if coeffs is None:
        raise TypeError("activation is not polynomial; use the quadrature backend")
    K = np.atleast_2d(np.asarray(kernel, dtype=np.float64))
    return float(activation_moment(coeffs, [np.array(v) for v in sigma_vars],
                                   [np.array(v) for v in bare_vars], K))
