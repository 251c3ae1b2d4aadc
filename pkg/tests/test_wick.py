import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_kernel
from oracles import all_pairings, brute_moment
from ngpflow.wick import (
    MAX_DEGREE, DegreeError, WickExpression, activation_moment, connected_four_point,
    gaussian_moment, pairing_pattern, polynomial_activation_moment,
)


def _variables(exps):
    return [v for v, e in enumerate(exps) for _ in range(e)]


@given(st.lists(st.integers(0, 3), min_size=1, max_size=4), st.integers(0, 2**31))
def test_moment_matches_brute_force(exps, seed):
    K = random_kernel(np.random.default_rng(seed), len(exps))
    got = gaussian_moment(WickExpression.monomial(exps), K)
    want = brute_moment(_variables(exps), K)
    assert got == pytest.approx(want, rel=1e-12, abs=1e-12)


@given(st.lists(st.integers(0, 4), min_size=1, max_size=4).filter(lambda e: sum(e) % 2 == 1),
       st.integers(0, 2**31))
def test_odd_degree_vanishes(exps, seed):
    K = random_kernel(np.random.default_rng(seed), len(exps))
    assert gaussian_moment(WickExpression.monomial(exps), K) == 0.0


@given(st.lists(st.integers(0, 3), min_size=1, max_size=4).filter(lambda e: 0 < sum(e) <= 8 and sum(e) % 2 == 0),
       st.floats(0.1, 5.0), st.integers(0, 2**31))
def test_moment_scales_homogeneously(exps, c, seed):
    K = random_kernel(np.random.default_rng(seed), len(exps))
    m = sum(exps) // 2
    e = WickExpression.monomial(exps)
    assert gaussian_moment(e, c * K) == pytest.approx(c ** m * gaussian_moment(e, K), rel=1e-12)


def test_pairing_counts_are_double_factorials():
    for n in range(1, 9):
        pats = pairing_pattern((2 * n,))
        assert sum(c for c, _ in pats) == math.prod(range(2 * n - 1, 0, -2))
    assert sum(1 for _ in all_pairings(list(range(6)))) == 15
    with pytest.raises(DegreeError):
        WickExpression.monomial((MAX_DEGREE + 2,))


def test_expression_algebra():
    z1 = WickExpression.monomial((1, 0))
    z2 = WickExpression.monomial((0, 1))
    K = np.array([[2.0, 0.5], [0.5, 1.0]])
    # <(z1 + z2)^2> = K11 + 2 K12 + K22
    s = z1 + z2
    assert gaussian_moment(s * s, K) == pytest.approx(2.0 + 1.0 + 1.0)
    m4 = gaussian_moment(WickExpression.monomial((2, 2)), K)
    assert connected_four_point(m4, (2.0 * 1.0, 0.25, 0.25)) == pytest.approx(0.0)


def test_activation_moment_examples():
    K = np.array([[1.3, 0.4], [0.4, 0.7]])
    assert polynomial_activation_moment((0, 1), [0, 1], [], K) == pytest.approx(0.4)
    quad = polynomial_activation_moment((0, 0, 1), [0, 1], [], K)
    assert quad == pytest.approx(1.3 * 0.7 + 2 * 0.4 ** 2, rel=1e-14)
    k = 1.7
    assert polynomial_activation_moment((0, 0, 1), [0, 0], [0, 0], [[k]]) == pytest.approx(15 * k ** 3)
    with pytest.raises(TypeError):
        polynomial_activation_moment(None, [0], [], [[1.0]])


@given(st.integers(0, 2**31))
def test_activation_moment_tables_match_scalar(seed):
    rng = np.random.default_rng(seed)
    K = random_kernel(rng, 4)
    coeffs = rng.standard_normal(3)
    idx = rng.integers(0, 4, size=(4, 6))
    table = activation_moment(coeffs, [idx[0], idx[1]], [idx[2], idx[3]], K)
    for t in range(6):
        v = idx[:, t]
        assert table[t] == pytest.approx(
            polynomial_activation_moment(coeffs, [v[0], v[1]], [v[2], v[3]], K), rel=1e-12, abs=1e-12)
