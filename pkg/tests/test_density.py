import numpy as np
import pytest
from hypothesis import given, strategies as st

from ngpflow.core import Activation, Dataset, NetworkConfig
from ngpflow.density import (
    DensityError, bin_densities, build_potential, default_grid, density_moments, j_tilde,
    marginal_density,
)
from ngpflow.flow import run_flow


def _potential(act=Activation.linear(), n=50, cw=1.0, x=None):
    x = np.array([[1.0, 2.0, -0.5, 0.3]]) if x is None else x
    cfg = NetworkConfig((x.shape[1], n, 2 * n, 1), 0.0, cw, act)
    return build_potential(run_flow(Dataset(x), cfg))


@pytest.mark.parametrize("mode", ["exp", "lin"])
@pytest.mark.parametrize("act,cw", [(Activation.linear(), 1.0), (Activation.relu(), 2.0),
                                    (Activation.quadratic(), 1 / 3)])
def test_normalized_and_symmetric(mode, act, cw):
    pot = _potential(act, 40, cw)
    y, p = marginal_density(pot, mode=mode)
    assert abs(np.trapezoid(p, y) - 1) < 1e-6
    assert np.array_equal(p, p[::-1])


def test_zero_epsilon_is_gaussian():
    pot = _potential().with_epsilon(0.0)
    K = pot.kernel[0, 0]
    for mode in ("exp", "lin"):
        y, p = marginal_density(pot, mode=mode)
        g = np.exp(-y ** 2 / (2 * K)) / np.sqrt(2 * np.pi * K)
        assert np.abs(p - g).max() < 1e-8 * g.max()


def test_j_tilde_consistency():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4))
    cfg = NetworkConfig((4, 6, 9, 2), 0.1, 1.0, Activation.quadratic())
    pot = build_potential(run_flow(Dataset(x), cfg))
    assert np.array_equal(pot.j_tilde, pot.j_tilde.T)
    J = j_tilde(pot.kernel, pot.raised_S, pot.raised_V, 2)
    assert np.abs(J - pot.j_tilde).max() <= 1e-10 * np.abs(J).max()
    # the general potential reduces to the scalar one for a single input
    p1 = _potential(Activation.quadratic(), 20, 1 / 3)
    K, Jt, Vr = p1.scalar_couplings()
    y = np.linspace(-2, 2, 7)
    z = y[:, None, None]
    assert np.allclose(p1.h0(z), y ** 2 / (2 * K))
    assert np.allclose(p1.h1(z), -0.5 * Jt * y ** 2 - 0.125 * Vr * y ** 4)


@pytest.mark.parametrize("mode", ["exp", "lin"])
def test_second_moment_first_order(mode):
    x = np.array([[1.0, 2.0, -0.5, 0.3]])
    cfg = NetworkConfig((4, 50, 100, 1), 0.0, 1 / 3, Activation.quadratic())
    tr = run_flow(Dataset(x), cfg)
    base = build_potential(tr)
    K, J, Vr = base.scalar_couplings()
    slope = J * K ** 2 + 1.5 * Vr * K ** 3
    S = tr.last.self_energy[0, 0]
    assert S != 0 and slope == pytest.approx(S, rel=1e-10)

    def err(eps):
        pot = base.with_epsilon(eps)
        m2 = density_moments(*marginal_density(pot, default_grid(pot, 4001, 8.0, mode), mode))["second"]
        return m2 - K - eps * slope

    e1, e2 = err(1e-4), err(5e-5)
    assert 3.5 < e1 / e2 < 4.5


def test_linearized_cumulant_matches_vertex():
    pot = _potential(Activation.linear(), 200)
    K, _, _ = pot.scalar_couplings()
    V = pot.raised_V[0, 0] * K ** 4
    k4 = density_moments(*marginal_density(pot, default_grid(pot, 4001, 10.0, "lin"), "lin"))["cumulant4"]
    assert k4 == pytest.approx(3 * pot.epsilon * V, rel=0.05)


def test_errors():
    pot = _potential(Activation.relu(), 10, 2.0)
    K = pot.kernel[0, 0]
    with pytest.raises(DensityError, match="safe truncation"):
        marginal_density(pot, np.linspace(-1.01, 1.01, 2001) * pot.safe_half_width(), "exp")
    with pytest.raises(DensityError, match="too coarse"):
        marginal_density(pot, np.linspace(-6, 6, 7) * np.sqrt(K), "lin")
    with pytest.raises(DensityError, match="negative"):
        marginal_density(_potential(Activation.relu(), 2, 2.0), np.linspace(-12, 12, 4001) * np.sqrt(K), "lin")
    with pytest.raises(DensityError):
        _potential(Activation.relu(), 10, 2.0, x=np.eye(2, 4)).scalar_couplings()


@given(st.integers(10, 300), st.sampled_from(["exp", "lin"]))
def test_bin_densities_integrate_to_one(n, mode):
    pot = _potential(Activation.linear(), n)
    half = 5 * np.sqrt(pot.kernel[0, 0])
    edges = np.linspace(-half, half, 102)
    d = bin_densities(pot, edges, mode)
    assert np.sum(d * np.diff(edges)) == pytest.approx(1.0, abs=1e-12)
    assert np.all(d >= 0)
