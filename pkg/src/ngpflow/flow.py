"""Layer-to-layer evolution of (core kernel, self-energy, vertex).

For each activation pair (a, b) the other preactivations are written as
z = P u + r with (z_a, z_b) = L u and r independent of u. The Gaussian
average over r is closed-form, and every contraction of a raised index
with P lowers it back onto {a, b}. The propagation terms therefore only
involve lower-index S and V restricted to the pair's own samples and a
handful of moments <sigma sigma u^alpha>; no inverse of the full kernel
is ever formed.

The two backends differ in how those moments (and the kernel-level
<sigma sigma sigma sigma> table) are evaluated:

``wick``
    Exact Gaussian contractions, polynomial activations only.
``quad``
    Product Gauss-Hermite rules, any activation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

from . import quadrature as qd
from .core import (
    Dataset,
    FlowState,
    NetworkConfig,
    kernel_inverse,
    pair_lookup,
    pair_members,
)
from .wick import activation_moment

BACKENDS = ("wick", "quad")


# ---------------------------------------------------------------------------
# trace


@dataclass(frozen=True, eq=False)
class FlowTrace:
    states: tuple[FlowState, ...]
    config: NetworkConfig
    dataset_digest: str
    ratios: tuple[float, ...] = ()
    backend: str = "quad"
    epsilon_override: float | None = field(default=None)

    def __post_init__(self):
        if len(self.states) != self.config.depth:
            raise ValueError("trace length must equal the network depth")
        if not self.states[0].is_gaussian:
            raise ValueError("first-layer state must be Gaussian")

    @property
    def last(self) -> FlowState:
        return self.states[-1]

    @property
    def epsilon(self) -> float:
        if self.epsilon_override is not None:
            return self.epsilon_override
        return self.config.epsilon

    def to_json(self) -> dict:
        return {
            "config": self.config.to_json(),
            "dataset_digest": self.dataset_digest,
            "backend": self.backend,
            "ratios": list(self.ratios),
            "epsilon": self.epsilon,
            "states": [s.to_json() for s in self.states],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, obj: dict) -> "FlowTrace":
        states = tuple(FlowState(s["layer"], np.array(s["kernel"]), np.array(s["self_energy"]),
                                 np.array(s["vertex"])) for s in obj["states"])
        return cls(states, NetworkConfig.from_json(obj["config"]), obj["dataset_digest"],
                   tuple(obj.get("ratios", ())), obj.get("backend", "quad"))


# ---------------------------------------------------------------------------
# first layer


def first_layer_kernel(dataset: Dataset, config: NetworkConfig) -> np.ndarray:
    x = dataset.inputs
    if x.shape[1] != config.widths[0]:
        raise ValueError(f"input dimension {x.shape[1]} does not match n0 = {config.widths[0]}")
    return config.bias_vars[0] + config.weight_vars[0] * (x @ x.T) / config.widths[0]


def init_first_layer(dataset: Dataset, config: NetworkConfig) -> FlowState:
    return FlowState.gaussian(1, first_layer_kernel(dataset, config))


# ---------------------------------------------------------------------------
# pair-local moments


def _wick_pair_moments(coeffs, Kab):
    """Exact mu[alpha] = <sigma(z_a) sigma(z_b) u^alpha> for polynomial sigma.

    (z_a, z_b, u) is jointly Gaussian with covariance [[Kab, L], [L^T, I]],
    so each moment is a single contraction over that extended vector.
    """
    L = qd.psd_factor(Kab)
    d, r = L.shape
    ext = np.block([[Kab, L], [L.T, np.eye(r)]])
    sig = [0, d - 1]
    mu = {}
    for alpha in _exponents(r):
        bare = [d + k for k, p in enumerate(alpha) for _ in range(p)]
        mu[alpha] = float(activation_moment(coeffs, sig, bare, ext))
    return L, mu


def _exponents(r):
    if r == 0:
        return [()]
    if r == 1:
        return [(p,) for p in range(5)]
    return [(p, q) for p in range(5) for q in range(5 - p)]


def _pair_local(moments, K, a, b):
    """Per-pair quantities shared by both backends.

    Returns (ab, G2, N, E4, M2) where ab lists the distinct samples of the
    pair, N = G (mu2 - mu0 I) G^T, M2 = G mu2 G^T and E4 is the fourth-moment
    tensor of G u weighted by sigma_a sigma_b, all in the pair's own sample
    indices. ``moments`` maps the pair kernel to (L, mu).
    """
    ab = [a] if a == b else [a, b]
    Kab = K[np.ix_(ab, ab)]
    L, mu = moments(Kab)
    r = L.shape[1]
    mu0 = mu[(0,) * r] if r else mu[()]
    if r == 0:
        n = len(ab)
        return ab, mu0, np.zeros((n, n)), np.zeros((n,) * 4), np.zeros((n, n))
    G = np.linalg.pinv(L).T  # |ab| x r
    e = np.eye(r, dtype=int)

    def moment(*axes):
        return mu[tuple(int(v) for v in sum((e[ax] for ax in axes), np.zeros(r, dtype=int)))]

    mu2 = np.array([[moment(i, j) for j in range(r)] for i in range(r)])
    mu4 = np.array([[[[moment(i, j, k, l) for l in range(r)] for k in range(r)]
                     for j in range(r)] for i in range(r)])
    N = G @ (mu2 - mu0 * np.eye(r)) @ G.T
    M2 = G @ mu2 @ G.T
    E4 = np.einsum("ms,nt,ou,pv,stuv->mnop", G, G, G, G, mu4)
    return ab, mu0, N, E4, M2


def _quad_g4(act, K, order):
    D = K.shape[0]
    cache = {}
    for quad in combinations_with_replacement(range(D), 4):
        uniq = sorted(set(quad))
        mult = [quad.count(v) for v in uniq]
        sub = K[np.ix_(uniq, uniq)]

        def integrand(Z, mult=mult):
            out = np.ones(Z.shape[0])
            for c, p in enumerate(mult):
                out = out * act(Z[:, c]) ** p
            return out

        rule = None if order is None else qd.QuadratureRule.gauss_hermite(order)
        cache[quad] = qd.expect(integrand, sub, rule, kinked=act.kinked)
    f, s = pair_members(D)
    M = f.size
    G4 = np.empty((M, M))
    for p in range(M):
        for q in range(p, M):
            val = cache[tuple(sorted((f[p], s[p], f[q], s[q])))]
            G4[p, q] = val
            G4[q, p] = val
    return G4


def _wick_g4(coeffs, K):
    f, s = pair_members(K.shape[0])
    return activation_moment(coeffs, [f[:, None], s[:, None], f[None, :], s[None, :]], [], K)


def _pair_step(state: FlowState, config: NetworkConfig, cb: float, cw: float, moments, g4):
    K = state.kernel
    D = K.shape[0]
    f, s = pair_members(D)
    M = f.size
    gaussian = state.is_gaussian
    lk = pair_lookup(D)
    Vt = None if gaussian else state.vertex_tensor()
    G2p = np.empty(M)
    Tq = np.zeros((M, M))  # propagation rows, already multiplied by pair multiplicity
    s_term = np.zeros(M)
    q_term = np.zeros(M)
    for p in range(M):
        ab, g2, N, E4, M2 = _pair_local(moments, K, f[p], s[p])
        G2p[p] = g2
        if gaussian:
            continue
        ab = np.array(ab)
        # lowered S, V restricted to the pair's samples
        Ssub = state.self_energy[np.ix_(ab, ab)]
        Vsub = Vt[np.ix_(ab, ab, ab, ab)]
        H = np.linalg.pinv(K[np.ix_(ab, ab)])
        s_term[p] = 0.5 * np.sum(Ssub * N)
        for m in range(len(ab)):
            for n in range(len(ab)):
                Tq[p, lk[ab[m], ab[n]]] += N[m, n]
        q_term[p] = (np.sum(Vsub * E4)
                     - 2.0 * np.einsum("mn,mnop,op->", H, Vsub, M2)
                     - 4.0 * np.einsum("mo,mnop,np->", H, Vsub, M2)
                     + g2 * (np.einsum("mn,op,mnop->", H, H, Vsub)
                             + 2.0 * np.einsum("mo,np,mnop->", H, H, Vsub)))
    G2 = np.empty((D, D))
    G2[f, s] = G2p
    G2[s, f] = G2p
    Knew = cb + cw * G2
    Vnew = cw ** 2 * (g4(K) - np.outer(G2p, G2p))
    Snew = np.zeros((D, D))
    if not gaussian:
        r = config.ratio(state.layer)
        # Tq carries N summed over both orderings of off-diagonal entries
        Vnew = Vnew + cw ** 2 * (r / 4.0) * Tq @ state.vertex @ Tq.T
        sp = r * cw * (s_term + q_term / 8.0)
        Snew[f, s] = sp
        Snew[s, f] = sp
    return Knew, Snew, Vnew


# ---------------------------------------------------------------------------
# public driver


def step(state: FlowState, config: NetworkConfig, backend: str = "quad",
         jitter: float = 0.0, order: int | None = None) -> FlowState:
    """Advance the flow state from layer l to l + 1."""
    l = state.layer
    if l >= config.depth:
        raise ValueError(f"state is already at the last layer {config.depth}")
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}")
    if l == 1 and not state.is_gaussian:
        raise AssertionError("first-layer state must carry zero corrections")
    if not state.is_gaussian:
        kernel_inverse(state.kernel, jitter)  # condition gate for raised-index terms
    cb, cw = config.bias_vars[l], config.weight_vars[l]
    act = config.activation
    if backend == "wick":
        coeffs = act.polynomial_coeffs
        if coeffs is None:
            raise TypeError(f"activation {act.kind!r} is not polynomial; use the quadrature backend")
        K, S, V = _pair_step(state, config, cb, cw,
                             lambda Kab: _wick_pair_moments(coeffs, Kab),
                             lambda Kin: _wick_g4(coeffs, Kin))
    else:
        K, S, V = _pair_step(state, config, cb, cw,
                             lambda Kab: qd.pair_moments(act, Kab, order),
                             lambda Kin: _quad_g4(act, Kin, order))
    return FlowState(l + 1, K, S, V)


def run_flow(dataset: Dataset, config: NetworkConfig, backend: str = "quad",
             jitter: float = 0.0, order: int | None = None) -> FlowTrace:
    states = [init_first_layer(dataset, config)]
    ratios = [0.0]
    for _ in range(config.depth - 1):
        nxt = step(states[-1], config, backend, jitter, order)
        ratios.append(config.ratio(states[-1].layer) if not states[-1].is_gaussian else 0.0)
        states.append(nxt)
    return FlowTrace(tuple(states), config, dataset.digest(), tuple(ratios), backend)


def kernel_flow(dataset: Dataset, config: NetworkConfig, order: int | None = None,
                upto: int | None = None) -> list[np.ndarray]:
    """Core kernels only, layer 1..upto (default L); O(D^2) expectations."""
    act = config.activation
    K = first_layer_kernel(dataset, config)
    out = [K]
    for l in range(1, (upto or config.depth)):
        coeffs = act.polynomial_coeffs
        D = K.shape[0]
        if coeffs is not None:
            i, j = np.triu_indices(D)
            g = activation_moment(coeffs, [i, j], [], K)
        else:
            i, j = np.triu_indices(D)
            g = np.array([qd.pair_moments(act, K[np.ix_([a, b], [a, b])] if a != b else K[[[a]], [[a]]],
                                          order)[1][(0, 0) if a != b else (0,)] for a, b in zip(i, j)])
        G = np.empty((D, D))
        G[i, j] = g
        G[j, i] = g
        K = config.bias_vars[l] + config.weight_vars[l] * G
        out.append(K)
    return out


# ---------------------------------------------------------------------------
# single-input closed forms


def _double_factorial(n: int) -> int:
    return math.prod(range(n, 0, -2)) if n > 0 else 1


def single_input_moments(activation, k: float):
    """(g2, g4, h2, h4) = <s^2>, <s^4>, <s^2 z^2>, <s^2 z^4> for z ~ N(0, k)."""
    kind = activation.kind
    if kind == "relu":
        return k / 2.0, 1.5 * k ** 2, 1.5 * k ** 2, 7.5 * k ** 3
    if kind in ("linear", "quadratic", "monomial"):
        p = {"linear": 1, "quadratic": 2}.get(kind, activation.power)
        df = _double_factorial
        return (df(2 * p - 1) * k ** p, df(4 * p - 1) * k ** (2 * p),
                df(2 * p + 1) * k ** (p + 1), df(2 * p + 3) * k ** (p + 2))
    raise TypeError(f"no single-input closed form for activation {kind!r}")


def closed_form_single_input(config: NetworkConfig, k1: float, digest: str = "") -> FlowTrace:
    """Scalar recursion for one input with first-layer kernel ``k1``."""
    act = config.activation
    single_input_moments(act, 1.0)  # validates the activation
    K, S, V = float(k1), 0.0, 0.0
    states = [FlowState.gaussian(1, [[K]])]
    ratios = [0.0]
    for l in range(1, config.depth):
        cb, cw = config.bias_vars[l], config.weight_vars[l]
        g2, g4, h2, h4 = single_input_moments(act, K)
        Kn = cb + cw * g2
        Vn = cw ** 2 * (g4 - g2 ** 2)
        Sn = 0.0
        r = 0.0
        if S != 0.0 or V != 0.0:
            r = config.ratio(l)
            Vn += cw ** 2 * (r / 4.0) * (V / K ** 4) * (h2 - K * g2) ** 2
            Sn = r * cw * ((S / (2.0 * K ** 2)) * (h2 - K * g2)
                           + (V / (8.0 * K ** 4)) * (h4 - 6.0 * K * h2 + 3.0 * K ** 2 * g2))
        K, S, V = Kn, Sn, Vn
        ratios.append(r)
        states.append(FlowState(l + 1, [[K]], [[S]], [[V]]))
    return FlowTrace(tuple(states), config, digest, tuple(ratios), "closed-form")
