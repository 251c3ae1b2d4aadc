"""Gaussian-process posterior mean and its leading finite-width correction.

Samples are ordered training first (R, N_R rows) then test (E, N_E rows).
With phi = K_RR^{-1} y_R the corrected mean is

    m_E = K_ER phi + eps * (A_E - K_ER K_RR^{-1} A_R) phi

where the D x N_R matrix A collects the self-energy and vertex of the last
layer contracted with phi phi^T and with K_RR^{-1}; see
:func:`correction_matrix_A`. S and V enter with lower indices: contracting
the raised tensors with the full inverse kernel and reorganising the
training/test blocks cancels every metric factor.

The vertex is consumed through two contractions only, so it can be either a
dense pair matrix or, for two-layer networks, a factorized sum of kernel
monomials whose cost is O(D N_R^2) instead of O(D^4).
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .core import Activation, expand_vertex
from .wick import pairing_pattern

JITTER_SCALE = 1e-10
PSD_TOL = 1e-8


class InferenceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# kernel blocks


@dataclass(frozen=True, eq=False)
class KernelBlocks:
    k_rr: np.ndarray
    k_re: np.ndarray
    k_ee: np.ndarray
    k_delta: np.ndarray
    chol_rr: tuple
    jitter: float = 0.0

    @property
    def n_train(self) -> int:
        return self.k_rr.shape[0]

    @property
    def n_test(self) -> int:
        return self.k_ee.shape[0]

    def solve_rr(self, b) -> np.ndarray:
        return cho_solve(self.chol_rr, b)

    def inverse_rr(self) -> np.ndarray:
        inv = self.solve_rr(np.eye(self.n_train))
        return (inv + inv.T) / 2.0

    def block_inverse_error(self) -> float:
        """Max deviation between the block-assembled inverse and inv(K)."""
        nr, ne = self.n_train, self.n_test
        Kfull = np.block([[self.k_rr, self.k_re], [self.k_re.T, self.k_ee]])
        irr = self.inverse_rr()
        idel = np.linalg.inv(self.k_delta)
        G = irr @ self.k_re
        top_left = irr + G @ idel @ G.T
        top_right = -G @ idel
        assembled = np.block([[top_left, top_right], [top_right.T, idel]])
        ref = np.linalg.inv(Kfull)
        return float(np.max(np.abs(assembled - ref)) / np.max(np.abs(ref)))


def kernel_blocks(kernel, n_train: int, jitter: float | None = 0.0) -> KernelBlocks:
    """Split a (train + test) kernel; K_RR is factorized once.

    ``jitter=None`` enables the automatic fallback: if the Cholesky of K_RR
    fails, 1e-10 * trace/N_R is added to its diagonal and recorded.
    """
    K = np.asarray(kernel, dtype=np.float64)
    K = (K + K.T) / 2.0
    krr = K[:n_train, :n_train]
    kre = K[:n_train, n_train:]
    kee = K[n_train:, n_train:]
    used = 0.0 if jitter is None else float(jitter)
    try:
        chol = cho_factor(krr + used * np.eye(n_train), lower=True)
    except np.linalg.LinAlgError:
        if jitter is not None:
            raise InferenceError("training kernel is singular; enable the jitter fallback")
        used = JITTER_SCALE * np.trace(krr) / n_train
        try:
            chol = cho_factor(krr + used * np.eye(n_train), lower=True)
        except np.linalg.LinAlgError as exc:
            raise InferenceError("training kernel is singular even with jitter") from exc
    krr_j = krr + used * np.eye(n_train)
    kdelta = kee - kre.T @ cho_solve(chol, kre)
    kdelta = (kdelta + kdelta.T) / 2.0
    if kdelta.size:
        ev = np.linalg.eigvalsh(kdelta)
        if ev[0] < -PSD_TOL * max(1.0, abs(ev[-1])):
            raise InferenceError(f"posterior covariance not PSD (min eigenvalue {ev[0]:.3e})")
    return KernelBlocks(krr_j, kre, kee, kdelta, chol, used)


def gp_posterior_mean(blocks: KernelBlocks, targets) -> np.ndarray:
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    return blocks.k_re.T @ blocks.solve_rr(y)


# ---------------------------------------------------------------------------
# vertex providers


class DenseVertex:
    """Pair-encoded vertex over all D samples."""

    def __init__(self, vertex: np.ndarray, D: int):
        self.tensor = expand_vertex(vertex, D)

    def contract(self, M: np.ndarray, n_train: int):
        """(X, Y) with X_ab = sum V_{(a b)(c d)} M_cd, Y_ab = sum V_{(a c)(b d)} M_cd,
        a over all samples, b, c, d over training samples."""
        R = slice(0, n_train)
        V = self.tensor[:, R, R, R]
        return np.einsum("abcd,cd->ab", V, M), np.einsum("acbd,cd->ab", V, M)


class FactorizedVertex:
    """Vertex written as sum_m c_m prod K_{slot slot'} over four sample slots.

    Exact for the second layer, where V = C_W^2 (<s s s s> - <s s><s s>)
    under the first-layer kernel.
    """

    def __init__(self, kernel: np.ndarray, terms):
        self.kernel = np.asarray(kernel, dtype=np.float64)
        self.terms = list(terms)

    @classmethod
    def second_layer(cls, kernel1: np.ndarray, activation: Activation, weight_var: float):
        coeffs = activation.polynomial_coeffs
        if coeffs is None:
            raise TypeError("factorized vertex needs a polynomial activation")
        acc: dict[tuple, float] = defaultdict(float)
        powers = [k for k, a in enumerate(coeffs) if a != 0.0]
        for ks in product(powers, repeat=4):
            c = weight_var ** 2 * np.prod([coeffs[k] for k in ks])
            for cnt, pairs in pairing_pattern(tuple(ks)):
                acc[pairs] += c * cnt
            left = pairing_pattern((ks[0], ks[1]))
            right = pairing_pattern((ks[2], ks[3]))
            for c1, p1 in left:
                for c2, p2 in right:
                    shifted = tuple((i + 2, j + 2) for i, j in p2)
                    acc[tuple(sorted(p1 + shifted))] -= c * c1 * c2
        terms = [(v, k) for k, v in sorted(acc.items()) if v != 0.0]
        return cls(kernel1, terms)

    def tensor(self) -> np.ndarray:
        """Dense D^4 tensor (small D only; used for checks)."""
        D = self.kernel.shape[0]
        out = np.zeros((D,) * 4)
        grids = np.indices((D,) * 4)
        for c, pairs in self.terms:
            t = np.full((D,) * 4, c)
            for i, j in pairs:
                t = t * self.kernel[grids[i], grids[j]]
            out += t
        return out

    def _contract(self, M, n_train):
        """sum_{c d} V[a, b, c, d] M_cd, a over all samples, b, c, d training.

        Each monomial is split into factors touching (a, b) only, the c side,
        the d side and the (c, d) link, then contracted with matrix products;
        only monomials where both c and d couple to both a and b need the
        O(D N_R^3) route, done in row chunks.
        """
        K = self.kernel
        R = slice(0, n_train)
        diag = np.diagonal(K)
        KaR, KRR = K[:, R], K[R, R]
        D = K.shape[0]
        out = np.zeros((D, n_train))
        for coef, pairs in self.terms:
            P = np.ones((D, n_train))
            A = {2: None, 3: None}   # (a, c) / (a, d) factors
            B = {2: None, 3: None}   # (b, c) / (b, d) factors
            u = {2: np.ones(n_train), 3: np.ones(n_train)}
            W = np.array(M, dtype=np.float64)
            for i, j in pairs:
                if (i, j) == (0, 0):
                    P = P * diag[:, None]
                elif (i, j) == (1, 1):
                    P = P * diag[None, R]
                elif (i, j) == (0, 1):
                    P = P * KaR
                elif (i, j) == (2, 3):
                    W = W * KRR
                elif i == j:
                    u[i] = u[i] * diag[R]
                elif i == 0:
                    A[j] = KaR if A[j] is None else A[j] * KaR
                else:  # i == 1
                    B[j] = KRR if B[j] is None else B[j] * KRR
            W = u[2][:, None] * W * u[3][None, :]
            out += coef * P * _link(A[2], B[2], W, A[3], B[3], D, n_train)
        return out

    def contract(self, M: np.ndarray, n_train: int):
        X = self._contract(M, n_train)
        # V_{(a c)(b d)}: swap slots 1 and 2 of every monomial
        swapped = FactorizedVertex(self.kernel, [
            (c, tuple(sorted(tuple(sorted((_swap12(i), _swap12(j)))) for i, j in pairs)))
            for c, pairs in self.terms])
        return X, swapped._contract(M, n_train)


def _link(Ac, Bc, W, Ad, Bd, D, nr, chunk=64):
    """sum_{c d} Ac[a c] Bc[b c] W[c d] Ad[a d] Bd[b d]; None means all ones."""
    if Bc is None and Bd is None:  # independent of b
        Ac = np.ones((D, nr)) if Ac is None else Ac
        Ad = np.ones((D, nr)) if Ad is None else Ad
        return np.broadcast_to(np.sum((Ac @ W) * Ad, axis=1)[:, None], (D, nr))
    if Ac is None and Ad is None:  # independent of a
        Bc = np.ones((nr, nr)) if Bc is None else Bc
        Bd = np.ones((nr, nr)) if Bd is None else Bd
        return np.broadcast_to(np.sum((Bc @ W) * Bd, axis=1)[None, :], (D, nr))
    if Bc is None:
        # sum_d (sum_c Ac[a c] W[c d]) Ad[a d] Bd[b d]
        T = Ac @ W if Ac is not None else np.broadcast_to(W.sum(axis=0), (D, nr))
        return (T * Ad if Ad is not None else T) @ Bd.T
    if Bd is None:
        T = Ad @ W.T if Ad is not None else np.broadcast_to(W.sum(axis=1), (D, nr))
        return (T * Ac if Ac is not None else T) @ Bc.T
    if Ac is None:
        # sum_d Ad[a d] (sum_c Bc[b c] W[c d]) Bd[b d]
        return Ad @ ((Bc @ W) * Bd).T
    if Ad is None:
        return Ac @ ((Bd @ W.T) * Bc).T
    # both c and d couple to both a and b
    out = np.empty((D, nr))
    for s in range(0, D, chunk):
        X = Ac[s:s + chunk, None, :] * Bc[None, :, :]          # (a, b, c)
        Y = Ad[s:s + chunk, None, :] * Bd[None, :, :]          # (a, b, d)
        out[s:s + chunk] = np.sum((X @ W) * Y, axis=2)
    return out


def _swap12(s: int) -> int:
    return {1: 2, 2: 1}.get(s, s)


# ---------------------------------------------------------------------------
# correction


def correction_matrix_A(self_energy, vertex, blocks: KernelBlocks, targets, n_out: int) -> np.ndarray:
    """D x N_R matrix of the first-order mean correction.

    A = S_{a b} + 1/2 sum V_{(a b)(c d)} Phi_cd
        - sum [V_{(a c)(b d)} + n_L/2 V_{(a b)(c d)}] (K_RR^{-1})_cd

    with Phi = phi phi^T summed over channels, b, c, d over training samples
    and lower-index last-layer S and V. ``vertex`` is a pair matrix or a
    vertex provider with a ``contract`` method.
    """
    nr = blocks.n_train
    S = np.asarray(self_energy, dtype=np.float64)
    D = S.shape[0]
    if not hasattr(vertex, "contract"):
        vertex = DenseVertex(np.asarray(vertex), D)
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[1] != n_out:
        raise InferenceError(f"targets have {y.shape[1]} channels, expected {n_out}")
    phi = blocks.solve_rr(y)
    Phi = phi @ phi.T
    kinv = blocks.inverse_rr()
    X, _ = vertex.contract(0.5 * Phi - 0.5 * n_out * kinv, nr)
    _, Y = vertex.contract(kinv, nr)
    return S[:, :nr] + X - Y


@dataclass(frozen=True, eq=False)
class PosteriorResult:
    gp_mean: np.ndarray
    correction: np.ndarray
    epsilon: float
    metadata: dict = field(default_factory=dict)

    @property
    def corrected_mean(self) -> np.ndarray:
        return self.gp_mean + self.epsilon * self.correction

    def with_epsilon(self, epsilon: float) -> "PosteriorResult":
        return PosteriorResult(self.gp_mean, self.correction, float(epsilon), dict(self.metadata))

    def to_json(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "gp_mean": self.gp_mean.tolist(),
            "correction": self.correction.tolist(),
            "corrected_mean": self.corrected_mean.tolist(),
            "metadata": self.metadata,
        }


def corrected_posterior_mean(blocks: KernelBlocks, targets, A: np.ndarray, epsilon: float) -> PosteriorResult:
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    nr = blocks.n_train
    phi = blocks.solve_rr(y)
    gp = blocks.k_re.T @ phi
    proj = blocks.solve_rr(blocks.k_re).T  # K_ER K_RR^{-1}
    corr = (A[nr:] - proj @ A[:nr]) @ phi
    return PosteriorResult(gp, corr, float(epsilon), {"jitter": blocks.jitter})


def classify(result, labels) -> float:
    """Fraction of test points whose argmax channel equals the label."""
    mean = result.corrected_mean if isinstance(result, PosteriorResult) else np.asarray(result)
    labels = np.asarray(labels)
    if mean.ndim != 2 or labels.shape != (mean.shape[0],):
        raise InferenceError("one label per test point is required")
    if labels.size and (labels.min() < 0 or labels.max() >= mean.shape[1]):
        raise InferenceError(f"labels exceed the {mean.shape[1]} output channels")
    return float(np.mean(np.argmax(mean, axis=1) == labels))


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out
