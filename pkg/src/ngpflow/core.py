"""Value types shared by every stage: datasets, network configurations,
per-layer flow state, and the pair encoding used for the four-point vertex.

The vertex V_{(a1 a2)(a3 a4)} is symmetric within each pair and under the
exchange of the two pairs, so it is stored as an M x M symmetric matrix over
unordered sample pairs, M = D(D+1)/2, ordered row-major over the upper
triangle: (0,0), (0,1), ..., (0,D-1), (1,1), ...
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import special

MAX_CONDITION = 1e12


class KernelConditionError(ValueError):
    """Raised when a kernel is too ill-conditioned to be used as a metric."""

    def __init__(self, message: str, condition: float):
        super().__init__(message)
        self.condition = condition


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# pair encoding


def pair_index(a1: int, a2: int, D: int) -> int:
    """Position of the unordered pair {a1, a2} (1-based sample indices)."""
    if not (1 <= a1 <= D and 1 <= a2 <= D):
        raise IndexError(f"sample indices ({a1}, {a2}) outside 1..{D}")
    i, j = (a1 - 1, a2 - 1) if a1 <= a2 else (a2 - 1, a1 - 1)
    return i * D - i * (i - 1) // 2 + (j - i)


@lru_cache(maxsize=64)
def _pair_tables(D: int):
    first, second = np.triu_indices(D)
    lookup = np.empty((D, D), dtype=np.intp)
    lookup[first, second] = np.arange(first.size)
    lookup[second, first] = np.arange(first.size)
    for arr in (first, second, lookup):
        arr.flags.writeable = False
    return first, second, lookup


def pair_members(D: int) -> tuple[np.ndarray, np.ndarray]:
    """0-based (first, second) sample indices of every pair, first <= second."""
    first, second, _ = _pair_tables(D)
    return first, second


def pair_lookup(D: int) -> np.ndarray:
    """D x D integer table mapping 0-based (a, b) to the pair position."""
    return _pair_tables(D)[2]


def pair_count(D: int) -> int:
    return D * (D + 1) // 2


def expand_vertex(vertex: np.ndarray, D: int) -> np.ndarray:
    """Unpack an M x M pair matrix into the full D^4 tensor."""
    lk = pair_lookup(D)
    return np.asarray(vertex)[lk[:, :, None, None], lk[None, None, :, :]]


def compress_vertex(tensor: np.ndarray) -> np.ndarray:
    """Pack a D^4 tensor (assumed pair-symmetric) into its M x M pair matrix."""
    D = tensor.shape[0]
    f, s = pair_members(D)
    return tensor[f[:, None], s[:, None], f[None, :], s[None, :]]


# ---------------------------------------------------------------------------
# activations

_NUMERIC: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "tanh": np.tanh,
    "erf": special.erf,
    "sigmoid": special.expit,
    "softplus": lambda z: np.logaddexp(0.0, z),
    "gelu": lambda z: 0.5 * z * (1.0 + special.erf(z / math.sqrt(2.0))),
    "sin": np.sin,
    "swish": lambda z: z * special.expit(z),
}


def register_activation(tag: str, fn: Callable[[np.ndarray], np.ndarray]) -> None:
    """Make a smooth vectorized function available as ``numeric(tag)``.

    Gauss-Hermite convergence depends on how close the function's complex
    singularities sit to the real axis; tanh, with poles at +-i pi/2, needs
    far more nodes than the default for 1e-8 accuracy. Pass an explicit
    ``order`` to the flow for such functions.
    """
    _NUMERIC[tag] = fn


@dataclass(frozen=True)
class Activation:
    """Activation descriptor.

    ``kind`` is one of linear, relu, quadratic, monomial, polynomial, numeric.
    Polynomial kinds expose their coefficients so the Wick backend can treat
    them exactly; relu is flagged as kinked at the origin so quadrature can
    split its integration domain there.
    """

    kind: str
    power: int | None = None
    coeffs: tuple[float, ...] | None = None
    tag: str | None = None

    def __post_init__(self):
        kinds = {"linear", "relu", "quadratic", "monomial", "polynomial", "numeric"}
        if self.kind not in kinds:
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if self.kind == "monomial" and (self.power is None or self.power < 1):
            raise ValueError("monomial activation needs a power >= 1")
        if self.kind == "polynomial":
            if not self.coeffs:
                raise ValueError("polynomial activation needs coefficients")
            object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))
        if self.kind == "numeric" and self.tag not in _NUMERIC:
            raise ValueError(f"no numeric activation registered as {self.tag!r}")

    @classmethod
    def linear(cls):
        return cls("linear")

    @classmethod
    def relu(cls):
        return cls("relu")

    @classmethod
    def quadratic(cls):
        return cls("quadratic")

    @classmethod
    def monomial(cls, p: int):
        return cls("monomial", power=int(p))

    @classmethod
    def polynomial(cls, coeffs):
        return cls("polynomial", coeffs=tuple(coeffs))

    @classmethod
    def numeric(cls, tag: str):
        return cls("numeric", tag=tag)

    @property
    def polynomial_coeffs(self) -> tuple[float, ...] | None:
        """Coefficients a_0..a_p, or None for non-polynomial activations."""
        if self.kind == "linear":
            return (0.0, 1.0)
        if self.kind == "quadratic":
            return (0.0, 0.0, 1.0)
        if self.kind == "monomial":
            return (0.0,) * self.power + (1.0,)
        if self.kind == "polynomial":
            return self.coeffs
        return None

    @property
    def kinked(self) -> bool:
        return self.kind == "relu"

    def __call__(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "relu":
            return np.maximum(z, 0.0)
        if self.kind == "numeric":
            return _NUMERIC[self.tag](z)
        c = self.polynomial_coeffs
        return np.polynomial.polynomial.polyval(z, c)

    def to_json(self):
        if self.kind in ("linear", "relu", "quadratic"):
            return self.kind
        if self.kind == "monomial":
            return {"monomial": self.power}
        if self.kind == "polynomial":
            return {"polynomial": list(self.coeffs)}
        return {"numeric": self.tag}

    @classmethod
    def from_json(cls, obj) -> "Activation":
        if isinstance(obj, str):
            if obj in ("linear", "relu", "quadratic"):
                return cls(obj)
            if obj in _NUMERIC:
                return cls.numeric(obj)
            raise ValueError(f"unknown activation {obj!r}")
        if isinstance(obj, dict) and len(obj) == 1:
            (key, val), = obj.items()
            if key == "monomial":
                return cls.monomial(val)
            if key == "polynomial":
                return cls.polynomial(val)
            if key == "numeric":
                return cls.numeric(val)
        raise ValueError(f"cannot parse activation {obj!r}")


# ---------------------------------------------------------------------------
# dataset and network


@dataclass(frozen=True, eq=False)
class Dataset:
    """D inputs (rows) of dimension n0; the first ``train_count`` rows are the
    training inputs, the remaining ``test_count`` rows the test inputs.

    ``targets`` (train_count x n_L) holds training outputs when inference is
    wanted. ``labels`` optionally carries integer class labels for all D rows.
    """

    inputs: np.ndarray
    train_count: int | None = None
    test_count: int | None = None
    targets: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        x = np.array(self.inputs, dtype=np.float64, copy=True)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError("inputs must be a non-empty D x n0 matrix")
        if not np.all(np.isfinite(x)):
            raise ValueError("inputs contain non-finite entries")
        D = x.shape[0]
        nr = D if self.train_count is None else int(self.train_count)
        ne = D - nr if self.test_count is None else int(self.test_count)
        if nr < 0 or ne < 0 or nr + ne != D:
            raise ValueError(f"train_count {nr} + test_count {ne} != D = {D}")
        x.flags.writeable = False
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "train_count", nr)
        object.__setattr__(self, "test_count", ne)
        if self.targets is not None:
            y = np.array(self.targets, dtype=np.float64, copy=True)
            if y.ndim == 1:
                y = y[:, None]
            if y.shape[0] != nr:
                raise ValueError(f"targets have {y.shape[0]} rows, expected {nr}")
            if not np.all(np.isfinite(y)):
                raise ValueError("targets contain non-finite entries")
            y.flags.writeable = False
            object.__setattr__(self, "targets", y)
        if self.labels is not None:
            lab = np.array(self.labels, dtype=np.int64, copy=True)
            if lab.shape != (D,):
                raise ValueError("labels must have one entry per input")
            lab.flags.writeable = False
            object.__setattr__(self, "labels", lab)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.inputs.shape, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.inputs, dtype="<f8").tobytes())
        return h.hexdigest()


def _as_layer_list(v, L: int, name: str) -> tuple[float, ...]:
    if np.ndim(v) == 0:
        return (float(v),) * L
    v = tuple(float(x) for x in v)
    if len(v) != L:
        raise ValueError(f"{name} needs {L} entries, got {len(v)}")
    return v


@dataclass(frozen=True)
class NetworkConfig:
    """widths n_0..n_L, per-layer bias and weight variances, activation."""

    widths: tuple[int, ...]
    bias_vars: tuple[float, ...]
    weight_vars: tuple[float, ...]
    activation: Activation = field(default_factory=Activation.linear)

    def __post_init__(self):
        w = tuple(int(n) for n in self.widths)
        if len(w) < 2:
            raise ValueError("need at least one layer (widths n0, n1)")
        if any(n < 1 for n in w):
            raise ValueError("widths must be positive")
        L = len(w) - 1
        cb = _as_layer_list(self.bias_vars, L, "bias_vars")
        cw = _as_layer_list(self.weight_vars, L, "weight_vars")
        if any(c < 0 for c in cb):
            raise ValueError("bias variances must be non-negative")
        if any(c <= 0 for c in cw):
            raise ValueError("weight variances must be positive")
        act = self.activation
        if not isinstance(act, Activation):
            act = Activation.from_json(act)
        object.__setattr__(self, "widths", w)
        object.__setattr__(self, "bias_vars", cb)
        object.__setattr__(self, "weight_vars", cw)
        object.__setattr__(self, "activation", act)

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    @property
    def epsilon(self) -> float:
        """1/n_{L-1}; zero for a single layer, whose output is exactly Gaussian."""
        return 1.0 / self.widths[-2] if self.depth >= 2 else 0.0

    def ratio(self, layer: int) -> float:
        """n_l / n_{l-1}, the factor carried from layer l to l+1 (l >= 2)."""
        return self.widths[layer] / self.widths[layer - 1]

    def to_json(self) -> dict:
        return {
            "widths": list(self.widths),
            "bias_vars": list(self.bias_vars),
            "weight_vars": list(self.weight_vars),
            "activation": self.activation.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NetworkConfig":
        return cls(
            widths=obj["widths"],
            bias_vars=obj["bias_vars"],
            weight_vars=obj["weight_vars"],
            activation=Activation.from_json(obj["activation"]),
        )


# ---------------------------------------------------------------------------
# flow state


def _symmetrized(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return (a + a.T) / 2.0


@dataclass(frozen=True, eq=False)
class FlowState:
    """Core kernel, self-energy and pair-encoded vertex at one layer."""

    layer: int
    kernel: np.ndarray
    self_energy: np.ndarray
    vertex: np.ndarray

    def __post_init__(self):
        K = _symmetrized(self.kernel)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValueError("kernel must be square")
        D = K.shape[0]
        S = _symmetrized(self.self_energy)
        V = _symmetrized(self.vertex)
        M = pair_count(D)
        if S.shape != (D, D) or V.shape != (M, M):
            raise ValueError(f"expected S {D}x{D} and V {M}x{M}")
        for name, a in (("kernel", K), ("self_energy", S), ("vertex", V)):
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite entries")
        ev = np.linalg.eigvalsh(K)
        if ev[0] < -1e-8 * max(abs(ev[-1]), 1e-300):
            raise ValueError(f"kernel is not positive semidefinite (min eigenvalue {ev[0]:.3e})")
        if self.layer == 1 and (np.any(S != 0) or np.any(V != 0)):
            raise ValueError("first-layer state must carry zero corrections")
        object.__setattr__(self, "kernel", _frozen(K))
        object.__setattr__(self, "self_energy", _frozen(S))
        object.__setattr__(self, "vertex", _frozen(V))

    @classmethod
    def gaussian(cls, layer: int, kernel) -> "FlowState":
        D = np.shape(kernel)[0]
        M = pair_count(D)
        return cls(layer, kernel, np.zeros((D, D)), np.zeros((M, M)))

    @property
    def size(self) -> int:
        return self.kernel.shape[0]

    @property
    def is_gaussian(self) -> bool:
        return not (np.any(self.self_energy) or np.any(self.vertex))

    def vertex_tensor(self) -> np.ndarray:
        return expand_vertex(self.vertex, self.size)

    def to_json(self) -> dict:
        return {
            "layer": self.layer,
            "kernel": self.kernel.tolist(),
            "self_energy": self.self_energy.tolist(),
            "vertex": self.vertex.tolist(),
        }


@dataclass(frozen=True, eq=False)
class RaisedState:
    """Self-energy and vertex with indices raised by the inverse kernel."""

    self_energy: np.ndarray
    vertex: np.ndarray
    kernel_inverse: np.ndarray
    condition: float


def kernel_inverse(K, jitter: float = 0.0, max_condition: float = MAX_CONDITION):
    """Inverse of K + jitter*I after a condition-number gate.

    Returns (inverse, condition estimate).
    """
    K = _symmetrized(K)
    if jitter:
        K = K + jitter * np.eye(K.shape[0])
    ev = np.linalg.eigvalsh(K)
    cond = np.inf if ev[0] <= 0 else ev[-1] / ev[0]
    if not cond <= max_condition:
        raise KernelConditionError(
            f"kernel condition number {cond:.3e} exceeds {max_condition:.1e}; "
            "consider a jitter for degenerate inputs", cond)
    inv = np.linalg.inv(K)
    return (inv + inv.T) / 2.0, float(cond)


def transform_vertex(vertex: np.ndarray, metric: np.ndarray) -> np.ndarray:
    """Contract every index of the pair-encoded vertex with ``metric``."""
    D = metric.shape[0]
    V4 = expand_vertex(vertex, D)
    out = np.einsum("ai,bj,ijkl,ck,dl->abcd", metric, metric, V4, metric, metric,
                    optimize=True)
    out = compress_vertex(out)
    return (out + out.T) / 2.0


def raise_indices(state: FlowState, jitter: float = 0.0,
                  max_condition: float = MAX_CONDITION) -> RaisedState:
    inv, cond = kernel_inverse(state.kernel, jitter, max_condition)
    S = inv @ state.self_energy @ inv
    V = transform_vertex(state.vertex, inv) if np.any(state.vertex) else np.zeros_like(state.vertex)
    return RaisedState(_frozen((S + S.T) / 2.0), _frozen(V), _frozen(inv), cond)


def lower_indices(raised: RaisedState, kernel) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of raise_indices: returns (S, V) with lower indices."""
    K = _symmetrized(kernel)
    S = K @ raised.self_energy @ K
    V = transform_vertex(raised.vertex, K)
    return (S + S.T) / 2.0, V
