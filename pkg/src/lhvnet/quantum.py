"""Exact quantum side of the triangle network.

Sources are two-qubit density matrices (4x4 complex arrays). The three
sources are wired as

    alpha -> (B1, C2),  beta -> (C3, A4),  gamma -> (A5, B6)

so the raw tensor product lives on wire order (B1, C2, C3, A4, A5, B6).
Each party measures its two qubits in a fixed order:

    Alice   (A5, A4)  = (qubit from gamma, qubit from beta)
    Bob     (B1, B6)  = (qubit from alpha, qubit from gamma)
    Charlie (C3, C2)  = (qubit from beta,  qubit from alpha)

Joint outcomes are flattened as ``idx = 16*a + 4*b + c``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from lhvnet.exceptions import ValidationError

HERMITIAN_ATOL = 1e-12
TRACE_ATOL = 1e-12
PSD_ATOL = 1e-10
NORM_ATOL = 1e-9

BELL_KINDS = ("phi_plus", "phi_minus", "psi_plus", "psi_minus")

_S = 1 / np.sqrt(2)
_BELL_VECTORS = {
    "phi_plus": np.array([_S, 0, 0, _S], dtype=complex),
    "phi_minus": np.array([_S, 0, 0, -_S], dtype=complex),
    "psi_plus": np.array([0, _S, _S, 0], dtype=complex),
    "psi_minus": np.array([0, _S, -_S, 0], dtype=complex),
}

# position of each canonical qubit (A5, A4, B1, B6, C3, C2) on wire order
# (B1, C2, C3, A4, A5, B6)
CANONICAL_PERMUTATION = (4, 3, 0, 5, 2, 1)


def _check_unit_interval(name: str, value: float) -> float:
    value = float(value)
    if not (0.0 <= value <= 1.0) or not np.isfinite(value):
        raise ValidationError(f"{name} must lie in [0, 1], got {value!r}")
    return value


def validate_density_matrix(rho, name: str = "rho") -> np.ndarray:
    """Check hermiticity, unit trace and PSD; return ``rho`` as a complex array."""
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValidationError(f"{name} must be square, got shape {rho.shape}")
    dim = rho.shape[0]
    if dim < 2 or dim & (dim - 1):
        raise ValidationError(f"{name} dimension must be a power of two, got {dim}")
    if not np.allclose(rho, rho.conj().T, atol=HERMITIAN_ATOL, rtol=0):
        raise ValidationError(f"{name} is not Hermitian")
    tr = np.trace(rho)
    if abs(tr - 1) > TRACE_ATOL:
        raise ValidationError(f"{name} has trace {tr.real:.15g}, expected 1")
    low = np.linalg.eigvalsh(rho).min()
    if low < -PSD_ATOL:
        raise ValidationError(f"{name} is not positive semidefinite (min eigenvalue {low:.3g})")
    return rho


def bell_state(kind: str) -> np.ndarray:
    """Projector onto one of the four Bell vectors."""
    try:
        vec = _BELL_VECTORS[kind]
    except KeyError:
        raise ValidationError(f"unknown Bell state {kind!r}; expected one of {BELL_KINDS}") from None
    return np.outer(vec, vec.conj())


def maximally_mixed(dim: int = 4) -> np.ndarray:
    return np.eye(dim, dtype=complex) / dim


def x_state(p: float, q: float, s: float) -> np.ndarray:
    """Two-qubit X state with diagonal (p, r, r, p), corners q and inner s.

    ``r = 0.5 - p``. Positivity requires ``|q| <= p`` and ``|s| <= r``.
    """
    p, q, s = float(p), float(q), float(s)
    if not 0.0 <= p <= 0.5:
        raise ValidationError(f"p must lie in [0, 0.5], got {p!r}")
    r = 0.5 - p
    # tolerance so that path endpoints like p = q = v/2 survive rounding
    if abs(q) > p + 1e-15:
        raise ValidationError(f"|q| = {abs(q)!r} exceeds p = {p!r}")
    if abs(s) > r + 1e-15:
        raise ValidationError(f"|s| = {abs(s)!r} exceeds r = {r!r}")
    rho = np.array(
        [[p, 0, 0, q],
         [0, r, s, 0],
         [0, s, r, 0],
         [q, 0, 0, p]],
        dtype=complex,
    )
    return validate_density_matrix(rho, "x_state")


def werner_state(v: float, base: str = "psi_minus") -> np.ndarray:
    """``v |base><base| + (1 - v) I/4``."""
    v = _check_unit_interval("visibility", v)
    return v * bell_state(base) + (1 - v) * maximally_mixed(4)


CLASSICAL_CORRELATED = np.diag([0.5, 0, 0, 0.5]).astype(complex)


def measurement_basis(u2: float, w2: float = 1.0) -> np.ndarray:
    """Entangled two-qubit basis; row ``a`` is the vector for outcome ``a``.

    M0 = u|00> + sqrt(1-u^2)|11>,  M1 = sqrt(1-u^2)|00> - u|11>,
    M2 = w|01> + sqrt(1-w^2)|10>,  M3 = sqrt(1-w^2)|01> - w|10>.
    ``w2 = 1`` gives the single-parameter family with M2 = |01>, M3 = |10>.
    """
    u2 = _check_unit_interval("u2", u2)
    w2 = _check_unit_interval("w2", w2)
    u, uc = np.sqrt(u2), np.sqrt(1 - u2)
    w, wc = np.sqrt(w2), np.sqrt(1 - w2)
    return np.array(
        [[u, 0, 0, uc],
         [uc, 0, 0, -u],
         [0, w, wc, 0],
         [0, wc, -w, 0]],
        dtype=complex,
    )


def projectors(basis: np.ndarray) -> np.ndarray:
    """Stack of rank-one projectors ``|M_a><M_a|``, shape (4, 4, 4)."""
    basis = np.asarray(basis, dtype=complex)
    return np.einsum("ai,aj->aij", basis, basis.conj())


@dataclass(frozen=True)
class NoisyPovm:
    effects: np.ndarray
    visibility: float


def noisy_povm(basis: np.ndarray, v: float) -> NoisyPovm:
    """White-noise detector: ``E_a = v P_a + (1 - v) I/4``."""
    v = _check_unit_interval("visibility", v)
    effects = v * projectors(basis) + (1 - v) * np.eye(4)[None] / 4
    return NoisyPovm(effects=effects, visibility=v)


Measurement = Union[np.ndarray, NoisyPovm]


def effects_of(measurement: Measurement) -> np.ndarray:
    """Effects (4, 4, 4) of either a basis (rows are vectors) or a NoisyPovm."""
    if isinstance(measurement, NoisyPovm):
        return measurement.effects
    return projectors(measurement)


@dataclass(frozen=True)
class NetworkConfig:
    """Three sources and three measurements of the triangle."""

    source_alpha: np.ndarray
    source_beta: np.ndarray
    source_gamma: np.ndarray
    meas_alice: Measurement = field(default_factory=lambda: measurement_basis(1.0, 1.0))
    meas_bob: Measurement = field(default_factory=lambda: measurement_basis(1.0, 1.0))
    meas_charlie: Measurement = field(default_factory=lambda: measurement_basis(1.0, 1.0))

    @classmethod
    def symmetric(cls, source: np.ndarray, measurement: Measurement) -> "NetworkConfig":
        return cls(source, source, source, measurement, measurement, measurement)

    @property
    def sources(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.source_alpha, self.source_beta, self.source_gamma)

    @property
    def measurements(self) -> tuple[Measurement, Measurement, Measurement]:
        return (self.meas_alice, self.meas_bob, self.meas_charlie)


def permute_qubits(rho: np.ndarray, order: tuple[int, ...]) -> np.ndarray:
    """Reorder the qubits of ``rho``: new qubit k is old qubit ``order[k]``."""
    n = len(order)
    tensor = rho.reshape((2,) * (2 * n))
    axes = list(order) + [k + n for k in order]
    return tensor.transpose(axes).reshape(2**n, 2**n)


def partial_trace(rho: np.ndarray, keep: tuple[int, ...]) -> np.ndarray:
    """Reduced state on the qubits listed in ``keep`` (in that order)."""
    n = int(np.log2(rho.shape[0]))
    traced = [k for k in range(n) if k not in keep]
    rho = permute_qubits(rho, tuple(keep) + tuple(traced))
    dk, dt = 2 ** len(keep), 2 ** len(traced)
    return np.einsum("ikjk->ij", rho.reshape(dk, dt, dk, dt))


def assemble_global_state(config: NetworkConfig) -> np.ndarray:
    """64x64 state on canonical qubit order (A5, A4, B1, B6, C3, C2)."""
    a, b, g = (validate_density_matrix(s, f"source_{n}") for s, n in zip(config.sources, "abg"))
    wire = np.kron(np.kron(a, b), g)
    return permute_qubits(wire, CANONICAL_PERMUTATION)


def clean_distribution(p: np.ndarray) -> np.ndarray:
    """Check normalization (1e-9) and clamp tiny negatives to zero."""
    p = np.asarray(p, dtype=float).reshape(64)
    if p.min() < -1e-12:
        raise ValidationError(f"distribution has negative entry {p.min():.3g}")
    if abs(p.sum() - 1) > NORM_ATOL:
        raise ValidationError(f"distribution sums to {p.sum():.15g}")
    return np.clip(p, 0.0, None)


def target_distribution(config: NetworkConfig) -> np.ndarray:
    """``p(abc) = Tr((E^a (x) E^b (x) E^c) rho_global)`` as a length-64 vector."""
    rho = assemble_global_state(config).reshape((4,) * 6)
    ea, eb, ec = (effects_of(m) for m in config.measurements)
    # Tr(E rho) = sum_ij E[i, j] rho[j, i]
    p = np.einsum("aij,bkl,cmn,jlnikm->abc", ea, eb, ec, rho, optimize=True).real
    return clean_distribution(p.ravel())


def rank_of(rho: np.ndarray, tol: float = 1e-9) -> int:
    """Number of eigenvalues above ``tol`` times the largest eigenvalue."""
    if tol <= 0:
        raise ValidationError("tol must be positive")
    evals = np.linalg.eigvalsh(np.asarray(rho, dtype=complex))
    return int(np.sum(evals > tol * evals.max()))

