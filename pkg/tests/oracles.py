"""Independent reference computations used to freeze expected values.

Nothing here goes through the package's permutation or trace code: every
formula contracts the source tensors with the measurement effects using the
wiring written out index by index.
"""

from itertools import product

import numpy as np

# bit-pair -> outcome for the computational-basis measurement (u2 = w2 = 1)
COMPUTATIONAL_LABEL = {(0, 0): 0, (1, 1): 1, (0, 1): 2, (1, 0): 3}


def classical_enumeration() -> np.ndarray:
    """Three sources each emitting 00 or 11, measured in the computational basis."""
    p = np.zeros(64)
    for x, y, z in product((0, 1), repeat=3):  # alpha, beta, gamma bits
        a = COMPUTATIONAL_LABEL[(z, y)]  # Alice holds (A5 from gamma, A4 from beta)
        b = COMPUTATIONAL_LABEL[(x, z)]  # Bob holds (B1 from alpha, B6 from gamma)
        c = COMPUTATIONAL_LABEL[(y, x)]  # Charlie holds (C3 from beta, C2 from alpha)
        p[16 * a + 4 * b + c] += 1 / 8
    return p


def pure_amplitude_distribution(psi_a, psi_b, psi_g, Ma, Mb, Mc) -> np.ndarray:
    """|<M_a M_b M_c | psi psi psi>|^2 by explicit amplitude contraction."""
    A = np.asarray(psi_a).reshape(2, 2)  # (B1, C2)
    B = np.asarray(psi_b).reshape(2, 2)  # (C3, A4)
    Gm = np.asarray(psi_g).reshape(2, 2)  # (A5, B6)
    ma = np.asarray(Ma).reshape(4, 2, 2).conj()  # (a, A5, A4)
    mb = np.asarray(Mb).reshape(4, 2, 2).conj()  # (b, B1, B6)
    mc = np.asarray(Mc).reshape(4, 2, 2).conj()  # (c, C3, C2)
    amp = np.zeros((4, 4, 4), dtype=complex)
    for b1, c2, c3, a4, a5, b6 in product((0, 1), repeat=6):
        src = A[b1, c2] * B[c3, a4] * Gm[a5, b6]
        if src == 0:
            continue
        amp += src * np.einsum("a,b,c->abc", ma[:, a5, a4], mb[:, b1, b6], mc[:, c3, c2])
    return (np.abs(amp) ** 2).ravel()


def mixed_distribution(rho_a, rho_b, rho_g, Ea, Eb, Ec) -> np.ndarray:
    """sum over all qubit indices of E_a E_b E_c rho_alpha rho_beta rho_gamma.

    p(abc) = sum Ea[a](a5 a4, a5' a4') Eb[b](b1 b6, b1' b6') Ec[c](c3 c2, c3' c2')
             * rho_alpha(b1' c2', b1 c2) rho_beta(c3' a4', c3 a4) rho_gamma(a5' b6', a5 b6)
    """
    ra = np.asarray(rho_a).reshape(2, 2, 2, 2)
    rb = np.asarray(rho_b).reshape(2, 2, 2, 2)
    rg = np.asarray(rho_g).reshape(2, 2, 2, 2)
    ea = np.asarray(Ea).reshape(4, 2, 2, 2, 2)
    eb = np.asarray(Eb).reshape(4, 2, 2, 2, 2)
    ec = np.asarray(Ec).reshape(4, 2, 2, 2, 2)
    p = np.einsum(
        "AvuVU,BxyXY,CtsTS,XSxs,TUtu,VYvy->ABC",
        # letters: Alice (v=A5, u=A4), Bob (x=B1, y=B6), Charlie (t=C3, s=C2);
        # primes are upper case; rho indices are (ket..., bra...) = (primed, unprimed)
        ea, eb, ec, ra, rb, rg,
    )
    return p.real.ravel()


def random_density(rng, rank: int, dim: int = 4) -> np.ndarray:
    X = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = X @ X.conj().T
    return rho / np.trace(rho).real


def random_pure(rng, dim: int = 4) -> np.ndarray:
    v = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    return v / np.linalg.norm(v)


def random_basis(rng) -> np.ndarray:
    X = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    Q, _ = np.linalg.qr(X)
    return Q.T  # rows are orthonormal vectors
