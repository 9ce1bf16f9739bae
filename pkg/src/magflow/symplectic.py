"""
Linear symplectic algebra on R^{2n} with the standard form ``omega(a, b) = a^T J b``.

The main construction perturbs a unipotent symplectic matrix into hyperbolic
ones: find a P-invariant Lagrangian subspace ``V``, complete a basis of ``V``
to a symplectic basis, and scale ``V`` by ``e^t`` and its complement by
``e^-t`` in that basis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import DegeneracyError, DomainError, NotUnipotentError

SYMPLECTIC_TOL = 1e-9
SPEC_TOL = 1e-7
NILPOTENT_TOL = 1e-10
CLUSTER_TOL = 1e-3
SEPARATION_TOL = 1e-1
INVARIANCE_TOL = 1e-8
TIE_TOL = 1e-10


def standard_form(n: int) -> np.ndarray:
    """``J = [[0, I], [-I, 0]]`` on R^{2n}."""
    I = np.eye(n)
    Z = np.zeros((n, n))
    return np.block([[Z, I], [-I, Z]])


def omega(a, b, J=None) -> np.ndarray:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if J is None:
        J = standard_form(len(a) // 2)
    return a.T @ J @ b


def _as_array(P) -> np.ndarray:
    P = np.asarray(getattr(P, "entries", P), float)
    if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] % 2:
        raise DomainError(f"expected an even square matrix, got shape {P.shape}")
    return P


def symplectic_residual(P) -> float:
    """``||P^T J P - J||_F``."""
    P = _as_array(P)
    J = standard_form(len(P) // 2)
    return float(np.linalg.norm(P.T @ J @ P - J))


def is_symplectic(P, tol: float = SYMPLECTIC_TOL) -> bool:
    return symplectic_residual(P) < tol


@dataclass(frozen=True)
class SymplecticMatrix:
    entries: np.ndarray

    def __post_init__(self):
        P = _as_array(self.entries).copy()
        res = symplectic_residual(P)
        if not res < SYMPLECTIC_TOL:
            raise DomainError(f"matrix is not symplectic (residual {res:.2e})")
        P.setflags(write=False)
        object.__setattr__(self, "entries", P)

    @property
    def n(self) -> int:
        return len(self.entries) // 2


def symplectic_inverse(P) -> np.ndarray:
    """``P^{-1} = -J P^T J``."""
    P = _as_array(P)
    J = standard_form(len(P) // 2)
    return -J @ P.T @ J


@dataclass(frozen=True)
class SpectralType:
    unipotent: bool
    hyperbolic: bool
    indeterminate: bool
    eigenvalues: tuple


def _nilpotent(Nm: np.ndarray, tol: float = NILPOTENT_TOL) -> bool:
    k = len(Nm)
    scale = 1.0 + np.linalg.norm(Nm)
    return bool(np.linalg.norm(np.linalg.matrix_power(Nm, k)) <= tol * scale**k)


def classify(P, spec_tol: float = SPEC_TOL) -> SpectralType:
    """Unipotent / hyperbolic classification of a symplectic matrix.

    Unipotency is decided spectrally (all ``|lambda - 1| < spec_tol``) or,
    when rounding has split a Jordan block around 1, by nilpotency of
    ``P - I``.  An eigenvalue whose modulus lies within ten-fold of
    ``spec_tol`` of the unit circle without being close to 1 makes the answer
    indeterminate.
    """
    P = _as_array(P)
    ev = np.linalg.eigvals(P)
    dist1 = np.abs(ev - 1.0)
    modulus_gap = np.abs(np.abs(ev) - 1.0)
    unipotent = bool(np.all(dist1 < spec_tol))
    if not unipotent and np.all(dist1 < CLUSTER_TOL):
        unipotent = _nilpotent(P - np.eye(len(P)))
    hyperbolic = bool(np.all(modulus_gap > spec_tol))
    off_one = dist1 >= CLUSTER_TOL
    border = (modulus_gap > spec_tol / 10.0) & (modulus_gap <= 10.0 * spec_tol)
    return SpectralType(unipotent, hyperbolic, bool(np.any(off_one & border)), tuple(ev))


def is_unipotent(P, spec_tol: float = SPEC_TOL) -> bool:
    return classify(P, spec_tol).unipotent


def is_hyperbolic(P, spec_tol: float = SPEC_TOL) -> bool:
    return classify(P, spec_tol).hyperbolic


def _null_space(A: np.ndarray, rtol: float) -> np.ndarray:
    if A.size == 0:
        return np.eye(A.shape[1])
    _, s, vh = np.linalg.svd(A)
    scale = max(s[0], 1.0) if len(s) else 1.0
    rank = int(np.sum(s > rtol * scale))
    return vh[rank:].T


def _canonical_vector(K: np.ndarray) -> np.ndarray:
    """First standard basis vector with a nonzero projection onto span(K), projected."""
    for i in range(K.shape[0]):
        proj = K @ K[i]
        if np.linalg.norm(proj) > 1e-8:
            return proj / np.linalg.norm(proj)
    raise DegeneracyError("empty kernel")  # pragma: no cover


def invariant_lagrangian(P, kernel_tol: float = 1e-6):
    """Orthonormal basis (columns) of a P-invariant Lagrangian subspace.

    Greedy: extend an invariant isotropic ``V`` by a vector ``v`` of its
    symplectic orthogonal with ``(P - I) v`` in ``V``.  Such a vector exists
    because ``P`` induces a unipotent map on ``V^omega / V``.  Ties go to the
    lowest-numbered coordinate direction.
    """
    P = _as_array(P)
    if not is_unipotent(P):
        raise NotUnipotentError("invariant_lagrangian needs a unipotent matrix")
    dim = len(P)
    n = dim // 2
    J = standard_form(n)
    V = np.zeros((dim, 0))
    while V.shape[1] < n:
        Vw = _null_space(V.T @ J, 1e-10)  # symplectic orthogonal of V
        # complement of V inside V^omega, Euclidean-orthogonal to V
        C = Vw - V @ (V.T @ Vw)
        Uc, _, _ = np.linalg.svd(C, full_matrices=False)
        Vp = Uc[:, : dim - 2 * V.shape[1]]
        basis = np.hstack([V, Vp])
        coords = np.linalg.lstsq(basis, P @ Vp, rcond=None)[0]
        Q = coords[V.shape[1]:]  # induced map on the quotient
        Mq = Q - np.eye(Q.shape[0])
        _, s, vh = np.linalg.svd(Mq)
        scale = max(1.0, np.linalg.norm(P, 2))
        # exact ties (e.g. P = I) share the kernel; otherwise take the best direction
        k = max(int(np.sum(s <= TIE_TOL * scale)), int(s[-1] <= kernel_tol * scale))
        if k == 0:
            raise DegeneracyError(
                f"no invariant direction at step {V.shape[1] + 1}: smallest singular value "
                f"{s[-1]:.3e} of the induced map minus I exceeds {kernel_tol * scale:.1e}")
        K = Vp @ vh[len(s) - k:].T
        v = _canonical_vector(np.linalg.qr(K)[0])
        v = v - V @ (V.T @ v)
        V = np.hstack([V, (v / np.linalg.norm(v))[:, None]])
    iso = float(np.max(np.abs(V.T @ J @ V)))
    PV = P @ V
    leak = float(np.linalg.norm(PV - V @ (V.T @ PV)) / max(1.0, np.linalg.norm(P, 2)))
    if iso > INVARIANCE_TOL or leak > INVARIANCE_TOL:
        raise DegeneracyError(f"Lagrangian check failed: isotropy {iso:.2e}, invariance {leak:.2e}")
    return V


def complete_symplectic_basis(E: np.ndarray) -> np.ndarray:
    """``[E, F]`` with ``omega(e_i, f_j) = delta_ij`` for an orthonormal Lagrangian ``E``.

    ``F = -J E`` works because ``J`` is orthogonal and maps a Lagrangian
    subspace to a complementary one.
    """
    E = np.asarray(E, float)
    J = standard_form(E.shape[0] // 2)
    return np.hstack([E, -J @ E])


def hyperbolic_perturbation(P, t: float) -> np.ndarray:
    """``P_t = B diag(e^t I, e^-t I) B^{-1} P`` for an adapted symplectic basis ``B``.

    In the basis ``B`` this is the diagonal scaling composed with ``P``.
    """
    P = _as_array(P)
    if t == 0.0:
        if not is_unipotent(P):
            raise NotUnipotentError("hyperbolic_perturbation needs a unipotent matrix")
        return P.copy()
    B = complete_symplectic_basis(invariant_lagrangian(P))
    n = len(P) // 2
    Binv = symplectic_inverse(B)
    D = np.diag(np.concatenate([np.full(n, np.exp(t)), np.full(n, np.exp(-t))]))
    return B @ D @ Binv @ P


@dataclass
class BlockSplit:
    A: np.ndarray
    B: np.ndarray
    basis: np.ndarray
    indeterminate: bool


def unipotent_block_split(P, cluster_tol: float = CLUSTER_TOL) -> BlockSplit:
    """Split off the generalized eigenspace of 1 and its symplectic orthogonal."""
    P = _as_array(P)
    dim = len(P)
    J = standard_form(dim // 2)
    ev = np.linalg.eigvals(P)
    d = np.abs(ev - 1.0)
    indeterminate = bool(np.any((d > cluster_tol) & (d <= SEPARATION_TOL)))
    T, Z, k = linalg.schur(P, output="real",
                           sort=lambda re, im: abs(complex(re, im) - 1.0) <= cluster_tol)
    V = Z[:, :k]
    W = _null_space(V.T @ J, 1e-10) if k else np.eye(dim)
    basis = np.hstack([V, W])
    M = np.linalg.solve(basis, P @ basis)
    return BlockSplit(M[:k, :k], M[k:, k:], basis, indeterminate)


# random generators ----------------------------------------------------------

def random_symplectic(rng: np.random.Generator, n: int, factors: int = 3,
                      scale: float = 0.7) -> np.ndarray:
    """Product of random symplectic shears and orthogonal-symplectic rotations."""
    I = np.eye(n)
    Z = np.zeros((n, n))
    S = np.eye(2 * n)
    for _ in range(factors):
        A = rng.normal(scale=scale, size=(n, n))
        Sym = 0.5 * (A + A.T)
        lower = rng.random() < 0.5
        shear = np.block([[I, Z], [Sym, I]]) if lower else np.block([[I, Sym], [Z, I]])
        H = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
        U, _ = np.linalg.qr(H)
        rot = np.block([[U.real, -U.imag], [U.imag, U.real]])
        S = S @ shear @ rot
    return S


def random_unipotent(rng: np.random.Generator, n: int, scale: float = 0.7) -> np.ndarray:
    """Conjugate of an upper block-triangular unipotent normal form by a random symplectic matrix."""
    A = np.eye(n) + np.triu(rng.normal(scale=scale, size=(n, n)), 1)
    X = rng.normal(scale=scale, size=(n, n))
    Sig = 0.5 * (X + X.T)
    Z = np.zeros((n, n))
    I = np.eye(n)
    normal = np.block([[A, Z], [Z, np.linalg.inv(A).T]]) @ np.block([[I, Sig], [Z, I]])
    S = random_symplectic(rng, n)
    return S @ normal @ symplectic_inverse(S)
