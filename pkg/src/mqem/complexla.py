"""Dense complex linear algebra used throughout the package.

Matrices are plain ``numpy`` arrays of dtype ``complex128``. Matrix functions
go through Hermitian eigendecompositions; dimensions here stay small (d <= 32)
so exactness matters more than speed.
"""

from __future__ import annotations

import numpy as np

HERMITIAN_TOL = 1e-12
PSD_CLIP = -1e-10

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
# Basis ordering |0>, |1> with sigma_z|0> = -|0>, sigma_z|1> = |1>.
SIGMA_Z = np.array([[-1, 0], [0, 1]], dtype=complex)
# sigma_minus lowers |1> -> |0>.
SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)
SIGMA_PLUS = SIGMA_MINUS.conj().T.copy()
IDENTITY_2 = np.eye(2, dtype=complex)


class LinAlgError(ValueError):
    """Raised when an input violates the precondition of a matrix function."""


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2:
        raise LinAlgError(f"expected a 2-d matrix, got shape {a.shape}")
    return a


def dagger(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


def is_hermitian(a: np.ndarray, tol: float = HERMITIAN_TOL) -> bool:
    a = np.asarray(a)
    if a.shape[-1] != a.shape[-2]:
        return False
    return bool(np.max(np.abs(a - dagger(a)), initial=0.0) <= tol)


def _require_hermitian(a: np.ndarray, tol: float, name: str) -> np.ndarray:
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise LinAlgError(f"{name}: matrix must be square, got {a.shape}")
    if not is_hermitian(a, tol):
        err = np.max(np.abs(a - a.conj().T))
        raise LinAlgError(f"{name}: matrix is not Hermitian (max |A - A^H| = {err:.3e})")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise LinAlgError(f"dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b


def kron_all(*ops) -> np.ndarray:
    out = np.ones((1, 1), dtype=complex)
    for op in ops:
        out = np.kron(out, op)
    return out


def eigh_hermitian(a, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues and eigenvectors of the Hermitian part of ``a``."""
    a = _require_hermitian(a, tol, "eigh_hermitian")
    return np.linalg.eigh(0.5 * (a + a.conj().T))


def hermitian_function(a, func, tol: float = 1e-10) -> np.ndarray:
    """Apply a scalar function to a Hermitian matrix through its spectrum."""
    w, v = eigh_hermitian(a, tol)
    return (v * func(w)) @ v.conj().T


def expm_hermitian_generator(h, t: float, tol: float = 1e-10) -> np.ndarray:
    """Return ``exp(-i h t)`` for Hermitian ``h``."""
    h = _require_hermitian(h, tol, "expm_hermitian_generator")
    w, v = np.linalg.eigh(0.5 * (h + h.conj().T))
    return (v * np.exp(-1j * w * t)) @ v.conj().T


def sqrtm_psd(a, clip: float = PSD_CLIP, tol: float = 1e-10) -> np.ndarray:
    """Positive square root of a positive semidefinite matrix.

    Eigenvalues in ``[clip, 0)`` are treated as zero. Anything more negative
    raises ``LinAlgError``.
    """
    w, v = eigh_hermitian(a, tol)
    if w.size and w.min() < clip:
        raise LinAlgError(f"sqrtm_psd: negative eigenvalue {w.min():.3e} below {clip:g}")
    # eigenvalues at round-off level of the largest one are zero
    w = np.where(w <= 8 * len(w) * np.finfo(float).eps * max(w.max(initial=0.0), 0.0), 0.0, w)
    return (v * np.sqrt(w)) @ v.conj().T


def polar_decompose(l) -> tuple[np.ndarray, np.ndarray]:
    """Polar decomposition ``l = U @ X`` with ``U`` unitary and ``X = sqrt(l^H l)``.

    From the SVD ``l = W S V^H`` we take ``U = W V^H``. Zero singular values
    pair the leftover left and right singular vectors in index order, so a
    rank-deficient ``l`` still yields a deterministic unitary.
    """
    l = as_matrix(l)
    if l.shape[0] != l.shape[1]:
        raise LinAlgError(f"polar_decompose: square matrix required, got {l.shape}")
    w, s, vh = np.linalg.svd(l)
    u = w @ vh
    x = (vh.conj().T * s) @ vh
    return u, 0.5 * (x + x.conj().T)


def partial_trace_last_qubit(a) -> np.ndarray:
    """Trace out the last tensor factor of dimension 2 (system ⊗ ancilla)."""
    a = as_matrix(a)
    n = a.shape[0]
    if a.shape[1] != n or n % 2:
        raise LinAlgError(f"partial_trace_last_qubit: need an even square matrix, got {a.shape}")
    d = n // 2
    return np.einsum("iaja->ij", a.reshape(d, 2, d, 2))


def _check_state(rho: np.ndarray, name: str, trace_tol: float) -> None:
    if not is_hermitian(rho, 1e-8):
        raise LinAlgError(f"{name} is not Hermitian")
    w = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))
    if w.min() < -1e-8:
        raise LinAlgError(f"{name} is not positive semidefinite (min eigenvalue {w.min():.3e})")
    tr = np.trace(rho).real
    if abs(tr - 1.0) > trace_tol:
        raise LinAlgError(f"{name} does not have unit trace (tr = {tr:.9f})")


def fidelity(rho, sigma, *, squared: bool = False, strict: bool = True,
             trace_tol: float = 1e-6) -> float:
    """State fidelity ``tr sqrt(sqrt(rho) sigma sqrt(rho))``.

    The default is the unsquared form. ``squared=True`` returns the Uhlmann
    convention (the square of the above). With ``strict=False`` the inputs
    are not checked for positivity or trace, which is what Monte Carlo
    estimates of states need; negative eigenvalues of the inner product are
    then clipped to zero.
    """
    rho = as_matrix(rho)
    sigma = as_matrix(sigma)
    if rho.shape != sigma.shape:
        raise LinAlgError(f"fidelity: shape mismatch {rho.shape} vs {sigma.shape}")
    if strict:
        _check_state(rho, "rho", trace_tol)
        _check_state(sigma, "sigma", trace_tol)
    sigma = 0.5 * (sigma + sigma.conj().T)
    root = sqrtm_psd(rho, clip=-1e-8)
    try:
        # nuclear norm of sqrt(rho) sqrt(sigma): no square roots of round-off eigenvalues
        f = float(np.sum(np.linalg.svd(root @ sqrtm_psd(sigma, clip=-1e-8), compute_uv=False)))
    except LinAlgError:
        inner = root @ sigma @ root
        w = np.linalg.eigvalsh(0.5 * (inner + inner.conj().T))
        f = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    return f * f if squared else f


def pure_state_fidelity(psi, sigma, *, squared: bool = False) -> float:
    """Fidelity between the pure state ``|psi><psi|`` and ``sigma``.

    For a pure first argument the general formula reduces to
    ``sqrt(<psi|sigma|psi>)``; the overlap is clipped at zero.
    """
    psi = np.asarray(psi, dtype=complex)
    overlap = float(np.real(np.vdot(psi, np.asarray(sigma) @ psi)))
    overlap = max(overlap, 0.0)
    return overlap if squared else float(np.sqrt(overlap))


def trace_distance(rho, sigma) -> float:
    rho = as_matrix(rho)
    sigma = as_matrix(sigma)
    if rho.shape != sigma.shape:
        raise LinAlgError(f"trace_distance: shape mismatch {rho.shape} vs {sigma.shape}")
    diff = rho - sigma
    w = np.linalg.eigvalsh(0.5 * (diff + diff.conj().T))
    return 0.5 * float(np.sum(np.abs(w)))


def ket(index: int, dim: int) -> np.ndarray:
    v = np.zeros(dim, dtype=complex)
    v[index] = 1.0
    return v


def projector(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    return np.outer(psi, psi.conj())


def normalize(psi, tol: float = 1e-12) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    n = np.linalg.norm(psi)
    if n < tol:
        raise LinAlgError("cannot normalize a null vector")
    return psi / n


def random_hermitian(dim: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return scale * 0.5 * (a + a.conj().T)


def random_density_matrix(dim: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    rank = dim if rank is None else rank
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


# Superoperators act on row-major vectorized matrices: vec(A X B) = kron(A, B^T) vec(X).

def left_right_superop(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.kron(a, b.T)


def dissipator_superop(l: np.ndarray) -> np.ndarray:
    """Superoperator of ``rho -> L rho L^H - {L^H L, rho}/2``."""
    d = l.shape[0]
    eye = np.eye(d, dtype=complex)
    ldl = l.conj().T @ l
    return np.kron(l, l.conj()) - 0.5 * (np.kron(ldl, eye) + np.kron(eye, ldl.T))


def commutator_superop(h: np.ndarray) -> np.ndarray:
    """Superoperator of ``rho -> -i [H, rho]``."""
    d = h.shape[0]
    eye = np.eye(d, dtype=complex)
    return -1j * (np.kron(h, eye) - np.kron(eye, h.T))
