"""Hermitian matrix arithmetic under the normalized trace.

Everything downstream (sampling, laws, control, Laplacians) runs on two
objects defined here: single Hermitian matrices, stored as plain complex
numpy arrays, and :class:`MatrixTuple`, a d-tuple of Hermitian matrices of
equal size stored as one (d, n, n) array.  The geometry is the one induced
by the normalized trace tr_n = Tr/n: the orthonormal basis
:func:`basis_element`, the inner product Sum_j tr_n(X_j Y_j), and the
functional calculus Q f(Lambda) Q*.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "NumericalError",
    "HERMITICITY_TOL",
    "MatrixTuple",
    "SpectralDecomposition",
    "apply_scalar_function",
    "assert_hermitian",
    "basis_element",
    "clip_function",
    "eigh",
    "hermitize",
    "inner_product",
    "l1_norm",
    "l2_norm",
    "normalized_trace",
    "operator_norm",
    "random_hermitian",
    "scalar_function_derivative",
]

# Absolute tolerance for the Hermiticity invariant; re-symmetrize beyond it.
HERMITICITY_TOL = 1e-12


class NumericalError(RuntimeError):
    """Raised when a numerical routine (eigensolver, optimizer) fails."""


def hermitize(a):
    """Return (A + A*)/2, silencing Hermiticity drift from arithmetic chains."""
    a = np.asarray(a, dtype=complex)
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def assert_hermitian(a, tol=HERMITICITY_TOL):
    """Validate the HermitianMatrix invariants; return the input unchanged.

    Raises ValueError if the matrix is not square, contains non-finite
    entries, or deviates from A = A* by more than ``tol`` entrywise.
    """
    a = np.asarray(a, dtype=complex)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    drift = np.max(np.abs(a - np.conj(np.swapaxes(a, -1, -2))))
    if drift > tol:
        raise ValueError(f"matrix is not Hermitian: asymmetry {drift:.3e} > {tol:.1e}")
    return a


def basis_element(n, i, j):
    """Orthonormal basis element E_ij of the n x n Hermitian matrices.

    The basis is orthonormal for <A, B> = tr_n(A B):

    * i == j: sqrt(n) e_i e_i^T,
    * i < j:  sqrt(n/2) (e_i e_j^T + e_j e_i^T),
    * i > j:  i sqrt(n/2) (e_i e_j^T - e_j e_i^T).

    Indices are 1-based.
    """
    if not (1 <= i <= n and 1 <= j <= n):
        raise ValueError(f"basis index ({i},{j}) out of range for n={n}")
    e = np.zeros((n, n), dtype=complex)
    if i == j:
        e[i - 1, i - 1] = np.sqrt(n)
    elif i < j:
        c = np.sqrt(n / 2.0)
        e[i - 1, j - 1] = c
        e[j - 1, i - 1] = c
    else:
        c = 1j * np.sqrt(n / 2.0)
        e[i - 1, j - 1] = c
        e[j - 1, i - 1] = -c
    return e


def normalized_trace(a):
    """tr_n(A) = Tr(A)/n as a real number.

    The imaginary part of the raw diagonal sum must vanish (below 1e-12
    relative to the magnitude); supports batched input (..., n, n).
    """
    a = np.asarray(a, dtype=complex)
    n = a.shape[-1]
    t = np.trace(a, axis1=-2, axis2=-1) / n
    im = np.max(np.abs(np.imag(t)))
    if im > 1e-12 * (1.0 + np.max(np.abs(t))):
        raise ValueError(f"trace has non-negligible imaginary part {im:.3e}")
    return np.real(t) if np.ndim(t) else float(np.real(t))


class SpectralDecomposition(NamedTuple):
    """Eigenvalues ascending, eigenvectors as columns of a unitary."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def eigh(a) -> SpectralDecomposition:
    """Spectral decomposition A = Q diag(w) Q* with w ascending.

    Backed by LAPACK through numpy; validates the reconstruction residual
    10^-10-level contract and raises NumericalError on failure to converge.
    """
    a = hermitize(assert_hermitian(a, tol=1e-10))
    try:
        w, q = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:  # non-convergence
        raise NumericalError(f"eigensolver failed: {exc}") from exc
    fro = np.linalg.norm(a)
    resid = np.linalg.norm(a - (q * w) @ np.conj(q.T))
    if resid > 1e-10 * (1.0 + fro):
        raise NumericalError(f"eigendecomposition residual {resid:.3e} too large")
    return SpectralDecomposition(w, q)


def clip_function(r):
    """The operator-norm cutoff phi_R(t) = max(min(t, R), -R) as a callable."""
    if r <= 0:
        raise ValueError(f"clip level must be positive, got {r}")
    return lambda x: np.clip(x, -r, r)


def _resolve_scalar_function(f) -> Callable[[np.ndarray], np.ndarray]:
    """Map a scalar-function tag to a vectorized callable on eigenvalues.

    Accepted tags: 'arctan', 'abs', 'identity', ('clip', R), a polynomial
    coefficient sequence (ascending powers), or any callable.
    """
    if callable(f):
        return f
    if isinstance(f, str):
        table = {"arctan": np.arctan, "abs": np.abs, "identity": lambda x: x}
        if f not in table:
            raise ValueError(f"unknown scalar function tag {f!r}")
        return table[f]
    if isinstance(f, tuple) and len(f) == 2 and f[0] == "clip":
        return clip_function(f[1])
    if isinstance(f, Sequence):
        coeffs = [float(c) for c in f]
        return lambda x: np.polynomial.polynomial.polyval(x, coeffs)
    raise ValueError(f"cannot interpret scalar function tag {f!r}")


def apply_scalar_function(a, f):
    """Continuous functional calculus f(A) = Q f(Lambda) Q* for Hermitian A."""
    fn = _resolve_scalar_function(f)
    w, q = eigh(a)
    return hermitize((q * fn(w)) @ np.conj(q.T))


def scalar_function_derivative(a, f, fprime):
    """Frechet derivative of the functional calculus at A, as a linear map.

    Returns ``apply(E)`` computing D f(A)[E] via the divided-difference
    (Daleckii-Krein) multiplier in the eigenbasis:

        D f(A)[E] = Q ( f[w_a, w_b] o (Q* E Q) ) Q*,

    where f[x, y] = (f(x) - f(y))/(x - y) off the diagonal and f'(x) on it.
    The map is self-adjoint for the real tr_n pairing, so it also transports
    gradients of downstream costs back through f.
    """
    fn = _resolve_scalar_function(f)
    dfn = _resolve_scalar_function(fprime)
    w, q = eigh(a)
    fw = fn(w)
    dx = w[:, None] - w[None, :]
    num = fw[:, None] - fw[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        mult = np.where(np.abs(dx) > 1e-12, num / np.where(dx == 0, 1.0, dx), 0.0)
    diag = dfn(0.5 * (w[:, None] + w[None, :]))
    mult = np.where(np.abs(dx) > 1e-12, mult, diag)

    def apply(e):
        return hermitize(q @ (mult * (np.conj(q.T) @ e @ q)) @ np.conj(q.T))

    return apply


def operator_norm(a):
    """Largest absolute eigenvalue of a Hermitian matrix."""
    w, _ = eigh(a)
    return float(np.max(np.abs(w)))


class MatrixTuple:
    """A d-tuple of n x n Hermitian matrices, stored as one (d, n, n) array.

    Immutable value semantics: the backing array is marked read-only, so
    tuples can be shared freely across workers.  Arithmetic returns new
    tuples and re-symmetrizes to absorb rounding drift.
    """

    __slots__ = ("data",)

    def __init__(self, data, validate=True):
        arr = np.array(data, dtype=complex)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
            raise ValueError(f"expected (d, n, n) data, got shape {arr.shape}")
        if validate:
            for k in range(arr.shape[0]):
                assert_hermitian(arr[k], tol=1e-10)
            drift = np.max(np.abs(arr - np.conj(np.swapaxes(arr, -1, -2))))
            if drift > HERMITICITY_TOL:
                arr = hermitize(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    # -- construction helpers ------------------------------------------------

    @classmethod
    def zero(cls, d, n):
        return cls(np.zeros((d, n, n), dtype=complex), validate=False)

    @classmethod
    def identity(cls, d, n):
        return cls(np.broadcast_to(np.eye(n, dtype=complex), (d, n, n)).copy(),
                   validate=False)

    @classmethod
    def from_components(cls, mats):
        return cls(np.stack([np.asarray(m, dtype=complex) for m in mats]))

    # -- basic attributes ----------------------------------------------------

    @property
    def d(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]

    def component(self, j):
        return self.data[j]

    def __iter__(self):
        return iter(self.data)

    def __repr__(self):
        return f"MatrixTuple(d={self.d}, n={self.dim})"

    # -- algebra ------------------------------------------------------------

    def _check_compatible(self, other):
        if not isinstance(other, MatrixTuple):
            raise TypeError("expected a MatrixTuple")
        if other.d != self.d or other.dim != self.dim:
            raise ValueError(
                f"shape mismatch: (d={self.d}, n={self.dim}) vs "
                f"(d={other.d}, n={other.dim})")

    def __add__(self, other):
        self._check_compatible(other)
        return MatrixTuple(hermitize(self.data + other.data), validate=False)

    def __sub__(self, other):
        self._check_compatible(other)
        return MatrixTuple(hermitize(self.data - other.data), validate=False)

    def __mul__(self, scalar):
        return MatrixTuple(hermitize(float(scalar) * self.data), validate=False)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def shift_identity(self, scalars):
        """Add s_j * I to component j; scalars is a length-d sequence or float."""
        s = np.broadcast_to(np.asarray(scalars, dtype=float), (self.d,))
        eye = np.eye(self.dim, dtype=complex)
        return MatrixTuple(self.data + s[:, None, None] * eye, validate=False)

    # -- geometry ------------------------------------------------------------

    def inner(self, other):
        self._check_compatible(other)
        return inner_product(self, other)

    def l2_norm(self):
        return l2_norm(self)

    def l1_norm(self):
        return l1_norm(self)

    def max_operator_norm(self):
        return max(operator_norm(m) for m in self.data)

    def apply_scalar_function(self, f):
        return MatrixTuple(
            np.stack([apply_scalar_function(m, f) for m in self.data]),
            validate=False)

    def clip(self, r):
        return self.apply_scalar_function(("clip", r))


def inner_product(x: MatrixTuple, y: MatrixTuple):
    """<X, Y> = Sum_j tr_n(X_j Y_j), real for Hermitian tuples."""
    if x.d != y.d or x.dim != y.dim:
        raise ValueError("inner_product: mismatched tuples")
    val = np.einsum("kij,kji->", x.data, y.data) / x.dim
    if abs(val.imag) > 1e-10 * (1.0 + abs(val)):
        raise ValueError(f"inner product has imaginary part {val.imag:.3e}")
    return float(val.real)


def l2_norm(x: MatrixTuple):
    return float(np.sqrt(max(inner_product(x, x), 0.0)))


def l1_norm(x: MatrixTuple):
    """Sum_j tr_n |X_j| via functional calculus with the absolute value."""
    total = 0.0
    for m in x.data:
        w, _ = eigh(m)
        total += float(np.sum(np.abs(w))) / x.dim
    return total


def random_hermitian(n, rng, scale=1.0):
    """A Gaussian Hermitian matrix for tests; NOT the GUE normalization."""
    g = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return hermitize(scale * g)
