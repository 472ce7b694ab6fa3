"""Cylindrical test functions and the GUE vs free Laplacian comparison.

A cylindrical function is U(X) = g(tr_n phi_1(X), ..., tr_n phi_m(X)) with a
polynomial outer g and self-adjoint polynomial inners phi_o.  With both
layers polynomial, the gradient, the Hessian bilinear form, the GUE
Laplacian (basis sum over the orthonormal Hermitian basis, prefactor 1/n^2)
and the free Laplacian ((tr (x) tr) of difference quotients of the gradient)
are all exact, so the comparison identity

    gue_laplacian = free_laplacian + correction

holds to rounding and is checkable at 1e-10.  The inner map is the identity
throughout; arctan never appears symbolically here (it enters the package
only through functional calculus).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .matrixcore import MatrixTuple, basis_element, hermitize
from .ncpoly import (NCPolynomial, format_polynomial, parse_polynomial,
                     words_up_to_degree)

__all__ = ["MultiPoly", "CylindricalFunction", "random_cylindrical",
           "parse_outer", "format_outer"]

GUE_LAPLACIAN_GUARD = 4096  # maximum d * n^2 for the exact basis sum


class MultiPoly:
    """A real polynomial in m commuting variables u_1..u_m.

    Stored as exponent-tuple -> coefficient; exact partial derivatives, which
    is the point: outer derivatives contribute no approximation error to the
    Laplacian comparison.
    """

    __slots__ = ("m", "terms")

    def __init__(self, m, terms=None):
        self.m = int(m)
        clean = {}
        for exps, coeff in (terms or {}).items():
            exps = tuple(int(e) for e in exps)
            if len(exps) != self.m or any(e < 0 for e in exps):
                raise ValueError(f"bad exponent tuple {exps} for m={self.m}")
            coeff = float(coeff) + clean.get(exps, 0.0)
            if abs(coeff) > 1e-15:
                clean[exps] = coeff
            elif exps in clean:
                del clean[exps]
        self.terms = clean

    @classmethod
    def variable(cls, m, o):
        exps = tuple(1 if i == o else 0 for i in range(m))
        return cls(m, {exps: 1.0})

    @classmethod
    def constant(cls, m, value):
        return cls(m, {(0,) * m: value})

    def degree(self):
        return max((sum(e) for e in self.terms), default=0)

    def __call__(self, u):
        """Evaluate at u of shape (..., m)."""
        u = np.asarray(u, dtype=float)
        out = np.zeros(u.shape[:-1])
        for exps, coeff in self.terms.items():
            mono = np.ones(u.shape[:-1])
            for i, e in enumerate(exps):
                if e:
                    mono = mono * u[..., i] ** e
            out = out + coeff * mono
        return out if out.ndim else float(out)

    def partial(self, o):
        terms = {}
        for exps, coeff in self.terms.items():
            if exps[o] == 0:
                continue
            new = list(exps)
            new[o] -= 1
            key = tuple(new)
            terms[key] = terms.get(key, 0.0) + coeff * exps[o]
        return MultiPoly(self.m, terms)

    def __repr__(self):
        return f"MultiPoly(m={self.m}, {format_outer(self)!r})"


@dataclass
class CylindricalFunction:
    """U(X) = outer(tr_n inner_1(X), ..., tr_n inner_m(X)) with polynomial layers."""

    outer: MultiPoly
    inners: list

    def __post_init__(self):
        if len(self.inners) != self.outer.m:
            raise ValueError("outer arity and inner count differ")
        for phi in self.inners:
            if not phi.is_selfadjoint():
                raise ValueError("inner polynomials must be self-adjoint")
        self._grad_polys = [phi.gradient() for phi in self.inners]

    @property
    def m(self):
        return self.outer.m

    @property
    def d(self):
        return max((phi.d for phi in self.inners), default=1)

    # -- evaluation ----------------------------------------------------------

    def inner_traces(self, x):
        """Vector of tr_n phi_o(X); batched input gives shape (..., m)."""
        vals = [phi.evaluate_trace(x) for phi in self.inners]
        return np.stack([np.asarray(v, dtype=float) for v in vals], axis=-1)

    def eval(self, x):
        u = self.inner_traces(x)
        return self.outer(u)

    def gradient(self, x):
        """(grad U)^j = sum_o g_o(u) D_j phi_o(X); exact outer partials.

        MatrixTuple input returns a MatrixTuple; batched (..., d, n, n) input
        returns an array of the same shape.
        """
        u = self.inner_traces(x)
        batched = not isinstance(x, MatrixTuple)
        data = x.data if isinstance(x, MatrixTuple) else np.asarray(x, dtype=complex)
        if data.ndim == 2:
            data = data[None]
        n = data.shape[-1]
        d = data.shape[-3]
        out = np.zeros(data.shape, dtype=complex)
        for o, phi in enumerate(self.inners):
            go = np.asarray(self.outer.partial(o)(u))
            for j in range(1, d + 1):
                dpoly = self._grad_polys[o][j - 1] if j <= phi.d else None
                if dpoly is None or not dpoly.terms:
                    continue
                out[..., j - 1, :, :] += go[..., None, None] * dpoly.evaluate(data)
        if batched:
            return out
        return MatrixTuple(hermitize(out), validate=False)

    # -- second order ----------------------------------------------------------

    def _outer_derivatives(self, u):
        m = self.m
        g1 = np.array([self.outer.partial(o)(u) for o in range(m)])
        g2 = np.array([[self.outer.partial(o).partial(q)(u) for q in range(m)]
                       for o in range(m)])
        return g1, g2

    def _cyclic_matrices(self, x):
        """D_j phi_o(X) for all o, j, as an (m, d, n, n) array."""
        data = x.data if isinstance(x, MatrixTuple) else np.asarray(x, dtype=complex)
        n = data.shape[-1]
        d = data.shape[-3]
        out = np.zeros((self.m, d, n, n), dtype=complex)
        for o, phi in enumerate(self.inners):
            for j in range(1, min(phi.d, d) + 1):
                dpoly = self._grad_polys[o][j - 1]
                if dpoly.terms:
                    out[o, j - 1] = dpoly.evaluate(data)
        return out

    def hessian_bilinear(self, x, a: MatrixTuple, b: MatrixTuple):
        """Hess U(X)[A, B]; symmetric in (A, B), matches finite differences.

        First term pairs outer second partials with cyclic derivatives; the
        second term pushes A through the difference quotients of the gradient
        and pairs with B under tr_n.
        """
        u = self.inner_traces(x)
        g1, g2 = self._outer_derivatives(u)
        dmats = self._cyclic_matrices(x)
        n = x.dim
        d = x.d
        tr_da = np.einsum("ojab,jba->oj", dmats, a.data) / n
        tr_db = np.einsum("ojab,jba->oj", dmats, b.data) / n
        term1 = float(np.real(np.einsum("oq,oi,qj->", g2, tr_da, tr_db)))

        term2 = 0.0 + 0.0j
        for o, phi in enumerate(self.inners):
            if abs(g1[o]) < 1e-300:
                continue
            for j in range(1, min(phi.d, d) + 1):
                grad_poly = self._grad_polys[o][j - 1]
                if not grad_poly.terms:
                    continue
                for i in range(1, d + 1):
                    tensor = grad_poly.free_difference_quotient(i)
                    if not tensor.terms:
                        continue
                    sharp = tensor.sharp(x, a.component(i - 1))
                    term2 += g1[o] * np.trace(sharp @ b.component(j - 1)) / n
        if abs(term2.imag) > 1e-9 * (1.0 + abs(term2)):
            raise ValueError(f"Hessian has imaginary part {term2.imag:.3e}")
        return term1 + float(term2.real)

    def gue_laplacian(self, x):
        """(1/n^2) sum over components and basis directions of Hess[E, E].

        Evaluated by the literal basis sum so that the comparison against the
        free Laplacian plus correction stays a genuine two-sided check.
        """
        n = x.dim
        d = x.d
        if d * n * n > GUE_LAPLACIAN_GUARD:
            raise ValueError(f"d*n^2 = {d * n * n} exceeds guard {GUE_LAPLACIAN_GUARD}")
        u = self.inner_traces(x)
        g1, g2 = self._outer_derivatives(u)
        dmats = self._cyclic_matrices(x)
        basis = np.stack([basis_element(n, i, j)
                          for i in range(1, n + 1) for j in range(1, n + 1)])

        # first Hessian term: sum_E sum_oq g_oq tr_n(D_ol E) tr_n(D_ql E)
        tr_de = np.einsum("ojab,eba->oje", dmats, basis) / n
        term1 = np.real(np.einsum("oq,ole,qle->", g2, tr_de, tr_de))

        # second term: sum_E <dq(grad)^l # E, E> per tensor word pair
        term2 = 0.0 + 0.0j
        cache = {}
        data = x.data

        def word_matrix(word):
            if word not in cache:
                if not word:
                    cache[word] = np.eye(n, dtype=complex)
                else:
                    cache[word] = word_matrix(word[:-1]) @ data[word[-1] - 1]
            return cache[word]

        for o, phi in enumerate(self.inners):
            if abs(g1[o]) < 1e-300:
                continue
            for l in range(1, min(phi.d, d) + 1):
                grad_poly = self._grad_polys[o][l - 1]
                tensor = grad_poly.free_difference_quotient(l)
                for (w1, w2), coeff in tensor.terms.items():
                    m1 = word_matrix(w1)
                    m2 = word_matrix(w2)
                    s = np.einsum("eab,bc,ecd,da->", basis, m1, basis, m2) / n
                    term2 += g1[o] * coeff * s
        if abs(term2.imag) > 1e-9 * (1.0 + abs(term2)):
            raise ValueError(f"GUE Laplacian has imaginary part {term2.imag:.3e}")
        return (float(term1) + float(term2.real)) / (n * n)

    def free_laplacian(self, x):
        """sum_l (tr (x) tr)(d_l (grad U)^l) at X; exact tensor traces."""
        u = self.inner_traces(x)
        g1, _ = self._outer_derivatives(u)
        d = x.d if isinstance(x, MatrixTuple) else np.asarray(x).shape[-3]
        total = 0.0 + 0.0j
        for o, phi in enumerate(self.inners):
            if abs(g1[o]) < 1e-300:
                continue
            for l in range(1, min(phi.d, d) + 1):
                tensor = self._grad_polys[o][l - 1].free_difference_quotient(l)
                if tensor.terms:
                    total += g1[o] * tensor.trace_pair(x)
        if abs(total.imag) > 1e-9 * (1.0 + abs(total)):
            raise ValueError(f"free Laplacian has imaginary part {total.imag:.3e}")
        return float(total.real)

    def correction_term(self, x):
        """(1/n^2) sum_{l,o,q} g_oq <D_l phi_o(X), D_l phi_q(X)>_{tr_n}."""
        n = x.dim
        if x.d * n * n > GUE_LAPLACIAN_GUARD:
            raise ValueError(f"d*n^2 = {x.d * n * n} exceeds guard {GUE_LAPLACIAN_GUARD}")
        u = self.inner_traces(x)
        _, g2 = self._outer_derivatives(u)
        dmats = self._cyclic_matrices(x)
        pair = np.einsum("olab,qlba->oq", dmats, dmats) / n
        val = np.einsum("oq,oq->", g2, pair)
        if abs(val.imag) > 1e-9 * (1.0 + abs(val)):
            raise ValueError("correction term has imaginary part")
        return float(val.real) / (n * n)

    def identity_check(self, x, tol=1e-10):
        """|gue_laplacian - free_laplacian - correction| < tol."""
        gap = abs(self.gue_laplacian(x) - self.free_laplacian(x)
                  - self.correction_term(x))
        return gap < tol

    # -- serialization -----------------------------------------------------------

    def to_json(self):
        return json.dumps({
            "outer": format_outer(self.outer),
            "inners": [format_polynomial(phi) for phi in self.inners],
        })

    @classmethod
    def from_json(cls, text, d):
        doc = json.loads(text)
        inners = [parse_polynomial(s, d) for s in doc["inners"]]
        outer = parse_outer(doc["outer"], len(inners))
        return cls(outer=outer, inners=inners)


# -- outer polynomial text format ------------------------------------------------


def parse_outer(text, m):
    """Parse an outer polynomial in u1..um, e.g. ``"u1^2*u2 - 0.5*u1"``."""
    nc = parse_polynomial(text.replace("u", "x"), m)
    terms = {}
    for word, coeff in nc.terms.items():
        if abs(coeff.imag) > 1e-15:
            raise ValueError("outer polynomial must have real coefficients")
        exps = [0] * m
        for letter in word:
            exps[letter - 1] += 1
        key = tuple(exps)
        terms[key] = terms.get(key, 0.0) + coeff.real
    return MultiPoly(m, terms)


def format_outer(p: MultiPoly):
    if not p.terms:
        return "0.0"
    parts = []
    for exps, coeff in sorted(p.terms.items(), key=lambda kv: (sum(kv[0]), kv[0])):
        factors = [repr(coeff)]
        for i, e in enumerate(exps):
            if e == 1:
                factors.append(f"u{i + 1}")
            elif e > 1:
                factors.append(f"u{i + 1}^{e}")
        parts.append("*".join(factors))
    return " + ".join(parts)


def random_cylindrical(rng, d, m_max=2, inner_degree=4, outer_degree=3):
    """A random cylindrical function for identity and finite-difference checks.

    Inners are self-adjoint with coefficients scaled down by word degree to
    keep evaluations well inside double precision.
    """
    m = int(rng.integers(1, m_max + 1))
    inners = []
    for _ in range(m):
        words = words_up_to_degree(d, inner_degree)
        terms = {}
        for word in words:
            if rng.random() < 0.5:
                continue
            coeff = rng.normal() / (1.0 + len(word)) ** 2
            terms[word] = terms.get(word, 0.0) + coeff
        poly = NCPolynomial(d, terms)
        poly = poly.symmetrize()
        if not poly.terms:
            poly = NCPolynomial(d, {(1,): 1.0})
        inners.append(poly)
    exps_pool = [e for e in _exponents(m, outer_degree)]
    terms = {}
    for exps in exps_pool:
        if rng.random() < 0.6:
            terms[exps] = rng.normal() / (1.0 + sum(exps)) ** 2
    outer = MultiPoly(m, terms)
    if not outer.terms:
        outer = MultiPoly.variable(m, 0)
    return CylindricalFunction(outer=outer, inners=inners)


def _exponents(m, max_total):
    if m == 0:
        yield ()
        return
    for first in range(max_total + 1):
        for rest in _exponents(m - 1, max_total - first):
            yield (first,) + rest
