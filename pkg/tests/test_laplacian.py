import numpy as np
import pytest

from nclab.laplacian import (CylindricalFunction, MultiPoly, format_outer,
                             parse_outer, random_cylindrical)
from nclab.matrixcore import MatrixTuple, random_hermitian
from nclab.ncpoly import NCPolynomial
from nclab.randmat import RngStream, sample_haar_unitary


def rand_tuple(d, n, seed, scale=0.7):
    gen = RngStream(733, (seed,)).generator()
    return MatrixTuple(np.stack([random_hermitian(n, gen, scale)
                                 for _ in range(d)]))


def trace_square(d=1):
    outer = MultiPoly(d, {tuple(1 if i == o else 0 for i in range(d)): 1.0
                          for o in range(d)})
    inners = [NCPolynomial(d, {(j, j): 1.0}) for j in range(1, d + 1)]
    return CylindricalFunction(outer=outer, inners=inners)


def trace_square_squared():
    # U = (tr_n x^2)^2
    outer = MultiPoly(1, {(2,): 1.0})
    return CylindricalFunction(outer=outer,
                               inners=[NCPolynomial(1, {(1, 1): 1.0})])


# -- outer polynomials -----------------------------------------------------------


def test_multipoly_eval_and_partials():
    p = parse_outer("u1^2*u2 - 0.5*u1", 2)
    assert p(np.array([2.0, 3.0])) == pytest.approx(11.0)
    assert p.partial(0)(np.array([2.0, 3.0])) == pytest.approx(11.5)
    assert p.partial(1)(np.array([2.0, 3.0])) == pytest.approx(4.0)


def test_outer_format_round_trip():
    p = parse_outer("2.0*u1^3 - u2 + 0.25", 2)
    q = parse_outer(format_outer(p), 2)
    assert q.terms == p.terms


# -- eval -------------------------------------------------------------------------


def test_eval_trace_square():
    u = trace_square()
    x = rand_tuple(1, 5, seed=1)
    expect = float(np.real(np.trace(x.component(0) @ x.component(0)))) / 5
    assert u.eval(x) == pytest.approx(expect)


def test_eval_unitary_invariance(stream):
    u = random_cylindrical(stream.child("cyl").generator(), d=2)
    x = rand_tuple(2, 6, seed=2)
    v = sample_haar_unitary(6, stream.child("haar"))
    rotated = MatrixTuple(np.stack([v @ c @ v.conj().T for c in x.data]))
    assert u.eval(rotated) == pytest.approx(u.eval(x), abs=1e-10)


def test_eval_product_outer():
    # g = u1 u2 with inners (x, x^3) on diag(1, 2): 1.5 * 4.5 = 6.75
    outer = MultiPoly(2, {(1, 1): 1.0})
    inners = [NCPolynomial(1, {(1,): 1.0}), NCPolynomial(1, {(1, 1, 1): 1.0})]
    u = CylindricalFunction(outer=outer, inners=inners)
    x = MatrixTuple(np.diag([1.0, 2.0]).astype(complex)[None])
    assert u.eval(x) == pytest.approx(6.75)


# -- gradient -----------------------------------------------------------------------


def test_gradient_trace_square():
    u = trace_square()
    x = rand_tuple(1, 4, seed=3)
    g = u.gradient(x)
    assert np.allclose(g.data, 2.0 * x.data)


def test_gradient_constant_function():
    u = CylindricalFunction(outer=MultiPoly(1, {(0,): 3.0}),
                            inners=[NCPolynomial(1, {(1,): 1.0})])
    x = rand_tuple(1, 4, seed=4)
    assert np.max(np.abs(u.gradient(x).data)) == 0.0


def test_gradient_chain_rule_at_identity():
    u = trace_square_squared()
    x = MatrixTuple.identity(1, 3)
    # 2 tr(x^2) * 2x = 4 I at the identity
    assert np.allclose(u.gradient(x).data, 4.0 * np.eye(3))


def test_gradient_matches_finite_differences(stream):
    gen = stream.child("gradfd").generator()
    u = random_cylindrical(gen, d=2)
    x = rand_tuple(2, 4, seed=5)
    e = rand_tuple(2, 4, seed=6, scale=0.3)
    g = u.gradient(x)
    analytic = sum(float(np.real(np.trace(g.component(j) @ e.component(j)))) / 4
                   for j in range(2))
    h = 1e-5
    up = u.eval(MatrixTuple(x.data + h * e.data, validate=False))
    dn = u.eval(MatrixTuple(x.data - h * e.data, validate=False))
    fd = (up - dn) / (2 * h)
    assert analytic == pytest.approx(fd, rel=1e-6, abs=1e-8)


# -- Hessian ------------------------------------------------------------------------


def test_hessian_trace_square():
    u = trace_square()
    x = rand_tuple(1, 4, seed=7)
    a = rand_tuple(1, 4, seed=8, scale=0.5)
    expect = 2.0 * float(np.real(np.trace(a.component(0) @ a.component(0)))) / 4
    assert u.hessian_bilinear(x, a, a) == pytest.approx(expect, abs=1e-12)


def test_hessian_vanishes_for_linear():
    outer = MultiPoly(1, {(1,): 2.0})
    u = CylindricalFunction(outer=outer, inners=[NCPolynomial(1, {(1,): 1.0})])
    x = rand_tuple(1, 4, seed=9)
    a = rand_tuple(1, 4, seed=10)
    assert u.hessian_bilinear(x, a, a) == pytest.approx(0.0, abs=1e-14)


def test_hessian_symmetry(stream):
    gen = stream.child("hess").generator()
    u = random_cylindrical(gen, d=2)
    x = rand_tuple(2, 4, seed=11)
    a = rand_tuple(2, 4, seed=12, scale=0.5)
    b = rand_tuple(2, 4, seed=13, scale=0.5)
    assert u.hessian_bilinear(x, a, b) == pytest.approx(
        u.hessian_bilinear(x, b, a), abs=1e-9)


def test_hessian_matches_second_differences(stream):
    gen = stream.child("hessfd").generator()
    u = random_cylindrical(gen, d=2)
    x = rand_tuple(2, 4, seed=14)
    a = rand_tuple(2, 4, seed=15, scale=0.4)
    h = 1e-3
    up = u.eval(MatrixTuple(x.data + h * a.data, validate=False))
    dn = u.eval(MatrixTuple(x.data - h * a.data, validate=False))
    fd = (up - 2.0 * u.eval(x) + dn) / (h * h)
    assert u.hessian_bilinear(x, a, a) == pytest.approx(fd, rel=1e-5, abs=1e-5)


# -- Laplacians ----------------------------------------------------------------------


def test_gue_laplacian_trace_squares_exact():
    for d in (1, 2):
        u = trace_square(d)
        x = rand_tuple(d, 3, seed=16)
        assert u.gue_laplacian(x) == pytest.approx(2.0 * d, abs=1e-10)


def test_gue_laplacian_constant():
    u = CylindricalFunction(outer=MultiPoly(1, {(0,): 1.5}),
                            inners=[NCPolynomial(1, {(1,): 1.0})])
    assert u.gue_laplacian(rand_tuple(1, 3, seed=17)) == pytest.approx(0.0)


def test_gue_laplacian_guard():
    u = trace_square()
    with pytest.raises(ValueError):
        u.gue_laplacian(MatrixTuple.zero(1, 70))


def test_free_laplacian_trace_square():
    u = trace_square()
    assert u.free_laplacian(rand_tuple(1, 4, seed=18)) == pytest.approx(2.0)


def test_free_laplacian_quartic_at_zero():
    outer = MultiPoly(1, {(1,): 1.0})
    u = CylindricalFunction(outer=outer,
                            inners=[NCPolynomial(1, {(1,) * 4: 1.0})])
    assert u.free_laplacian(MatrixTuple.zero(1, 4)) == pytest.approx(0.0)


def test_correction_zero_for_linear_outer():
    u = trace_square()
    x = rand_tuple(1, 4, seed=19)
    assert u.correction_term(x) == pytest.approx(0.0, abs=1e-14)
    assert u.gue_laplacian(x) == pytest.approx(u.free_laplacian(x), abs=1e-10)


def test_correction_trace_square_squared():
    u = trace_square_squared()
    n = 4
    x = rand_tuple(1, n, seed=20)
    tr_x2 = float(np.real(np.trace(x.component(0) @ x.component(0)))) / n
    assert u.correction_term(x) == pytest.approx(8.0 * tr_x2 / n ** 2,
                                                 abs=1e-12)
    assert u.identity_check(x, tol=1e-10)


def test_identity_random_instances(stream):
    gen = stream.child("identity").generator()
    for case in range(50):
        n = (3, 4, 6)[case % 3]
        u = random_cylindrical(gen, d=2)
        x = MatrixTuple(np.stack([random_hermitian(n, gen, 0.8)
                                  for _ in range(2)]))
        gap = abs(u.gue_laplacian(x) - u.free_laplacian(x)
                  - u.correction_term(x))
        assert gap < 1e-10


def test_free_laplacian_scale_covariance():
    # U = tr x^4: free Laplacian 4 sum_k tr(x^k) tr(x^(2-k)) scales as s^2
    outer = MultiPoly(1, {(1,): 1.0})
    u = CylindricalFunction(outer=outer,
                            inners=[NCPolynomial(1, {(1,) * 4: 1.0})])
    x = rand_tuple(1, 5, seed=21)
    s = 1.7
    scaled = MatrixTuple(s * x.data, validate=False)
    assert u.free_laplacian(scaled) == pytest.approx(
        s ** 2 * u.free_laplacian(x), rel=1e-10)


def test_serialization_round_trip(stream):
    u = random_cylindrical(stream.child("ser").generator(), d=2)
    x = rand_tuple(2, 4, seed=22)
    back = CylindricalFunction.from_json(u.to_json(), d=2)
    assert back.eval(x) == pytest.approx(u.eval(x), abs=1e-12)


def test_generator_consistency_with_dynamics(stream):
    # d/dt E U(X_t) for the zero-control SDE matches
    # 0.5 beta_C^2 Hess[1,1] + 0.5 beta_F^2 gue_laplacian = (bc^2+bf^2) d
    from nclab.control import euler_maruyama
    from nclab.harness import lq_problem

    d, n = 2, 8
    beta_c, beta_f = 0.7, 0.9
    u = trace_square(d)
    x0 = MatrixTuple.zero(d, n)
    ident = MatrixTuple.identity(d, n)
    drift_rate = (0.5 * beta_c ** 2 * u.hessian_bilinear(x0, ident, ident)
                  + 0.5 * beta_f ** 2 * u.gue_laplacian(x0))
    assert drift_rate == pytest.approx((beta_c ** 2 + beta_f ** 2) * d,
                                       abs=1e-10)

    problem = lq_problem(n, d=d, beta_c=beta_c, beta_f=beta_f, T=1.0)
    steps, paths = 4, 400
    total = 0.0
    base = stream.child("gen")
    for p in range(paths):
        path = euler_maruyama(problem, None, steps, base.child(p))
        total += u.eval(path.states[-1])
    slope = total / paths  # U(X_0) = 0, horizon 1
    assert slope == pytest.approx(drift_rate, rel=0.05)
