import json
import math

import numpy as np
import pytest

from nclab import control as ctl
from nclab.gaussdisc import TimeGrid, noise_table
from nclab.harness import lq_problem, quartic_problem
from nclab.laplacian import CylindricalFunction, MultiPoly
from nclab.matrixcore import MatrixTuple, inner_product, random_hermitian
from nclab.ncpoly import NCPolynomial
from nclab.randmat import gue_increments, sample_gue_tuple

LQ_CONTINUOUS = 0.625 * math.log(3.0)
BD_ORACLE = 0.5 * math.log(2.0)


def small_cfg(**kw):
    base = dict(train_samples=24, val_samples=96, max_iters=150, chunk=8)
    base.update(kw)
    return ctl.OptimizerConfig(**base)


def quadratic_psi(coef=0.5):
    outer = MultiPoly(1, {(1,): coef})
    return CylindricalFunction(outer=outer,
                               inners=[NCPolynomial(1, {(1, 1): 1.0})])


# -- simulate_discrete -------------------------------------------------------------


def test_simulate_zero_policy_tracks_common_noise(stream):
    problem = lq_problem(4, beta_c=1.0, beta_f=0.0)
    policy = ctl.zero_policy(problem, K=2, N=1, R=4.0)
    grid = problem.grid(2)
    path = gue_increments(4, 1, grid.times, stream.child("gue"))
    bundle = ctl.simulate_discrete(problem, policy, grid, path)
    table = noise_table(1, grid.delta)
    for j1 in table.indices:
        for j2 in table.indices:
            got = bundle.state(2, (j1, j2)).component(0)
            want = (table.omega(j1) + table.omega(j2)) * np.eye(4)
            assert np.allclose(got, want, atol=1e-12)


def test_simulate_constant_node_shift(stream):
    n, d = 3, 1
    problem = lq_problem(n, beta_c=0.0, beta_f=0.0,
                         x0=MatrixTuple.identity(d, n))
    a = random_hermitian(n, stream.child("a").generator(), scale=0.5)
    policy = ctl.zero_policy(problem, K=1, N=1, R=8.0, kind="const")
    policy.steps[0].values[...] = a[None, None]
    grid = problem.grid(1)
    path = gue_increments(n, d, grid.times, stream.child("gue2"))
    bundle = ctl.simulate_discrete(problem, policy, grid, path)
    assert np.allclose(bundle.state(1, (0,)).component(0), np.eye(n) + a,
                       atol=1e-12)


def test_simulate_states_bin_independent_without_common_noise(stream):
    problem = lq_problem(4, beta_c=0.0, beta_f=1.0)
    # non-collapsed tree with beta_c = 0: constant-node policy over N=1 bins
    policy = ctl.zero_policy(problem, K=2, N=1, R=4.0)
    object.__setattr__ if False else None
    policy.collapse_bins = False
    steps = []
    for i in range(1, 3):
        paths = 4 ** i
        steps.append(ctl.PolicyStep(kind="const",
                                    values=np.zeros((paths, 1, 4, 4), complex)))
    policy.steps = steps
    grid = problem.grid(2)
    path = gue_increments(4, 1, grid.times, stream.child("gue3"))
    bundle = ctl.simulate_discrete(problem, policy, grid, path)
    ref = bundle.state(2, (0, 0)).data
    for j1 in (-2, -1, 0, 1):
        assert np.allclose(bundle.state(2, (j1, 1)).data, ref, atol=1e-12)


def test_simulate_rejects_mismatched_grid(stream):
    problem = lq_problem(4)
    policy = ctl.zero_policy(problem, K=2, N=1, R=4.0)
    path = gue_increments(4, 1, problem.grid(3).times, stream.child("bad"))
    with pytest.raises(ValueError):
        ctl.simulate_discrete(problem, policy, problem.grid(3), path)


# -- discrete_cost -----------------------------------------------------------------


def test_zero_policy_zero_terminal_cost(stream):
    cost = ctl.CostSpec(l0=None, quad_coef=0.5,
                        terminal=CylindricalFunction(
                            outer=MultiPoly(1, {(0,): 0.0}),
                            inners=[NCPolynomial(1, {(1,): 1.0})]),
                        convexity_declared=True)
    problem = ctl.ControlProblem(n=4, d=1, x0=MatrixTuple.zero(1, 4),
                                 beta_c=0.5, beta_f=1.0, t0=0.0, T=1.0,
                                 cost=cost)
    policy = ctl.zero_policy(problem, K=2, N=1, R=4.0)
    value, stderr = ctl.discrete_cost(problem, policy, 20, stream.child("c0"))
    assert value == pytest.approx(0.0, abs=1e-12)


def test_zero_policy_gue_variance(stream):
    problem = lq_problem(8, beta_c=0.0, beta_f=1.0)
    policy = ctl.zero_policy(problem, K=1, N=1, R=4.0)
    value, stderr = ctl.discrete_cost(problem, policy, 400, stream.child("c1"))
    assert abs(value - 1.0) <= 3.0 * stderr + 1e-3


def test_any_policy_cost_dominates_dp_oracle(stream):
    problem = lq_problem(6, beta_c=0.5, beta_f=1.0)
    oracle = ctl.lq_discrete_oracle(2, 1, 1.0, 0.5, 1.0)
    gen = stream.child("rand").generator()
    for kind in ("const", "poly"):
        policy = ctl.zero_policy(problem, K=2, N=1, R=4.0, kind=kind)
        if kind == "const":
            for st in policy.steps:
                st.values[...] += random_hermitian(6, gen, scale=0.2)[None, None]
        value, stderr = ctl.discrete_cost(problem, policy, 200,
                                          stream.child("c2", kind))
        assert value >= oracle - 3.0 * stderr - 1e-9


def test_path_guard_rejected(stream):
    problem = lq_problem(4, beta_c=0.5)
    with pytest.raises(ValueError):
        ctl.zero_policy(problem, K=8, N=16, R=4.0)
    with pytest.raises(ValueError):
        ctl.optimize_discrete_value(problem, 8, 16, 4.0, small_cfg(),
                                    stream.child("guard"))


# -- optimize_discrete_value ----------------------------------------------------------


def test_optimize_deterministic_lq(stream):
    problem = lq_problem(4, beta_c=0.0, beta_f=0.0,
                         x0=MatrixTuple.identity(1, 4))
    cfg = ctl.OptimizerConfig(train_samples=4, val_samples=4, max_iters=300,
                              chunk=4)
    res = ctl.optimize_discrete_value(problem, 4, 1, 8.0, cfg,
                                      stream.child("det"))
    assert res.value == pytest.approx(1.0 / 3.0, abs=0.02)
    assert res.value <= res.zero_value + 1e-9


def test_optimize_zero_horizon_limit(stream):
    problem = lq_problem(4, beta_c=0.5, beta_f=1.0, T=1e-3,
                         x0=MatrixTuple.identity(1, 4))
    res = ctl.optimize_discrete_value(problem, 1, 1, 8.0, small_cfg(),
                                      stream.child("zh"))
    assert res.value == pytest.approx(1.0, abs=0.02)  # g(x0) = 1


def test_optimize_converges_to_discrete_dp(stream):
    problem = lq_problem(6, beta_c=0.5, beta_f=1.0)
    cfg = small_cfg(train_samples=48, val_samples=256, max_iters=250)
    res = ctl.optimize_discrete_value(problem, 2, 1, 8.0, cfg,
                                      stream.child("dp"))
    oracle = ctl.lq_discrete_oracle(2, 1, 1.0, 0.5, 1.0)
    assert res.value == pytest.approx(oracle, rel=0.02)
    assert res.improved


def test_optimize_requires_convexity_flag(stream):
    problem = lq_problem(4)
    problem.cost.convexity_declared = False
    with pytest.raises(ValueError):
        ctl.optimize_discrete_value(problem, 2, 1, 4.0, small_cfg(),
                                    stream.child("cvx"))


def test_optimize_writes_iteration_log(tmp_path, stream):
    problem = lq_problem(4, beta_c=0.0, beta_f=0.0,
                         x0=MatrixTuple.identity(1, 4))
    log = tmp_path / "iters.csv"
    cfg = ctl.OptimizerConfig(train_samples=2, val_samples=2, max_iters=20,
                              chunk=2, log_path=str(log))
    ctl.optimize_discrete_value(problem, 2, 1, 8.0, cfg, stream.child("log"))
    lines = log.read_text().splitlines()
    assert lines[0] == "iter,batch_cost,step_size,max_grad_norm"
    assert len(lines) > 1


def test_zero_policy_value_bound(stream):
    # V <= (C1 + ||x0|| + (bc + bf) sqrt(T)) (T + 1) on an optimized instance
    problem = lq_problem(6, beta_c=0.5, beta_f=1.0)
    res = ctl.optimize_discrete_value(problem, 2, 1, 8.0, small_cfg(),
                                      stream.child("bound"))
    c1 = problem.cost.c1
    cap = (c1 + inner_product(problem.x0, problem.x0) ** 0.5
           + (problem.beta_c + problem.beta_f)) * 2.0
    assert res.value <= cap


def test_a_priori_control_budget(stream):
    problem = lq_problem(6, beta_c=0.5, beta_f=1.0)
    res = ctl.optimize_discrete_value(problem, 2, 1, 8.0, small_cfg(),
                                      stream.child("budget"))
    budget = ctl.policy_control_budget(problem, res.policy, 64,
                                       stream.child("budget-eval"))
    c1, eps = problem.cost.c1, 0.05
    assert budget <= c1 * (eps + 2.0 * c1 + res.value)


# -- LQ oracles -------------------------------------------------------------------


def test_lq_reference_values():
    assert ctl.lq_reference(lq_problem(4, beta_c=0.0, beta_f=0.0)) == 0.0
    tiny = lq_problem(4, T=1e-12, x0=MatrixTuple.identity(1, 4))
    assert ctl.lq_reference(tiny) == pytest.approx(1.0, abs=1e-9)
    assert ctl.lq_reference(lq_problem(8)) == pytest.approx(LQ_CONTINUOUS,
                                                            abs=1e-12)


def test_lq_reference_matches_ode():
    for problem in (lq_problem(4), lq_problem(4, beta_c=0.2, beta_f=0.7, T=2.0),
                    lq_problem(4, x0=MatrixTuple.identity(1, 4))):
        assert ctl.lq_reference_ode(problem) == pytest.approx(
            ctl.lq_reference(problem), abs=1e-9)


def test_lq_reference_rejects_other_costs():
    problem = quartic_problem(4)
    with pytest.raises(ValueError):
        ctl.lq_reference(problem)


def test_lq_discrete_oracle_limits():
    # deterministic case reproduces the continuous Riccati exactly
    assert ctl.lq_discrete_oracle(4, 1, 1.0, 0.0, 0.0, x0_norm_sq=1.0) \
        == pytest.approx(1.0 / 3.0, abs=1e-12)
    # fine discretization converges to the continuous value from both sides
    peek = ctl.lq_discrete_oracle(64, 512, 1.0, 0.5, 1.0)
    strict = ctl.lq_discrete_oracle(64, 512, 1.0, 0.5, 1.0,
                                    peek_bin=False, peek_gue=False)
    assert peek <= LQ_CONTINUOUS <= strict
    assert strict - peek <= 0.03


# -- coarsening -------------------------------------------------------------------


def test_coarsen_constant_control(stream):
    problem = lq_problem(3, beta_c=1.0, beta_f=0.5)
    a = MatrixTuple(random_hermitian(3, stream.child("cc").generator(), 0.5))
    samples = [ctl.euler_maruyama(problem, lambda t, x: a, 4,
                                  stream.child("em", k)) for k in range(12)]
    grid = TimeGrid(0.0, 1.0, 2)
    policy = ctl.coarsen_control(samples, grid, N=1)
    for st in policy.steps:
        for b in range(st.values.shape[0]):
            assert np.allclose(st.values[b, 0], a.component(0), atol=1e-10)


def test_coarsen_sign_policy_conditional_mean(stream):
    # control = sign of the first coarse increment times the identity
    problem = lq_problem(2, beta_c=1.0, beta_f=0.0)
    samples = []
    for k in range(600):
        child = stream.child("sign", k)
        path = ctl.euler_maruyama(problem, None, 2, child)
        s = 1.0 if path.w0_increments[0] > 0 else -1.0
        controls = [MatrixTuple(s * np.eye(2, dtype=complex)[None])] * 2
        samples.append(ctl.PathData(times=path.times, states=path.states,
                                    controls=controls,
                                    w0_increments=path.w0_increments,
                                    gue_increments=path.gue_increments,
                                    cost=0.0))
    grid = TimeGrid(0.0, 1.0, 2)
    policy = ctl.coarsen_control(samples, grid, N=1)
    table = noise_table(1, 0.5)
    st = policy.steps[0]
    for j in table.indices:
        b = policy.prefix_index((j,))
        sign = 1.0 if j >= 0 else -1.0
        got = float(np.real(st.values[b, 0, 0, 0]))
        assert got == pytest.approx(sign, abs=0.1)


def test_coarsen_jensen_inequality(stream):
    # convex cost: coarsened discrete cost <= mean fine-path cost + tolerance
    problem = lq_problem(4, beta_c=1.0, beta_f=0.5)
    gain = -0.8
    feedback = lambda t, x: gain * x
    samples = [ctl.euler_maruyama(problem, feedback, 8, stream.child("jen", k))
               for k in range(300)]
    fine_mean = float(np.mean([p.cost for p in samples]))
    grid = TimeGrid(0.0, 1.0, 2)
    policy = ctl.coarsen_control(samples, grid, N=1)
    coarse, stderr = ctl.discrete_cost(problem, policy, 300,
                                       stream.child("jenc"))
    assert coarse <= fine_mean + 0.1 + 3 * stderr


def test_coarsen_flags_empty_cells(stream):
    problem = lq_problem(2, beta_c=1.0, beta_f=0.0)
    samples = [ctl.euler_maruyama(problem, None, 2, stream.child("few", k))
               for k in range(2)]
    policy = ctl.coarsen_control(samples, TimeGrid(0.0, 1.0, 2), N=1)
    assert policy.fallback_cells  # 2 samples cannot cover 4 + 16 cells


# -- clipping and the truncation inequality --------------------------------------------


def test_clip_policy_within_r_unchanged(stream):
    problem = lq_problem(3)
    policy = ctl.zero_policy(problem, K=2, N=1, R=4.0, kind="const")
    a = random_hermitian(3, stream.child("clip").generator(), scale=0.1)
    for st in policy.steps:
        st.values[...] += a[None, None]
    clipped = ctl.clip_policy(policy, 4.0)
    for st, st2 in zip(policy.steps, clipped.steps):
        assert np.allclose(st.values, st2.values, atol=1e-12)


def test_clip_policy_reduces_norm(stream):
    problem = lq_problem(3)
    policy = ctl.zero_policy(problem, K=1, N=1, R=8.0, kind="const")
    policy.steps[0].values[...] = 5.0 * np.eye(3)[None, None]
    clipped = ctl.clip_policy(policy, 2.0)
    assert np.allclose(clipped.steps[0].values[0, 0], 2.0 * np.eye(3))


def test_truncation_inequality_scalar_closed_form():
    # n = 1, alpha = 2R constant: both sides computable by hand
    r = 1.5
    kappa = 1.0
    smooth = lambda x: np.sqrt(x * x + 1.0)
    cost = ctl.CostSpec(l0=ctl.ScalarTraceCost(lambda x: kappa * smooth(x)),
                        quad_coef=0.3, terminal=ctl.quadratic_terminal(1),
                        lip_const=kappa)
    times = [0.0, 0.5, 1.0]
    y = [MatrixTuple(np.zeros((1, 1, 1), complex)) for _ in range(3)]
    alphas = [MatrixTuple(2 * r * np.ones((1, 1, 1), complex))] * 2
    assert ctl.truncation_inequality_check(cost, times, y, alphas, r)


def test_truncation_inequality_random_instances(stream):
    gen = stream.child("trunc").generator()
    smooth = lambda x: np.sqrt(x * x + 1.0)
    for i in range(100):
        n = int(gen.integers(1, 6))
        d = int(gen.integers(1, 3))
        kappa = float(gen.uniform(0.2, 3.0))
        cost = ctl.CostSpec(
            l0=ctl.ScalarTraceCost(lambda x, k=kappa: k * smooth(x)),
            quad_coef=float(gen.uniform(0.0, 1.0)),
            terminal=ctl.quadratic_terminal(d), lip_const=kappa)
        steps = int(gen.integers(1, 5))
        times = list(np.linspace(0, float(gen.uniform(0.5, 2.0)), steps + 1))
        y = [sample_gue_tuple(n, d, gen) for _ in range(steps + 1)]
        alphas = [sample_gue_tuple(n, d, gen, scale=float(gen.uniform(0.3, 3.0)))
                  for _ in range(steps)]
        assert ctl.truncation_inequality_check(cost, times, y, alphas,
                                               float(gen.uniform(0.5, 4.0)))


# -- Euler-Maruyama ----------------------------------------------------------------


def test_euler_common_noise_only_exact(stream):
    problem = lq_problem(4, beta_c=1.0, beta_f=0.0)
    path = ctl.euler_maruyama(problem, None, 8, stream.child("em1"))
    total = float(np.sum(path.w0_increments))
    assert np.allclose(path.states[-1].component(0), total * np.eye(4),
                       atol=1e-12)


def test_euler_constant_drift_exact(stream):
    n = 3
    problem = lq_problem(n, beta_c=0.0, beta_f=0.0)
    a = MatrixTuple(random_hermitian(n, stream.child("em2").generator(), 0.5))
    for steps in (2, 4, 8):
        path = ctl.euler_maruyama(problem, lambda t, x: a, steps,
                                  stream.child("em3", steps))
        assert np.allclose(path.states[-1].component(0), a.component(0),
                           atol=1e-12)


def test_euler_pathwise_reconstruction(stream):
    # states equal x0 + A t + noise sums exactly for piecewise-constant drift
    problem = lq_problem(3, beta_c=0.7, beta_f=0.9)
    a = MatrixTuple(random_hermitian(3, stream.child("em4").generator(), 0.3))
    path = ctl.euler_maruyama(problem, lambda t, x: a, 6, stream.child("em5"))
    recon = problem.x0.data.copy()
    h = path.times[1] - path.times[0]
    for i in range(6):
        recon = recon + h * a.data \
            + 0.7 * path.w0_increments[i] * np.eye(3) \
            + 0.9 * path.gue_increments[i].data
        assert np.allclose(path.states[i + 1].data, recon, atol=1e-12)


# -- Boue-Dupuis -------------------------------------------------------------------


def test_bd_lhs_constant_psi(stream):
    const = CylindricalFunction(outer=MultiPoly(1, {(0,): 0.7}),
                                inners=[NCPolynomial(1, {(1,): 1.0})])
    val = ctl.boue_dupuis_lhs(const, 4, 50, stream.child("bd0"))
    assert val == pytest.approx(0.7, abs=1e-12)


def test_bd_lhs_nonnegative_psi(stream):
    val = ctl.boue_dupuis_lhs(quadratic_psi(0.5), 4, 200, stream.child("bd1"))
    assert val >= 0.0


def test_bd_lhs_gaussian_oracle(stream):
    val = ctl.boue_dupuis_lhs(quadratic_psi(0.5), 8, 10_000, stream.child("bd2"))
    assert val == pytest.approx(BD_ORACLE, abs=0.02)


def test_bd_rhs_zero_psi(stream):
    zero = CylindricalFunction(outer=MultiPoly(1, {(0,): 0.0}),
                               inners=[NCPolynomial(1, {(1,): 1.0})])
    res = ctl.boue_dupuis_rhs(zero, 4, 4, small_cfg(max_iters=30),
                              stream.child("bd3"))
    assert res.value == pytest.approx(0.0, abs=1e-9)
    assert res.zero_value == pytest.approx(0.0, abs=1e-12)


def test_bd_rhs_matches_strict_riccati(stream):
    cfg = small_cfg(train_samples=48, val_samples=512, max_iters=300)
    res = ctl.boue_dupuis_rhs(quadratic_psi(0.5), 8, 8, cfg, stream.child("bd4"))
    oracle = ctl.lq_discrete_oracle(8, 1, 1.0, 0.0, 1.0, terminal_coef=0.5,
                                    peek_gue=False)
    assert oracle == pytest.approx(0.36268592518592513, abs=1e-12)
    assert res.value == pytest.approx(oracle, rel=0.015)
    # and the variational value dominates the exponential-moment side
    lhs = ctl.boue_dupuis_lhs(quadratic_psi(0.5), 8, 4000, stream.child("bd5"))
    assert res.value >= lhs - 3.0 * res.stderr


def test_rate_function_candidate_constant_family(stream):
    const = CylindricalFunction(outer=MultiPoly(1, {(0,): 0.9}),
                                inners=[NCPolynomial(1, {(1,): 1.0})])
    from nclab.nclaw import semicircle_arctan_law
    val = ctl.rate_function_candidate(semicircle_arctan_law(4), [const], 4,
                                      small_cfg(max_iters=30, time_steps=2),
                                      stream.child("rate0"))
    assert val == pytest.approx(0.0, abs=1e-9)


def test_rate_function_candidate_requires_family(stream):
    from nclab.nclaw import semicircle_arctan_law
    with pytest.raises(ValueError):
        ctl.rate_function_candidate(semicircle_arctan_law(4), [], 4,
                                    small_cfg(), stream.child("rate1"))


def test_rate_function_semicircle_near_zero(stream):
    # linear trace functionals: the semicircle is the LDP minimizer
    from nclab.nclaw import semicircle_arctan_law
    phi = CylindricalFunction(outer=MultiPoly(1, {(1,): 0.2}),
                              inners=[NCPolynomial(1, {(1,): 1.0})])
    cfg = small_cfg(train_samples=32, val_samples=128, max_iters=120,
                    time_steps=4)
    val = ctl.rate_function_candidate(semicircle_arctan_law(4), [phi], 8, cfg,
                                      stream.child("rate2"))
    assert abs(val) <= 0.05


# -- serialization ------------------------------------------------------------------


def test_problem_json_round_trip():
    problem = lq_problem(4, beta_c=0.3, beta_f=0.9,
                         x0=MatrixTuple.identity(1, 4))
    back = ctl.ControlProblem.from_json(problem.to_json())
    assert back.n == 4 and back.beta_c == 0.3
    assert np.allclose(back.x0.data, problem.x0.data)
    assert ctl.lq_reference(back) == pytest.approx(ctl.lq_reference(problem))


def test_policy_json_round_trip(stream):
    problem = lq_problem(3, beta_c=0.5, beta_f=1.0)
    res = ctl.optimize_discrete_value(problem, 2, 1, 4.0,
                                      small_cfg(max_iters=40),
                                      stream.child("ser"))
    back = ctl.DiscretePolicy.from_json(res.policy.to_json())
    v1, _ = ctl.discrete_cost(problem, res.policy, 40, stream.child("ser2"))
    v2, _ = ctl.discrete_cost(problem, back, 40, stream.child("ser2"))
    assert v1 == pytest.approx(v2, abs=1e-12)


def test_cost_spec_spot_check(stream):
    cost = lq_problem(4).cost
    assert cost.spot_check(4, 1, stream.child("spot"), segments=25)


def test_optimized_value_monotone_in_clip_level(stream):
    # larger feasible set cannot hurt: tight clip forces a worse value
    problem = lq_problem(4, beta_c=0.0, beta_f=0.0,
                         x0=MatrixTuple.identity(1, 4))
    cfg = ctl.OptimizerConfig(train_samples=4, val_samples=4, max_iters=200,
                              chunk=4)
    wide = ctl.optimize_discrete_value(problem, 4, 1, 8.0, cfg,
                                       stream.child("R1"))
    tight = ctl.optimize_discrete_value(problem, 4, 1, 0.15, cfg,
                                        stream.child("R2"))
    assert wide.value <= tight.value + 1e-6
    assert tight.value > wide.value + 0.01  # the cap visibly binds here
