"""Matrix stochastic control: discrete policies, costs, optimization, oracles.

The discretized problem lives on a bin tree: at step i the common noise has
been classified into one of (2N+2)^i bin prefixes J, each carrying an exact
probability and a deterministic noise value (sum of conditional means),
while the GUE noise stays Monte Carlo.  States follow

    X_{i,J} = x0 + sum_{i'<=i} alpha_{i',J} delta
                 + beta_C 1 W0_{i,J} + beta_F (W_hat_{t_i} - W_hat_{t_0}),

controls are tables over (step, bin prefix) of either constant Hermitian
tuples or polynomial nodes in (x0, GUE increments), clipped in operator norm
at R and gated by the increment-norm indicator at level M.  The optimizer is
sample-average approximation with projected first-order descent and exact
(cyclic-derivative) gradients; expectation over the common noise is exact,
over the GUE empirical.

Also here: the LQ Riccati references (continuous closed form, ODE
re-derivation, and the exact discrete dynamic-programming optimum), the
operator-norm truncation inequality check, Euler-Maruyama simulation of the
continuous dynamics, and the exponential-functional machinery (variational
formula for -(1/n^2) log E exp(-n^2 psi) and the rate-function candidate).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .gaussdisc import TimeGrid, noise_table
from .laplacian import CylindricalFunction
from .matrixcore import (MatrixTuple, NumericalError, apply_scalar_function,
                         hermitize, inner_product, l1_norm,
                         scalar_function_derivative)
from .randmat import RngStream, sample_gue_tuple

__all__ = [
    "CostSpec", "ControlProblem", "DiscretePolicy", "PolicyStep",
    "TrajectoryBundle", "OptimizerConfig", "OptimizeResult", "OptimizeError",
    "PathData", "simulate_discrete", "discrete_cost", "optimize_discrete_value",
    "lq_reference", "lq_reference_ode", "lq_discrete_oracle",
    "coarsen_control", "clip_policy", "truncation_inequality_check",
    "euler_maruyama", "boue_dupuis_lhs", "boue_dupuis_rhs",
    "rate_function_candidate", "policy_control_budget",
    "quadratic_terminal", "quartic_terminal", "ArctanComposedTerminal",
    "ScalarTraceCost",
]

PATH_GUARD = 10 ** 6  # maximum number of enumerated bin paths


class OptimizeError(NumericalError):
    """Raised when the descent loop cannot make progress."""


# ---------------------------------------------------------------------------
# cost specifications
# ---------------------------------------------------------------------------


class ScalarTraceCost:
    """Cost sum_k tr_n h(Z_k) over the letters of a tuple, h a scalar function.

    Used for Assumption-C style Lagrangians tau(h(X)) + tau(h(alpha)) with h
    1-Lipschitz smooth; evaluation goes through the eigenvalues, so it is not
    differentiable machinery for the optimizer (value only).
    """

    def __init__(self, h, letters=None):
        self.h = h
        self.letters = letters  # None = all letters

    def value(self, data):
        data = np.asarray(data, dtype=complex)
        lead = data.shape[:-3]
        flat = data.reshape((-1,) + data.shape[-3:])
        out = np.zeros(flat.shape[0])
        letters = range(data.shape[-3]) if self.letters is None else self.letters
        for s in range(flat.shape[0]):
            for k in letters:
                w = np.linalg.eigvalsh(flat[s, k])
                out[s] += float(np.mean(self.h(w)))
        return out.reshape(lead) if lead else float(out[0])


def _expr_value(expr, data):
    """Evaluate a cost expression (CylindricalFunction or duck-typed) on data."""
    if expr is None:
        shape = np.asarray(data).shape[:-3]
        return np.zeros(shape) if shape else 0.0
    if isinstance(expr, CylindricalFunction):
        return expr.eval(data)
    return expr.value(data)


def _expr_grad(expr, data):
    if expr is None:
        return np.zeros_like(np.asarray(data, dtype=complex))
    if isinstance(expr, CylindricalFunction):
        return expr.gradient(data)
    return expr.grad(data)


@dataclass
class CostSpec:
    """Lagrangian L = L0(X, alpha) + c ||alpha||^2 and terminal cost g.

    ``l0`` is an expression over the joint 2d-tuple (letters 1..d = state,
    d+1..2d = control) or None; ``terminal`` over d letters.  ``lip_const``
    (kappa), ``c1`` and ``convexity_declared`` are instance metadata used by
    the truncation inequality and the a-priori bound checks.
    """

    l0: object          # CylindricalFunction over 2d letters, or value-duck, or None
    quad_coef: float
    terminal: object    # CylindricalFunction over d letters, or value/grad duck
    lip_const: float = 1.0
    convexity_declared: bool = False
    c1: float | None = None

    def __post_init__(self):
        if self.quad_coef < 0:
            raise ValueError("quad_coef must be >= 0")

    def lagrangian(self, x_data, a_data):
        """L(X, alpha) on batched (..., d, n, n) pairs."""
        val = 0.0
        if self.l0 is not None:
            joint = np.concatenate([x_data, a_data], axis=-3)
            val = val + np.real(_expr_value(self.l0, joint))
        if self.quad_coef:
            n = a_data.shape[-1]
            sq = np.einsum("...kij,...kji->...", a_data, a_data).real / n
            val = val + self.quad_coef * sq
        return val

    def lagrangian_grads(self, x_data, a_data):
        """(grad_X L, grad_alpha L) on batched pairs, as tr_n-pairing gradients."""
        d = x_data.shape[-3]
        if self.l0 is not None:
            joint = np.concatenate([x_data, a_data], axis=-3)
            gj = _expr_grad(self.l0, joint)
            gx = gj[..., :d, :, :]
            ga = np.array(gj[..., d:, :, :])
        else:
            gx = None  # no state dependence; callers treat None as zero
            ga = np.zeros_like(a_data) if not self.quad_coef else None
        if self.quad_coef:
            extra = 2.0 * self.quad_coef * a_data
            ga = extra if ga is None else ga + extra
        return gx, ga

    def terminal_value(self, x_data):
        return np.real(_expr_value(self.terminal, x_data))

    def terminal_grad(self, x_data):
        return _expr_grad(self.terminal, x_data)

    def spot_check(self, n, d, rng, segments=100, tol=1e-9):
        """Sampled midpoint-convexity and L1-Lipschitz checks (CostSpec invariants)."""
        gen = rng.generator() if isinstance(rng, RngStream) else rng
        kappa = self.lip_const
        for _ in range(segments):
            x1 = sample_gue_tuple(n, d, gen)
            x2 = sample_gue_tuple(n, d, gen)
            a1 = sample_gue_tuple(n, d, gen)
            a2 = sample_gue_tuple(n, d, gen)
            if self.convexity_declared:
                mid = self.lagrangian(0.5 * (x1.data + x2.data),
                                      0.5 * (a1.data + a2.data))
                ends = 0.5 * (self.lagrangian(x1.data, a1.data)
                              + self.lagrangian(x2.data, a2.data))
                if mid > ends + tol:
                    return False
            if self.l0 is not None and kappa is not None:
                l0a = np.real(_expr_value(
                    self.l0, np.concatenate([x1.data, a1.data], axis=-3)))
                l0b = np.real(_expr_value(
                    self.l0, np.concatenate([x2.data, a2.data], axis=-3)))
                budget = kappa * (l1_norm(x1 - x2) + l1_norm(a1 - a2))
                if abs(l0a - l0b) > budget + tol:
                    return False
        return True

    # -- serialization --------------------------------------------------------

    def to_json(self):
        def encode(expr):
            if expr is None:
                return None
            if isinstance(expr, CylindricalFunction):
                return json.loads(expr.to_json())
            raise TypeError("only cylindrical cost expressions serialize")

        return json.dumps({
            "l0": encode(self.l0),
            "quad_coef": self.quad_coef,
            "terminal": encode(self.terminal),
            "lip_const": self.lip_const,
            "convexity_declared": self.convexity_declared,
            "c1": self.c1,
        })

    @classmethod
    def from_json(cls, text, d):
        doc = json.loads(text)

        def decode(node, letters):
            if node is None:
                return None
            return CylindricalFunction.from_json(json.dumps(node), letters)

        return cls(l0=decode(doc["l0"], 2 * d),
                   quad_coef=doc["quad_coef"],
                   terminal=decode(doc["terminal"], d),
                   lip_const=doc.get("lip_const", 1.0),
                   convexity_declared=doc.get("convexity_declared", False),
                   c1=doc.get("c1"))


def quadratic_terminal(d):
    """g(X) = sum_j tr_n X_j^2 as a cylindrical function."""
    from .laplacian import MultiPoly
    from .ncpoly import NCPolynomial

    outer = MultiPoly(d, {tuple(1 if i == o else 0 for i in range(d)): 1.0
                          for o in range(d)})
    inners = [NCPolynomial(d, {(j, j): 1.0}) for j in range(1, d + 1)]
    return CylindricalFunction(outer=outer, inners=inners)


def quartic_terminal(d):
    """g(X) = sum_j tr_n X_j^4."""
    from .laplacian import MultiPoly
    from .ncpoly import NCPolynomial

    outer = MultiPoly(d, {tuple(1 if i == o else 0 for i in range(d)): 1.0
                          for o in range(d)})
    inners = [NCPolynomial(d, {(j, j, j, j): 1.0}) for j in range(1, d + 1)]
    return CylindricalFunction(outer=outer, inners=inners)


class ArctanComposedTerminal:
    """Terminal cost sign * U(arctan(X)) with exact functional-calculus pullback.

    The gradient chains the cylindrical gradient at arctan(X) through the
    divided-difference derivative of arctan, which is self-adjoint for the
    tr_n pairing.
    """

    def __init__(self, cyl: CylindricalFunction, sign=1.0):
        self.cyl = cyl
        self.sign = float(sign)

    def _arctan_tuple(self, data):
        flat = data.reshape((-1,) + data.shape[-3:])
        out = np.empty_like(flat)
        for s in range(flat.shape[0]):
            for k in range(flat.shape[1]):
                out[s, k] = apply_scalar_function(flat[s, k], "arctan")
        return out.reshape(data.shape)

    def value(self, data):
        data = np.asarray(data, dtype=complex)
        return self.sign * np.real(self.cyl.eval(self._arctan_tuple(data)))

    def grad(self, data):
        data = np.asarray(data, dtype=complex)
        y = self._arctan_tuple(data)
        gy = self.cyl.gradient(y)
        flat_x = data.reshape((-1,) + data.shape[-3:])
        flat_g = np.asarray(gy).reshape((-1,) + data.shape[-3:])
        out = np.empty_like(flat_g)
        darctan = lambda t: 1.0 / (1.0 + t * t)
        for s in range(flat_x.shape[0]):
            for k in range(flat_x.shape[1]):
                pull = scalar_function_derivative(flat_x[s, k], "arctan", darctan)
                out[s, k] = pull(flat_g[s, k])
        return self.sign * out.reshape(data.shape)


@dataclass
class ControlProblem:
    """Initial tuple, noise strengths, horizon and cost of one instance."""

    n: int
    d: int
    x0: MatrixTuple
    beta_c: float
    beta_f: float
    t0: float
    T: float
    cost: CostSpec

    def __post_init__(self):
        if self.T <= self.t0:
            raise ValueError("need T > t0")
        if self.x0.d != self.d or self.x0.dim != self.n:
            raise ValueError("x0 dimensions inconsistent with (n, d)")
        if self.beta_c < 0 or self.beta_f < 0:
            raise ValueError("noise strengths must be >= 0")

    def grid(self, K):
        return TimeGrid(self.t0, self.T, K)

    def to_json(self):
        return json.dumps({
            "n": self.n, "d": self.d,
            "x0_re": np.real(self.x0.data).tolist(),
            "x0_im": np.imag(self.x0.data).tolist(),
            "beta_c": self.beta_c, "beta_f": self.beta_f,
            "t0": self.t0, "T": self.T,
            "cost": json.loads(self.cost.to_json()),
        })

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        x0 = MatrixTuple(np.array(doc["x0_re"]) + 1j * np.array(doc["x0_im"]))
        cost = CostSpec.from_json(json.dumps(doc["cost"]), doc["d"])
        return cls(n=doc["n"], d=doc["d"], x0=x0, beta_c=doc["beta_c"],
                   beta_f=doc["beta_f"], t0=doc["t0"], T=doc["T"], cost=cost)


# ---------------------------------------------------------------------------
# discrete policies
# ---------------------------------------------------------------------------


@dataclass
class PolicyStep:
    """Control table for one time step: one node per bin prefix.

    ``kind`` is 'const' (values: (B, d, n, n) Hermitian) or 'poly'
    (coeffs: (B, d, W) real on the scaled word features listed in ``words``;
    letters are global indices over (x0 components, per-step increments)).
    """

    kind: str
    values: np.ndarray | None = None
    words: list | None = None
    coeffs: np.ndarray | None = None

    @property
    def paths(self):
        return self.values.shape[0] if self.kind == "const" else self.coeffs.shape[0]


@dataclass
class DiscretePolicy:
    """Bin-path-adapted control table with operator-norm cap R and gate M.

    ``collapse_bins`` marks a policy built for beta_C = 0, where every bin
    prefix shares one node.  ``include_current_increment`` records the
    adaptedness convention: True lets the node at step i read the GUE
    increment over its own interval (t_{i-1}, t_i], matching the sigma-algebra
    the discrete dynamics are measured against; False is the strictly adapted
    variant used by the variational (Boue-Dupuis) routines.
    """

    K: int
    N: int
    R: float
    gate_level: float
    d: int
    n: int
    steps: list
    collapse_bins: bool = False
    include_current_increment: bool = True
    feature_scales: np.ndarray | None = None
    fallback_cells: list = field(default_factory=list)

    def branching(self):
        return 1 if self.collapse_bins else 2 * self.N + 2

    def path_counts(self):
        b = self.branching()
        return [b ** i for i in range(1, self.K + 1)]

    def prefix_index(self, indices):
        """Row index of a bin prefix (j_1..j_i) in the step-i tables."""
        if self.collapse_bins:
            return 0
        b = 2 * self.N + 2
        idx = 0
        for j in indices:
            idx = idx * b + (j + self.N + 1)
        return idx

    def to_json(self):
        steps = []
        for st in self.steps:
            if st.kind == "const":
                steps.append({"kind": "const",
                              "re": np.real(st.values).tolist(),
                              "im": np.imag(st.values).tolist()})
            else:
                steps.append({"kind": "poly",
                              "words": [list(w) for w in st.words],
                              "coeffs": st.coeffs.tolist()})
        return json.dumps({
            "K": self.K, "N": self.N, "R": self.R, "gate_level": self.gate_level,
            "d": self.d, "n": self.n, "collapse_bins": self.collapse_bins,
            "include_current_increment": self.include_current_increment,
            "feature_scales": (None if self.feature_scales is None
                               else self.feature_scales.tolist()),
            "steps": steps,
        })

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        steps = []
        for st in doc["steps"]:
            if st["kind"] == "const":
                steps.append(PolicyStep(
                    kind="const",
                    values=np.array(st["re"]) + 1j * np.array(st["im"])))
            else:
                steps.append(PolicyStep(
                    kind="poly",
                    words=[tuple(w) for w in st["words"]],
                    coeffs=np.array(st["coeffs"], dtype=float)))
        scales = doc.get("feature_scales")
        return cls(K=doc["K"], N=doc["N"], R=doc["R"],
                   gate_level=doc["gate_level"], d=doc["d"], n=doc["n"],
                   steps=steps, collapse_bins=doc["collapse_bins"],
                   include_current_increment=doc["include_current_increment"],
                   feature_scales=None if scales is None else np.array(scales))


def zero_policy(problem, K, N, R, kind="poly", degree=1, gate_level=None,
                include_current_increment=True):
    """The all-zero policy table for the given discretization."""
    collapse = problem.beta_c == 0.0
    b = 1 if collapse else 2 * N + 2
    _check_path_guard(b, K)
    if gate_level is None:
        gate_level = default_gate_level(problem)
    d, n = problem.d, problem.n
    steps = []
    for i in range(1, K + 1):
        paths = b ** i
        if kind == "const":
            steps.append(PolicyStep(
                kind="const", values=np.zeros((paths, d, n, n), dtype=complex)))
        else:
            words = _step_words(d, K, i, degree, include_current_increment)
            steps.append(PolicyStep(
                kind="poly", words=words,
                coeffs=np.zeros((paths, d, len(words)))))
    return DiscretePolicy(K=K, N=N, R=R, gate_level=gate_level, d=d, n=n,
                          steps=steps, collapse_bins=collapse,
                          include_current_increment=include_current_increment)


def default_gate_level(problem):
    """M >= 3 sqrt(T - t0) and >= the initial condition's operator norm."""
    base = 3.0 * math.sqrt(problem.T - problem.t0)
    return max(base, problem.x0.max_operator_norm() + 1e-9)


def _check_path_guard(branching, K):
    if branching ** K > PATH_GUARD:
        raise ValueError(
            f"bin-path count {branching}^{K} exceeds the {PATH_GUARD} guard")


def _step_words(d, K, step, degree, include_current):
    """Feature words available to the node at ``step`` (global letter indices).

    Letters 1..d are the x0 components; letters d*j+1..d*j+d the step-j GUE
    increment.  The node may read increments up to and including the current
    step (include_current=True) or only up to the previous one (strictly
    adapted).
    """
    last = step if include_current else step - 1
    letters = list(range(1, d + 1))
    for j in range(1, last + 1):
        letters.extend(range(d * j + 1, d * j + d + 1))
    words = [()]
    frontier = [()]
    for _ in range(degree):
        frontier = [w + (l,) for w in frontier for l in letters]
        words.extend(frontier)
    return words


# ---------------------------------------------------------------------------
# the bin-tree / GUE-batch engine
# ---------------------------------------------------------------------------


@dataclass
class _BinTree:
    """Per-step exact common-noise data: probabilities and noise partial sums."""

    probs: list      # step i -> (B_i,) probabilities of bin prefixes
    noise: list      # step i -> (B_i,) values W0_{i,J}
    branch_omegas: np.ndarray
    branch_probs: np.ndarray


def _bin_tree(K, N, delta, collapse):
    if collapse:
        one = np.ones(1)
        zero = np.zeros(1)
        return _BinTree(probs=[one] * K, noise=[zero] * K,
                        branch_omegas=zero, branch_probs=one)
    table = noise_table(N, delta)
    probs, noise = [], []
    p, w = table.probs.copy(), table.omegas.copy()
    probs.append(p)
    noise.append(w)
    for _ in range(1, K):
        p = np.kron(p, table.probs)
        w = (np.kron(noise[-1], np.ones_like(table.omegas))
             + np.kron(np.ones(len(probs[-1])), table.omegas))
        # note: kron of the previous step's prob vector with the one-step table
        probs.append(p)
        noise.append(w)
    return _BinTree(probs=probs, noise=noise,
                    branch_omegas=table.omegas, branch_probs=table.probs)


def _sample_letters(problem, K, sample_indices, rng: RngStream, tag):
    """Letters array (S, d(1+K), n, n): x0 components then per-step increments."""
    n, d = problem.n, problem.d
    grid = problem.grid(K)
    S = len(sample_indices)
    letters = np.zeros((S, d * (1 + K), n, n), dtype=complex)
    letters[:, :d] = problem.x0.data
    for row, s in enumerate(sample_indices):
        path = _gue_path_for_sample(problem, K, rng, tag, s)
        for j, inc in enumerate(path.increments, start=1):
            letters[row, d * j:d * (j + 1)] = inc.data
    return letters


def _gue_path_for_sample(problem, K, rng: RngStream, tag, s):
    from .randmat import gue_increments

    grid = problem.grid(K)
    return gue_increments(problem.n, problem.d, grid.times, rng.child(tag, s))


def _gate_indicator(letters, d, K, level):
    """1 when every increment's operator norm is <= level, per sample."""
    S = letters.shape[0]
    gate = np.ones(S)
    for s in range(S):
        for j in range(1, K + 1):
            block = letters[s, d * j:d * (j + 1)]
            # spectral norm of each Hermitian component
            norms = [np.max(np.abs(np.linalg.eigvalsh(m))) for m in block]
            if max(norms) > level:
                gate[s] = 0.0
                break
    return gate


def _word_features(letters, words):
    """Hermitian-symmetrized word evaluations, (S, W, n, n)."""
    S, _, n, _ = letters.shape
    out = np.empty((S, len(words), n, n), dtype=complex)
    cache = {}

    def word_matrix(word):
        if word in cache:
            return cache[word]
        if not word:
            mat = np.broadcast_to(np.eye(n, dtype=complex), (S, n, n))
        else:
            mat = word_matrix(word[:-1]) @ letters[:, word[-1] - 1]
        cache[word] = mat
        return mat

    for k, word in enumerate(words):
        out[:, k] = hermitize(word_matrix(word))
    return out


def _clip_batch(alpha, R):
    """Apply the operator-norm clip entrywise over (..., n, n) Hermitian slots.

    Returns the clipped array and backward records [(index, multiplier, Q)]
    for the entries where the clip was active; elsewhere the clip is the
    identity.  Activity is pre-screened by the Frobenius bound, so the eigen
    work only happens on actual violators.
    """
    n = alpha.shape[-1]
    flat = alpha.reshape((-1, n, n))
    fro = np.sqrt(np.einsum("sij,sij->s", flat, np.conj(flat)).real)
    suspects = np.nonzero(fro > R)[0]
    records = []
    if len(suspects) == 0:
        return alpha, records
    flat = flat.copy()
    for idx in suspects:
        w, q = np.linalg.eigh(flat[idx])
        if np.max(np.abs(w)) <= R:
            continue
        wc = np.clip(w, -R, R)
        flat[idx] = (q * wc) @ np.conj(q.T)
        # divided-difference multiplier of phi_R for the gradient pullback
        dx = w[:, None] - w[None, :]
        num = wc[:, None] - wc[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            mult = np.where(np.abs(dx) > 1e-12,
                            num / np.where(dx == 0, 1.0, dx),
                            (np.abs(w[:, None]) < R).astype(float))
        records.append((idx, mult, q))
    return flat.reshape(alpha.shape), records


def _pullback_clip(grad, records):
    if not records:
        return grad
    n = grad.shape[-1]
    flat = grad.reshape((-1, n, n)).copy()
    for idx, mult, q in records:
        g = flat[idx]
        flat[idx] = q @ (mult * (np.conj(q.T) @ g @ q)) @ np.conj(q.T)
    return flat.reshape(grad.shape)


def _realize_controls(policy, step_index, features, word_index, gate):
    """Realized controls at one step: (S, B, d, n, n), plus backward records."""
    st = policy.steps[step_index]
    S = features.shape[0] if features is not None else len(gate)
    n, d = policy.n, policy.d
    if st.kind == "const":
        alpha = np.broadcast_to(st.values, (S,) + st.values.shape).copy()
    else:
        idx = word_index[step_index]
        feats = features[:, idx]                       # (S, W_i, n, n)
        alpha = np.einsum("blw,swij->sblij", st.coeffs, feats, optimize=True)
        alpha = alpha * gate[:, None, None, None, None]
    alpha, records = _clip_batch(alpha, policy.R)
    return alpha, records


def _forward(problem, policy, tree, letters, features, word_index, gate):
    """States and controls along the bin tree for one sample chunk."""
    n, d, K = problem.n, problem.d, policy.K
    S = letters.shape[0]
    delta = (problem.T - problem.t0) / K
    branch = policy.branching()
    eye = np.eye(n, dtype=complex)
    states, alphas, clip_records = [], [], []
    prev = np.broadcast_to(problem.x0.data, (S, 1, d, n, n))
    prev_noise = np.zeros(1)
    for i in range(1, K + 1):
        alpha, records = _realize_controls(policy, i - 1, features, word_index, gate)
        B = alpha.shape[1]
        # expand the parent states along the new branch
        parent = np.repeat(prev, branch, axis=1) if B != prev.shape[1] else prev
        inc = letters[:, d * i:d * (i + 1)]            # (S, d, n, n)
        x = parent + delta * alpha
        if problem.beta_c:
            w0 = tree.noise[i - 1]
            dw0 = w0 - np.repeat(prev_noise, branch)
            x += problem.beta_c * dw0[None, :, None, None, None] * eye
            prev_noise = w0
        if problem.beta_f:
            x += problem.beta_f * inc[:, None]
        states.append(x)
        alphas.append(alpha)
        clip_records.append(records)
        prev = x
    return states, alphas, clip_records


def _chunk_cost(problem, policy, tree, states, alphas):
    """Per-sample discretized cost over the chunk, (S,)."""
    K = policy.K
    delta = (problem.T - problem.t0) / K
    S = states[0].shape[0]
    total = np.zeros(S)
    for i in range(K):
        lvals = problem.cost.lagrangian(states[i], alphas[i])   # (S, B_i)
        total += delta * (lvals @ tree.probs[i])
    gvals = problem.cost.terminal_value(states[-1])             # (S, B_K)
    total += gvals @ tree.probs[-1]
    return total


def _chunk_gradients(problem, policy, tree, states, alphas, clip_records,
                     features, word_index, gate):
    """Per-step parameter gradients of the summed (not yet averaged) cost."""
    K = policy.K
    n, d = policy.n, policy.d
    delta = (problem.T - problem.t0) / K
    branch = policy.branching()
    grads = []
    # direct state-gradients per step, then accumulate up the tree
    lam = None
    step_alpha_grads = [None] * K
    for i in range(K, 0, -1):
        gx, ga = problem.cost.lagrangian_grads(states[i - 1], alphas[i - 1])
        p = tree.probs[i - 1][None, :, None, None, None]
        direct = delta * p * gx if gx is not None else None
        if i == K:
            gterm = problem.cost.terminal_grad(states[-1])
            gterm = tree.probs[-1][None, :, None, None, None] * gterm
            lam = gterm if direct is None else direct + gterm
        else:
            child_sum = lam.reshape(lam.shape[0], -1, branch, d, n, n).sum(axis=2)
            lam = child_sum if direct is None else direct + child_sum
        step_alpha_grads[i - 1] = delta * (p * ga + lam)
    for i in range(1, K + 1):
        galpha = _pullback_clip(step_alpha_grads[i - 1], clip_records[i - 1])
        st = policy.steps[i - 1]
        if st.kind == "const":
            grads.append(hermitize(galpha.sum(axis=0)))
        else:
            galpha = galpha * gate[:, None, None, None, None]
            idx = word_index[i - 1]
            feats = features[:, idx]
            g = np.einsum("sblij,swji->blw", galpha, feats, optimize=True).real / n
            grads.append(g)
    return grads


def _prepare_batch(problem, policy, rng, tag, sample_indices):
    """Letters, gate, features and per-step word index for a sample chunk."""
    K = policy.K
    letters = _sample_letters(problem, K, sample_indices, rng, tag)
    gate = _gate_indicator(letters, problem.d, K, policy.gate_level)
    features, word_index = None, None
    if any(st.kind == "poly" for st in policy.steps):
        global_words = _step_words(problem.d, K, K, _max_degree(policy),
                                   policy.include_current_increment)
        pos = {w: k for k, w in enumerate(global_words)}
        features = _word_features(letters, global_words)
        if policy.feature_scales is not None:
            features = features / policy.feature_scales[None, :, None, None]
        word_index = [np.array([pos[w] for w in st.words], dtype=int)
                      if st.kind == "poly" else None
                      for st in policy.steps]
    return letters, gate, features, word_index


def _max_degree(policy):
    deg = 1
    for st in policy.steps:
        if st.kind == "poly" and st.words:
            deg = max(deg, max(len(w) for w in st.words))
    return deg


def _feature_scales(problem, policy, rng, tag, sample_indices):
    """RMS tr_n-norms of the global word features over a batch (preconditioner)."""
    K = policy.K
    letters = _sample_letters(problem, K, sample_indices, rng, tag)
    global_words = _step_words(problem.d, K, K, _max_degree(policy),
                               policy.include_current_increment)
    feats = _word_features(letters, global_words)
    n = problem.n
    sq = np.einsum("swij,swji->sw", feats, feats).real / n
    return np.sqrt(np.maximum(sq.mean(axis=0), 1e-12)), global_words


def _prepare_chunks(problem, policy, rng, tag, samples, chunk):
    """Frozen per-chunk batch data for repeated policy evaluations."""
    chunks = []
    for start in range(0, samples, chunk):
        idx = list(range(start, min(start + chunk, samples)))
        chunks.append(_prepare_batch(problem, policy, rng, tag, idx))
    return chunks


def _evaluate_prepared(problem, policy, chunks, want_grads=False):
    """Cost mean/stderr over prepared chunks; optionally parameter grads."""
    K = policy.K
    tree = _bin_tree(K, policy.N, (problem.T - problem.t0) / K,
                     policy.collapse_bins)
    per_sample = []
    grads = None
    samples = 0
    for letters, gate, features, word_index in chunks:
        samples += letters.shape[0]
        states, alphas, records = _forward(
            problem, policy, tree, letters, features, word_index, gate)
        per_sample.append(_chunk_cost(problem, policy, tree, states, alphas))
        if want_grads:
            g = _chunk_gradients(problem, policy, tree, states, alphas,
                                 records, features, word_index, gate)
            grads = g if grads is None else [a + b for a, b in zip(grads, g)]
        del states, alphas
    costs = np.concatenate(per_sample)
    mean = float(costs.mean())
    stderr = float(costs.std(ddof=1) / math.sqrt(len(costs))) if len(costs) > 1 else 0.0
    if want_grads:
        grads = [g / samples for g in grads]
        return mean, stderr, grads
    return mean, stderr, None


def _evaluate_policy(problem, policy, rng, tag, samples, chunk,
                     want_grads=False):
    chunks = _prepare_chunks(problem, policy, rng, tag, samples, chunk)
    return _evaluate_prepared(problem, policy, chunks, want_grads)


# ---------------------------------------------------------------------------
# public simulation / cost / optimization ops
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryBundle:
    """States X_{i,J} of one GUE path across all bin prefixes.

    ``states[i-1]`` has shape (B_i, d, n, n); ``state(i, J)`` looks up the
    prefix J = (j_1..j_i) directly.
    """

    policy: DiscretePolicy
    states: list
    controls: list

    def state(self, i, indices) -> MatrixTuple:
        if len(indices) != i:
            raise ValueError("prefix length must equal the step index")
        b = self.policy.prefix_index(indices)
        return MatrixTuple(self.states[i - 1][b], validate=False)

    def control(self, i, indices) -> MatrixTuple:
        b = self.policy.prefix_index(indices)
        return MatrixTuple(self.controls[i - 1][b], validate=False)


def simulate_discrete(problem, policy, grid, gue_path) -> TrajectoryBundle:
    """Discrete dynamics for one GUE path, exactly over all bin prefixes."""
    if grid.K != policy.K:
        raise ValueError(f"grid K={grid.K} but policy K={policy.K}")
    if abs(grid.t0 - problem.t0) > 1e-12 or abs(grid.T - problem.T) > 1e-12:
        raise ValueError("grid does not match the problem horizon")
    if gue_path.n != problem.n or gue_path.d != problem.d:
        raise ValueError("GUE path dimensions do not match the problem")
    if gue_path.steps != grid.K:
        raise ValueError("GUE path must live on the same grid")
    tree = _bin_tree(policy.K, policy.N, grid.delta, policy.collapse_bins)
    d, n, K = problem.d, problem.n, policy.K
    letters = np.zeros((1, d * (1 + K), n, n), dtype=complex)
    letters[0, :d] = problem.x0.data
    for j, inc in enumerate(gue_path.increments, start=1):
        letters[0, d * j:d * (j + 1)] = inc.data
    gate = _gate_indicator(letters, d, K, policy.gate_level)
    features, word_index = None, None
    if any(st.kind == "poly" for st in policy.steps):
        global_words = _step_words(d, K, K, _max_degree(policy),
                                   policy.include_current_increment)
        pos = {w: k for k, w in enumerate(global_words)}
        features = _word_features(letters, global_words)
        if policy.feature_scales is not None:
            features = features / policy.feature_scales[None, :, None, None]
        word_index = [np.array([pos[w] for w in st.words], dtype=int)
                      if st.kind == "poly" else None for st in policy.steps]
    states, alphas, _ = _forward(problem, policy, tree, letters, features,
                                 word_index, gate)
    return TrajectoryBundle(policy=policy,
                            states=[s[0] for s in states],
                            controls=[a[0] for a in alphas])


def discrete_cost(problem, policy, mc_samples, rng, chunk=16, tag="cost"):
    """Monte Carlo estimate (value, stderr) of the discretized cost.

    Common-noise expectation is exact over bin paths; the GUE expectation is
    a sample average over ``mc_samples`` draws from ``rng``.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    _check_path_guard(policy.branching(), policy.K)
    mean, stderr, _ = _evaluate_policy(problem, policy, rng, tag,
                                       mc_samples, chunk)
    return mean, stderr


@dataclass
class OptimizerConfig:
    """Sample-average-approximation and descent parameters."""

    train_samples: int = 64
    val_samples: int = 256
    max_iters: int = 200
    init_step: float = 0.5
    min_step: float = 1e-7
    degree: int = 1
    node_kind: str = "poly"
    momentum: float = 0.9
    step_grow: float = 1.1
    chunk: int = 16
    gate_level: float | None = None
    include_current_increment: bool = True
    log_path: str | None = None
    time_steps: int | None = None  # used by the variational routines


@dataclass
class OptimizeResult:
    value: float
    stderr: float
    policy: DiscretePolicy
    zero_value: float
    train_value: float
    iterations: int
    improved: bool


def optimize_discrete_value(problem, K, N, R, opt_config=None, rng=None):
    """Minimize the discretized cost over the parametric policy table.

    Projected descent with exact cyclic-derivative gradients on a frozen GUE
    batch; the returned value re-evaluates the winner (best found vs the zero
    policy) on a fresh validation batch, so it never exceeds the zero-policy
    cost beyond rounding.
    """
    cfg = opt_config or OptimizerConfig()
    if rng is None:
        raise ValueError("an RngStream is required")
    if not problem.cost.convexity_declared:
        raise ValueError("optimize_discrete_value requires convexity_declared")
    policy = zero_policy(problem, K, N, R, kind=cfg.node_kind, degree=cfg.degree,
                         gate_level=cfg.gate_level,
                         include_current_increment=cfg.include_current_increment)
    if any(st.kind == "poly" for st in policy.steps):
        scales, _ = _feature_scales(problem, policy, rng, "scale",
                                    list(range(min(cfg.train_samples, 32))))
        policy.feature_scales = scales

    log_rows = []
    train_chunks = _prepare_chunks(problem, policy, rng, "train",
                                   cfg.train_samples, cfg.chunk)
    cost, _, grads = _evaluate_prepared(problem, policy, train_chunks,
                                        want_grads=True)
    if not math.isfinite(cost):
        raise OptimizeError("initial objective is not finite")
    best_policy, best_cost = policy, cost
    eta = cfg.init_step
    velocity = [np.zeros_like(g) for g in grads]
    iters = 0
    while iters < cfg.max_iters and eta >= cfg.min_step:
        iters += 1
        velocity = [cfg.momentum * v - eta * g for v, g in zip(velocity, grads)]
        trial = _policy_step(best_policy, [-v for v in velocity], 1.0, R)
        trial_cost, _, trial_grads = _evaluate_prepared(
            problem, trial, train_chunks, want_grads=True)
        if not math.isfinite(trial_cost):
            raise OptimizeError(f"objective diverged at iteration {iters}")
        gnorm = max(float(np.max(np.abs(g))) for g in grads)
        log_rows.append((iters, best_cost, eta, gnorm))
        if trial_cost < best_cost - 1e-14:
            best_policy, best_cost, grads = trial, trial_cost, trial_grads
            eta *= cfg.step_grow
        else:
            velocity = [np.zeros_like(g) for g in grads]
            eta *= 0.5
    if cfg.log_path:
        with open(cfg.log_path, "w", encoding="utf-8") as fh:
            fh.write("iter,batch_cost,step_size,max_grad_norm\n")
            for row in log_rows:
                fh.write(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r}\n")

    zero = zero_policy(problem, K, N, R, kind=cfg.node_kind, degree=cfg.degree,
                       gate_level=cfg.gate_level,
                       include_current_increment=cfg.include_current_increment)
    zero.feature_scales = best_policy.feature_scales
    val_chunks = _prepare_chunks(problem, best_policy, rng, "val",
                                 cfg.val_samples, cfg.chunk)
    zero_val, zero_se, _ = _evaluate_prepared(problem, zero, val_chunks)
    best_val, best_se, _ = _evaluate_prepared(problem, best_policy, val_chunks)
    if best_val <= zero_val:
        value, stderr, winner, improved = best_val, best_se, best_policy, True
    else:
        value, stderr, winner, improved = zero_val, zero_se, zero, False
    return OptimizeResult(value=value, stderr=stderr, policy=winner,
                          zero_value=zero_val, train_value=best_cost,
                          iterations=iters, improved=improved)


def _policy_step(policy, grads, eta, R):
    """One projected descent step on all node parameters."""
    new_steps = []
    for st, g in zip(policy.steps, grads):
        if st.kind == "const":
            values = st.values - eta * g
            values = np.stack([
                np.stack([apply_scalar_function(values[b, l], ("clip", R))
                          if _fro_norm(values[b, l]) > R else values[b, l]
                          for l in range(values.shape[1])])
                for b in range(values.shape[0])])
            new_steps.append(PolicyStep(kind="const", values=values))
        else:
            new_steps.append(PolicyStep(kind="poly", words=st.words,
                                        coeffs=st.coeffs - eta * g))
    return replace(policy, steps=new_steps)


def _fro_norm(m):
    return float(np.sqrt(np.sum(np.abs(m) ** 2)))


def policy_control_budget(problem, policy, samples, rng, chunk=16, tag="budget"):
    """sum_i sum_J P(O_{i,J}) E ||alpha_{i,J}||^2 delta for the a-priori bound."""
    K = policy.K
    delta = (problem.T - problem.t0) / K
    tree = _bin_tree(K, policy.N, delta, policy.collapse_bins)
    total, count = 0.0, 0
    for start in range(0, samples, chunk):
        idx = list(range(start, min(start + chunk, samples)))
        letters, gate, features, word_index = _prepare_batch(
            problem, policy, rng, tag, idx)
        _, alphas, _ = _forward(problem, policy, tree, letters, features,
                                word_index, gate)
        for i in range(K):
            sq = np.einsum("sbkij,sbkji->sb", alphas[i], alphas[i]).real / problem.n
            total += float((sq @ tree.probs[i]).sum()) * delta
        count += len(idx)
    return total / count


# ---------------------------------------------------------------------------
# LQ oracles
# ---------------------------------------------------------------------------


def _is_lq_template(cost: CostSpec, d):
    """True when L = 0.5 ||alpha||^2 and g = sum_j tr_n x_j^2 exactly."""
    if cost.l0 is not None:
        if not isinstance(cost.l0, CylindricalFunction) or cost.l0.outer.terms:
            return False
    if abs(cost.quad_coef - 0.5) > 1e-12:
        return False
    term = cost.terminal
    if not isinstance(term, CylindricalFunction):
        return False
    ref = quadratic_terminal(d)
    if term.outer.terms != ref.outer.terms:
        return False
    if len(term.inners) != d:
        return False
    for phi, ref_phi in zip(term.inners, ref.inners):
        if phi.terms != ref_phi.terms:
            return False
    return True


def lq_reference(problem: ControlProblem):
    """Closed-form continuous value for L = 0.5||alpha||^2, g = ||X||^2.

    p(t) = 1/(1 + 2(T - t)) gives p(t0) ||x0||^2 plus the noise integral
    ((beta_C^2 + beta_F^2) d / 2) ln(1 + 2(T - t0)).  Raises on any cost that
    is not exactly the LQ template.  ``lq_reference_ode`` re-derives the same
    number from the Riccati ODE without the closed form.
    """
    if not _is_lq_template(problem.cost, problem.d):
        raise ValueError("cost does not match the LQ template")
    horizon = problem.T - problem.t0
    p0 = 1.0 / (1.0 + 2.0 * horizon)
    x0_sq = inner_product(problem.x0, problem.x0)
    noise = (problem.beta_c ** 2 + problem.beta_f ** 2) * problem.d / 2.0
    return p0 * x0_sq + noise * math.log(1.0 + 2.0 * horizon)


def lq_reference_ode(problem: ControlProblem, steps=200_000):
    """Riccati ODE oracle: solve dp/dt = 2 p^2 (p(T)=1) and
    dr/dt = -(beta_C^2 + beta_F^2) d p (r(T)=0) backward with RK4."""
    if not _is_lq_template(problem.cost, problem.d):
        raise ValueError("cost does not match the LQ template")
    sigma2 = (problem.beta_c ** 2 + problem.beta_f ** 2) * problem.d
    h = (problem.T - problem.t0) / steps

    def rhs(state):
        p, _ = state
        return np.array([2.0 * p * p, -sigma2 * p])

    state = np.array([1.0, 0.0])  # (p, r) at t = T, integrating backward
    for _ in range(steps):
        k1 = rhs(state)
        k2 = rhs(state - 0.5 * h * k1)
        k3 = rhs(state - 0.5 * h * k2)
        k4 = rhs(state - h * k3)
        state = state - (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    p0, r0 = state
    return p0 * inner_product(problem.x0, problem.x0) + r0


def lq_discrete_oracle(K, N, horizon, beta_c, beta_f, d=1, x0_norm_sq=0.0,
                       terminal_coef=1.0, quad_coef=0.5,
                       peek_bin=True, peek_gue=True):
    """Exact optimum of the discretized LQ problem by dynamic programming.

    The Riccati recursion q_{i-1} = q_i c/(c + q_i delta) is exact for the
    quadratic cost; each step's noise variance (binned common noise
    E[omega^2], GUE delta per component) enters with coefficient q_{i-1} when
    the policy class sees that step's noise before acting and q_i when it is
    strictly adapted.
    """
    delta = horizon / K
    table = noise_table(N, delta)
    v_bin = float(table.probs @ table.omegas ** 2)
    qs = [0.0] * (K + 1)
    qs[K] = terminal_coef
    for i in range(K, 0, -1):
        qs[i - 1] = qs[i] * quad_coef / (quad_coef + qs[i] * delta)
    value = qs[0] * x0_norm_sq
    for i in range(1, K + 1):
        value += beta_c ** 2 * v_bin * (qs[i - 1] if peek_bin else qs[i])
        value += beta_f ** 2 * delta * d * (qs[i - 1] if peek_gue else qs[i])
    return value


# ---------------------------------------------------------------------------
# continuous-time simulation, coarsening, truncation
# ---------------------------------------------------------------------------


@dataclass
class PathData:
    """One sampled trajectory of the continuous dynamics."""

    times: list
    states: list        # MatrixTuple at each grid time
    controls: list      # MatrixTuple applied on each interval
    w0_increments: np.ndarray
    gue_increments: list
    cost: float


def euler_maruyama(problem, feedback_policy, steps, rng, tag="em") -> PathData:
    """Explicit Euler with exact Gaussian/GUE increments.

    ``feedback_policy`` is a callable (t, X) -> MatrixTuple or None for the
    zero control.  The drift is piecewise constant, so linear dynamics are
    integrated exactly given the increments.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if isinstance(rng, RngStream):
        gen_stream = rng.child(tag) if tag else rng
    else:
        raise TypeError("euler_maruyama requires an RngStream")
    grid = TimeGrid(problem.t0, problem.T, steps)
    times = list(grid.times)
    from .randmat import brownian_increments, gue_increments

    dw0 = brownian_increments(times, gen_stream.child("w0"))
    gue = gue_increments(problem.n, problem.d, times, gen_stream.child("gue"))

    x = problem.x0
    states, controls = [x], []
    h = grid.delta
    run_cost = 0.0
    eye_shift = lambda s: MatrixTuple(
        np.broadcast_to(np.eye(problem.n, dtype=complex),
                        (problem.d, problem.n, problem.n)) * s)
    for i in range(steps):
        alpha = feedback_policy(times[i], x) if feedback_policy else None
        if alpha is None:
            alpha = MatrixTuple.zero(problem.d, problem.n)
        run_cost += float(problem.cost.lagrangian(x.data, alpha.data)) * h
        x = x + h * alpha
        if problem.beta_c:
            x = x + eye_shift(problem.beta_c * dw0[i])
        if problem.beta_f:
            x = x + problem.beta_f * gue.increments[i]
        states.append(x)
        controls.append(alpha)
    total = run_cost + float(problem.cost.terminal_value(states[-1].data))
    return PathData(times=times, states=states, controls=controls,
                    w0_increments=dw0, gue_increments=gue.increments,
                    cost=total)


def _bin_of(value, N):
    """Bin index of a raw increment value (interior width 1/N, tails at +-1)."""
    if value <= -1.0:
        return -N - 1
    if value > 1.0:
        return N
    j = math.ceil(value * N) - 1
    return min(max(j, -N), N - 1)


def coarsen_control(fine_samples, grid: TimeGrid, N, R=None) -> DiscretePolicy:
    """Conditional-mean coarsening of sampled fine controls onto the bin tree.

    Node (i, J) averages, over the samples whose first i coarse increments
    fall in the bins of J, the time average of the control over
    (t_{i-1}, t_i].  Empty cells fall back to the step's global mean and are
    recorded in ``fallback_cells``.
    """
    if not fine_samples:
        raise ValueError("need at least one fine sample")
    K = grid.K
    first = fine_samples[0]
    fine_steps = len(first.controls)
    if fine_steps % K:
        raise ValueError("fine grid must refine the coarse grid")
    per = fine_steps // K
    d = first.controls[0].d
    n = first.controls[0].dim
    branch = 2 * N + 2

    # per sample: coarse bin path and per-coarse-step time-averaged control
    sample_bins, sample_avgs = [], []
    for path in fine_samples:
        if len(path.controls) != fine_steps:
            raise ValueError("fine samples live on different grids")
        bins, avgs = [], []
        for i in range(K):
            seg = slice(i * per, (i + 1) * per)
            bins.append(_bin_of(float(np.sum(path.w0_increments[seg])), N))
            block = np.mean([c.data for c in path.controls[seg]], axis=0)
            avgs.append(block)
        sample_bins.append(tuple(bins))
        sample_avgs.append(avgs)

    steps, fallbacks = [], []
    for i in range(1, K + 1):
        paths = branch ** i
        values = np.zeros((paths, d, n, n), dtype=complex)
        global_mean = np.mean([avgs[i - 1] for avgs in sample_avgs], axis=0)
        cells = {}
        for bins, avgs in zip(sample_bins, sample_avgs):
            cells.setdefault(bins[:i], []).append(avgs[i - 1])
        for b in range(paths):
            prefix = _prefix_from_index(b, i, N)
            bucket = cells.get(prefix)
            if bucket:
                values[b] = np.mean(bucket, axis=0)
            else:
                values[b] = global_mean
                fallbacks.append((i, prefix))
        steps.append(PolicyStep(kind="const", values=hermitize(values)))

    if R is None:
        R = max(max(_fro_norm(v) for v in st.values.reshape(-1, n, n))
                for st in steps) + 1.0
    policy = DiscretePolicy(K=K, N=N, R=R, gate_level=math.inf, d=d, n=n,
                            steps=steps, collapse_bins=False,
                            include_current_increment=True,
                            fallback_cells=fallbacks)
    return policy


def _prefix_from_index(b, i, N):
    branch = 2 * N + 2
    digits = []
    for _ in range(i):
        digits.append(b % branch)
        b //= branch
    return tuple(dig - N - 1 for dig in reversed(digits))


def clip_policy(policy: DiscretePolicy, R) -> DiscretePolicy:
    """Componentwise phi_R on every node; polynomial nodes get clip level R."""
    steps = []
    for st in policy.steps:
        if st.kind == "const":
            values = np.stack([
                np.stack([apply_scalar_function(st.values[b, l], ("clip", R))
                          for l in range(st.values.shape[1])])
                for b in range(st.values.shape[0])])
            steps.append(PolicyStep(kind="const", values=values))
        else:
            steps.append(PolicyStep(kind="poly", words=st.words,
                                    coeffs=st.coeffs.copy()))
    return replace(policy, R=R, steps=steps)


def truncation_inequality_check(cost: CostSpec, times, y_states, controls, R):
    """Check the operator-norm truncation penalty bound along one path.

    With phi_R the clip, verifies

        int L(Y_t + int phi_R(alpha), phi_R(alpha_t)) dt
          <= int L(Y_t + int alpha, alpha_t) dt
             + (1 + T) kappa / R * int ||alpha_t||^2 dt

    by left Riemann sums on the given grid.  ``y_states`` has one MatrixTuple
    per grid time, ``controls`` one per interval.
    """
    kappa = cost.lip_const
    steps = len(controls)
    if len(times) != steps + 1:
        raise ValueError("need len(times) == len(controls) + 1")
    horizon = times[-1] - times[0]
    d, n = controls[0].d, controls[0].dim
    raw_int = MatrixTuple.zero(d, n)
    clip_int = MatrixTuple.zero(d, n)
    lhs = rhs = budget = 0.0
    for i in range(steps):
        h = times[i + 1] - times[i]
        alpha = controls[i]
        clipped = alpha.clip(R)
        y = y_states[i]
        lhs += float(cost.lagrangian((y + clip_int).data, clipped.data)) * h
        rhs += float(cost.lagrangian((y + raw_int).data, alpha.data)) * h
        budget += inner_product(alpha, alpha) * h
        raw_int = raw_int + h * alpha
        clip_int = clip_int + h * clipped
    penalty = (1.0 + horizon) * kappa / R * budget
    return lhs <= rhs + penalty + 1e-9


# ---------------------------------------------------------------------------
# exponential functionals (variational formula and rate-function candidate)
# ---------------------------------------------------------------------------


def boue_dupuis_lhs(psi, n, mc_samples, rng, d=None, chunk=64, tag="bdlhs"):
    """-(1/n^2) log E exp(-n^2 psi(W_hat_1)) by max-shifted log-sum-exp."""
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    if d is None:
        d = psi.d if hasattr(psi, "d") else psi.cyl.d
    exponents = np.empty(mc_samples)
    for s in range(mc_samples):
        w = sample_gue_tuple(n, d, rng.child(tag, s))
        exponents[s] = -float(n * n) * float(np.real(_expr_value(psi, w.data)))
    m = float(np.max(exponents))
    if not math.isfinite(m):
        raise NumericalError("all exponents underflowed")
    log_mean = m + math.log(float(np.mean(np.exp(exponents - m))))
    return -(log_mean) / float(n * n)


def boue_dupuis_rhs(psi, n, time_steps, opt_config=None, rng=None, d=None,
                    R=16.0):
    """Variational side: minimize E[ (1/2) int ||alpha||^2 + psi(W_1 + int alpha) ].

    Discretized on a uniform grid with strictly adapted polynomial policies
    (the control over (t_{i-1}, t_i] reads increments of steps < i only),
    which keeps the discrete value an upper bound of the continuous one.
    """
    cfg = opt_config or OptimizerConfig()
    if rng is None:
        raise ValueError("an RngStream is required")
    if d is None:
        d = psi.d if hasattr(psi, "d") else psi.cyl.d
    steps = time_steps or cfg.time_steps or 8
    cost = CostSpec(l0=None, quad_coef=0.5, terminal=psi,
                    convexity_declared=True)
    problem = ControlProblem(n=n, d=d, x0=MatrixTuple.zero(d, n),
                             beta_c=0.0, beta_f=1.0, t0=0.0, T=1.0, cost=cost)
    cfg = replace(cfg, include_current_increment=False)
    return optimize_discrete_value(problem, steps, 1, R, cfg, rng)


def cylindrical_on_law(u: CylindricalFunction, law):
    """Evaluate a cylindrical expression on a law's stored moments."""
    traces = []
    for phi in u.inners:
        val = 0.0 + 0.0j
        for word, coeff in phi.terms.items():
            val += coeff * law.moment(word)
        if abs(val.imag) > 1e-9 * (1.0 + abs(val)):
            raise ValueError("law gives a non-real trace for a self-adjoint inner")
        traces.append(val.real)
    return float(u.outer(np.array(traces)))


def rate_function_candidate(target_law, test_family, n, opt_config=None,
                            rng=None):
    """Lower bound of the rate-function supremum over the given test family.

    For each phi, adds phi(target) to the variational value of the terminal
    -phi(arctan(.)); the reported number is explicitly the maximum over the
    family only.
    """
    if not test_family:
        raise ValueError("test family must be non-empty")
    if rng is None:
        raise ValueError("an RngStream is required")
    cfg = opt_config or OptimizerConfig()
    best = -math.inf
    for k, phi in enumerate(test_family):
        target_val = cylindrical_on_law(phi, target_law)
        terminal = ArctanComposedTerminal(phi, sign=-1.0)
        bd = boue_dupuis_rhs(terminal, n, cfg.time_steps or 8, cfg,
                             rng.child("rate", k), d=phi.d)
        best = max(best, target_val + bd.value)
    return best
