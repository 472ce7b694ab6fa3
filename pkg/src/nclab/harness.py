"""Experiment orchestration: JSON configs, CSV outputs, resumable manifests.

A config document lists experiments by kind; each experiment derives its own
random stream from the master seed and its index, writes one CSV with a
fixed header, and contributes a block to ``summary.json``.  A manifest keyed
by the config hash makes reruns skip completed experiments; the thread count
only fans out per-sample work into a pool with ordered reduction, so outputs
are byte-identical for any worker count.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import control as ctl
from . import gaussdisc, nclaw
from .laplacian import CylindricalFunction, MultiPoly, random_cylindrical
from .matrixcore import MatrixTuple, NumericalError
from .ncpoly import NCPolynomial
from .randmat import RngStream, sample_gue, sample_gue_tuple

__all__ = ["run", "run_config", "ExperimentError", "EXPERIMENT_KINDS",
           "experiment_csv", "lq_problem", "quartic_problem"]

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3


class ExperimentError(ValueError):
    """Configuration-level failure (unknown kind, missing parameters)."""


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, headers, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(headers) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_json_rows(path, headers, rows):
    docs = [dict(zip(headers, row)) for row in rows]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(docs, fh, indent=1)


def parallel_map(fn, items, threads):
    """Order-preserving map; thread count never changes the result."""
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def config_hash(config):
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------------------
# problem templates
# ---------------------------------------------------------------------------


def lq_problem(n, d=1, beta_c=0.5, beta_f=1.0, t0=0.0, T=1.0, x0=None):
    """L = 0.5 ||alpha||^2, g = sum_j tr_n x_j^2."""
    cost = ctl.CostSpec(l0=None, quad_coef=0.5,
                        terminal=ctl.quadratic_terminal(d),
                        lip_const=0.0, convexity_declared=True, c1=2.0)
    x0 = x0 if x0 is not None else MatrixTuple.zero(d, n)
    return ctl.ControlProblem(n=n, d=d, x0=x0, beta_c=beta_c, beta_f=beta_f,
                              t0=t0, T=T, cost=cost)


def quartic_problem(n, d=1, beta_c=0.0, beta_f=1.0, t0=0.0, T=1.0, x0=None):
    """L = 0.5 ||alpha||^2, g = sum_j tr_n x_j^4 (convex, non-quadratic)."""
    cost = ctl.CostSpec(l0=None, quad_coef=0.5,
                        terminal=ctl.quartic_terminal(d),
                        lip_const=0.0, convexity_declared=True, c1=4.0)
    x0 = x0 if x0 is not None else MatrixTuple.zero(d, n)
    return ctl.ControlProblem(n=n, d=d, x0=x0, beta_c=beta_c, beta_f=beta_f,
                              t0=t0, T=T, cost=cost)


def problem_from_params(params, n):
    template = params.get("template", "lq")
    kwargs = dict(d=params.get("d", 1),
                  beta_c=params.get("beta_c", 0.5),
                  beta_f=params.get("beta_f", 1.0),
                  t0=params.get("t0", 0.0), T=params.get("T", 1.0))
    if params.get("x0") == "identity":
        kwargs["x0"] = MatrixTuple.identity(kwargs["d"], n)
    if template == "lq":
        return lq_problem(n, **kwargs)
    if template == "quartic":
        return quartic_problem(n, **kwargs)
    if template == "json":
        return ctl.ControlProblem.from_json(json.dumps(params["problem"]))
    raise ExperimentError(f"unknown problem template {template!r}")


def optimizer_config(params, **overrides):
    opt = dict(params.get("opt", {}))
    opt.update(overrides)
    allowed = {f for f in ctl.OptimizerConfig.__dataclass_fields__}
    bad = set(opt) - allowed
    if bad:
        raise ExperimentError(f"unknown optimizer options {sorted(bad)}")
    return ctl.OptimizerConfig(**opt)


def scaled_samples(n, base_train, base_val, base_n=8):
    """Scale GUE batches with n: tr_n fluctuations shrink like 1/n, so larger
    matrices need fewer samples for the same Monte Carlo error (capped both
    ways to keep runtimes flat)."""
    factor = (base_n / n) ** 2
    return (min(2 * base_train, max(12, int(round(base_train * factor)))),
            min(2 * base_val, max(48, int(round(base_val * factor)))))


# ---------------------------------------------------------------------------
# experiment implementations
# ---------------------------------------------------------------------------


def _exp_spectrum(params, stream, threads):
    n_list = params.get("n_list", [256])
    samples = params.get("samples", 20)
    max_moment = params.get("max_moment", 4)
    headers = ["n", "sample"] + [f"m{2 * k}" for k in range(1, max_moment + 1)] \
        + ["opnorm"]
    rows = []
    checks = {}
    for n in n_list:
        def one(s, n=n):
            mat = sample_gue(n, stream.child("gue", n, s))
            w = np.linalg.eigvalsh(mat)
            moments = [float(np.mean(w ** (2 * k)))
                       for k in range(1, max_moment + 1)]
            return moments, float(np.max(np.abs(w)))
        results = parallel_map(one, range(samples), threads)
        for s, (moments, opn) in enumerate(results):
            rows.append([n, s] + moments + [opn])
        means = np.mean([m for m, _ in results], axis=0)
        rel = [abs(means[k - 1] - nclaw.semicircle_moment(2 * k))
               / nclaw.semicircle_moment(2 * k) for k in range(1, max_moment + 1)]
        checks[f"semicircle_rel_err_n{n}"] = {
            "measured": [float(r) for r in rel], "target": 0.05,
            "pass": bool(max(rel) <= 0.05)}
        med = float(np.median([o for _, o in results]))
        checks[f"opnorm_median_n{n}"] = {
            "measured": med, "target": [1.90, 2.15],
            "pass": bool(1.90 <= med <= 2.15)}
    return headers, rows, checks


def _exp_freeness(params, stream, threads):
    n_list = params.get("n_list", [8, 32, 128])
    samples = params.get("samples", 50)
    poly = NCPolynomial(1, {(1, 1): 1.0})
    headers = ["n", "sample", "statistic"]
    rows, means = [], {}
    for n in n_list:
        def one(s, n=n):
            child = stream.child("free", n, s)
            s1 = sample_gue_tuple(n, 1, child.child(0))
            s2 = sample_gue_tuple(n, 1, child.child(1))
            return nclaw.freeness_statistic([s1, s2], [1, 2], [poly, poly])
        stats = parallel_map(one, range(samples), threads)
        for s, v in enumerate(stats):
            rows.append([n, s, v])
        means[n] = float(np.mean(np.abs(stats)))
    seq = [means[n] for n in n_list]
    checks = {"mean_abs_statistic": {n: means[n] for n in n_list},
              "strictly_decreasing": {"measured": seq,
                                      "pass": all(a > b for a, b in zip(seq, seq[1:]))},
              "final_below_0.05": {"measured": seq[-1], "target": 0.05,
                                   "pass": seq[-1] < 0.05}}
    return headers, rows, checks


def _exp_laplacian_check(params, stream, threads):
    cases = params.get("cases", 50)
    n_list = params.get("n_list", [3, 4, 6])
    d = params.get("d", 2)
    fd_step = params.get("fd_step", 1e-3)
    headers = ["case", "n", "d", "gue_laplacian", "free_laplacian",
               "correction", "identity_gap", "fd_gap"]

    def one(c):
        gen = stream.child("lap", c).generator()
        n = n_list[c % len(n_list)]
        u = random_cylindrical(gen, d)
        x = sample_gue_tuple(n, d, gen, scale=0.8)
        gue = u.gue_laplacian(x)
        free = u.free_laplacian(x)
        corr = u.correction_term(x)
        gap = abs(gue - free - corr)
        fd = _fd_laplacian(u, x, fd_step)
        fd_gap = abs(gue - fd) / (1.0 + abs(gue))
        return [c, n, d, gue, free, corr, gap, fd_gap]

    rows = parallel_map(one, range(cases), threads)
    gaps = [r[6] for r in rows]
    fd_gaps = [r[7] for r in rows]
    checks = {
        "identity_max_gap": {"measured": float(max(gaps)), "target": 1e-10,
                             "pass": max(gaps) < 1e-10},
        "fd_max_gap": {"measured": float(max(fd_gaps)), "target": 1e-5,
                       "pass": max(fd_gaps) < 1e-5},
    }
    return headers, rows, checks


def _fd_laplacian(u, x, h):
    """Central second differences over the full Hermitian basis, times 1/n^2."""
    from .matrixcore import basis_element

    n, d = x.dim, x.d
    base = u.eval(x)
    total = 0.0
    for l in range(d):
        for i in range(1, n + 1):
            for j in range(1, n + 1):
                e = basis_element(n, i, j)
                shift = np.zeros((d, n, n), dtype=complex)
                shift[l] = h * e
                up = u.eval(MatrixTuple(x.data + shift, validate=False))
                dn = u.eval(MatrixTuple(x.data - shift, validate=False))
                total += (up - 2.0 * base + dn) / (h * h)
    return total / (n * n)


def _exp_value(params, stream, threads):
    del threads  # the optimizer is sequential by design
    K, N, R = params.get("K", 4), params.get("N", 2), params.get("R", 8.0)
    n_list = params.get("n_list", [8])
    headers = ["K", "N", "R", "n", "value", "stderr", "zero_value", "iterations"]
    rows, checks = [], {}
    for n in n_list:
        problem = problem_from_params(params, n)
        train, val = scaled_samples(n, params.get("train_samples", 48),
                                    params.get("val_samples", 192))
        cfg = optimizer_config(params, train_samples=train, val_samples=val)
        res = ctl.optimize_discrete_value(problem, K, N, R, cfg,
                                          stream.child("value", n))
        rows.append([K, N, R, n, res.value, res.stderr, res.zero_value,
                     res.iterations])
        checks[f"below_zero_policy_n{n}"] = {
            "measured": res.value, "target": res.zero_value,
            "pass": res.value <= res.zero_value + 1e-9}
    return headers, rows, checks


def _exp_sweep(params, stream, threads):
    del threads
    pairs = [tuple(p) for p in params.get("pairs", [(2, 4), (4, 8), (8, 16)])]
    R = params.get("R", 8.0)
    n = params.get("n", 8)
    headers = ["K", "N", "R", "n", "value", "stderr"]
    rows = []
    problem = problem_from_params(params, n)
    for K, N in pairs:
        cfg = optimizer_config(params)
        res = ctl.optimize_discrete_value(problem, K, N, R, cfg,
                                          stream.child("sweep", K, N))
        rows.append([K, N, R, n, res.value, res.stderr])
    values = [r[4] for r in rows]
    diffs = [abs(b - a) for a, b in zip(values, values[1:])]
    monotone = all(d1 >= d2 for d1, d2 in zip(diffs, diffs[1:]))
    checks = {"successive_diffs": {"measured": diffs,
                                   "monotone_decay": bool(monotone)}}
    return headers, rows, checks


def _exp_ldp(params, stream, threads):
    del threads
    n = params.get("n", 8)
    coef = params.get("coef", 0.5)
    lhs_samples = params.get("lhs_samples", 10_000)
    time_steps = params.get("time_steps", 16)
    psi = _quadratic_psi(params.get("d", 1), coef)
    lhs = ctl.boue_dupuis_lhs(psi, n, lhs_samples, stream.child("lhs"))
    cfg = optimizer_config(params)
    res = ctl.boue_dupuis_rhs(psi, n, time_steps, cfg, stream.child("rhs"))
    oracle = 0.5 * math.log(1.0 + 2.0 * coef) * params.get("d", 1)
    headers = ["psi", "coef", "n", "lhs", "rhs", "rhs_stderr", "oracle"]
    rows = [["quadratic", coef, n, lhs, res.value, res.stderr, oracle]]
    checks = {
        "lhs_vs_oracle": {"measured": abs(lhs - oracle), "target": 0.02,
                          "pass": abs(lhs - oracle) <= 0.02},
        "rhs_vs_oracle_rel": {"measured": abs(res.value - oracle) / oracle,
                              "target": 0.05,
                              "pass": abs(res.value - oracle) / oracle <= 0.05},
        "rhs_above_lhs": {"measured": res.value - lhs,
                          "target": -3.0 * res.stderr,
                          "pass": res.value >= lhs - 3.0 * res.stderr},
    }
    return headers, rows, checks


def _quadratic_psi(d, coef):
    """psi(X) = coef * sum_j tr_n X_j^2 as a cylindrical expression."""
    outer = MultiPoly(d, {tuple(1 if i == o else 0 for i in range(d)): coef
                          for o in range(d)})
    inners = [NCPolynomial(d, {(j, j): 1.0}) for j in range(1, d + 1)]
    return CylindricalFunction(outer=outer, inners=inners)


def _exp_gaussdisc_check(params, stream, threads):
    del stream, threads
    n_list = params.get("N_list", [1, 2, 8])
    delta_list = params.get("delta_list", [1.0, 0.25, 0.01])
    headers = ["N", "delta", "j", "prob", "omega", "absdev"]
    rows = []
    ok_norm, ok_omega, ok_mean0 = True, True, True
    for N in n_list:
        for delta in delta_list:
            table = gaussdisc.noise_table(N, delta)
            ok_norm &= abs(float(table.probs.sum()) - 1.0) <= 1e-12
            ok_mean0 &= abs(float(table.probs @ table.omegas)) <= 1e-12
            if delta <= 1.0:
                ok_omega &= bool(np.all(np.abs(table.omegas) <= 2.0 + 1e-12))
            for j in table.indices:
                absd = gaussdisc.bin_conditional_absdev(j, delta, N) \
                    if table.prob(j) > 1e-12 else float("nan")
                rows.append([N, delta, j, table.prob(j), table.omega(j), absd])
    checks = {"probs_sum_to_one": {"pass": ok_norm},
              "omega_bound_2": {"pass": ok_omega},
              "centered": {"pass": ok_mean0}}
    return headers, rows, checks


def _exp_truncation_check(params, stream, threads):
    instances = params.get("instances", 100)
    R = params.get("R", 4.0)
    headers = ["instance", "lhs_holds", "kappa", "n", "d"]

    def one(i):
        gen = stream.child("trunc", i).generator()
        n = int(gen.integers(2, 7))
        d = int(gen.integers(1, 3))
        kappa = float(gen.uniform(0.5, 2.0))
        smooth_abs = lambda x: np.sqrt(x * x + 1.0)
        cost = ctl.CostSpec(
            l0=ctl.ScalarTraceCost(lambda x, k=kappa: k * smooth_abs(x)),
            quad_coef=float(gen.uniform(0.0, 1.0)),
            terminal=ctl.quadratic_terminal(d),
            lip_const=kappa, convexity_declared=False)
        steps = int(gen.integers(2, 6))
        times = np.linspace(0.0, float(gen.uniform(0.5, 2.0)), steps + 1)
        y = [sample_gue_tuple(n, d, gen) for _ in range(steps + 1)]
        alphas = [sample_gue_tuple(n, d, gen, scale=float(gen.uniform(0.5, 4.0)))
                  for _ in range(steps)]
        ok = ctl.truncation_inequality_check(cost, list(times), y, alphas, R)
        return [i, ok, kappa, n, d]

    rows = parallel_map(one, range(instances), threads)
    n_pass = sum(1 for r in rows if r[1])
    checks = {"all_pass": {"measured": n_pass, "target": instances,
                           "pass": n_pass == instances}}
    return headers, rows, checks


EXPERIMENT_KINDS = {
    "spectrum": _exp_spectrum,
    "freeness": _exp_freeness,
    "laplacian-check": _exp_laplacian_check,
    "value": _exp_value,
    "sweep": _exp_sweep,
    "ldp": _exp_ldp,
    "gaussdisc-check": _exp_gaussdisc_check,
    "truncation-check": _exp_truncation_check,
}


def experiment_csv(kind, params, stream, threads=1):
    """Run one experiment in-process; returns (headers, rows, checks)."""
    if kind not in EXPERIMENT_KINDS:
        raise ExperimentError(f"unknown experiment kind {kind!r}")
    return EXPERIMENT_KINDS[kind](params, stream, threads)


# ---------------------------------------------------------------------------
# config runner with manifest
# ---------------------------------------------------------------------------


def run_config(config, out_dir, seed=None, threads=1, fmt="csv"):
    """Execute all experiments in a config; resumable via the manifest."""
    if not isinstance(config.get("experiments", None), list):
        raise ExperimentError("config must contain an 'experiments' list")
    seed = config.get("seed", 0) if seed is None else seed
    os.makedirs(out_dir, exist_ok=True)
    digest = config_hash({"experiments": config["experiments"], "seed": seed})
    manifest_path = os.path.join(out_dir, "manifest.json")
    manifest = {"config_hash": digest, "seed": seed, "experiments": {}}
    if os.path.exists(manifest_path):
        with open(manifest_path, encoding="utf-8") as fh:
            old = json.load(fh)
        if old.get("config_hash") == digest:
            manifest = old

    master = RngStream(int(seed))
    summary = {}
    for idx, exp in enumerate(config["experiments"]):
        kind = exp.get("kind")
        key = f"{idx:02d}_{kind}"
        entry = manifest["experiments"].get(key)
        if entry and entry.get("status") == "done":
            summary[key] = entry["checks"]
            continue
        stream = master.child("experiment", idx)
        started = time.time()
        headers, rows, checks = experiment_csv(kind, exp, stream, threads)
        csv_path = os.path.join(out_dir, f"{key}.csv")
        write_csv(csv_path, headers, rows)
        artifacts = [os.path.basename(csv_path)]
        if fmt == "json":
            json_path = os.path.join(out_dir, f"{key}.json")
            write_json_rows(json_path, headers, rows)
            artifacts.append(os.path.basename(json_path))
        manifest["experiments"][key] = {
            "kind": kind, "status": "done", "artifacts": artifacts,
            "started": started, "finished": time.time(), "checks": checks,
        }
        summary[key] = checks
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1)

    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1)
    return summary


def run(config_path, out_dir=None, seed=None, threads=1, fmt="csv"):
    """CLI entry: exit 0 ok, 1 config error, 2 numerical failure, 3 I/O."""
    try:
        with open(config_path, encoding="utf-8") as fh:
            config = json.load(fh)
    except OSError:
        return EXIT_IO
    except json.JSONDecodeError:
        return EXIT_CONFIG
    out = out_dir or os.environ.get("NCLAB_OUT_DIR") or config.get("out_dir")
    if not out:
        return EXIT_CONFIG
    try:
        run_config(config, out, seed=seed, threads=threads, fmt=fmt)
    except (ExperimentError, ValueError) as exc:
        print(f"config error: {exc}")
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}")
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O failure: {exc}")
        return EXIT_IO
    return EXIT_OK
