"""Denoiser tests: oracle agreement, closed forms, solver properties.

The anisotropic cases are checked against the exhaustive sign-pattern KKT
oracle; the oracle receives the problem through an independent reduction
(built from square roots, never from the production assembly helpers), so
both the algebra and the solver are exercised.
"""

import numpy as np
import pytest

from oracles import fista_weighted_l1, quad_l1_objective, sign_pattern_solve
from tlamp.prox import (
    AdaptivePenalty,
    EtaAggregate,
    JointPenalty,
    MultiEnvProxProblem,
    SecondStepProxProblem,
    XiAggregate,
    default_mu,
    eta_multi,
    eta_single,
    kkt_residual,
    mu_from_table,
    multi_env_components,
    solve_weighted_l1,
    xi_second_step,
)

TOL = 1e-8


def rand_sqrt_spd(rng, p, ridge=0.4):
    """A random symmetric PD matrix, used as a covariance square root."""
    A = rng.normal(size=(p, p))
    S = A @ A.T / p + ridge * np.eye(p)
    return 0.5 * (S + S.T)


def rand_simplex(rng, E):
    x = rng.uniform(0.2, 1.0, E)
    return x / x.sum()


def multi_env_instance(rng, p, E):
    """Random problem plus the oracle's independent (G, h, w) reduction."""
    sqrts = [rand_sqrt_spd(rng, p) for _ in range(E)]
    sigmas = [S @ S for S in sqrts]
    varpi = rand_simplex(rng, E)
    betas = [rng.normal(size=p) for _ in range(E)]
    vs = [rng.normal(size=p) for _ in range(E)]
    theta = rng.uniform(0.5, 2.0)
    lam = rng.uniform(0.3, 1.5, p)
    problem = MultiEnvProxProblem(varpi=varpi, sigma=sigmas, beta=betas,
                                  v=vs, theta=theta, lam=lam)
    G = np.zeros((p, p))
    h = np.zeros(p)
    for ve, S, beta, v in zip(varpi, sqrts, betas, vs):
        G += ve * (S.T @ S)
        h += ve * (S.T @ (v + S @ beta))
    return problem, (G, h, theta * lam)


def original_eta_objective(problem, b):
    total = problem.theta * float(problem.lam @ np.abs(b))
    for ve, S, beta, v in zip(problem.varpi, problem.sigma_sqrt,
                              problem.beta, problem.v):
        resid = S @ b - (v + S @ beta)
        total += 0.5 * ve * float(resid @ resid)
    return total


# ============================================================
# oracle agreement
# ============================================================


def test_eta_multi_matches_sign_pattern_oracle():
    rng = np.random.default_rng(101)
    for _ in range(30):
        p = int(rng.integers(2, 7))
        E = int(rng.integers(1, 4))
        problem, (G, h, w) = multi_env_instance(rng, p, E)
        res = eta_multi(problem, tol=1e-12, max_iter=200000)
        assert res.converged
        expected = sign_pattern_solve(G, h, w)
        assert np.max(np.abs(res.b - expected)) <= 1e-8
        assert original_eta_objective(problem, res.b) <= \
            original_eta_objective(problem, expected) + 1e-10


def test_eta_single_matches_sign_pattern_oracle():
    rng = np.random.default_rng(102)
    for _ in range(20):
        p = 5
        S = rand_sqrt_spd(rng, p)
        beta = rng.normal(size=p)
        v = rng.normal(size=p)
        theta = rng.uniform(0.5, 2.0)
        lam = rng.uniform(0.3, 1.5, p)
        res = eta_single(v, theta, lam, S @ S, beta, tol=1e-12, max_iter=200000)
        expected = sign_pattern_solve(S.T @ S, S.T @ (v + S @ beta), theta * lam)
        assert np.max(np.abs(res.b - expected)) <= 1e-8


def xi_instance(rng, p, penalty):
    S1 = rand_sqrt_spd(rng, p)
    problem = SecondStepProxProblem(
        v_rt=rng.normal(size=p),
        beta_hat=rng.normal(size=p) * rng.binomial(1, 0.7, p),
        beta_1=rng.normal(size=p),
        sigma_1=S1 @ S1,
        gamma_ro=rng.uniform(-0.3, 0.6),
        kappa_1=rng.uniform(0.2, 0.8),
        theta_rt=rng.uniform(0.6, 1.8),
        penalty=penalty,
    )
    m = problem.v_rt + S1 @ problem.beta_1 - problem.kappa_1 * problem.gamma_ro * (
        S1 @ (problem.beta_1 - problem.beta_hat))
    return problem, S1, m


def test_xi_joint_matches_sign_pattern_oracle():
    rng = np.random.default_rng(103)
    for _ in range(20):
        p = 4
        lam_rt = rng.uniform(0.2, 1.0)
        problem, S1, m = xi_instance(rng, p, JointPenalty(lam_rt))
        res = xi_second_step(problem, tol=1e-12, max_iter=200000)
        # oracle in the shifted variable d = b - beta_hat
        G = S1.T @ S1
        h = S1.T @ (m - S1 @ problem.beta_hat)
        w = problem.theta_rt * lam_rt * np.ones(p)
        d = sign_pattern_solve(G, h, w)
        assert np.max(np.abs(res.b - (problem.beta_hat + d))) <= 1e-8
        assert np.array_equal(res.support, np.flatnonzero(d))


def test_xi_adaptive_matches_sign_pattern_oracle():
    rng = np.random.default_rng(104)
    for _ in range(20):
        p = 4
        problem, S1, m = xi_instance(rng, p, AdaptivePenalty(default_mu))
        res = xi_second_step(problem, tol=1e-12, max_iter=200000)
        w = problem.theta_rt * default_mu(np.abs(problem.beta_hat))
        b = sign_pattern_solve(S1.T @ S1, S1.T @ m, w)
        assert np.max(np.abs(res.b - b)) <= 1e-8
        assert np.array_equal(res.support, np.flatnonzero(b))


def test_cd_agrees_with_fista_on_larger_problem():
    rng = np.random.default_rng(105)
    p = 40
    problem, (G, h, w) = multi_env_instance(rng, p, 2)
    res = eta_multi(problem, tol=1e-10)
    ref = fista_weighted_l1(G, h, w)
    assert np.max(np.abs(res.b - ref)) <= 1e-6
    assert abs(quad_l1_objective(G, h, w, res.b)
               - quad_l1_objective(G, h, w, ref)) <= 1e-10


# ============================================================
# closed forms
# ============================================================


def test_isotropic_multi_env_soft_threshold():
    rng = np.random.default_rng(106)
    p, E = 400, 3
    varpi = rand_simplex(rng, E)
    betas = [rng.normal(size=p) for _ in range(E)]
    vs = [rng.normal(size=p) for _ in range(E)]
    theta = 0.8
    lam = rng.uniform(0.5, 1.5, p)
    problem = MultiEnvProxProblem(varpi=varpi, sigma=[np.eye(p)] * E,
                                  beta=betas, v=vs, theta=theta, lam=lam)
    res = eta_multi(problem)
    center = sum(ve * (v + b) for ve, v, b in zip(varpi, vs, betas))
    expected = np.sign(center) * np.maximum(np.abs(center) - theta * lam, 0.0)
    assert np.max(np.abs(res.b - expected)) <= 1e-10


def test_isotropic_second_step_closed_forms():
    rng = np.random.default_rng(107)
    p = 400
    for penalty in (JointPenalty(0.6), AdaptivePenalty(default_mu)):
        problem = SecondStepProxProblem(
            v_rt=rng.normal(size=p),
            beta_hat=rng.normal(size=p) * rng.binomial(1, 0.6, p),
            beta_1=rng.normal(size=p),
            sigma_1=np.eye(p),
            gamma_ro=0.4, kappa_1=0.5, theta_rt=1.1, penalty=penalty,
        )
        res = xi_second_step(problem)
        m = problem.v_rt + problem.beta_1 - 0.5 * 0.4 * (
            problem.beta_1 - problem.beta_hat)
        if isinstance(penalty, JointPenalty):
            shift = m - problem.beta_hat
            expected = problem.beta_hat + np.sign(shift) * np.maximum(
                np.abs(shift) - 1.1 * 0.6, 0.0)
        else:
            w = 1.1 * default_mu(np.abs(problem.beta_hat))
            expected = np.sign(m) * np.maximum(np.abs(m) - w, 0.0)
        assert np.max(np.abs(res.b - expected)) <= 1e-10


def test_full_shrinkage_gives_zero():
    rng = np.random.default_rng(108)
    problem, (G, h, w) = multi_env_instance(rng, 10, 2)
    big = MultiEnvProxProblem(varpi=problem.varpi, sigma=problem.sigma,
                              beta=problem.beta, v=problem.v,
                              theta=10.0 * float(np.max(np.abs(h))),
                              lam=np.ones(10))
    res = eta_multi(big)
    assert res.support.size == 0
    assert np.all(res.b == 0.0)
    assert res.iterations == 0  # zero start already optimal


def test_centered_single_env_is_zero():
    rng = np.random.default_rng(109)
    p = 12
    S = rand_sqrt_spd(rng, p)
    beta = rng.normal(size=p)
    res = eta_single(-S @ beta, 1.0, np.ones(p), S @ S, beta)
    assert np.all(res.b == 0.0)


# ============================================================
# solver properties
# ============================================================


def test_objective_monotone_per_sweep():
    rng = np.random.default_rng(110)
    problem, (G, h, w) = multi_env_instance(rng, 30, 2)
    trace = np.full(300, np.nan)
    res = solve_weighted_l1(G, h, w, tol=1e-12, obj_trace=trace)
    vals = trace[: res.iterations]
    assert np.all(np.isfinite(vals))
    assert np.all(np.diff(vals) <= 1e-12)


def test_coordinate_order_irrelevant_at_convergence():
    rng = np.random.default_rng(111)
    problem, (G, h, w) = multi_env_instance(rng, 25, 2)
    res = solve_weighted_l1(G, h, w, tol=TOL)
    perm = np.arange(25)[::-1]
    res_rev = solve_weighted_l1(G[np.ix_(perm, perm)], h[perm], w[perm], tol=TOL)
    assert np.max(np.abs(res.b - res_rev.b[np.argsort(perm)])) <= 10 * TOL


def test_isotropic_nonexpansive():
    rng = np.random.default_rng(112)
    p, E = 50, 2
    varpi = rand_simplex(rng, E)
    betas = [rng.normal(size=p) for _ in range(E)]
    lam = np.ones(p)
    for _ in range(10):
        vs = [rng.normal(size=p) for _ in range(E)]
        vs2 = [v + rng.normal(scale=0.5, size=p) for v in vs]
        outs = []
        for vv in (vs, vs2):
            problem = MultiEnvProxProblem(varpi=varpi, sigma=[np.eye(p)] * E,
                                          beta=betas, v=vv, theta=1.0, lam=lam)
            outs.append(eta_multi(problem).b)
        lhs = np.linalg.norm(outs[0] - outs[1])
        rhs = np.linalg.norm(np.concatenate(vs) - np.concatenate(vs2))
        assert lhs <= rhs + 1e-12


def test_support_kkt_consistency():
    rng = np.random.default_rng(113)
    problem, _ = multi_env_instance(rng, 15, 3)
    res = eta_multi(problem, tol=TOL)
    Q, c, w = multi_env_components(problem)
    grad = Q @ res.b - c
    on = res.support
    off = np.setdiff1d(np.arange(15), on)
    assert np.max(np.abs(grad[on] + w[on] * np.sign(res.b[on]))) <= TOL
    assert np.all(np.abs(grad[off]) <= w[off] + TOL)


def test_zero_weight_environment_dropped():
    rng = np.random.default_rng(114)
    p = 8
    problem, _ = multi_env_instance(rng, p, 2)
    padded = MultiEnvProxProblem(
        varpi=np.r_[problem.varpi, 0.0],
        sigma=list(problem.sigma) + [np.eye(p)],
        beta=list(problem.beta) + [np.full(p, 100.0)],
        v=list(problem.v) + [np.full(p, -50.0)],
        theta=problem.theta, lam=problem.lam,
        sigma_sqrt=list(problem.sigma_sqrt) + [np.eye(p)],
    )
    assert np.max(np.abs(eta_multi(problem).b - eta_multi(padded).b)) <= 1e-12


def test_kkt_residual_function():
    rng = np.random.default_rng(115)
    p = 20
    beta = rng.normal(size=p)
    v = rng.normal(size=p)
    problem = MultiEnvProxProblem(varpi=np.array([1.0]), sigma=[np.eye(p)],
                                  beta=[beta], v=[v], theta=0.9,
                                  lam=np.ones(p))
    center = v + beta
    exact = np.sign(center) * np.maximum(np.abs(center) - 0.9, 0.0)
    assert kkt_residual(exact, problem) <= 1e-12
    huge = MultiEnvProxProblem(varpi=np.array([1.0]), sigma=[np.eye(p)],
                               beta=[beta], v=[v], theta=1e6, lam=np.ones(p))
    assert kkt_residual(np.zeros(p), huge) == 0.0


def test_kkt_residual_perturbation_slope():
    rng = np.random.default_rng(116)
    p = 10
    S = rand_sqrt_spd(rng, p, ridge=1.5)  # strong diagonal for a clean slope
    problem = MultiEnvProxProblem(varpi=np.array([1.0]), sigma=[S @ S],
                                  beta=[rng.normal(size=p)],
                                  v=[rng.normal(size=p)], theta=0.3,
                                  lam=np.ones(p))
    res = eta_multi(problem, tol=1e-12)
    Q, _, _ = multi_env_components(problem)
    j = int(res.support[0])
    slopes = []
    for delta in (1e-3, 2e-3):
        b = res.b.copy()
        b[j] += delta
        slopes.append(kkt_residual(b, problem) / delta)
    assert abs(slopes[0] - Q[j, j]) <= 0.02 * Q[j, j]
    assert abs(slopes[1] - Q[j, j]) <= 0.02 * Q[j, j]


def test_nonconvergence_is_flagged():
    rng = np.random.default_rng(117)
    problem, _ = multi_env_instance(rng, 30, 2)
    res = eta_multi(problem, tol=1e-14, max_iter=1)
    assert not res.converged
    assert res.iterations == 1


# ============================================================
# aggregates and penalties
# ============================================================


def test_eta_aggregate_matches_eta_multi():
    rng = np.random.default_rng(118)
    p, E, R = 12, 2, 5
    problem, _ = multi_env_instance(rng, p, E)
    agg = EtaAggregate(problem.varpi, problem.sigma, problem.sigma_sqrt,
                       problem.beta, problem.theta, problem.lam)
    vs_batch = [rng.normal(size=(R, p)) for _ in range(E)]
    warm = np.zeros((R, p))
    results = agg.solve_batch(vs_batch, warm)
    for r in range(R):
        single = MultiEnvProxProblem(
            varpi=problem.varpi, sigma=problem.sigma, beta=problem.beta,
            v=[vs_batch[e][r] for e in range(E)], theta=problem.theta,
            lam=problem.lam, sigma_sqrt=problem.sigma_sqrt)
        ref = eta_multi(single)
        assert np.max(np.abs(results[r].b - ref.b)) <= 1e-10
        assert np.max(np.abs(warm[r] - ref.b)) <= 1e-10  # warm buffer updated


def test_xi_aggregate_matches_xi_second_step():
    rng = np.random.default_rng(119)
    p, R = 9, 4
    S1 = rand_sqrt_spd(rng, p)
    beta_1 = rng.normal(size=p)
    for penalty in (JointPenalty(0.5), AdaptivePenalty(default_mu)):
        agg = XiAggregate(S1 @ S1, S1, beta_1, kappa_1=0.5, gamma_ro=0.2,
                          theta_rt=1.3, penalty=penalty)
        v_rt = rng.normal(size=(R, p))
        anchors = rng.normal(size=(R, p)) * rng.binomial(1, 0.6, (R, p))
        warm = np.zeros((R, p))
        results = agg.solve_batch(v_rt, anchors, warm)
        for r in range(R):
            problem = SecondStepProxProblem(
                v_rt=v_rt[r], beta_hat=anchors[r], beta_1=beta_1,
                sigma_1=S1 @ S1, gamma_ro=0.2, kappa_1=0.5, theta_rt=1.3,
                penalty=penalty, sigma_sqrt_1=S1)
            ref = xi_second_step(problem)
            assert np.max(np.abs(results[r].b - ref.b)) <= 1e-10
            assert np.array_equal(results[r].support, ref.support)


def test_penalty_validation():
    with pytest.raises(ValueError):
        JointPenalty(0.0)
    with pytest.raises(ValueError):
        AdaptivePenalty(lambda x: x + 1.0)  # increasing
    with pytest.raises(ValueError):
        AdaptivePenalty(lambda x: -np.ones_like(x))  # negative
    mu = mu_from_table([0.0, 1.0, 5.0], [3.0, 2.0, 1.0])
    assert mu(0.0) == 3.0
    assert mu(10.0) == 1.0
    assert mu(0.5) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        mu_from_table([0.0, 1.0], [1.0, 2.0])  # increasing table


def test_problem_validation():
    p = 4
    eye = np.eye(p)
    with pytest.raises(ValueError):
        MultiEnvProxProblem(varpi=np.array([0.4, 0.4]), sigma=[eye, eye],
                            beta=[np.zeros(p)] * 2, v=[np.zeros(p)] * 2,
                            theta=1.0, lam=np.ones(p))  # weights sum to 0.8
    with pytest.raises(ValueError):
        MultiEnvProxProblem(varpi=np.array([1.0]), sigma=[eye],
                            beta=[np.zeros(p)], v=[np.zeros(p)],
                            theta=-1.0, lam=np.ones(p))
    with pytest.raises(ValueError):
        MultiEnvProxProblem(varpi=np.array([1.0]), sigma=[-eye],
                            beta=[np.zeros(p)], v=[np.zeros(p)],
                            theta=1.0, lam=np.ones(p))  # not SPD
