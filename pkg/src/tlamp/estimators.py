"""Direct convex solvers for the three data-level estimators.

All three objectives share the weighted-l1 quadratic structure of the
denoisers, so they run on the same coordinate-descent core, applied to the
stacked Gram matrix sum_e pi_e X_e' X_e with X_e = Z_e Sigma_e^{1/2}.  Gram
blocks can be assembled once per data realization with environment_gram and
passed to any solver, which is what the simulation loop does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .prox import (
    DEFAULT_TOL,
    AdaptivePenalty,
    JointPenalty,
    solve_weighted_l1,
)


@dataclass
class EstimateRecord:
    """Solution of one data-level estimation problem."""

    beta_hat: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool
    kind: str


def environment_gram(env):
    """(X'X, X'y, y'y) for X = Z Sigma^{1/2}; reusable across solvers."""
    X = env.Z_design @ env.sigma_sqrt
    return X.T @ X, X.T @ env.y, float(env.y @ env.y)


def _quadratic_loss(gram, b):
    """0.5 ||y - X b||^2 evaluated from the Gram block."""
    G, h, yty = gram
    return 0.5 * (yty - 2.0 * float(h @ b) + float(b @ (G @ b)))


def solve_stacked_lasso(envs, tol=DEFAULT_TOL, max_iter=None, grams=None,
                        x0=None) -> EstimateRecord:
    """Weighted-loss Lasso over all environments jointly.

    Minimizes 0.5 sum_e pi_e ||y_e - X_e b||^2 + sum_j lam_j |b_j|.  The
    penalty vector is shared, so all environments must carry identical
    lambda_weights.
    """
    pis = np.array([env.pi for env in envs], dtype=float)
    if np.all(pis == 0.0):
        raise ValueError("all environment weights pi are zero")
    lam = envs[0].lambda_weights
    for env in envs[1:]:
        if not np.array_equal(env.lambda_weights, lam):
            raise ValueError("stacked solve needs identical penalty weights "
                             "across environments")
    if grams is None:
        grams = [environment_gram(env) for env in envs]
    p = lam.size
    Q = np.zeros((p, p))
    c = np.zeros(p)
    for pi, (G, h, _) in zip(pis, grams):
        if pi == 0.0:
            continue
        Q += pi * G
        c += pi * h
    res = solve_weighted_l1(Q, c, lam, x0=x0, tol=tol, max_sweeps=max_iter)
    objective = sum(pi * _quadratic_loss(g, res.b)
                    for pi, g in zip(pis, grams) if pi > 0)
    objective += float(lam @ np.abs(res.b))
    return EstimateRecord(beta_hat=res.b, objective=objective,
                          kkt_residual=res.kkt_residual,
                          iterations=res.iterations, converged=res.converged,
                          kind="stack")


def solve_individual_lasso(env, lam=None, tol=DEFAULT_TOL, max_iter=None,
                           gram=None, x0=None) -> EstimateRecord:
    """Single-environment Lasso with unit loss weight.

    Minimizes 0.5 ||y_e - X_e b||^2 + sum_j lam_j |b_j|; lam defaults to the
    environment's own penalty weights.
    """
    lam = env.lambda_weights if lam is None else np.asarray(lam, dtype=float)
    gram = environment_gram(env) if gram is None else gram
    G, h, _ = gram
    res = solve_weighted_l1(G, h, lam, x0=x0, tol=tol, max_sweeps=max_iter)
    objective = _quadratic_loss(gram, res.b) + float(lam @ np.abs(res.b))
    return EstimateRecord(beta_hat=res.b, objective=objective,
                          kkt_residual=res.kkt_residual,
                          iterations=res.iterations, converged=res.converged,
                          kind="individual")


def model_average(estimates, pi) -> np.ndarray:
    """Weighted average sum_e pi_e beta_hat_e; weights must sum to 1."""
    pi = np.asarray(pi, dtype=float)
    if abs(pi.sum() - 1.0) > 1e-12:
        raise ValueError("average weights must sum to 1")
    if len(estimates) != pi.size:
        raise ValueError("one weight per estimate required")
    out = np.zeros_like(np.asarray(estimates[0], dtype=float))
    for w, est in zip(pi, estimates):
        out += w * np.asarray(est, dtype=float)
    return out


def solve_second_step(env_1, beta_hat_first, penalty, tol=DEFAULT_TOL,
                      max_iter=None, gram=None, x0=None) -> EstimateRecord:
    """Target-environment refit penalized toward a first-step estimate.

    Minimizes 0.5 ||y_1 - X_1 b||^2 + penalty(b; beta_hat_first) where the
    penalty is lambda_rt ||b - beta_hat||_1 (joint) or
    sum_j mu(|beta_hat_j|) |b_j| (adaptive).  The joint solve runs in the
    shifted variable b - beta_hat.
    """
    beta_hat_first = np.asarray(beta_hat_first, dtype=float)
    gram = environment_gram(env_1) if gram is None else gram
    G, h, _ = gram
    p = beta_hat_first.size
    if isinstance(penalty, JointPenalty):
        c = h - G @ beta_hat_first
        w = penalty.lambda_rt * np.ones(p)
        if x0 is not None:
            x0 = np.asarray(x0, dtype=float) - beta_hat_first
        res = solve_weighted_l1(G, c, w, x0=x0, tol=tol, max_sweeps=max_iter)
        b = beta_hat_first + res.b
        penalty_value = penalty.lambda_rt * float(np.sum(np.abs(res.b)))
        kind = "second-step-joint"
    elif isinstance(penalty, AdaptivePenalty):
        w = penalty.weights(beta_hat_first)
        res = solve_weighted_l1(G, h, w, x0=x0, tol=tol, max_sweeps=max_iter)
        b = res.b
        penalty_value = float(w @ np.abs(b))
        kind = "second-step-adaptive"
    else:
        raise TypeError("penalty must be JointPenalty or AdaptivePenalty")
    objective = _quadratic_loss(gram, b) + penalty_value
    return EstimateRecord(beta_hat=b, objective=objective,
                          kkt_residual=res.kkt_residual,
                          iterations=res.iterations, converged=res.converged,
                          kind=kind)


__all__ = [
    "EstimateRecord",
    "environment_gram",
    "solve_stacked_lasso",
    "solve_individual_lasso",
    "model_average",
    "solve_second_step",
]
