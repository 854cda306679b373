"""Fixed-design denoisers: weighted multi-quadratic plus weighted-l1 proxes.

Every denoiser in the package reduces to one canonical problem

    minimize_d   0.5 * d' Q d - c' d + sum_j w_j |d_j|

for an SPD aggregate Q, solved by cyclic coordinate descent (compiled kernel
with a pure-Python fallback, see tlamp._cd).  This module owns the
reductions:

* eta_multi  -- multi-environment denoiser with loss weights varpi_e,
  covariances Sigma_e, centers beta_e and arguments v_e;
* eta_single -- the single-environment specialization;
* xi_second_step -- the second-step denoiser anchored at a first-step
  estimate, with either a joint (translated l1) or an adaptively weighted
  penalty.

EtaAggregate / XiAggregate are the reusable forms for Monte-Carlo loops:
they precompute everything that does not depend on the Gaussian argument
and support batched solves with per-replicate warm starts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ._cd import cd_solve
from ._cd_python import _kkt_from_u
from ._linalg import sym_sqrt

DEFAULT_TOL = 1e-8

# Probe points used to sanity-check that an adaptive weight function is
# positive and non-increasing.
_MU_PROBE = (0.0, 0.5, 1.0, 10.0, 1e3, 1e6)


# ============================================================
# results and penalties
# ============================================================


@dataclass
class ProxResult:
    """Solution of one denoiser problem.

    ``support`` lists the active coordinates: the nonzeros of the solution,
    except for the joint second-step penalty where it lists the coordinates
    that moved away from the anchor (b_j != beta_hat_j).
    """

    b: np.ndarray
    support: np.ndarray
    kkt_residual: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class JointPenalty:
    """Translated l1 penalty lambda_rt * ||b - anchor||_1."""

    lambda_rt: float

    def __post_init__(self):
        if not self.lambda_rt > 0:
            raise ValueError("lambda_rt must be positive")


@dataclass(frozen=True)
class AdaptivePenalty:
    """Separable penalty sum_j mu(|anchor_j|) * |b_j|.

    ``mu`` must be a positive, non-increasing function accepting numpy
    arrays; see default_mu and mu_from_table.
    """

    mu: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        probe = np.asarray(self.mu(np.array(_MU_PROBE)), dtype=float)
        if probe.shape != (len(_MU_PROBE),):
            raise ValueError("mu must map arrays to arrays elementwise")
        if not np.all(probe > 0):
            raise ValueError("mu must be strictly positive")
        if np.any(np.diff(probe) > 1e-12):
            raise ValueError("mu must be non-increasing")

    def weights(self, anchor):
        vals = np.asarray(self.mu(np.abs(anchor)), dtype=float)
        return vals


def default_mu(x):
    """Default adaptive weight, large near 0 and decaying to 5."""
    return 5.0 + 10.0 / (0.05 + np.square(x))


def mu_from_table(xs, ys):
    """Adaptive weight from a table, linear in between, flat outside.

    xs must be strictly increasing and ys positive non-increasing.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.ndim != 1 or xs.shape != ys.shape or xs.size < 2:
        raise ValueError("need matching 1-d tables with at least two points")
    if np.any(np.diff(xs) <= 0):
        raise ValueError("table abscissae must be strictly increasing")
    if np.any(ys <= 0) or np.any(np.diff(ys) > 0):
        raise ValueError("table values must be positive and non-increasing")

    def mu(x):
        return np.interp(x, xs, ys, left=ys[0], right=ys[-1])

    return mu


# ============================================================
# problem records
# ============================================================


@dataclass
class MultiEnvProxProblem:
    """Arguments of the multi-environment denoiser.

    Objective in b:
        0.5 * sum_e varpi_e ||S_e b - (v_e + S_e beta_e)||^2
        + theta * sum_j lam_j |b_j|
    with S_e the symmetric square root of sigma_e.  sigma_sqrt may be
    supplied to skip the eigendecompositions.
    """

    varpi: np.ndarray
    sigma: Sequence[np.ndarray]
    beta: Sequence[np.ndarray]
    v: Sequence[np.ndarray]
    theta: float
    lam: np.ndarray
    sigma_sqrt: Optional[Sequence[np.ndarray]] = None

    def __post_init__(self):
        self.varpi = np.asarray(self.varpi, dtype=float)
        self.lam = np.asarray(self.lam, dtype=float)
        E = self.varpi.size
        p = self.lam.size
        if not (len(self.sigma) == len(self.beta) == len(self.v) == E):
            raise ValueError("environment lists must all have length E")
        if np.any(self.varpi < 0) or abs(self.varpi.sum() - 1.0) > 1e-12:
            raise ValueError("varpi must be nonnegative and sum to 1")
        if not self.theta > 0:
            raise ValueError("theta must be positive")
        if np.any(self.lam <= 0):
            raise ValueError("lam must be strictly positive")
        self.sigma = [np.asarray(s, dtype=float) for s in self.sigma]
        self.beta = [np.asarray(b, dtype=float) for b in self.beta]
        self.v = [np.asarray(v, dtype=float) for v in self.v]
        for arr in (*self.sigma, *self.beta, *self.v):
            if arr.shape not in ((p, p), (p,)):
                raise ValueError("environment arrays must match p")
        if self.sigma_sqrt is None:
            self.sigma_sqrt = [sym_sqrt(s) for s in self.sigma]
        else:
            self.sigma_sqrt = [np.asarray(s, dtype=float) for s in self.sigma_sqrt]


@dataclass
class SecondStepProxProblem:
    """Arguments of the second-step denoiser anchored at beta_hat.

    Objective in b:
        0.5 * ||S_1 b - m||^2 + theta_rt * penalty(b; beta_hat)
    with m = v_rt + S_1 beta_1 - kappa_1 * gamma_ro * S_1 (beta_1 - beta_hat).
    """

    v_rt: np.ndarray
    beta_hat: np.ndarray
    beta_1: np.ndarray
    sigma_1: np.ndarray
    gamma_ro: float
    kappa_1: float
    theta_rt: float
    penalty: object
    sigma_sqrt_1: Optional[np.ndarray] = None

    def __post_init__(self):
        self.v_rt = np.asarray(self.v_rt, dtype=float)
        self.beta_hat = np.asarray(self.beta_hat, dtype=float)
        self.beta_1 = np.asarray(self.beta_1, dtype=float)
        self.sigma_1 = np.asarray(self.sigma_1, dtype=float)
        if not self.theta_rt > 0:
            raise ValueError("theta_rt must be positive")
        if not isinstance(self.penalty, (JointPenalty, AdaptivePenalty)):
            raise ValueError("penalty must be JointPenalty or AdaptivePenalty")
        p = self.v_rt.size
        if self.sigma_1.shape != (p, p):
            raise ValueError("sigma_1 must be p x p")
        if self.sigma_sqrt_1 is None:
            self.sigma_sqrt_1 = sym_sqrt(self.sigma_1)
        else:
            self.sigma_sqrt_1 = np.asarray(self.sigma_sqrt_1, dtype=float)


# ============================================================
# canonical-form assembly
# ============================================================


def multi_env_components(problem: MultiEnvProxProblem):
    """Reduce a MultiEnvProxProblem to (Q, c, w) with Q = sum varpi_e Sigma_e."""
    p = problem.lam.size
    Q = np.zeros((p, p))
    c = np.zeros(p)
    for e in range(problem.varpi.size):
        ve_weight = problem.varpi[e]
        if ve_weight == 0.0:
            continue  # zero-weight environments are dropped from the objective
        Q += ve_weight * problem.sigma[e]
        c += ve_weight * (
            problem.sigma_sqrt[e] @ problem.v[e] + problem.sigma[e] @ problem.beta[e]
        )
    w = problem.theta * problem.lam
    return Q, c, w


def second_step_components(problem: SecondStepProxProblem):
    """Reduce a SecondStepProxProblem to (Q, c, w, anchor).

    For the joint penalty the reduction is in the shifted variable
    d = b - beta_hat and ``anchor`` is beta_hat; for the adaptive penalty it
    is in b directly and ``anchor`` is None.
    """
    S1 = problem.sigma_sqrt_1
    shift = problem.beta_1 - problem.kappa_1 * problem.gamma_ro * (
        problem.beta_1 - problem.beta_hat
    )
    m = problem.v_rt + S1 @ shift
    Q = problem.sigma_1
    if isinstance(problem.penalty, JointPenalty):
        c = S1 @ m - Q @ problem.beta_hat
        w = problem.theta_rt * problem.penalty.lambda_rt * np.ones(m.size)
        return Q, c, w, problem.beta_hat
    c = S1 @ m
    w = problem.theta_rt * problem.penalty.weights(problem.beta_hat)
    return Q, c, w, None


# ============================================================
# solving
# ============================================================


def solve_weighted_l1(Q, c, w, x0=None, tol=DEFAULT_TOL, max_sweeps=None,
                      obj_trace=None):
    """Solve the canonical problem; returns a ProxResult in the solve variable."""
    Q = np.ascontiguousarray(Q, dtype=float)
    c = np.ascontiguousarray(c, dtype=float)
    w = np.ascontiguousarray(w, dtype=float)
    p = c.size
    if max_sweeps is None:
        max_sweeps = 10 * p
    b = np.zeros(p) if x0 is None else np.array(x0, dtype=float)
    sweeps, kkt, ok = cd_solve(Q, c, w, b, max_sweeps, tol, obj_trace)
    support = np.flatnonzero(b)
    return ProxResult(b=b, support=support, kkt_residual=float(kkt),
                      iterations=int(sweeps), converged=bool(ok))


def eta_multi(problem: MultiEnvProxProblem, tol=DEFAULT_TOL, max_iter=None,
              x0=None) -> ProxResult:
    """Multi-environment denoiser; max_iter counts coordinate sweeps."""
    Q, c, w = multi_env_components(problem)
    return solve_weighted_l1(Q, c, w, x0=x0, tol=tol, max_sweeps=max_iter)


def eta_single(v, theta, lam, sigma, beta, tol=DEFAULT_TOL, max_iter=None,
               x0=None, sigma_sqrt=None) -> ProxResult:
    """Single-environment denoiser (eta_multi with E = 1, weight 1)."""
    problem = MultiEnvProxProblem(
        varpi=np.array([1.0]), sigma=[sigma], beta=[beta], v=[v],
        theta=theta, lam=lam,
        sigma_sqrt=None if sigma_sqrt is None else [sigma_sqrt],
    )
    return eta_multi(problem, tol=tol, max_iter=max_iter, x0=x0)


def xi_second_step(problem: SecondStepProxProblem, tol=DEFAULT_TOL,
                   max_iter=None, x0=None) -> ProxResult:
    """Second-step denoiser.

    With the joint penalty the solve runs in d = b - beta_hat (x0, if given,
    is still in b coordinates); the result reports b and the moved-coordinate
    support.
    """
    Q, c, w, anchor = second_step_components(problem)
    if anchor is not None and x0 is not None:
        x0 = np.asarray(x0, dtype=float) - anchor
    res = solve_weighted_l1(Q, c, w, x0=x0, tol=tol, max_sweeps=max_iter)
    if anchor is not None:
        res.b = res.b + anchor
    return res


def kkt_residual(b, problem) -> float:
    """Stationarity violation of b for either denoiser problem (max norm)."""
    b = np.asarray(b, dtype=float)
    if isinstance(problem, MultiEnvProxProblem):
        Q, c, w = multi_env_components(problem)
        d = b
    elif isinstance(problem, SecondStepProxProblem):
        Q, c, w, anchor = second_step_components(problem)
        d = b if anchor is None else b - anchor
    else:
        raise TypeError(f"unsupported problem type {type(problem).__name__}")
    return _kkt_from_u(c, w, d, Q @ d)


# ============================================================
# reusable aggregates for Monte-Carlo loops
# ============================================================


class EtaAggregate:
    """Multi-environment denoiser with fixed parameters and varying v_e.

    Precomputes the aggregate quadratic Q = sum_e varpi_e Sigma_e, the
    constant part of the linear term, and the matrices mapping each v_e into
    it.  solve/solve_batch then cost one matvec per environment plus the
    coordinate-descent sweeps, and warm starts are taken (and left) in the
    caller's buffer.
    """

    def __init__(self, varpi, sigma, sigma_sqrt, beta, theta, lam,
                 tol=DEFAULT_TOL, max_sweeps=None):
        varpi = np.asarray(varpi, dtype=float)
        lam = np.asarray(lam, dtype=float)
        p = lam.size
        self.p = p
        self.keep = np.flatnonzero(varpi > 0)
        if self.keep.size == 0:
            raise ValueError("all environment weights are zero")
        Q = np.zeros((p, p))
        c0 = np.zeros(p)
        vmats = []
        for e in self.keep:
            Q += varpi[e] * np.asarray(sigma[e], dtype=float)
            c0 += varpi[e] * (np.asarray(sigma[e]) @ np.asarray(beta[e]))
            vmats.append(np.ascontiguousarray(varpi[e] * np.asarray(sigma_sqrt[e])))
        self.Q = np.ascontiguousarray(Q)
        self.c0 = c0
        self.vmats = vmats
        self.w = np.ascontiguousarray(theta * lam)
        self.tol = tol
        self.max_sweeps = 10 * p if max_sweeps is None else max_sweeps

    def rhs(self, vs):
        """Linear term for one argument tuple (indexed by original env)."""
        c = self.c0.copy()
        for mat, e in zip(self.vmats, self.keep):
            c += mat @ np.asarray(vs[e], dtype=float)
        return c

    def rhs_batch(self, vs):
        """Linear terms for a batch: vs[e] has shape (R, p); returns (R, p)."""
        C = np.broadcast_to(self.c0, (vs[self.keep[0]].shape[0], self.p)).copy()
        for mat, e in zip(self.vmats, self.keep):
            C += np.asarray(vs[e], dtype=float) @ mat.T
        return C

    def _solve_c(self, c, b) -> ProxResult:
        sweeps, kkt, ok = cd_solve(self.Q, np.ascontiguousarray(c), self.w, b,
                                   self.max_sweeps, self.tol, None)
        return ProxResult(b=b, support=np.flatnonzero(b),
                          kkt_residual=float(kkt), iterations=int(sweeps),
                          converged=bool(ok))

    def solve(self, vs, x0=None) -> ProxResult:
        b = np.zeros(self.p) if x0 is None else np.array(x0, dtype=float)
        return self._solve_c(self.rhs(vs), b)

    def solve_batch(self, vs, warm):
        """Solve one problem per row; warm (R, p) is updated in place."""
        C = self.rhs_batch(vs)
        return [self._solve_c(C[r], warm[r]) for r in range(warm.shape[0])]


class XiAggregate:
    """Second-step denoiser with fixed parameters and varying (v_rt, anchor).

    The per-call anchor is the first-step denoiser output, so unlike
    EtaAggregate both the linear term and (for the adaptive penalty) the
    weights change per solve.  Solves run in the shifted variable for the
    joint penalty; warm buffers hold that variable, results report b.
    """

    def __init__(self, sigma_1, sigma_sqrt_1, beta_1, kappa_1, gamma_ro,
                 theta_rt, penalty, tol=DEFAULT_TOL, max_sweeps=None):
        self.Q = np.ascontiguousarray(sigma_1, dtype=float)
        self.S1 = np.asarray(sigma_sqrt_1, dtype=float)
        self.beta_1 = np.asarray(beta_1, dtype=float)
        self.p = self.beta_1.size
        self.kappa_1 = float(kappa_1)
        self.gamma_ro = float(gamma_ro)
        self.theta_rt = float(theta_rt)
        if not isinstance(penalty, (JointPenalty, AdaptivePenalty)):
            raise ValueError("penalty must be JointPenalty or AdaptivePenalty")
        self.penalty = penalty
        self.joint = isinstance(penalty, JointPenalty)
        self.tol = tol
        self.max_sweeps = 10 * self.p if max_sweeps is None else max_sweeps

    def _c_and_w(self, v_rt, beta_hat):
        kg = self.kappa_1 * self.gamma_ro
        shift = self.beta_1 - kg * (self.beta_1 - beta_hat)
        m = v_rt + self.S1 @ shift
        if self.joint:
            c = self.S1 @ m - self.Q @ beta_hat
            w = self.theta_rt * self.penalty.lambda_rt * np.ones(self.p)
        else:
            c = self.S1 @ m
            w = self.theta_rt * self.penalty.weights(beta_hat)
        return c, w

    def _finish(self, b, beta_hat, sweeps, kkt, ok) -> ProxResult:
        support = np.flatnonzero(b)
        out = b + beta_hat if self.joint else b
        return ProxResult(b=out, support=support, kkt_residual=float(kkt),
                          iterations=int(sweeps), converged=bool(ok))

    def solve(self, v_rt, beta_hat, x0=None) -> ProxResult:
        """x0, when given, is in the solve variable (shifted for joint)."""
        beta_hat = np.asarray(beta_hat, dtype=float)
        c, w = self._c_and_w(np.asarray(v_rt, dtype=float), beta_hat)
        b = np.zeros(self.p) if x0 is None else np.array(x0, dtype=float)
        sweeps, kkt, ok = cd_solve(self.Q, np.ascontiguousarray(c),
                                   np.ascontiguousarray(w), b,
                                   self.max_sweeps, self.tol, None)
        return self._finish(b, beta_hat, sweeps, kkt, ok)

    def solve_batch(self, v_rt, beta_hat, warm):
        """Row-wise solves; v_rt, beta_hat, warm all (R, p), warm updated."""
        kg = self.kappa_1 * self.gamma_ro
        # batched m and c: row r of M is m for replicate r
        shift = self.beta_1 - kg * (self.beta_1 - beta_hat)
        M = v_rt + shift @ self.S1.T
        C = M @ self.S1.T
        if self.joint:
            C -= beta_hat @ self.Q.T
            w = np.ascontiguousarray(
                self.theta_rt * self.penalty.lambda_rt * np.ones(self.p)
            )
        out = []
        for r in range(warm.shape[0]):
            if not self.joint:
                w = np.ascontiguousarray(
                    self.theta_rt * self.penalty.weights(beta_hat[r])
                )
            sweeps, kkt, ok = cd_solve(self.Q, np.ascontiguousarray(C[r]), w,
                                       warm[r], self.max_sweeps, self.tol, None)
            out.append(self._finish(warm[r].copy(), beta_hat[r], sweeps, kkt, ok))
        return out


__all__ = [
    "DEFAULT_TOL",
    "ProxResult",
    "JointPenalty",
    "AdaptivePenalty",
    "default_mu",
    "mu_from_table",
    "MultiEnvProxProblem",
    "SecondStepProxProblem",
    "multi_env_components",
    "second_step_components",
    "solve_weighted_l1",
    "eta_multi",
    "eta_single",
    "xi_second_step",
    "kkt_residual",
    "EtaAggregate",
    "XiAggregate",
]
