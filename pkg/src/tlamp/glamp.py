"""AMP iterations on data, with convergence tracking against direct solvers.

Two layers live here.  The generic engine runs the symmetric recursion
x^{t+1} = A f_t(x^t) - f_{t-1}(x^{t-1}) B_t' for a GOE-distributed A,
estimating the Onsager matrix B_t (an N-average of row Jacobians) and the
covariance predictions Sigma^t by Monte Carlo.  On top of it sit the
concrete data-domain recursions whose fixed parameters come from the
solved limiting systems in state_evo: the multi-environment first-step
run, its single-environment specialization, and the induced second-step
run started from a converged first-step estimate.  Every runner records
normalized iterate statistics in an IterateTrace so tests and the CLI can
compare them against the limiting predictions and the direct solvers.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Optional, Sequence

import numpy as np

from ._rng import stream
from .model import Environment
from .prox import DEFAULT_TOL, EtaAggregate, XiAggregate
from .state_evo import (
    Divergence,
    IndividualFixedPoint,
    MCSettings,
    ProxFailure,
    SecondStepFixedPoint,
    StackFixedPoint,
    mean_se,
)

# Abort a data-domain run when (1/p)||v^t||^2 exceeds this multiple of the
# predicted variance; a miscomputed correction term shows up as blow-up
# within a few steps, and failing fast beats iterating on garbage.
DIVERGENCE_CAP = 100.0

# Central-difference step for the finite-difference row Jacobians,
# scaled per entry as FD_STEP * (1 + |x|).
FD_STEP = 1e-5

# Row-subsample size for finite-difference Jacobians on large instances.
DEFAULT_JACOBIAN_ROWS = 256


# ============================================================
# trace container
# ============================================================


@dataclasses.dataclass
class IterateTrace:
    """Long-form per-step records of one AMP run.

    ``rows`` holds (t, quantity, environment, value) tuples; ``sigma``
    holds the symmetric engine's covariance predictions keyed by step (the
    data-domain runs carry their constant predictions as ordinary rows).
    Every record's step index must lie in [0, horizon].
    """

    horizon: int
    rows: list = dataclasses.field(default_factory=list)
    sigma: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    def record(self, step, quantity, value, env=0):
        if not 0 <= step <= self.horizon:
            raise ValueError(f"step {step} outside [0, {self.horizon}]")
        self.rows.append((int(step), str(quantity), int(env), float(value)))

    def quantities(self):
        return sorted({q for _, q, _, _ in self.rows})

    def series(self, quantity, env=0):
        """(steps, values) for one quantity and environment, step-ordered."""
        pairs = sorted((t, v) for t, q, e, v in self.rows
                       if q == quantity and e == env)
        steps = np.array([t for t, _ in pairs], dtype=int)
        values = np.array([v for _, v in pairs], dtype=float)
        return steps, values

    def value_at(self, step, quantity, env=0):
        for t, q, e, v in self.rows:
            if t == step and q == quantity and e == env:
                return v
        raise KeyError(f"no record for {quantity!r} at step {step}, "
                       f"environment {env}")

    def to_csv(self, path):
        """Write ``t,quantity,environment,value`` lines (LF, %.17g floats).

        Sigma predictions are flattened into quantity names ``sigma_a_b``.
        ``path`` may be a filesystem path or a writable file object.
        """
        lines = ["t,quantity,environment,value"]
        for t, q, e, v in self.rows:
            lines.append(f"{t},{q},{e},{v:.17g}")
        for t in sorted(self.sigma):
            mat = np.atleast_2d(self.sigma[t])
            for a in range(mat.shape[0]):
                for b in range(mat.shape[1]):
                    lines.append(f"{t},sigma_{a}_{b},0,{mat[a, b]:.17g}")
        text = "\n".join(lines) + "\n"
        if hasattr(path, "write"):
            path.write(text)
        else:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)


# ============================================================
# symmetric engine
# ============================================================


def sample_goe(n, seed):
    """N x N matrix G + G' with G entries iid N(0, 1/(2N))."""
    if n < 1:
        raise ValueError("n must be >= 1")
    g = stream(seed, "goe").normal(0.0, np.sqrt(1.0 / (2.0 * n)), (n, n))
    return g + g.T


@dataclasses.dataclass(frozen=True)
class SymmetricGlampInstance:
    """One symmetric AMP problem: matrix, denoiser family, start, side data.

    ``a_mat`` is N x N symmetric (sample_goe draws the Gaussian orthogonal
    ensemble used by the theory).  ``denoiser(t, x, y)`` maps the N x q
    iterate to N x q and is assumed uniformly Lipschitz in x; the contract
    is documented rather than enforced, but the finite-difference mode
    spot-checks it numerically.  ``jacobian(t, x, y)``, required when
    ``onsager_mode`` is "analytic", returns the N x q x q stack of row
    Jacobians d f_t(x)_j / d x_j.  Mode "mc-jacobian" estimates the same
    row average by central differences instead.
    """

    a_mat: np.ndarray
    denoiser: Callable[[int, np.ndarray, np.ndarray], np.ndarray]
    x0: np.ndarray
    y: np.ndarray
    jacobian: Optional[Callable[[int, np.ndarray, np.ndarray], np.ndarray]] = None
    onsager_mode: str = "analytic"

    def __post_init__(self):
        a = np.asarray(self.a_mat, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("a_mat must be a square matrix")
        scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
        if float(np.max(np.abs(a - a.T))) > 1e-12 * scale:
            raise ValueError("a_mat must be symmetric")
        x0 = np.asarray(self.x0, dtype=float)
        if x0.ndim == 1:
            x0 = x0[:, None]
        if x0.ndim != 2 or x0.shape[0] != a.shape[0]:
            raise ValueError("x0 must have one row per row of a_mat")
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if y.ndim != 2 or y.shape[0] != a.shape[0]:
            raise ValueError("y must have one row per row of a_mat")
        if self.onsager_mode not in ("analytic", "mc-jacobian"):
            raise ValueError("onsager_mode must be 'analytic' or 'mc-jacobian'")
        if self.onsager_mode == "analytic" and self.jacobian is None:
            raise ValueError("analytic mode needs a jacobian callback")
        object.__setattr__(self, "a_mat", a)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "y", y)

    @property
    def n(self):
        return self.a_mat.shape[0]

    @property
    def q(self):
        return self.x0.shape[1]


@dataclasses.dataclass(frozen=True)
class SymmetricRun:
    """Symmetric engine output: trace plus iterates and Onsager estimates.

    ``x`` maps step -> N x q iterate (0..horizon); ``b_mats`` and ``b_se``
    map step t >= 1 -> the q x q Onsager matrix used to form x^{t+1} and
    its Monte Carlo standard error.  Covariance predictions live in
    ``trace.sigma``.
    """

    trace: IterateTrace
    x: dict
    b_mats: dict
    b_se: dict

    @property
    def final_x(self):
        return self.x[max(self.x)]


def _with_trace(exc: Divergence, trace: IterateTrace) -> Divergence:
    """Attach the rows recorded so far, so callers can flush a partial run."""
    exc.trace = trace
    return exc


def _psd_factor(sigma):
    """L with L L' = sigma for a PSD matrix, tolerating zero eigenvalues."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    vals, vecs = np.linalg.eigh(0.5 * (sigma + sigma.T))
    if vals.min() < -1e-10 * max(1.0, float(vals.max())):
        raise ValueError("covariance prediction lost positive semidefiniteness")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _call_denoiser(instance, step, x):
    try:
        out = instance.denoiser(step, x, instance.y)
    except Exception as exc:
        raise ProxFailure(
            f"denoiser callback raised at step {step}: {exc}", step) from exc
    out = np.asarray(out, dtype=float)
    if out.shape != x.shape:
        raise ValueError(
            f"denoiser returned shape {out.shape}, expected {x.shape}")
    return out


def _fd_row_jacobian(instance, step, z, rows):
    """Central-difference row Jacobians of f_step at z, for selected rows."""
    q = z.shape[1]
    jac = np.zeros((rows.size, q, q))
    for k, j in enumerate(rows):
        for alpha in range(q):
            h = FD_STEP * (1.0 + abs(z[j, alpha]))
            z_plus = z.copy()
            z_plus[j, alpha] += h
            z_minus = z.copy()
            z_minus[j, alpha] -= h
            f_plus = _call_denoiser(instance, step, z_plus)[j]
            f_minus = _call_denoiser(instance, step, z_minus)[j]
            jac[k, :, alpha] = (f_plus - f_minus) / (2.0 * h)
    return jac


def run_symmetric_glamp(instance, horizon, mc, jacobian_rows=None,
                        target=None):
    """Run the symmetric recursion for ``horizon`` steps.

    Per step t the engine draws ``mc.replicates`` Gaussian surrogates with
    rows iid N(0, Sigma^t), uses them to estimate the next covariance
    prediction Sigma^{t+1} = (1/N) E[f_t(Z)' f_t(Z)] and (for t >= 1) the
    Onsager matrix B_t, then forms x^{t+1} = A f_t(x^t) - f_{t-1}(x^{t-1})
    B_t'.  No correction term is applied at t = 0.  In mode "mc-jacobian"
    the row average runs over ``jacobian_rows`` sampled rows (default: all
    rows up to 256, then a fixed random subsample).

    Raises Divergence on a non-finite iterate and ProxFailure when the
    denoiser callback raises; both report the step.
    """
    if not isinstance(instance, SymmetricGlampInstance):
        raise TypeError("instance must be a SymmetricGlampInstance")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if not isinstance(mc, MCSettings):
        raise TypeError("mc must be MCSettings")
    n, q = instance.n, instance.q
    if mc.p is not None and mc.p != n:
        raise ValueError(f"mc.p = {mc.p} does not match instance rows {n}")
    if target is not None:
        target = np.asarray(target, dtype=float)
        if target.ndim == 1:
            target = target[:, None]
        if target.shape != (n, q):
            raise ValueError("target must match the iterate shape")

    cap = DEFAULT_JACOBIAN_ROWS if jacobian_rows is None else int(jacobian_rows)
    if cap < 1:
        raise ValueError("jacobian_rows must be >= 1")
    if n <= cap:
        row_sel = np.arange(n)
    else:
        row_sel = np.sort(stream(mc.seed, "amp-jac-rows").choice(
            n, size=cap, replace=False))

    trace = IterateTrace(horizon)
    x = {0: instance.x0.copy()}
    sigma = {0: instance.x0.T @ instance.x0 / n}
    trace.sigma[0] = sigma[0]
    b_mats, b_se = {}, {}

    def note(step, xt):
        trace.record(step, "x_sq", np.sum(xt * xt) / n)
        if step >= 1:
            diff = xt - x[step - 1]
            trace.record(step, "x_step", np.sum(diff * diff) / n)
        if step >= 2:
            na = float(np.linalg.norm(x[step - 1]))
            nb = float(np.linalg.norm(xt))
            corr = 0.0 if na * nb == 0.0 else float(
                np.sum(x[step - 1] * xt)) / (na * nb)
            trace.record(step, "x_corr", corr)
        if target is not None:
            diff = xt - target
            trace.record(step, "target_dist", np.sum(diff * diff) / n)

    note(0, x[0])
    f_cur = _call_denoiser(instance, 0, x[0])
    f_prev = None

    for t in range(horizon):
        factor = _psd_factor(sigma[t])
        draws = stream(mc.seed, "amp-se", t).normal(
            0.0, 1.0, (mc.replicates, n, q))
        sig_acc = np.zeros((q, q))
        jac_reps = np.zeros((mc.replicates, q, q)) if t >= 1 else None
        for r in range(mc.replicates):
            z = draws[r] @ factor.T
            fz = _call_denoiser(instance, t, z)
            sig_acc += fz.T @ fz / n
            if t >= 1:
                if instance.onsager_mode == "analytic":
                    rows_jac = np.asarray(
                        instance.jacobian(t, z, instance.y), dtype=float)
                    if rows_jac.shape != (n, q, q):
                        raise ValueError(
                            f"jacobian returned shape {rows_jac.shape}, "
                            f"expected {(n, q, q)}")
                    jac_reps[r] = rows_jac.mean(axis=0)
                else:
                    jac_reps[r] = _fd_row_jacobian(
                        instance, t, z, row_sel).mean(axis=0)
        sigma[t + 1] = sig_acc / mc.replicates
        trace.sigma[t + 1] = sigma[t + 1]
        x_next = instance.a_mat @ f_cur
        if t >= 1:
            b_mats[t], b_se[t] = mean_se(jac_reps, axis=0)
            x_next -= f_prev @ b_mats[t].T
        if not np.all(np.isfinite(x_next)):
            raise _with_trace(
                Divergence(f"non-finite iterate at step {t + 1}"), trace)
        x[t + 1] = x_next
        note(t + 1, x_next)
        if t + 1 < horizon:
            f_prev = f_cur
            f_cur = _call_denoiser(instance, t + 1, x_next)

    return SymmetricRun(trace=trace, x=x, b_mats=b_mats, b_se=b_se)


# ============================================================
# first-step runs (multi-environment and single-environment)
# ============================================================


@dataclasses.dataclass(frozen=True)
class MultiEnvRun:
    """First-step AMP output.

    ``v[t]`` (t >= 1) and ``r[t]`` (t >= 0) are lists with one length-p /
    length-n_e vector per environment; ``eta[t]`` (t >= 0) is the denoised
    iterate.  The environments are kept so subgradient_residual can
    reconstruct data-side quantities.
    """

    envs: tuple
    trace: IterateTrace
    v: dict
    r: dict
    eta: dict

    @property
    def final_eta(self):
        return self.eta[max(self.eta)]


def _shared_penalty(envs, varpi):
    keep = np.flatnonzero(np.asarray(varpi, dtype=float) > 0)
    if keep.size == 0:
        raise ValueError("all environment weights are zero")
    lam = envs[keep[0]].lambda_weights
    for e in keep[1:]:
        if not np.array_equal(envs[e].lambda_weights, lam):
            raise ValueError("positive-weight environments must share one "
                             "penalty vector")
    return lam


def _accept(result, step, what):
    if not result.converged:
        raise ProxFailure(f"{what} denoiser did not converge at step {step}("
                          f"kkt {result.kkt_residual:.2e})", step)
    return result.b


def _run_first_step(envs, tau_star, varpi_star, theta_star, delta_bar,
                    horizon, seed, onsager, target, prox_tol):
    p = envs[0].p
    n_env = len(envs)
    for env in envs:
        if env.p != p:
            raise ValueError("environments disagree on p")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    tau_star = np.asarray(tau_star, dtype=float)
    delta_bar = np.asarray(delta_bar, dtype=float)
    if target is not None:
        target = np.asarray(target, dtype=float)
        if target.shape != (p,):
            raise ValueError("target must be a length-p vector")

    lam = _shared_penalty(envs, varpi_star)
    agg = EtaAggregate(varpi_star, [env.sigma for env in envs],
                       [env.sigma_sqrt for env in envs],
                       [env.beta for env in envs], theta_star, lam,
                       tol=prox_tol)
    design = [env.Z_design @ env.sigma_sqrt for env in envs]
    s_beta = [env.sigma_sqrt @ env.beta for env in envs]
    coef = [envs[e].kappa * delta_bar[e] if onsager else 0.0
            for e in range(n_env)]
    caps = DIVERGENCE_CAP * tau_star ** 2

    trace = IterateTrace(horizon)
    v0 = [tau_star[e] * stream(seed, "amp-init", e).normal(0.0, 1.0, p)
          for e in range(n_env)]
    eta = {0: _accept(agg.solve(v0), 0, "first-step")}
    r = {0: [design[e] @ eta[0] for e in range(n_env)]}
    v = {}

    def note(step):
        et = eta[step]
        trace.record(step, "eta_sq", et @ et / p)
        if step >= 1:
            diff = et - eta[step - 1]
            trace.record(step, "eta_step", diff @ diff / p)
            for e in range(n_env):
                ve = v[step][e]
                trace.record(step, "v_sq", ve @ ve / p, env=e)
                trace.record(step, "v_sq_pred", tau_star[e] ** 2, env=e)
                dr = r[step][e] - r[step - 1][e]
                trace.record(step, "r_step", dr @ dr / envs[e].n, env=e)
        if step >= 2:
            for e in range(n_env):
                va, vb = v[step - 1][e], v[step][e]
                den = float(np.linalg.norm(va)) * float(np.linalg.norm(vb))
                trace.record(step, "v_corr",
                             0.0 if den == 0.0 else float(va @ vb) / den,
                             env=e)
                dv = vb - va
                trace.record(step, "v_step", dv @ dv / p, env=e)
        if target is not None:
            diff = et - target
            trace.record(step, "target_dist", diff @ diff / p)

    note(0)
    for t in range(1, horizon + 1):
        resid = [envs[e].y - r[t - 1][e] for e in range(n_env)]
        vt = []
        for e in range(n_env):
            ve = (envs[e].Z_design.T @ resid[e] - s_beta[e]
                  + envs[e].sigma_sqrt @ eta[t - 1])
            sq = ve @ ve / p
            if not sq <= caps[e]:
                raise _with_trace(Divergence(
                    f"(1/p)||v||^2 = {sq:.3e} above the guard "
                    f"{caps[e]:.3e} in environment {e} at step {t}"), trace)
            vt.append(ve)
        v[t] = vt
        eta[t] = _accept(agg.solve(vt, x0=eta[t - 1]), t, "first-step")
        r[t] = [design[e] @ eta[t] - coef[e] * resid[e] for e in range(n_env)]
        note(t)

    return MultiEnvRun(envs=tuple(envs), trace=trace, v=v, r=r, eta=eta)


def run_stack_glamp(envs: Sequence[Environment], fp: StackFixedPoint,
                    horizon: int, seed: int, onsager: bool = True,
                    target: Optional[np.ndarray] = None,
                    prox_tol: float = DEFAULT_TOL) -> MultiEnvRun:
    """First-step AMP across all environments at the solved fixed point.

    Starts from eta^0 applied to fresh external Gaussians tau_e* Z_e, then
    iterates v_e^t = Z_e'(y_e - r_e^{t-1}) - S_e beta_e + S_e eta^{t-1}
    and r_e^t = Z_e S_e eta^t - kappa_e delta_e (y_e - r_e^{t-1}), with
    the correction coefficients kappa_e delta_e frozen at the fixed
    point's Monte Carlo estimates.  ``onsager=False`` zeroes those
    coefficients (diagnostic mode; the variance tracking then breaks).
    ``target``, when given, adds per-step distance records for eta^t.
    """
    if not isinstance(fp, StackFixedPoint):
        raise TypeError("fp must be a StackFixedPoint")
    if len(envs) != fp.tau.size:
        raise ValueError(f"{len(envs)} environments vs fixed point for "
                         f"{fp.tau.size}")
    return _run_first_step(list(envs), fp.tau, fp.varpi, fp.theta,
                           fp.delta_bar, horizon, seed, onsager, target,
                           prox_tol)


def run_individual_glamp(env: Environment, fp: IndividualFixedPoint,
                         horizon: int, seed: int, onsager: bool = True,
                         target: Optional[np.ndarray] = None,
                         prox_tol: float = DEFAULT_TOL) -> MultiEnvRun:
    """Single-environment first-step AMP (weight 1, own penalty vector)."""
    if not isinstance(fp, IndividualFixedPoint):
        raise TypeError("fp must be an IndividualFixedPoint")
    return _run_first_step([env], np.array([fp.tau_ind]), np.array([1.0]),
                           fp.theta_ind, np.array([fp.delta_ind]), horizon,
                           seed, onsager, target, prox_tol)


# ============================================================
# induced second-step run
# ============================================================


@dataclasses.dataclass(frozen=True)
class SecondStepRun:
    """Induced second-step AMP output.

    ``v[t]``, ``r[t]``, ``xi[t]`` are keyed by step from 0; ``v_infty``
    and ``r_infty`` are the converged first-step surrogates the recursion
    is anchored to.  The environment, anchor and penalty are kept for
    subgradient_residual.
    """

    env: Environment
    beta_hat: np.ndarray
    penalty: object
    trace: IterateTrace
    v: dict
    r: dict
    xi: dict
    v_infty: np.ndarray
    r_infty: np.ndarray

    @property
    def final_xi(self):
        return self.xi[max(self.xi)]


def run_induced_second_step_amp(env_1: Environment, beta_hat_stack,
                                stack_fp: StackFixedPoint,
                                second_fp: SecondStepFixedPoint,
                                horizon: int, seed: int, penalty,
                                onsager: bool = True,
                                target: Optional[np.ndarray] = None,
                                prox_tol: float = DEFAULT_TOL) -> SecondStepRun:
    """Second-step AMP on the target environment, anchored at beta_hat.

    ``env_1`` must be the environment stored first in the first-step
    system (its tau and delta entries are read at index 0).  The run
    builds the converged first-step surrogates

        v_inf = Z_1'(y_1 - X_1 beta_hat) / (1 - kappa_1 delta_1)
                + S_1 (beta_hat - beta_1),
        r_inf = y_1 - (y_1 - X_1 beta_hat) / (1 - kappa_1 delta_1),

    initializes v^0 = zeta* tau_rt* v_inf / tau_1* plus an independent
    Gaussian filling the remaining variance, and then iterates the induced
    recursion with the correction coefficients gamma_ro, gamma_rt frozen
    at the solved second-step values.  ``onsager=False`` zeroes both
    coefficients in the v/r updates (diagnostic mode); the denoiser keeps
    its solved parameters either way.
    """
    if not isinstance(stack_fp, StackFixedPoint):
        raise TypeError("stack_fp must be a StackFixedPoint")
    if not isinstance(second_fp, SecondStepFixedPoint):
        raise TypeError("second_fp must be a SecondStepFixedPoint")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    p = env_1.p
    beta_hat = np.asarray(beta_hat_stack, dtype=float)
    if beta_hat.shape != (p,):
        raise ValueError("beta_hat_stack must be a length-p vector")
    if target is not None:
        target = np.asarray(target, dtype=float)
        if target.shape != (p,):
            raise ValueError("target must be a length-p vector")

    kappa = env_1.kappa
    delta_1 = float(stack_fp.delta_bar[0])
    tau_1 = float(stack_fp.tau[0])
    one_minus = 1.0 - kappa * delta_1
    if not one_minus > 0.0:
        raise ValueError("first-step correction factor 1 - kappa*delta must "
                         "be positive")
    design = env_1.Z_design @ env_1.sigma_sqrt
    resid_hat = env_1.y - design @ beta_hat
    v_inf = (env_1.Z_design.T @ resid_hat / one_minus
             + env_1.sigma_sqrt @ (beta_hat - env_1.beta))
    u = resid_hat / one_minus  # equals y_1 - r_inf
    r_inf = env_1.y - u

    zeta = second_fp.zeta
    tau_rt = second_fp.tau_rt
    g_ro = second_fp.gamma_ro if onsager else 0.0
    g_rt = second_fp.gamma_rt if onsager else 0.0
    kg_ro = kappa * g_ro
    kg_rt = kappa * g_rt

    agg = XiAggregate(env_1.sigma, env_1.sigma_sqrt, env_1.beta, kappa,
                      second_fp.gamma_ro, second_fp.theta_rt, penalty,
                      tol=prox_tol)
    joint = agg.joint

    z_init = stream(seed, "amp-init-rt").normal(0.0, 1.0, p)
    root = np.sqrt(max(0.0, 1.0 - zeta ** 2))
    v = {0: zeta * tau_rt * v_inf / tau_1 + root * tau_rt * z_init}
    xi0 = _accept(agg.solve(v[0], beta_hat), 0, "second-step")
    xi = {0: xi0}
    r = {0: design @ xi0 - (g_rt * tau_rt * zeta / tau_1 + g_ro) * kappa * u}
    s_beta = env_1.sigma_sqrt @ env_1.beta
    s_beta_hat = env_1.sigma_sqrt @ beta_hat
    cap = DIVERGENCE_CAP * tau_rt ** 2

    trace = IterateTrace(horizon)

    def note(step):
        vt, xt = v[step], xi[step]
        trace.record(step, "v_rt_sq", vt @ vt / p)
        trace.record(step, "v_rt_sq_pred", tau_rt ** 2)
        trace.record(step, "xi_sq", xt @ xt / p)
        if step >= 1:
            dv = vt - v[step - 1]
            trace.record(step, "v_rt_step", dv @ dv / p)
            dx = xt - xi[step - 1]
            trace.record(step, "xi_step", dx @ dx / p)
            den = (float(np.linalg.norm(v[step - 1]))
                   * float(np.linalg.norm(vt)))
            trace.record(step, "v_rt_corr",
                         0.0 if den == 0.0 else float(v[step - 1] @ vt) / den)
        if target is not None:
            diff = xt - target
            trace.record(step, "target_dist", diff @ diff / p)

    note(0)
    warm = xi0 - beta_hat if joint else xi0.copy()
    for t in range(1, horizon + 1):
        m = env_1.y - r[t - 1] - kg_ro * u
        vt = (env_1.Z_design.T @ m - (1.0 - kg_ro) * s_beta
              - kg_ro * s_beta_hat + env_1.sigma_sqrt @ xi[t - 1])
        sq = vt @ vt / p
        if not sq <= cap:
            raise _with_trace(
                Divergence(f"(1/p)||v_rt||^2 = {sq:.3e} above the guard "
                           f"{cap:.3e} at step {t}"), trace)
        v[t] = vt
        xi[t] = _accept(agg.solve(vt, beta_hat, x0=warm), t, "second-step")
        warm = xi[t] - beta_hat if joint else xi[t].copy()
        r[t] = design @ xi[t] - kg_ro * u - kg_rt * m
        note(t)

    return SecondStepRun(env=env_1, beta_hat=beta_hat, penalty=penalty,
                         trace=trace, v=v, r=r, xi=xi, v_infty=v_inf,
                         r_infty=r_inf)


# ============================================================
# subgradient reconstruction
# ============================================================


def subgradient_residual(run, fp, step=None):
    """Penalty subgradient s^t and squared loss-gradient norm at one step.

    For a first-step run (fp a StackFixedPoint or, for single-environment
    runs, an IndividualFixedPoint):

        s^t = (1/theta*) diag(lam)^{-1} sum_e varpi_e*
              (S_e v_e^t + Sigma_e (beta_e - eta^t)),

    and the returned scalar is (1/p)||grad||^2 for grad =
    -sum_e pi_e S_e Z_e'(y_e - X_e eta^t) + lam * s^t, with pi_e = 1 in
    the single-environment case.  For a second-step run (fp a
    SecondStepFixedPoint):

        s^t = (1/theta_rt*) [S_1 v^t + (1 - kappa_1 gamma_ro)
              Sigma_1 (beta_1 - beta_hat) - Sigma_1 (xi^t - beta_hat)],

    with grad = -S_1 Z_1'(y_1 - X_1 xi^t) + s^t.  ``step`` defaults to the
    last stored step.  Returns (s, grad_sq).
    """
    if isinstance(run, MultiEnvRun):
        if isinstance(fp, StackFixedPoint):
            varpi, theta = fp.varpi, fp.theta
            pis = [env.pi for env in run.envs]
        elif isinstance(fp, IndividualFixedPoint):
            if len(run.envs) != 1:
                raise ValueError("individual fixed point needs a "
                                 "single-environment run")
            varpi, theta = np.array([1.0]), fp.theta_ind
            pis = [1.0]
        else:
            raise TypeError("fp must be a StackFixedPoint or "
                            "IndividualFixedPoint for first-step runs")
        if step is None:
            step = max(run.v)
        if step not in run.v:
            raise ValueError(f"no iterate stored for step {step}")
        eta_t, v_t = run.eta[step], run.v[step]
        lam = _shared_penalty(run.envs, varpi)
        p = eta_t.size
        acc = np.zeros(p)
        grad = np.zeros(p)
        for e, env in enumerate(run.envs):
            if varpi[e] > 0:
                acc += varpi[e] * (env.sigma_sqrt @ v_t[e]
                                   + env.sigma @ (env.beta - eta_t))
            if pis[e] > 0:
                design_resid = env.y - env.Z_design @ (env.sigma_sqrt @ eta_t)
                grad -= pis[e] * (env.sigma_sqrt
                                  @ (env.Z_design.T @ design_resid))
        s = acc / (theta * lam)
        grad += lam * s
        return s, float(grad @ grad / p)

    if isinstance(run, SecondStepRun):
        if not isinstance(fp, SecondStepFixedPoint):
            raise TypeError("fp must be a SecondStepFixedPoint for "
                            "second-step runs")
        if step is None:
            step = max(run.v)
        if step not in run.v:
            raise ValueError(f"no iterate stored for step {step}")
        env = run.env
        xi_t, v_t = run.xi[step], run.v[step]
        p = xi_t.size
        anchor_gap = env.sigma @ (env.beta - run.beta_hat)
        s = (env.sigma_sqrt @ v_t
             + (1.0 - env.kappa * fp.gamma_ro) * anchor_gap
             - env.sigma @ (xi_t - run.beta_hat)) / fp.theta_rt
        design_resid = env.y - env.Z_design @ (env.sigma_sqrt @ xi_t)
        grad = -(env.sigma_sqrt @ (env.Z_design.T @ design_resid)) + s
        return s, float(grad @ grad / p)

    raise TypeError("run must be a MultiEnvRun or SecondStepRun")


# ============================================================
# convergence summaries
# ============================================================

TOLERANCE_LADDER = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)


@dataclasses.dataclass(frozen=True)
class ConvergenceSummary:
    """Distance ladder and Cauchy profile of one run's main iterate.

    ``first_below[tol]`` is the first step with normalized squared
    distance <= tol (None when never reached); ``cauchy`` maps step t to
    the normalized squared inter-iterate distance; ``decay_ratio`` is the
    geometric mean of successive Cauchy ratios over the later half of the
    profile (None when fewer than two usable ratios, 0.0 when the profile
    hits exact zero there).
    """

    distances: dict
    first_below: dict
    cauchy: dict
    decay_ratio: Optional[float]
    final_distance: float


def track_convergence(run, target, tolerances=TOLERANCE_LADDER):
    """Summarize distances of the run's main iterate sequence to a target.

    The main sequence is eta for first-step runs, xi for second-step runs
    and x for symmetric-engine runs; distances are (1/p)- or
    (1/N)-normalized squared norms.
    """
    if isinstance(run, MultiEnvRun):
        series = run.eta
    elif isinstance(run, SecondStepRun):
        series = run.xi
    elif isinstance(run, SymmetricRun):
        series = run.x
    else:
        raise TypeError("run must be a MultiEnvRun, SecondStepRun or "
                        "SymmetricRun")
    steps = sorted(series)
    sample = np.asarray(series[steps[0]], dtype=float)
    target = np.asarray(target, dtype=float)
    if target.shape != sample.shape:
        raise ValueError(f"target shape {target.shape} does not match "
                         f"iterate shape {sample.shape}")
    denom = sample.shape[0]

    distances, cauchy = {}, {}
    for i, t in enumerate(steps):
        xt = np.asarray(series[t], dtype=float)
        diff = xt - target
        distances[t] = float(np.sum(diff * diff) / denom)
        if i >= 1:
            step_diff = xt - np.asarray(series[steps[i - 1]], dtype=float)
            cauchy[t] = float(np.sum(step_diff * step_diff) / denom)

    first_below = {}
    for tol in tolerances:
        hit = [t for t in steps if distances[t] <= tol]
        first_below[float(tol)] = hit[0] if hit else None

    ratios = []
    ordered = [cauchy[t] for t in sorted(cauchy)]
    for prev, cur in zip(ordered, ordered[1:]):
        if prev > 0.0:
            ratios.append(cur / prev)
    tail = ratios[len(ratios) // 2:]
    if not tail:
        decay = None
    elif min(tail) == 0.0:
        decay = 0.0
    else:
        decay = float(np.exp(np.mean(np.log(tail))))

    return ConvergenceSummary(distances=distances, first_below=first_below,
                              cauchy=cauchy, decay_ratio=decay,
                              final_distance=distances[steps[-1]])


__all__ = [
    "DIVERGENCE_CAP",
    "FD_STEP",
    "DEFAULT_JACOBIAN_ROWS",
    "TOLERANCE_LADDER",
    "IterateTrace",
    "SymmetricGlampInstance",
    "SymmetricRun",
    "MultiEnvRun",
    "SecondStepRun",
    "ConvergenceSummary",
    "sample_goe",
    "run_symmetric_glamp",
    "run_stack_glamp",
    "run_individual_glamp",
    "run_induced_second_step_amp",
    "subgradient_residual",
    "track_convergence",
]
