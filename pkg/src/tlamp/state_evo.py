"""Monte Carlo evaluation of the limiting fixed-design quantities.

The exact-asymptotics predictions for every estimator in this package are
driven by small systems of scalar equations: effective noise levels (tau),
loss reweighting (varpi, theta) and effective degrees of freedom
(delta, gamma).  The coefficients of those systems are expectations of
denoiser functionals over p-dimensional Gaussian inputs.  This module
estimates the expectations by plug-in Monte Carlo at the configured p
(beta, Sigma and lambda stay fixed, only the Gaussians are redrawn) and
solves the systems by damped Picard iteration.

Degrees-of-freedom quantities are always computed from the support-trace
closed forms, which stay finite at |zeta| = 1; the definitional forms
(Gaussian inner products divided by 1 - zeta^2 factors) are exposed only as
diagnostics for cross-checking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._rng import stream
from .model import ExperimentConfig, draw_signal
from .prox import AdaptivePenalty, EtaAggregate, JointPenalty, XiAggregate

DEFAULT_DAMPING = 0.5
DEFAULT_FP_TOL = 1e-3
DEFAULT_MAX_OUTER = 200

# A tau iterate this far above its starting value cannot come back under the
# damped updates used here; treat it as divergence rather than grinding on.
DIVERGENCE_FACTOR = 1e3


class FixedPointError(RuntimeError):
    """Base class for fixed-point solver failures."""


class NonConvergence(FixedPointError):
    """Iteration budget exhausted; carries the last iterate for inspection."""

    def __init__(self, message: str, last: Optional[dict] = None):
        super().__init__(message)
        self.last = last


class Divergence(FixedPointError):
    """A tau iterate grew without bound."""


class ContractionViolation(FixedPointError):
    """An effective degrees-of-freedom bound (kappa * dof < 1) failed."""


class ProxFailure(FixedPointError):
    """A denoiser solve inside the Monte Carlo loop stalled."""

    def __init__(self, message: str, replicate: int):
        super().__init__(message)
        self.replicate = replicate


@dataclass(frozen=True)
class MCSettings:
    """Gaussian replication plan for the plug-in expectations.

    p, when set, must match the statics it is used with; it exists so a
    settings object is self-describing.  With common_random_numbers the
    outer fixed-point maps become deterministic functions of seed.
    """

    replicates: int = 400
    p: Optional[int] = None
    seed: int = 0
    common_random_numbers: bool = True

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")


@dataclass(frozen=True)
class EnvStatics:
    """Fixed (non-Gaussian) inputs of the limiting equations.

    One entry per environment.  diag[e] holds the diagonal of sigma[e] when
    the covariance is diagonal (enables the fast trace paths) and None
    otherwise.  env_tags are the original environment indices; they key the
    Gaussian streams so that single() keeps the same draws for a given
    environment as the joint object.
    """

    p: int
    kappa: np.ndarray
    noise_var: np.ndarray
    pi: np.ndarray
    sigma: tuple
    sigma_sqrt: tuple
    beta: tuple
    lam: tuple
    diag: tuple
    env_tags: tuple

    @property
    def n_env(self) -> int:
        return len(self.sigma)

    def single(self, e: int) -> "EnvStatics":
        """The one-environment restriction, preserving draw streams."""
        return EnvStatics(
            p=self.p,
            kappa=self.kappa[e:e + 1].copy(),
            noise_var=self.noise_var[e:e + 1].copy(),
            pi=np.ones(1),
            sigma=(self.sigma[e],),
            sigma_sqrt=(self.sigma_sqrt[e],),
            beta=(self.beta[e],),
            lam=(self.lam[e],),
            diag=(self.diag[e],),
            env_tags=(self.env_tags[e],),
        )


def _diagonal_part(mat: np.ndarray) -> Optional[np.ndarray]:
    d = np.diagonal(mat).copy()
    if np.count_nonzero(mat - np.diag(d)) == 0:
        return d
    return None


def statics_from_config(config: ExperimentConfig) -> EnvStatics:
    """Realize the fixed inputs the limiting equations condition on.

    Signals come from the same streams as the simulated datasets, so
    predictions and direct simulations see the same beta vectors.
    """
    sigma, sqrt, beta, lam, diag = [], [], [], [], []
    for e, env in enumerate(config.environments):
        mat = env.covariance.realize()
        sigma.append(mat)
        sqrt.append(env.covariance.sqrt())
        beta.append(draw_signal(env.signal, config.seed, e))
        lam.append(env.lam)
        diag.append(_diagonal_part(mat))
    return EnvStatics(
        p=config.p,
        kappa=np.array([env.p / env.n for env in config.environments]),
        noise_var=np.array([env.noise_var for env in config.environments]),
        pi=np.array([env.pi for env in config.environments]),
        sigma=tuple(sigma),
        sigma_sqrt=tuple(sqrt),
        beta=tuple(beta),
        lam=tuple(lam),
        diag=tuple(diag),
        env_tags=tuple(range(len(config.environments))),
    )


def _check_dim(mc: MCSettings, statics: EnvStatics):
    if mc.p is not None and mc.p != statics.p:
        raise ValueError(f"MCSettings.p = {mc.p} does not match statics.p = {statics.p}")


def _gaussians(mc: MCSettings, statics: EnvStatics, label: str, tags, iteration: int):
    return [
        stream(mc.seed, label, tag, iteration).standard_normal((mc.replicates, statics.p))
        for tag in tags
    ]


def _iter_index(mc: MCSettings, iteration: int) -> int:
    return 0 if mc.common_random_numbers else iteration


def _shared_lam(statics: EnvStatics, active: np.ndarray) -> np.ndarray:
    idx = np.flatnonzero(active)
    lam = statics.lam[idx[0]]
    for e in idx[1:]:
        if not np.array_equal(statics.lam[e], lam):
            raise ValueError("environments entering the joint denoiser must share "
                             "one penalty weight vector")
    return lam


def mean_se(values: np.ndarray, axis: int = -1):
    """Replicate mean and its standard error (ddof = 1)."""
    values = np.asarray(values, dtype=float)
    r = values.shape[axis]
    m = values.mean(axis=axis)
    if r == 1:
        return m, np.zeros_like(m)
    return m, values.std(axis=axis, ddof=1) / math.sqrt(r)


def _collect(results, what: str) -> np.ndarray:
    for r, res in enumerate(results):
        if not res.converged:
            raise ProxFailure(
                f"{what} stalled at replicate {r} "
                f"(kkt residual {res.kkt_residual:.2e})", r)
    return np.array([res.b for res in results])


@dataclass(frozen=True)
class EtaMomentBundle:
    """Per-replicate functionals of the multi-environment denoiser output.

    eta has shape (R, p); the per-environment arrays have shape (E, R).
    delta_bar uses the support-trace form; delta_stein is the definitional
    Gaussian inner-product form, kept as a diagnostic.
    """

    eta: np.ndarray
    sq_err: np.ndarray
    cross: np.ndarray
    delta_bar: np.ndarray
    delta_stein: np.ndarray
    norm0: np.ndarray


def _support_trace_deltas(mask: np.ndarray, varpi: np.ndarray,
                          statics: EnvStatics) -> np.ndarray:
    """delta_e per replicate: varpi_e/p * tr([Sbar_SS]^{-1} (Sigma_e)_SS)."""
    n_env = statics.n_env
    n_rep, p = mask.shape
    delta = np.zeros((n_env, n_rep))
    active = np.flatnonzero(varpi > 0)
    if all(statics.diag[e] is not None for e in active):
        dbar = sum(varpi[e] * statics.diag[e] for e in active)
        for e in active:
            ratio = statics.diag[e] / dbar
            delta[e] = varpi[e] * (mask @ ratio) / p
        return delta
    sbar = sum(varpi[e] * statics.sigma[e] for e in active)
    for r in range(n_rep):
        s = np.flatnonzero(mask[r])
        if s.size == 0:
            continue
        blocks = np.hstack([statics.sigma[e][np.ix_(s, s)] for e in active])
        try:
            x = np.linalg.solve(sbar[np.ix_(s, s)], blocks)
        except np.linalg.LinAlgError as exc:
            raise FixedPointError(
                f"singular restricted covariance block at replicate {r}") from exc
        k = s.size
        for i, e in enumerate(active):
            delta[e, r] = varpi[e] * np.trace(x[:, i * k:(i + 1) * k]) / p
    return delta


def estimate_eta_bar_moments(tau, varpi, theta, statics: EnvStatics,
                             mc: MCSettings, z=None, warm=None) -> EtaMomentBundle:
    """Monte Carlo estimates of the denoiser functionals at (tau, varpi, theta).

    z, when given, is one (R, p) standard-normal block per environment;
    warm is an (R, p) warm-start buffer that is updated in place.  Raises
    ProxFailure with the replicate index if a solve stalls.
    """
    _check_dim(mc, statics)
    tau = np.asarray(tau, dtype=float)
    varpi = np.asarray(varpi, dtype=float)
    n_env, p = statics.n_env, statics.p
    if np.any(tau <= 0):
        raise ValueError("tau must be positive")
    if z is None:
        z = _gaussians(mc, statics, "se-z", statics.env_tags, 0)
    if warm is None:
        warm = np.zeros((mc.replicates, p))
    lam = _shared_lam(statics, varpi > 0)
    agg = EtaAggregate(varpi, statics.sigma, statics.sigma_sqrt, statics.beta,
                       theta, lam)
    vs = [tau[e] * z[e] for e in range(n_env)]
    eta = _collect(agg.solve_batch(vs, warm), "multi-environment denoiser")

    mask = eta != 0
    norm0 = mask.sum(axis=1) / p
    sq_err = np.empty((n_env, mc.replicates))
    cross = np.empty((n_env, mc.replicates))
    stein = np.empty((n_env, mc.replicates))
    for e in range(n_env):
        diff = eta - statics.beta[e]
        d = statics.diag[e]
        if d is not None:
            weighted = diff * d
            cross[e] = (eta * d) @ statics.beta[e] / p
            s_eta = eta * np.sqrt(d)
        else:
            weighted = diff @ statics.sigma[e]
            cross[e] = eta @ (statics.sigma[e] @ statics.beta[e]) / p
            s_eta = eta @ statics.sigma_sqrt[e]
        sq_err[e] = np.einsum("rp,rp->r", weighted, diff) / p
        stein[e] = np.einsum("rp,rp->r", z[e], s_eta) / (tau[e] * p)
    delta_bar = _support_trace_deltas(mask, varpi, statics)
    return EtaMomentBundle(eta=eta, sq_err=sq_err, cross=cross,
                           delta_bar=delta_bar, delta_stein=stein, norm0=norm0)


@dataclass(frozen=True)
class StackFixedPoint:
    """Solution of the (2E+1)-equation stacked-estimator system."""

    tau: np.ndarray
    varpi: np.ndarray
    theta: float
    delta_bar: np.ndarray
    residual: float
    mc_se: dict

    def __post_init__(self):
        if np.any(self.tau <= 0) or self.theta <= 0:
            raise ValueError("tau and theta must be positive")
        if abs(float(self.varpi.sum()) - 1.0) > 1e-9:
            raise ValueError("varpi must lie on the simplex")


@dataclass(frozen=True)
class IndividualFixedPoint:
    """Solution of the single-environment system."""

    tau_ind: float
    theta_ind: float
    delta_ind: float
    residual: float
    mc_se: dict


@dataclass(frozen=True)
class SecondStepFixedPoint:
    """Solution of the second-step system (tau_rt, zeta, theta_rt, gamma_ro).

    gamma_rt is the effective support fraction of the second-step denoiser
    at the solution.  zeta_clamped records whether the zeta update ever left
    [-1, 1] and was clipped.
    """

    tau_rt: float
    zeta: float
    theta_rt: float
    gamma_ro: float
    gamma_rt: float
    residual: float
    mc_se: dict
    zeta_clamped: bool = False


def _init_tau(statics: EnvStatics) -> np.ndarray:
    """Full-shrinkage starting value: tau_e^2 = noise + kappa ||beta||^2_Sigma / p."""
    sig = np.array([
        float(b @ (statics.sigma[e] @ b)) / statics.p
        for e, b in enumerate(statics.beta)
    ])
    return np.sqrt(statics.noise_var + statics.kappa * sig)


def solve_stack_fixed_point(statics: EnvStatics, mc: MCSettings, pi=None,
                            damping: float = DEFAULT_DAMPING,
                            tol: float = DEFAULT_FP_TOL,
                            max_outer: int = DEFAULT_MAX_OUTER) -> StackFixedPoint:
    """Solve the stacked-estimator system by damped Picard iteration.

    Update order per outer step: draw Gaussians (reused under common random
    numbers), solve the denoiser per replicate, estimate moments and the
    degrees of freedom, then refresh theta, varpi and tau.  Stops when the
    largest parameter change falls below max(tol, twice the Monte Carlo
    standard error), since iterating below the MC noise floor is
    meaningless.
    """
    _check_dim(mc, statics)
    pi = np.asarray(statics.pi if pi is None else pi, dtype=float)
    if pi.shape != (statics.n_env,) or np.any(pi < 0) or not np.any(pi > 0):
        raise ValueError("pi must be nonnegative with at least one positive entry")
    kappa, noise = statics.kappa, statics.noise_var

    tau = _init_tau(statics)
    tau_cap = DIVERGENCE_FACTOR * float(tau.max())
    varpi = pi / pi.sum()
    theta = 1.0 / pi.sum()

    z0 = _gaussians(mc, statics, "se-z", statics.env_tags, 0)
    warm = np.zeros((mc.replicates, statics.p))
    last = None
    for it in range(max_outer):
        z = z0 if mc.common_random_numbers else \
            _gaussians(mc, statics, "se-z", statics.env_tags, it)
        bundle = estimate_eta_bar_moments(tau, varpi, theta, statics, mc,
                                          z=z, warm=warm)
        delta, delta_se = mean_se(bundle.delta_bar)
        sq, sq_se = mean_se(bundle.sq_err)
        if np.any(kappa[pi > 0] * delta[pi > 0] >= 1.0):
            raise ContractionViolation(
                f"kappa_e * delta_e >= 1 at outer iteration {it}: "
                f"{(kappa * delta).round(4)}")
        theta_new = 1.0 / float(np.sum(pi * (1.0 - kappa * delta)))
        varpi_new = pi * theta_new * (1.0 - kappa * delta)
        assert abs(float(varpi_new.sum()) - 1.0) <= 1e-12
        tau_new = np.sqrt(noise + kappa * sq)

        tau_d = (1.0 - damping) * tau + damping * tau_new
        varpi_d = (1.0 - damping) * varpi + damping * varpi_new
        theta_d = (1.0 - damping) * theta + damping * theta_new
        change = max(
            float(np.max(np.abs(tau_d - tau) / tau)),
            float(np.max(np.abs(varpi_d - varpi))),
            abs(theta_d - theta) / theta,
        )
        tau, varpi, theta = tau_d, varpi_d, theta_d
        if float(tau.max()) > tau_cap:
            raise Divergence(
                f"tau grew past {DIVERGENCE_FACTOR:g} times its starting value "
                f"at outer iteration {it}")
        se_tau = kappa * sq_se / (2.0 * np.maximum(tau_new, 1e-12))
        floor = 2.0 * max(
            float(np.max(se_tau / np.maximum(tau_new, 1e-12))),
            theta_new * float(np.sum(pi * kappa * delta_se)),
        )
        last = {"tau": tau, "varpi": varpi, "theta": theta,
                "change": change, "floor": floor, "iterations": it + 1}
        if change <= max(tol, floor):
            break
    else:
        raise NonConvergence(
            f"stack fixed point: no convergence in {max_outer} outer "
            f"iterations (last change {last['change']:.3e}, "
            f"floor {last['floor']:.3e})", last)

    z = z0 if mc.common_random_numbers else \
        _gaussians(mc, statics, "se-z", statics.env_tags, max_outer)
    bundle = estimate_eta_bar_moments(tau, varpi, theta, statics, mc,
                                      z=z, warm=warm)
    delta, delta_se = mean_se(bundle.delta_bar)
    sq, sq_se = mean_se(bundle.sq_err)
    rhs_tau2 = noise + kappa * sq
    theta_rhs = 1.0 / float(np.sum(pi * (1.0 - kappa * delta)))
    residual = max(
        float(np.max(np.abs(tau ** 2 - rhs_tau2) / tau ** 2)),
        float(np.max(np.abs(varpi - pi * theta * (1.0 - kappa * delta)))),
        abs(theta - theta_rhs) / theta,
    )
    mc_se = {
        "tau": kappa * sq_se / (2.0 * tau),
        "delta_bar": delta_se,
        "sq_err": sq_se,
    }
    return StackFixedPoint(tau=tau, varpi=varpi, theta=float(theta),
                           delta_bar=delta, residual=residual, mc_se=mc_se)


def solve_individual_fixed_point(statics: EnvStatics, mc: MCSettings,
                                 damping: float = DEFAULT_DAMPING,
                                 tol: float = DEFAULT_FP_TOL,
                                 max_outer: int = DEFAULT_MAX_OUTER
                                 ) -> IndividualFixedPoint:
    """Solve the single-environment system (tau, theta with theta-linked dof).

    statics must contain exactly one environment (see EnvStatics.single);
    theta follows 1 / (1 - kappa * delta) instead of carrying loss weights.
    """
    _check_dim(mc, statics)
    if statics.n_env != 1:
        raise ValueError("individual system needs single-environment statics")
    kappa = float(statics.kappa[0])
    noise = float(statics.noise_var[0])

    tau = float(_init_tau(statics)[0])
    tau_cap = DIVERGENCE_FACTOR * tau
    theta = 1.0
    ones = np.ones(1)

    z0 = _gaussians(mc, statics, "se-z", statics.env_tags, 0)
    warm = np.zeros((mc.replicates, statics.p))
    last = None
    for it in range(max_outer):
        z = z0 if mc.common_random_numbers else \
            _gaussians(mc, statics, "se-z", statics.env_tags, it)
        bundle = estimate_eta_bar_moments([tau], ones, theta, statics, mc,
                                          z=z, warm=warm)
        delta, delta_se = mean_se(bundle.delta_bar[0])
        sq, sq_se = mean_se(bundle.sq_err[0])
        if kappa * delta >= 1.0:
            raise ContractionViolation(
                f"kappa * delta = {kappa * delta:.4f} >= 1 at outer iteration {it}")
        theta_new = 1.0 / (1.0 - kappa * delta)
        tau_new = math.sqrt(noise + kappa * sq)

        tau_d = (1.0 - damping) * tau + damping * tau_new
        theta_d = (1.0 - damping) * theta + damping * theta_new
        change = max(abs(tau_d - tau) / tau, abs(theta_d - theta) / theta)
        tau, theta = tau_d, theta_d
        if tau > tau_cap:
            raise Divergence(
                f"tau grew past {DIVERGENCE_FACTOR:g} times its starting value "
                f"at outer iteration {it}")
        floor = 2.0 * max(kappa * float(sq_se) / (2.0 * tau_new ** 2),
                          theta_new * kappa * float(delta_se))
        last = {"tau": tau, "theta": theta, "change": change,
                "floor": floor, "iterations": it + 1}
        if change <= max(tol, floor):
            break
    else:
        raise NonConvergence(
            f"individual fixed point: no convergence in {max_outer} outer "
            f"iterations (last change {last['change']:.3e}, "
            f"floor {last['floor']:.3e})", last)

    z = z0 if mc.common_random_numbers else \
        _gaussians(mc, statics, "se-z", statics.env_tags, max_outer)
    bundle = estimate_eta_bar_moments([tau], ones, theta, statics, mc,
                                      z=z, warm=warm)
    delta, delta_se = mean_se(bundle.delta_bar[0])
    sq, sq_se = mean_se(bundle.sq_err[0])
    residual = max(
        abs(tau ** 2 - (noise + kappa * float(sq))) / tau ** 2,
        abs(theta - 1.0 / (1.0 - kappa * float(delta))) / theta,
    )
    mc_se = {"tau_ind": kappa * float(sq_se) / (2.0 * tau),
             "delta_ind": float(delta_se)}
    return IndividualFixedPoint(tau_ind=tau, theta_ind=float(theta),
                                delta_ind=float(delta), residual=residual,
                                mc_se=mc_se)


@dataclass(frozen=True)
class GammaBundle:
    """Per-replicate second-step functionals at fixed parameters.

    gamma_ro/gamma_rt use the support-trace closed forms; trace is the
    shared coupling trace (1/p) tr([(S1)_TT]^{-1} (S1)_TS [Sbar_SS]^{-1}
    (S1)_ST).  stein_ro/stein_rt hold the definitional diagnostics when
    requested (|zeta| < 1 only), else None.
    """

    xi: np.ndarray
    gamma_rt: np.ndarray
    gamma_ro: np.ndarray
    trace: np.ndarray
    sq_err: np.ndarray
    cross: np.ndarray
    stein_ro: Optional[np.ndarray]
    stein_rt: Optional[np.ndarray]


def _coupling_traces(xi_supports, eta_mask: np.ndarray, statics: EnvStatics,
                     varpi: np.ndarray) -> np.ndarray:
    out = np.zeros(len(xi_supports))
    active = np.flatnonzero(varpi > 0)
    p = statics.p
    if statics.diag[0] is not None and all(statics.diag[e] is not None for e in active):
        dbar = sum(varpi[e] * statics.diag[e] for e in active)
        ratio = statics.diag[0] / dbar
        for r, t in enumerate(xi_supports):
            if t.size == 0:
                continue
            shared = t[eta_mask[r][t]]
            out[r] = ratio[shared].sum() / p
        return out
    s1 = statics.sigma[0]
    sbar = sum(varpi[e] * statics.sigma[e] for e in active)
    for r, t in enumerate(xi_supports):
        s = np.flatnonzero(eta_mask[r])
        if t.size == 0 or s.size == 0:
            continue
        try:
            inner = s1[np.ix_(t, s)] @ np.linalg.solve(sbar[np.ix_(s, s)],
                                                       s1[np.ix_(s, t)])
            out[r] = np.trace(np.linalg.solve(s1[np.ix_(t, t)], inner)) / p
        except np.linalg.LinAlgError as exc:
            raise FixedPointError(
                f"singular restricted covariance block at replicate {r}") from exc
    return out


def estimate_gamma_bars(stack_fp: StackFixedPoint, statics: EnvStatics,
                        tau_rt: float, zeta: float, gamma_ro: float,
                        theta_rt: float, penalty, mc: MCSettings,
                        with_stein: bool = False, eta_bundle=None,
                        z=None, z_prime=None, warm=None) -> GammaBundle:
    """Second-step degrees of freedom and moments at fixed parameters.

    The target environment is the first entry of statics.  eta_bundle, z and
    z_prime allow callers to reuse draws and first-step solves; when omitted
    they are recreated deterministically from mc.seed.
    """
    _check_dim(mc, statics)
    if tau_rt <= 0:
        raise ValueError("tau_rt must be positive")
    if abs(zeta) > 1:
        raise ValueError("zeta must lie in [-1, 1]")
    p = statics.p
    if z is None:
        z = _gaussians(mc, statics, "se-z", statics.env_tags, 0)
    if z_prime is None:
        z_prime = _gaussians(mc, statics, "se-zprime", statics.env_tags[:1], 0)[0]
    if eta_bundle is None:
        eta_bundle = estimate_eta_bar_moments(stack_fp.tau, stack_fp.varpi,
                                              stack_fp.theta, statics, mc, z=z)
    eta = eta_bundle.eta
    if abs(zeta) == 1.0:
        v_rt = math.copysign(tau_rt, zeta) * z[0]
    else:
        v_rt = tau_rt * (zeta * z[0] + math.sqrt(1.0 - zeta ** 2) * z_prime)
    agg = XiAggregate(statics.sigma[0], statics.sigma_sqrt[0], statics.beta[0],
                      float(statics.kappa[0]), gamma_ro, theta_rt, penalty)
    if warm is None:
        warm = np.zeros((mc.replicates, p))
    results = agg.solve_batch(v_rt, eta, warm)
    xi = _collect(results, "second-step denoiser")
    supports = [res.support for res in results]

    gamma_rt = np.array([t.size for t in supports]) / p
    trace = _coupling_traces(supports, eta != 0, statics, stack_fp.varpi)
    varpi_1 = float(stack_fp.varpi[0])
    kap_g = float(statics.kappa[0]) * gamma_ro
    if isinstance(penalty, JointPenalty):
        gamma_ro_hat = eta_bundle.delta_bar[0] - varpi_1 * (1.0 - kap_g) * trace
    elif isinstance(penalty, AdaptivePenalty):
        gamma_ro_hat = varpi_1 * kap_g * trace
    else:
        raise ValueError("penalty must be JointPenalty or AdaptivePenalty")

    beta_1 = statics.beta[0]
    resid = beta_1 - xi - kap_g * (beta_1 - eta)
    base = beta_1 - eta
    if statics.diag[0] is not None:
        weighted = resid * statics.diag[0]
    else:
        weighted = resid @ statics.sigma[0]
    sq_err = np.einsum("rp,rp->r", weighted, resid) / p
    cross = np.einsum("rp,rp->r", weighted, base) / p

    stein_ro = stein_rt = None
    if with_stein:
        if abs(zeta) >= 1.0:
            raise ValueError("definitional gamma forms are undefined at |zeta| = 1")
        if statics.diag[0] is not None:
            s_xi = xi * np.sqrt(statics.diag[0])
        else:
            s_xi = xi @ statics.sigma_sqrt[0]
        root = math.sqrt(1.0 - zeta ** 2)
        tau_1 = float(stack_fp.tau[0])
        stein_rt = np.einsum("rp,rp->r", z_prime, s_xi) / (tau_rt * p * root)
        stein_ro = np.einsum("rp,rp->r", z[0] - (zeta / root) * z_prime,
                             s_xi) / (tau_1 * p)
    return GammaBundle(xi=xi, gamma_rt=gamma_rt, gamma_ro=gamma_ro_hat,
                       trace=trace, sq_err=sq_err, cross=cross,
                       stein_ro=stein_ro, stein_rt=stein_rt)


def solve_second_step_fixed_point(stack_fp: StackFixedPoint, statics: EnvStatics,
                                  penalty, mc: MCSettings,
                                  damping: float = DEFAULT_DAMPING,
                                  tol: float = DEFAULT_FP_TOL,
                                  max_outer: int = DEFAULT_MAX_OUTER
                                  ) -> SecondStepFixedPoint:
    """Solve the second-step system given a solved stacked system.

    gamma_ro is refreshed by damped substitution; zeta by direct
    substitution of the second equation's right-hand side divided by
    tau_rt * tau_1, clipped to [-1, 1] (clipping is reported on the result).
    The joint penalty starts from the penalty -> infinity collapse point;
    the adaptive penalty starts at gamma_ro = 0, which is also its
    self-consistent value.
    """
    _check_dim(mc, statics)
    kappa = float(statics.kappa[0])
    noise = float(statics.noise_var[0])
    tau_1 = float(stack_fp.tau[0])

    z0 = _gaussians(mc, statics, "se-z", statics.env_tags, 0)
    zp0 = _gaussians(mc, statics, "se-zprime", statics.env_tags[:1], 0)[0]
    eb0 = estimate_eta_bar_moments(stack_fp.tau, stack_fp.varpi, stack_fp.theta,
                                   statics, mc, z=z0)
    delta_1 = float(mean_se(eb0.delta_bar[0])[0])

    if isinstance(penalty, JointPenalty):
        gamma_ro = delta_1
        zeta = 1.0
        tau_rt = max((1.0 - kappa * delta_1) * tau_1, 1e-8)
        theta_rt = 1.0
    else:
        gamma_ro = 0.0
        zeta = 0.0
        tau_rt = tau_1
        theta_rt = 1.0
    tau_cap = DIVERGENCE_FACTOR * max(tau_rt, tau_1)

    warm = np.zeros((mc.replicates, statics.p))
    eta_warm = None
    clamped = False
    last = None
    for it in range(max_outer):
        if mc.common_random_numbers or it == 0:
            z, zp, eb = z0, zp0, eb0
        else:
            z = _gaussians(mc, statics, "se-z", statics.env_tags, it)
            zp = _gaussians(mc, statics, "se-zprime", statics.env_tags[:1], it)[0]
            if eta_warm is None:
                eta_warm = np.zeros((mc.replicates, statics.p))
            eb = estimate_eta_bar_moments(stack_fp.tau, stack_fp.varpi,
                                          stack_fp.theta, statics, mc,
                                          z=z, warm=eta_warm)
        bundle = estimate_gamma_bars(stack_fp, statics, tau_rt, zeta, gamma_ro,
                                     theta_rt, penalty, mc, eta_bundle=eb,
                                     z=z, z_prime=zp, warm=warm)
        g_rt, g_rt_se = mean_se(bundle.gamma_rt)
        g_ro, g_ro_se = mean_se(bundle.gamma_ro)
        sq, sq_se = mean_se(bundle.sq_err)
        cr, cr_se = mean_se(bundle.cross)
        if kappa * float(g_rt) >= 1.0:
            raise ContractionViolation(
                f"kappa_1 * gamma_rt = {kappa * float(g_rt):.4f} >= 1 makes "
                f"theta_rt infeasible at outer iteration {it}")
        theta_new = 1.0 / (1.0 - kappa * float(g_rt))
        tau2_new = (1.0 - kappa * gamma_ro) ** 2 * noise + kappa * float(sq)
        tau_new = math.sqrt(max(tau2_new, 1e-16))
        gamma_new = (1.0 - damping) * gamma_ro + damping * float(g_ro)

        tau_d = (1.0 - damping) * tau_rt + damping * tau_new
        theta_d = (1.0 - damping) * theta_rt + damping * theta_new
        zeta_rhs = (1.0 - kappa * gamma_ro) * noise + kappa * float(cr)
        zeta_raw = zeta_rhs / (tau_d * tau_1)
        if abs(zeta_raw) > 1.0:
            clamped = True
        zeta_d = min(1.0, max(-1.0, zeta_raw))

        change = max(abs(tau_d - tau_rt) / tau_rt,
                     abs(theta_d - theta_rt) / theta_rt,
                     abs(zeta_d - zeta), abs(gamma_new - gamma_ro))
        tau_rt, theta_rt, zeta, gamma_ro = tau_d, theta_d, zeta_d, gamma_new
        if tau_rt > tau_cap:
            raise Divergence(
                f"tau_rt grew past {DIVERGENCE_FACTOR:g} times its starting "
                f"value at outer iteration {it}")
        floor = 2.0 * max(
            kappa * float(sq_se) / (2.0 * tau_new ** 2),
            kappa * float(cr_se) / (tau_new * tau_1),
            float(g_ro_se),
            theta_new * kappa * float(g_rt_se),
        )
        last = {"tau_rt": tau_rt, "zeta": zeta, "theta_rt": theta_rt,
                "gamma_ro": gamma_ro, "change": change, "floor": floor,
                "iterations": it + 1}
        if change <= max(tol, floor):
            break
    else:
        raise NonConvergence(
            f"second-step fixed point: no convergence in {max_outer} outer "
            f"iterations (last change {last['change']:.3e}, "
            f"floor {last['floor']:.3e})", last)

    bundle = estimate_gamma_bars(stack_fp, statics, tau_rt, zeta, gamma_ro,
                                 theta_rt, penalty, mc, eta_bundle=eb,
                                 z=z, z_prime=zp, warm=warm)
    g_rt, g_rt_se = mean_se(bundle.gamma_rt)
    g_ro, g_ro_se = mean_se(bundle.gamma_ro)
    sq, sq_se = mean_se(bundle.sq_err)
    cr, cr_se = mean_se(bundle.cross)
    rhs_tau2 = (1.0 - kappa * gamma_ro) ** 2 * noise + kappa * float(sq)
    rhs_zeta = (1.0 - kappa * gamma_ro) * noise + kappa * float(cr)
    residual = max(
        abs(tau_rt ** 2 - rhs_tau2) / tau_rt ** 2,
        abs(tau_rt * tau_1 * zeta - rhs_zeta) / (tau_rt * tau_1),
        abs(theta_rt - 1.0 / (1.0 - kappa * float(g_rt))) / theta_rt,
        abs(gamma_ro - float(g_ro)),
    )
    mc_se = {
        "tau_rt": kappa * float(sq_se) / (2.0 * tau_rt),
        "zeta": kappa * float(cr_se) / (tau_rt * tau_1),
        "gamma_ro": float(g_ro_se),
        "gamma_rt": float(g_rt_se),
    }
    return SecondStepFixedPoint(tau_rt=float(tau_rt), zeta=float(zeta),
                                theta_rt=float(theta_rt),
                                gamma_ro=float(gamma_ro),
                                gamma_rt=float(g_rt), residual=residual,
                                mc_se=mc_se, zeta_clamped=clamped)


@dataclass(frozen=True)
class HEstimate:
    """Monte Carlo value and standard error of a coupling map."""

    value: np.ndarray
    se: np.ndarray


def evaluate_H_map(rho, stack_fp: StackFixedPoint, statics: EnvStatics,
                   mc: MCSettings) -> HEstimate:
    """The E coupling-map components at correlation vector rho in [0,1]^E.

    Each environment's Gaussian pair has correlation rho_e; rho_e = 1 reuses
    the identical draw, so that component has zero coupling variance.
    """
    _check_dim(mc, statics)
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (statics.n_env,) or np.any(rho < 0) or np.any(rho > 1):
        raise ValueError("rho must lie in [0, 1]^E")
    z1 = _gaussians(mc, statics, "se-z", statics.env_tags, 0)
    w = _gaussians(mc, statics, "se-hw", statics.env_tags, 0)
    z2 = [z1[e] if rho[e] == 1.0 else
          rho[e] * z1[e] + math.sqrt(1.0 - rho[e] ** 2) * w[e]
          for e in range(statics.n_env)]

    lam = _shared_lam(statics, stack_fp.varpi > 0)
    agg = EtaAggregate(stack_fp.varpi, statics.sigma, statics.sigma_sqrt,
                       statics.beta, stack_fp.theta, lam)
    tau = stack_fp.tau
    warm = np.zeros((mc.replicates, statics.p))
    eta_1 = _collect(agg.solve_batch([tau[e] * z1[e] for e in range(statics.n_env)],
                                     warm), "multi-environment denoiser")
    warm_2 = warm.copy()
    eta_2 = _collect(agg.solve_batch([tau[e] * z2[e] for e in range(statics.n_env)],
                                     warm_2), "multi-environment denoiser")

    value = np.empty(statics.n_env)
    se = np.empty(statics.n_env)
    for e in range(statics.n_env):
        d1 = eta_1 - statics.beta[e]
        d2 = eta_2 - statics.beta[e]
        if statics.diag[e] is not None:
            inner = np.einsum("rp,rp->r", d1 * statics.diag[e], d2) / statics.p
        else:
            inner = np.einsum("rp,rp->r", d1 @ statics.sigma[e], d2) / statics.p
        m, s = mean_se(inner)
        scale = statics.kappa[e] / tau[e] ** 2
        value[e] = (statics.noise_var[e] + statics.kappa[e] * float(m)) / tau[e] ** 2
        se[e] = scale * float(s)
    return HEstimate(value=value, se=se)


def evaluate_H_rt(rho: float, stack_fp: StackFixedPoint,
                  second_fp: SecondStepFixedPoint, statics: EnvStatics,
                  penalty, mc: MCSettings) -> HEstimate:
    """The second-step coupling map at scalar correlation rho in [0, 1].

    Both copies share the first-step Gaussians (hence the same first-step
    denoiser output); only the extra second-step Gaussian pair carries
    correlation rho, with rho = 1 reusing the identical draw.
    """
    _check_dim(mc, statics)
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    z = _gaussians(mc, statics, "se-z", statics.env_tags, 0)
    zp1 = _gaussians(mc, statics, "se-zprime", statics.env_tags[:1], 0)[0]
    wp = _gaussians(mc, statics, "se-hrtw", statics.env_tags[:1], 0)[0]
    zp2 = zp1 if rho == 1.0 else rho * zp1 + math.sqrt(1.0 - rho ** 2) * wp

    eb = estimate_eta_bar_moments(stack_fp.tau, stack_fp.varpi, stack_fp.theta,
                                  statics, mc, z=z)
    tau_rt, zeta = second_fp.tau_rt, second_fp.zeta
    agg = XiAggregate(statics.sigma[0], statics.sigma_sqrt[0], statics.beta[0],
                      float(statics.kappa[0]), second_fp.gamma_ro,
                      second_fp.theta_rt, penalty)
    if abs(zeta) == 1.0:
        v1 = v2 = math.copysign(tau_rt, zeta) * z[0]
    else:
        root = math.sqrt(1.0 - zeta ** 2)
        v1 = tau_rt * (zeta * z[0] + root * zp1)
        v2 = tau_rt * (zeta * z[0] + root * zp2)
    warm = np.zeros((mc.replicates, statics.p))
    xi_1 = _collect(agg.solve_batch(v1, eb.eta, warm), "second-step denoiser")
    warm_2 = warm.copy()
    xi_2 = _collect(agg.solve_batch(v2, eb.eta, warm_2), "second-step denoiser")

    kappa = float(statics.kappa[0])
    noise = float(statics.noise_var[0])
    kap_g = kappa * second_fp.gamma_ro
    beta_1 = statics.beta[0]
    r1 = beta_1 - xi_1 - kap_g * (beta_1 - eb.eta)
    r2 = beta_1 - xi_2 - kap_g * (beta_1 - eb.eta)
    if statics.diag[0] is not None:
        inner = np.einsum("rp,rp->r", r1 * statics.diag[0], r2) / statics.p
    else:
        inner = np.einsum("rp,rp->r", r1 @ statics.sigma[0], r2) / statics.p
    m, s = mean_se(inner)
    value = ((1.0 - kap_g) ** 2 * noise + kappa * float(m)) / tau_rt ** 2
    return HEstimate(value=np.float64(value),
                     se=np.float64(kappa * float(s) / tau_rt ** 2))


@dataclass(frozen=True)
class ContractionReport:
    """Margins of the degrees-of-freedom bounds at a solved fixed point."""

    ok: bool
    margins: dict
    notes: tuple


def check_contraction(fp, statics: EnvStatics,
                      bundle: Optional[EtaMomentBundle] = None) -> ContractionReport:
    """Margins for kappa * dof < 1 and the support-mass identities.

    With an EtaMomentBundle the per-replicate identity sum_e delta_e =
    ||eta||_0 / p is also verified (the two sides are computed from the same
    supports, so they must agree to numerical precision).
    """
    notes = []
    margins = {}
    ok = True
    if isinstance(fp, StackFixedPoint):
        margins["kappa_delta"] = 1.0 - statics.kappa * fp.delta_bar
        total = float(np.sum(fp.delta_bar))
        se = 0.0
        if bundle is not None:
            per_rep = bundle.delta_bar.sum(axis=0)
            se = float(mean_se(per_rep)[1])
            dev = float(np.max(np.abs(per_rep - bundle.norm0)))
            if dev > 1e-12:
                ok = False
                notes.append(f"support identity violated: max deviation {dev:.2e}")
        margins["support_mass"] = 1.0 + 3.0 * se - total
        ok = ok and bool(np.all(margins["kappa_delta"] > 0)) \
            and margins["support_mass"] > 0
    elif isinstance(fp, SecondStepFixedPoint):
        margins["kappa_gamma_rt"] = 1.0 - float(statics.kappa[0]) * fp.gamma_rt
        if fp.zeta_clamped:
            notes.append("zeta update was clamped to [-1, 1] during the solve")
        ok = margins["kappa_gamma_rt"] > 0
    else:
        raise TypeError("fp must be a StackFixedPoint or SecondStepFixedPoint")
    return ContractionReport(ok=bool(ok), margins=margins, notes=tuple(notes))


__all__ = [
    "FixedPointError",
    "NonConvergence",
    "Divergence",
    "ContractionViolation",
    "ProxFailure",
    "MCSettings",
    "EnvStatics",
    "statics_from_config",
    "mean_se",
    "EtaMomentBundle",
    "estimate_eta_bar_moments",
    "StackFixedPoint",
    "IndividualFixedPoint",
    "SecondStepFixedPoint",
    "solve_stack_fixed_point",
    "solve_individual_fixed_point",
    "GammaBundle",
    "estimate_gamma_bars",
    "solve_second_step_fixed_point",
    "HEstimate",
    "evaluate_H_map",
    "evaluate_H_rt",
    "ContractionReport",
    "check_contraction",
]
