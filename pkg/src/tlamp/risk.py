"""Risk predictions from solved fixed points, with simulation counterparts.

Every predictor draws Gaussian replicates through the same seeded streams as
the fixed-point solvers, so predictions at different sweep points share their
randomness and trace out smooth curves.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .state_evo import (
    EnvStatics,
    MCSettings,
    SecondStepFixedPoint,
    StackFixedPoint,
    estimate_eta_bar_moments,
    estimate_gamma_bars,
    mean_se,
)

# Built-in per-draw functionals.  All of them normalize by the dimension so
# values stay order one as p grows.  "support-fraction" is the odd one out:
# it is not pseudo-Lipschitz, so its prediction leans on the exact
# degrees-of-freedom identity (support fraction = sum of the effective
# dimension ratios) rather than on the generic convergence guarantee.
FUNCTIONALS = (
    "mse-vs-beta1",
    "mse-vs-beta-e",
    "support-fraction",
    "inner-product-with-beta1",
)


def evaluate_functional(functional, draws: np.ndarray, betas, env: int = 0):
    """Per-draw values of a risk functional over rows of ``draws`` (R, p).

    ``functional`` is either a name from FUNCTIONALS or a callable taking
    (draws, betas) and returning one value per row.  Callables should be
    pseudo-Lipschitz in the estimate for the prediction to carry a guarantee;
    that contract is documented, not enforced.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2:
        raise ValueError("draws must be a matrix with one estimate per row")
    p = draws.shape[1]
    if callable(functional):
        vals = np.asarray(functional(draws, betas), dtype=float)
        if vals.shape != (draws.shape[0],):
            raise ValueError("functional callback must return one value per draw")
        return vals
    if functional == "mse-vs-beta1":
        diff = draws - betas[0]
        return np.einsum("rp,rp->r", diff, diff) / p
    if functional == "mse-vs-beta-e":
        if not 0 <= env < len(betas):
            raise ValueError(f"environment index {env} out of range")
        diff = draws - betas[env]
        return np.einsum("rp,rp->r", diff, diff) / p
    if functional == "support-fraction":
        return np.count_nonzero(draws, axis=1) / p
    if functional == "inner-product-with-beta1":
        return draws @ betas[0] / p
    raise ValueError(
        f"unknown functional {functional!r}; choose one of {FUNCTIONALS} "
        "or pass a callable")


def predict_risk_stack(fp: StackFixedPoint, statics: EnvStatics, functional,
                       mc: MCSettings, env: int = 0):
    """Predicted risk of the stacked estimator at a solved fixed point.

    Returns (value, se) where the standard error reflects the Monte Carlo
    replicates only, not the fixed-point solve.
    """
    bundle = estimate_eta_bar_moments(fp.tau, fp.varpi, fp.theta, statics, mc)
    vals = evaluate_functional(functional, bundle.eta, statics.beta, env=env)
    value, se = mean_se(vals)
    return float(value), float(se)


def predict_risk_average(fps, pi, statics: EnvStatics, functional,
                         mc: MCSettings, env: int = 0):
    """Predicted risk of the weighted average of per-environment Lassos.

    ``fps`` holds one single-environment fixed point per environment.  Each
    environment keeps its own draw stream, so the averaged replicates combine
    independent Gaussians exactly as the estimator combines independent
    designs.
    """
    pi = np.asarray(pi, dtype=float)
    if abs(pi.sum() - 1.0) > 1e-12:
        raise ValueError("average weights must sum to 1")
    if len(fps) != statics.n_env or pi.size != statics.n_env:
        raise ValueError("one fixed point and one weight per environment required")
    avg = np.zeros((mc.replicates, statics.p))
    for e, fp in enumerate(fps):
        sub = statics.single(e)
        bundle = estimate_eta_bar_moments(np.array([fp.tau_ind]), np.ones(1),
                                          fp.theta_ind, sub, mc)
        avg += pi[e] * bundle.eta
    vals = evaluate_functional(functional, avg, statics.beta, env=env)
    value, se = mean_se(vals)
    return float(value), float(se)


def predict_risk_second_step(stack_fp: StackFixedPoint,
                             fp: SecondStepFixedPoint, statics: EnvStatics,
                             penalty, functional, mc: MCSettings,
                             env: int = 0, z_prime=None):
    """Predicted risk of the second-step refit at its solved fixed point.

    ``penalty`` is the second-step penalty the fixed point was solved for;
    ``z_prime`` overrides the second Gaussian stream (used to check the
    degenerate perfectly-correlated case, where it must not matter).
    """
    bundle = estimate_gamma_bars(stack_fp, statics, fp.tau_rt, fp.zeta,
                                 fp.gamma_ro, fp.theta_rt, penalty, mc,
                                 z_prime=z_prime)
    vals = evaluate_functional(functional, bundle.xi, statics.beta, env=env)
    value, se = mean_se(vals)
    return float(value), float(se)


def empirical_risk(estimates, beta, functional):
    """Replicate mean and standard error of a functional over fitted vectors.

    ``beta`` is the reference signal the functional compares against; the
    built-ins all read it in place of their usual target, so pass whichever
    environment's signal the functional name refers to.  Callables receive
    the one-element tuple (beta,).
    """
    if len(estimates) == 0:
        raise ValueError("empirical risk needs at least one replicate")
    arr = np.asarray(estimates, dtype=float)
    if arr.ndim != 2:
        raise ValueError("estimates must be a sequence of vectors")
    beta = np.asarray(beta, dtype=float)
    vals = evaluate_functional(functional, arr, (beta,), env=0)
    value, se = mean_se(vals)
    return float(value), float(se)


def settings_fingerprint(settings) -> str:
    """Stable short hash of a JSON-serializable settings mapping."""
    blob = json.dumps(settings, sort_keys=True, separators=(",", ":"),
                      default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


@dataclass(frozen=True)
class RiskReport:
    """Predicted and simulated risk of one functional at one setting.

    A side that was not run is marked with nan values and a zero replicate
    count; standard errors must not be negative.
    """

    functional: str
    theory_value: float
    theory_se: float
    empirical_value: float
    empirical_se: float
    n_theory_draws: int
    n_design_replicates: int
    fingerprint: str = ""

    def __post_init__(self) -> None:
        if self.theory_se < 0 or self.empirical_se < 0:
            raise ValueError("standard errors cannot be negative")

    def as_dict(self) -> dict:
        """Field mapping in a fixed order, ready to serialize as a CSV row."""
        return {
            "functional": self.functional,
            "theory_value": self.theory_value,
            "theory_se": self.theory_se,
            "empirical_value": self.empirical_value,
            "empirical_se": self.empirical_se,
            "n_theory_draws": self.n_theory_draws,
            "n_design_replicates": self.n_design_replicates,
            "fingerprint": self.fingerprint,
        }


__all__ = [
    "FUNCTIONALS",
    "RiskReport",
    "empirical_risk",
    "evaluate_functional",
    "predict_risk_average",
    "predict_risk_second_step",
    "predict_risk_stack",
    "settings_fingerprint",
]
