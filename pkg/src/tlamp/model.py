"""Multi-environment linear-model setup: specs, generators, configuration.

Each environment e carries its own design covariance Sigma_e, signal beta_e,
noise level and loss weight pi_e.  Data are generated as

    y_e = Z_e @ Sigma_e^{1/2} @ beta_e + w_e,

with Z_e an n_e x p matrix of iid N(0, 1/n_e) entries.  Signals are drawn
once per experiment point and held fixed across design replicates; designs
and noise are redrawn per replicate.  All randomness flows through named
counter-based streams keyed by (master seed, purpose tag, indices), so any
piece can be regenerated independently and bit-identically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ._linalg import sym_sqrt
from ._rng import stream

COVARIANCE_KINDS = ("identity", "two-eigenvalue", "dense")
SIGNAL_KINDS = ("iid-gaussian", "shifted")
ESTIMATOR_KINDS = ("stack", "average", "second-step-joint", "second-step-adaptive")
SWEEP_PARAMS = ("lambda_scale", "chi", "sigma_tilde2", "noise_var", "lambda_rt")


class ConfigError(ValueError):
    """Invalid experiment configuration; message includes the key path."""


# ============================================================
# covariance and signal specs
# ============================================================


@dataclass(frozen=True)
class CovarianceSpec:
    """Design covariance: identity, a two-eigenvalue family, or a dense SPD
    matrix.  Eigenvalues must lie in [1/c1, c1]."""

    kind: str
    p: int
    chi: Optional[float] = None
    matrix: Optional[np.ndarray] = None
    c1: float = 1e6

    def __post_init__(self):
        if self.kind not in COVARIANCE_KINDS:
            raise ConfigError(f"unknown covariance kind {self.kind!r}")
        if self.p < 1:
            raise ConfigError("covariance dimension p must be >= 1")
        if not self.c1 > 1:
            raise ConfigError("eigenvalue bound c1 must exceed 1")
        if self.kind == "two-eigenvalue":
            if self.chi is None or not self.chi > 0:
                raise ConfigError("two-eigenvalue covariance needs chi > 0")
            if self.p % 2 != 0:
                raise ConfigError("two-eigenvalue covariance needs even p")
            if not (1.0 / self.c1 <= min(self.chi, 1.0 / self.chi)
                    and max(self.chi, 1.0 / self.chi) <= self.c1):
                raise ConfigError("chi and 1/chi must lie in [1/c1, c1]")
        if self.kind == "dense":
            if self.matrix is None:
                raise ConfigError("dense covariance needs a matrix")
            mat = np.asarray(self.matrix, dtype=float)
            if mat.shape != (self.p, self.p):
                raise ConfigError("dense covariance matrix must be p x p")
            if not np.allclose(mat, mat.T, atol=1e-10):
                raise ConfigError("dense covariance must be symmetric")
            vals = np.linalg.eigvalsh(mat)
            if vals.min() <= 0:
                raise ConfigError("dense covariance must be positive definite")
            if vals.min() < 1.0 / self.c1 - 1e-12 or vals.max() > self.c1 + 1e-12:
                raise ConfigError("covariance eigenvalues must lie in [1/c1, c1]")
            object.__setattr__(self, "matrix", mat)

    def realize(self) -> np.ndarray:
        """The covariance matrix itself.

        The two-eigenvalue family is realized as the diagonal matrix with
        the first p/2 entries chi and the rest 1/chi, so the eigenvalues are
        exactly {chi, 1/chi} with multiplicity p/2 each.
        """
        if self.kind == "identity":
            return np.eye(self.p)
        if self.kind == "two-eigenvalue":
            half = self.p // 2
            return np.diag(np.r_[np.full(half, self.chi), np.full(half, 1.0 / self.chi)])
        return self.matrix.copy()

    def sqrt(self) -> np.ndarray:
        if self.kind == "identity":
            return np.eye(self.p)
        if self.kind == "two-eigenvalue":
            return np.sqrt(self.realize())
        return sym_sqrt(self.matrix)


def covariance_sqrt(spec) -> np.ndarray:
    """Symmetric square root of a covariance (CovarianceSpec or SPD array)."""
    if isinstance(spec, CovarianceSpec):
        return spec.sqrt()
    return sym_sqrt(np.asarray(spec, dtype=float))


@dataclass(frozen=True)
class SignalSpec:
    """Signal distribution: iid Gaussian, or another environment's signal
    plus an iid perturbation with per-coordinate variance sigma_tilde2 * pi/2
    (that scaling makes the mean absolute shift equal sqrt(sigma_tilde2))."""

    kind: str
    p: int
    sigma_beta2: Optional[float] = None
    base: Optional["SignalSpec"] = None
    base_env: int = 0
    sigma_tilde2: Optional[float] = None

    def __post_init__(self):
        if self.kind not in SIGNAL_KINDS:
            raise ConfigError(f"unknown signal kind {self.kind!r}")
        if self.kind == "iid-gaussian":
            if self.sigma_beta2 is None or self.sigma_beta2 < 0:
                raise ConfigError("iid-gaussian signal needs sigma_beta2 >= 0")
        else:
            if self.base is None:
                raise ConfigError("shifted signal needs a base signal spec")
            if self.sigma_tilde2 is None or self.sigma_tilde2 < 0:
                raise ConfigError("shifted signal needs sigma_tilde2 >= 0")
            if self.base.p != self.p:
                raise ConfigError("shifted signal base must have the same p")


def draw_signal(spec: SignalSpec, master_seed: int, env_index: int) -> np.ndarray:
    """Realize a signal vector.

    A shifted signal draws its base from the *base environment's* signal
    stream, so two environments sharing a base spec share the base vector
    bit-identically; the perturbation has its own stream.
    """
    if spec.kind == "iid-gaussian":
        rng = stream(master_seed, "signal", env_index)
        return rng.normal(0.0, math.sqrt(spec.sigma_beta2), spec.p)
    base = draw_signal(spec.base, master_seed, spec.base_env)
    rng = stream(master_seed, "signal-shift", env_index)
    scale = math.sqrt(spec.sigma_tilde2 * math.pi / 2.0)
    return base + rng.normal(0.0, 1.0, spec.p) * scale


# ============================================================
# environments
# ============================================================


@dataclass(frozen=True)
class EnvironmentSpec:
    """Per-environment configuration (sampling-ready, no realized data)."""

    n: int
    p: int
    covariance: CovarianceSpec
    signal: SignalSpec
    noise_var: float = 1.0
    pi: float = 1.0
    lam: np.ndarray = None

    def __post_init__(self):
        if self.n < 1 or self.p < 1:
            raise ConfigError("n and p must be >= 1")
        if self.covariance.p != self.p or self.signal.p != self.p:
            raise ConfigError("covariance/signal dimension mismatch")
        if self.noise_var < 0:
            raise ConfigError("noise_var must be >= 0")
        if self.pi < 0:
            raise ConfigError("pi must be >= 0")
        lam = np.full(self.p, 1.0) if self.lam is None else \
            np.broadcast_to(np.asarray(self.lam, dtype=float), (self.p,)).copy()
        if np.any(lam <= 0):
            raise ConfigError("penalty weights must be strictly positive")
        object.__setattr__(self, "lam", lam)


@dataclass(frozen=True)
class Environment:
    """One realized dataset plus the quantities that generated it."""

    n: int
    p: int
    kappa: float
    sigma: np.ndarray
    sigma_sqrt: np.ndarray
    beta: np.ndarray
    w: np.ndarray
    Z_design: np.ndarray
    y: np.ndarray
    pi: float
    lambda_weights: np.ndarray

    def generative_residual(self) -> float:
        """Max abs of y - (Z (S beta) + w), zero exactly at generation.

        The parenthesization mirrors the generation expression so the
        recomputation is bit-identical.
        """
        return float(np.max(np.abs(
            self.y - (self.Z_design @ (self.sigma_sqrt @ self.beta) + self.w)
        )))


def generate_environment(spec: EnvironmentSpec, seed: int, env_index: int = 0,
                         replicate: int = 0) -> Environment:
    """Realize one environment.

    The signal stream is keyed by (seed, env) only, so replicates share the
    signal; design and noise streams are keyed by (seed, env, replicate).
    Identical arguments give bit-identical output.
    """
    sigma = spec.covariance.realize()
    sigma_sqrt = spec.covariance.sqrt()
    beta = draw_signal(spec.signal, seed, env_index)
    Z = stream(seed, "design", env_index, replicate).normal(
        0.0, 1.0 / math.sqrt(spec.n), (spec.n, spec.p))
    w = stream(seed, "noise", env_index, replicate).normal(
        0.0, math.sqrt(spec.noise_var), spec.n)
    y = Z @ (sigma_sqrt @ beta) + w
    return Environment(
        n=spec.n, p=spec.p, kappa=spec.p / spec.n, sigma=sigma,
        sigma_sqrt=sigma_sqrt, beta=beta, w=w, Z_design=Z, y=y,
        pi=spec.pi, lambda_weights=spec.lam.copy(),
    )


# ============================================================
# experiment configuration
# ============================================================


@dataclass(frozen=True)
class SweepSpec:
    param: str
    values: tuple

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise ConfigError(
                f"unknown sweep param {self.param!r}; choose from {SWEEP_PARAMS}")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))


@dataclass(frozen=True)
class ReplicateSpec:
    design: int = 20
    mc: int = 400

    def __post_init__(self):
        if self.design < 1 or self.mc < 1:
            raise ConfigError("replicate counts must be >= 1")


@dataclass(frozen=True)
class EstimatorSpec:
    """Which estimator an experiment evaluates.

    second-step-joint carries lambda_rt; second-step-adaptive carries a
    weight-function spec (mu_kind "default", or "table" with mu_x/mu_y).
    """

    kind: str
    lambda_rt: Optional[float] = None
    mu_kind: str = "default"
    mu_x: Optional[tuple] = None
    mu_y: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ConfigError(f"unknown estimator kind {self.kind!r}")
        if self.kind == "second-step-joint":
            if self.lambda_rt is None or not self.lambda_rt > 0:
                raise ConfigError("second-step-joint needs lambda_rt > 0")
        if self.kind == "second-step-adaptive":
            if self.mu_kind not in ("default", "table"):
                raise ConfigError("mu kind must be 'default' or 'table'")
            if self.mu_kind == "table" and (self.mu_x is None or self.mu_y is None):
                raise ConfigError("table mu needs mu_x and mu_y")

    def make_penalty(self):
        """Build the prox penalty object for the second-step estimators."""
        from .prox import AdaptivePenalty, JointPenalty, default_mu, mu_from_table

        if self.kind == "second-step-joint":
            return JointPenalty(self.lambda_rt)
        if self.kind == "second-step-adaptive":
            if self.mu_kind == "default":
                return AdaptivePenalty(default_mu)
            return AdaptivePenalty(mu_from_table(self.mu_x, self.mu_y))
        raise ConfigError(f"estimator {self.kind!r} has no penalty")


@dataclass(frozen=True)
class ExperimentConfig:
    environments: tuple
    sweep: SweepSpec = SweepSpec("lambda_scale", (1.0,))
    replicates: ReplicateSpec = ReplicateSpec()
    seed: int = 0
    estimator: EstimatorSpec = EstimatorSpec("stack")

    def __post_init__(self):
        envs = tuple(self.environments)
        if not envs:
            raise ConfigError("need at least one environment")
        p = envs[0].p
        if any(e.p != p for e in envs):
            raise ConfigError("all environments must share the same p")
        if all(e.pi == 0 for e in envs):
            raise ConfigError("at least one environment weight pi must be > 0")
        object.__setattr__(self, "environments", envs)
        if self.sweep.param == "chi" and not any(
                e.covariance.kind == "two-eigenvalue" for e in envs):
            raise ConfigError("chi sweep needs a two-eigenvalue covariance")
        if self.sweep.param == "sigma_tilde2" and not any(
                e.signal.kind == "shifted" for e in envs):
            raise ConfigError("sigma_tilde2 sweep needs a shifted signal")
        if self.sweep.param == "lambda_rt" and self.estimator.kind != "second-step-joint":
            raise ConfigError("lambda_rt sweep needs a second-step-joint estimator")

    @property
    def p(self) -> int:
        return self.environments[0].p


def apply_sweep_value(config: ExperimentConfig, value: float) -> ExperimentConfig:
    """The configuration at one sweep point (pure transformation)."""
    param = config.sweep.param
    envs = list(config.environments)
    estimator = config.estimator
    if param == "lambda_scale":
        envs = [replace(e, lam=e.lam * value) for e in envs]
    elif param == "chi":
        envs = [
            replace(e, covariance=replace(e.covariance, chi=value))
            if e.covariance.kind == "two-eigenvalue" else e
            for e in envs
        ]
    elif param == "sigma_tilde2":
        envs = [
            replace(e, signal=replace(e.signal, sigma_tilde2=value))
            if e.signal.kind == "shifted" else e
            for e in envs
        ]
    elif param == "noise_var":
        envs = [replace(e, noise_var=value) for e in envs]
    elif param == "lambda_rt":
        estimator = replace(estimator, lambda_rt=value)
    return replace(config, environments=tuple(envs), estimator=estimator)


# ============================================================
# JSON loading with strict key validation
# ============================================================


def _check_keys(obj: dict, required, optional, path: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    for key in obj:
        if key not in required and key not in optional:
            raise ConfigError(f"unknown key '{path}{key}'")
    for key in required:
        if key not in obj:
            raise ConfigError(f"missing required key '{path}{key}'")


def _parse_covariance(obj, p, path) -> CovarianceSpec:
    _check_keys(obj, ("kind",), ("chi", "matrix", "c1"), path)
    kind = obj["kind"]
    kwargs = {}
    if "c1" in obj:
        kwargs["c1"] = float(obj["c1"])
    if kind == "two-eigenvalue":
        if "chi" not in obj:
            raise ConfigError(f"missing required key '{path}chi'")
        kwargs["chi"] = float(obj["chi"])
    if kind == "dense":
        if "matrix" not in obj:
            raise ConfigError(f"missing required key '{path}matrix'")
        kwargs["matrix"] = np.asarray(obj["matrix"], dtype=float)
    return CovarianceSpec(kind=kind, p=p, **kwargs)


def _parse_signal(obj, p, env_objs, index, path) -> SignalSpec:
    _check_keys(obj, ("kind",), ("sigma_beta2", "sigma_tilde2", "base_env"), path)
    kind = obj["kind"]
    if kind == "iid-gaussian":
        return SignalSpec(kind=kind, p=p,
                          sigma_beta2=float(obj.get("sigma_beta2", 1.0)))
    if kind == "shifted":
        base_env = int(obj.get("base_env", 0))
        if not (0 <= base_env < len(env_objs)) or base_env == index:
            raise ConfigError(f"'{path}base_env' must name another environment")
        base_obj = env_objs[base_env].get("signal", {"kind": "iid-gaussian"})
        if base_obj.get("kind", "iid-gaussian") != "iid-gaussian":
            raise ConfigError(f"'{path}base_env' must name an iid-gaussian signal")
        base = SignalSpec(kind="iid-gaussian", p=p,
                          sigma_beta2=float(base_obj.get("sigma_beta2", 1.0)))
        return SignalSpec(kind=kind, p=p, base=base, base_env=base_env,
                          sigma_tilde2=float(obj.get("sigma_tilde2", 0.0)))
    raise ConfigError(f"unknown signal kind {kind!r} at '{path}kind'")


def _parse_environment(obj, env_objs, index) -> EnvironmentSpec:
    path = f"environments[{index}]."
    _check_keys(obj, ("n", "p"),
                ("covariance", "signal", "noise_var", "pi", "lambda"), path)
    p = int(obj["p"])
    cov = _parse_covariance(obj.get("covariance", {"kind": "identity"}),
                            p, path + "covariance.")
    sig = _parse_signal(obj.get("signal", {"kind": "iid-gaussian"}),
                        p, env_objs, index, path + "signal.")
    lam = obj.get("lambda", 1.0)
    lam = np.asarray(lam, dtype=float) if isinstance(lam, list) else float(lam)
    return EnvironmentSpec(
        n=int(obj["n"]), p=p, covariance=cov, signal=sig,
        noise_var=float(obj.get("noise_var", 1.0)),
        pi=float(obj["pi"]) if "pi" in obj else 1.0 / len(env_objs),
        lam=lam,
    )


def parse_config(obj: dict) -> ExperimentConfig:
    """Validate and convert an already-parsed JSON object."""
    _check_keys(obj, ("environments",),
                ("sweep", "replicates", "seed", "estimator"), "")
    env_objs = obj["environments"]
    if not isinstance(env_objs, list) or not env_objs:
        raise ConfigError("'environments' must be a non-empty array")
    envs = tuple(_parse_environment(e, env_objs, i) for i, e in enumerate(env_objs))

    sweep_obj = obj.get("sweep", {"param": "lambda_scale", "values": [1.0]})
    _check_keys(sweep_obj, ("param", "values"), (), "sweep.")
    if not isinstance(sweep_obj["values"], list):
        raise ConfigError("'sweep.values' must be an array")
    sweep = SweepSpec(sweep_obj["param"], sweep_obj["values"])

    rep_obj = obj.get("replicates", {})
    _check_keys(rep_obj, (), ("design", "mc"), "replicates.")
    replicates = ReplicateSpec(design=int(rep_obj.get("design", 20)),
                               mc=int(rep_obj.get("mc", 400)))

    est_obj = obj.get("estimator", {"kind": "stack"})
    _check_keys(est_obj, ("kind",), ("lambda_rt", "mu"), "estimator.")
    est_kwargs = {"kind": est_obj["kind"]}
    if "lambda_rt" in est_obj:
        est_kwargs["lambda_rt"] = float(est_obj["lambda_rt"])
    if "mu" in est_obj:
        mu_obj = est_obj["mu"]
        _check_keys(mu_obj, ("kind",), ("x", "y"), "estimator.mu.")
        est_kwargs["mu_kind"] = mu_obj["kind"]
        if mu_obj["kind"] == "table":
            if "x" not in mu_obj or "y" not in mu_obj:
                raise ConfigError("missing required key 'estimator.mu.x'/'.y'")
            est_kwargs["mu_x"] = tuple(float(v) for v in mu_obj["x"])
            est_kwargs["mu_y"] = tuple(float(v) for v in mu_obj["y"])
    estimator = EstimatorSpec(**est_kwargs)

    return ExperimentConfig(
        environments=envs, sweep=sweep, replicates=replicates,
        seed=int(obj.get("seed", 0)), estimator=estimator,
    )


def load_config(path) -> ExperimentConfig:
    """Load and validate a JSON experiment configuration file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(obj)


__all__ = [
    "ConfigError",
    "CovarianceSpec",
    "SignalSpec",
    "EnvironmentSpec",
    "Environment",
    "SweepSpec",
    "ReplicateSpec",
    "EstimatorSpec",
    "ExperimentConfig",
    "covariance_sqrt",
    "draw_signal",
    "generate_environment",
    "apply_sweep_value",
    "parse_config",
    "load_config",
]
