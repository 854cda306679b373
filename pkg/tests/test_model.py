"""Environment generation, covariance handling, and config loading."""

import json
import math

import numpy as np
import pytest

from tlamp._linalg import sym_sqrt
from tlamp.model import (
    ConfigError,
    CovarianceSpec,
    EnvironmentSpec,
    EstimatorSpec,
    ExperimentConfig,
    ReplicateSpec,
    SignalSpec,
    SweepSpec,
    apply_sweep_value,
    covariance_sqrt,
    draw_signal,
    generate_environment,
    load_config,
    parse_config,
)


def base_env_spec(n=800, p=400, pi=0.5, noise_var=1.0):
    return EnvironmentSpec(
        n=n, p=p,
        covariance=CovarianceSpec("identity", p),
        signal=SignalSpec("iid-gaussian", p, sigma_beta2=1.0),
        noise_var=noise_var, pi=pi,
    )


# ============================================================
# covariance
# ============================================================


def test_covariance_sqrt_identity_and_diagonal():
    assert np.array_equal(covariance_sqrt(CovarianceSpec("identity", 3)), np.eye(3))
    S = covariance_sqrt(np.diag([4.0, 0.25]))
    assert np.allclose(S, np.diag([2.0, 0.5]), atol=1e-14)


def test_covariance_sqrt_random_spd():
    rng = np.random.default_rng(21)
    A = rng.normal(size=(10, 10))
    sigma = A @ A.T / 10 + 0.5 * np.eye(10)
    S = covariance_sqrt(sigma)
    assert np.allclose(S, S.T, atol=0)
    rel = np.linalg.norm(S @ S - sigma) / np.linalg.norm(sigma)
    assert rel <= 1e-10


def test_covariance_sqrt_rejects_non_spd():
    with pytest.raises(ValueError):
        covariance_sqrt(np.diag([1.0, 0.0]))
    with pytest.raises(ValueError):
        sym_sqrt(np.diag([1.0, -2.0]))


def test_two_eigenvalue_spectrum_is_exact():
    spec = CovarianceSpec("two-eigenvalue", 12, chi=3.0)
    vals = np.sort(np.linalg.eigvalsh(spec.realize()))
    assert np.allclose(vals[:6], 1.0 / 3.0, atol=1e-14)
    assert np.allclose(vals[6:], 3.0, atol=1e-14)
    root = spec.sqrt()
    assert np.allclose(root @ root, spec.realize(), atol=1e-14)


def test_two_eigenvalue_rejects_odd_p():
    with pytest.raises(ConfigError):
        CovarianceSpec("two-eigenvalue", 5, chi=2.0)


def test_eigenvalue_bound_enforced():
    with pytest.raises(ConfigError):
        CovarianceSpec("two-eigenvalue", 4, chi=100.0, c1=10.0)
    with pytest.raises(ConfigError):
        CovarianceSpec("dense", 2, matrix=np.diag([1.0, 50.0]), c1=10.0)


# ============================================================
# signals and environments
# ============================================================


def test_signal_second_moment():
    p = 400
    beta = draw_signal(SignalSpec("iid-gaussian", p, sigma_beta2=1.0), 0, 0)
    assert abs(beta @ beta / p - 1.0) <= 5.0 * math.sqrt(2.0 / p)


def test_shifted_signal_shares_base_and_scales():
    p = 4000
    base_spec = SignalSpec("iid-gaussian", p, sigma_beta2=1.0)
    shift_spec = SignalSpec("shifted", p, base=base_spec, base_env=0,
                            sigma_tilde2=0.25)
    beta1 = draw_signal(base_spec, 3, 0)
    beta2 = draw_signal(shift_spec, 3, 1)
    diff = beta2 - beta1
    # per-coordinate variance sigma_tilde2 * pi/2, mean |shift| = sqrt(sigma_tilde2)
    target_var = 0.25 * math.pi / 2.0
    assert abs(diff @ diff / p - target_var) <= 5.0 * target_var * math.sqrt(2.0 / p)
    assert abs(np.mean(np.abs(diff)) - 0.5) <= 0.05
    # zero shift collapses to the base exactly
    zero_spec = SignalSpec("shifted", p, base=base_spec, base_env=0,
                           sigma_tilde2=0.0)
    assert np.array_equal(draw_signal(zero_spec, 3, 1), beta1)


def test_generate_environment_identity_and_determinism():
    spec = base_env_spec(n=300, p=100)
    env_a = generate_environment(spec, seed=5, env_index=0, replicate=0)
    env_b = generate_environment(spec, seed=5, env_index=0, replicate=0)
    assert np.array_equal(env_a.y, env_b.y)
    assert np.array_equal(env_a.Z_design, env_b.Z_design)
    assert env_a.generative_residual() == 0.0
    assert env_a.kappa == pytest.approx(1.0 / 3.0)
    other_rep = generate_environment(spec, seed=5, env_index=0, replicate=1)
    assert np.array_equal(other_rep.beta, env_a.beta)  # signal fixed
    assert not np.array_equal(other_rep.Z_design, env_a.Z_design)
    other_seed = generate_environment(spec, seed=6, env_index=0, replicate=0)
    assert not np.array_equal(other_seed.y, env_a.y)


def test_zero_noise_gives_exact_linear_response():
    spec = base_env_spec(n=50, p=20, noise_var=0.0)
    env = generate_environment(spec, seed=1)
    assert np.array_equal(env.y, env.Z_design @ (env.sigma_sqrt @ env.beta))
    assert np.all(env.w == 0.0)


def test_design_row_covariance_concentrates():
    # rows of Z S have covariance Sigma/n; at p=50, n=50000 the sample
    # covariance lands within a few sqrt(p/n) ~ 6% in operator norm
    # (frozen bound 10%, measured 5.9-6.6% over seeds at these sizes)
    p, n = 50, 50000
    spec = EnvironmentSpec(
        n=n, p=p,
        covariance=CovarianceSpec("two-eigenvalue", p, chi=2.0),
        signal=SignalSpec("iid-gaussian", p, sigma_beta2=1.0),
    )
    env = generate_environment(spec, seed=11)
    X = env.Z_design @ env.sigma_sqrt
    sample = X.T @ X  # n * (empirical row covariance)
    rel = np.linalg.norm(sample - env.sigma, 2) / np.linalg.norm(env.sigma, 2)
    assert rel <= 0.10


# ============================================================
# configuration
# ============================================================

BASE_CONFIG = {
    "seed": 0,
    "replicates": {"design": 20, "mc": 400},
    "estimator": {"kind": "stack"},
    "environments": [
        {"n": 800, "p": 400, "pi": 0.5,
         "covariance": {"kind": "identity"},
         "signal": {"kind": "iid-gaussian", "sigma_beta2": 1.0}},
        {"n": 600, "p": 400, "pi": 0.5,
         "covariance": {"kind": "identity"},
         "signal": {"kind": "shifted", "base_env": 0, "sigma_tilde2": 0.25}},
    ],
}


def test_load_config_round_trip(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(BASE_CONFIG))
    config = load_config(path)
    assert len(config.environments) == 2
    assert config.environments[0].n == 800
    assert config.environments[1].signal.kind == "shifted"
    assert config.environments[1].signal.base.sigma_beta2 == 1.0
    assert config.replicates.design == 20
    assert config.seed == 0
    assert config.estimator.kind == "stack"
    # defaults: sweep omitted -> single-point lambda_scale sweep
    assert config.sweep.param == "lambda_scale"
    assert config.sweep.values == (1.0,)


def test_config_defaults_applied():
    minimal = {"environments": [{"n": 100, "p": 50}]}
    config = parse_config(minimal)
    assert config.seed == 0
    assert config.replicates == ReplicateSpec(20, 400)
    assert config.environments[0].covariance.kind == "identity"
    assert config.environments[0].pi == 1.0
    assert np.all(config.environments[0].lam == 1.0)


def test_config_rejects_unknown_and_missing_keys():
    with pytest.raises(ConfigError, match="unknown key 'sed'"):
        parse_config({"sed": 1, "environments": [{"n": 10, "p": 4}]})
    with pytest.raises(ConfigError, match="environments\\[0\\].n"):
        parse_config({"environments": [{"p": 4}]})
    with pytest.raises(ConfigError, match="environments\\[1\\].covariance.chi"):
        parse_config({"environments": [
            {"n": 10, "p": 4},
            {"n": 10, "p": 4, "covariance": {"kind": "two-eigenvalue"}},
        ]})
    with pytest.raises(ConfigError, match="sweep.values"):
        parse_config({"environments": [{"n": 10, "p": 4}],
                      "sweep": {"param": "lambda_scale", "values": 3}})


def test_sweep_echo_and_validation():
    cfg = dict(BASE_CONFIG)
    cfg["sweep"] = {"param": "sigma_tilde2",
                    "values": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]}
    config = parse_config(cfg)
    assert len(config.sweep.values) == 8
    bad = dict(BASE_CONFIG)
    bad["sweep"] = {"param": "chi", "values": [1.0]}
    with pytest.raises(ConfigError, match="two-eigenvalue"):
        parse_config(bad)


def test_apply_sweep_value():
    cfg = parse_config(dict(BASE_CONFIG, sweep={"param": "sigma_tilde2",
                                                "values": [0.0, 0.4]}))
    at = apply_sweep_value(cfg, 0.4)
    assert at.environments[1].signal.sigma_tilde2 == 0.4
    assert at.environments[0].signal.kind == "iid-gaussian"

    lam_cfg = parse_config(dict(BASE_CONFIG))
    scaled = apply_sweep_value(lam_cfg, 2.0)
    assert np.all(scaled.environments[0].lam == 2.0)

    joint = parse_config(dict(
        BASE_CONFIG,
        estimator={"kind": "second-step-joint", "lambda_rt": 0.5},
        sweep={"param": "lambda_rt", "values": [0.1, 0.5]},
    ))
    assert apply_sweep_value(joint, 0.1).estimator.lambda_rt == 0.1


def test_estimator_spec_penalties():
    joint = EstimatorSpec("second-step-joint", lambda_rt=0.5)
    assert joint.make_penalty().lambda_rt == 0.5
    adaptive = EstimatorSpec("second-step-adaptive")
    penalty = adaptive.make_penalty()
    assert penalty.mu(np.array([0.0]))[0] == pytest.approx(5.0 + 10.0 / 0.05)
    table = EstimatorSpec("second-step-adaptive", mu_kind="table",
                          mu_x=(0.0, 1.0), mu_y=(2.0, 1.0))
    assert table.make_penalty().mu(np.array([0.5]))[0] == pytest.approx(1.5)
    with pytest.raises(ConfigError):
        EstimatorSpec("second-step-joint")  # lambda_rt missing
    with pytest.raises(ConfigError):
        EstimatorSpec("ridge")


def test_experiment_config_validation():
    with pytest.raises(ConfigError, match="same p"):
        ExperimentConfig(environments=(base_env_spec(p=400),
                                       base_env_spec(n=600, p=200)))
    with pytest.raises(ConfigError, match="pi"):
        ExperimentConfig(environments=(base_env_spec(pi=0.0),))
    cfg = ExperimentConfig(environments=(base_env_spec(),))
    assert cfg.p == 400
