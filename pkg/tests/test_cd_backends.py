"""Compiled and pure-Python coordinate-descent kernels must agree."""

import numpy as np
import pytest

from tlamp import _cd_python

try:
    from tlamp import _cd_kernel
except ImportError:
    _cd_kernel = None

needs_kernel = pytest.mark.skipif(_cd_kernel is None,
                                  reason="compiled kernel not built")


def random_instance(rng, p):
    A = rng.normal(size=(p, p))
    Q = A @ A.T / p + 0.5 * np.eye(p)
    Q = np.ascontiguousarray(0.5 * (Q + Q.T))
    c = rng.normal(size=p)
    w = rng.uniform(0.1, 1.0, p)
    return Q, c, w


@needs_kernel
def test_backends_agree():
    rng = np.random.default_rng(7)
    for p in (3, 17, 60):
        Q, c, w = random_instance(rng, p)
        b_py = np.zeros(p)
        b_cy = np.zeros(p)
        out_py = _cd_python.cd_solve(Q, c, w, b_py, 10 * p, 1e-10)
        out_cy = _cd_kernel.cd_solve(Q, c, w, b_cy, 10 * p, 1e-10)
        assert np.max(np.abs(b_py - b_cy)) <= 1e-12
        assert out_py[2] == out_cy[2]
        assert abs(out_py[1] - out_cy[1]) <= 1e-12


@needs_kernel
def test_objective_traces_agree():
    rng = np.random.default_rng(8)
    Q, c, w = random_instance(rng, 25)
    tr_py = np.full(250, np.nan)
    tr_cy = np.full(250, np.nan)
    s_py, _, _ = _cd_python.cd_solve(Q, c, w, np.zeros(25), 250, 1e-12, tr_py)
    s_cy, _, _ = _cd_kernel.cd_solve(Q, c, w, np.zeros(25), 250, 1e-12, tr_cy)
    assert s_py == s_cy
    assert np.allclose(tr_py[:s_py], tr_cy[:s_cy], rtol=0, atol=1e-10)


def test_python_backend_warm_start_shortcut():
    rng = np.random.default_rng(9)
    Q, c, w = random_instance(rng, 12)
    b = np.zeros(12)
    _cd_python.cd_solve(Q, c, w, b, 120, 1e-10)
    sweeps, kkt, ok = _cd_python.cd_solve(Q, c, w, b, 120, 1e-10)
    assert sweeps == 0 and ok
    assert kkt <= 1e-10


def test_dispatcher_exposes_backend_name():
    from tlamp import _cd

    assert _cd.BACKEND in ("compiled", "python")
    assert callable(_cd.cd_solve)
