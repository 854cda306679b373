"""Pure-Python coordinate-descent core.

Fallback for builds without the compiled extension; same contract as
``tlamp._cd_kernel.cd_solve``.  The per-coordinate loop is interpreted, so
this backend is roughly an order of magnitude slower (see benchmarks/).
"""

from __future__ import annotations

import numpy as np


def _kkt_from_u(c, w, b, u):
    g = u - c
    r = np.where(
        b > 0.0,
        np.abs(g + w),
        np.where(b < 0.0, np.abs(g - w), np.maximum(np.abs(g) - w, 0.0)),
    )
    return float(r.max()) if r.size else 0.0


def cd_solve(Q, c, w, b, max_sweeps, tol, obj_trace=None):
    """Minimize 0.5*b'Qb - c'b + sum_j w_j|b_j| by cyclic coordinate descent.

    Q must be symmetric with strictly positive diagonal.  ``b`` is the warm
    start and is overwritten with the solution.  Returns
    ``(sweeps_done, kkt_residual, converged)``; when ``obj_trace`` is given,
    ``obj_trace[s]`` receives the objective value after sweep ``s``.
    """
    p = Q.shape[0]
    u = Q @ b  # maintained as Q @ b throughout
    kkt = _kkt_from_u(c, w, b, u)
    if kkt <= tol:
        return 0, kkt, True
    for sweep in range(max_sweeps):
        for j in range(p):
            qjj = Q[j, j]
            bj_old = b[j]
            rho = c[j] - (u[j] - qjj * bj_old)
            wj = w[j]
            if rho > wj:
                bj_new = (rho - wj) / qjj
            elif rho < -wj:
                bj_new = (rho + wj) / qjj
            else:
                bj_new = 0.0
            d = bj_new - bj_old
            if d != 0.0:
                b[j] = bj_new
                u += Q[j] * d  # symmetric: row j == column j
        if obj_trace is not None:
            obj_trace[sweep] = (
                0.5 * float(b @ u) - float(c @ b) + float(w @ np.abs(b))
            )
        kkt = _kkt_from_u(c, w, b, u)
        if kkt <= tol:
            return sweep + 1, kkt, True
    return max_sweeps, kkt, False
