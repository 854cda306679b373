"""Multi-environment Lasso transfer learning with exact asymptotics.

The package has three layers:

* model / prox: problem setup (multi-environment linear models with
  per-environment covariance and noise) and the proximal operators that
  both the asymptotic theory and the iterative algorithms share.
* state_evo / glamp: scalar-covariance fixed points that characterize the
  estimators in the large-system limit, and the matching approximate
  message passing iterations on actual data.
* estimators / risk / cli: direct convex solvers for the same objectives,
  risk prediction versus Monte Carlo simulation, and the command-line
  entry point.
"""

from ._cd import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
