"""Backend selection for the coordinate-descent core.

Prefers the compiled extension when the build produced one, otherwise falls
back to the pure-Python implementation with an identical contract.  Set
``TLAMP_FORCE_PYTHON_KERNEL=1`` to force the fallback (used by the
cross-backend tests and the benchmark script).
"""

import os

if os.environ.get("TLAMP_FORCE_PYTHON_KERNEL", "") == "1":
    from ._cd_python import cd_solve

    BACKEND = "python"
else:
    try:
        from ._cd_kernel import cd_solve  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        from ._cd_python import cd_solve

        BACKEND = "python"

__all__ = ["cd_solve", "BACKEND"]
