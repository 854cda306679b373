"""Small shared linear-algebra helpers."""

from __future__ import annotations

import numpy as np


def sym_sqrt(mat, min_eig=1e-12):
    """Symmetric square root of an SPD matrix via eigendecomposition.

    Raises ValueError when any eigenvalue is <= min_eig; the returned S is
    symmetric and satisfies S @ S = mat to eigensolver accuracy.
    """
    mat = np.asarray(mat, dtype=float)
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() <= min_eig:
        raise ValueError(
            f"matrix is not positive definite (min eigenvalue {vals.min():.3e})"
        )
    root = (vecs * np.sqrt(vals)) @ vecs.T
    return 0.5 * (root + root.T)
