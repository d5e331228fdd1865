from __future__ import annotations

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve


class SingularMatrixError(LinAlgError):
    """A matrix that must be symmetric positive definite failed to factor."""

    def __init__(self, name: str, stage: int | None = None):
        self.name = name
        self.stage = stage
        at = f" at stage {stage}" if stage is not None else ""
        super().__init__(f"{name}{at} is singular or not positive definite")


def sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def spd_solve(M: np.ndarray, rhs: np.ndarray, name: str = "matrix", stage: int | None = None) -> np.ndarray:
    """Solve M X = rhs for symmetric positive definite M via Cholesky."""
    try:
        fac = cho_factor(sym(M), lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise SingularMatrixError(name, stage) from exc
    return cho_solve(fac, rhs)


def spd_inv(M: np.ndarray, name: str = "matrix", stage: int | None = None) -> np.ndarray:
    return sym(spd_solve(M, np.eye(M.shape[0]), name, stage))
