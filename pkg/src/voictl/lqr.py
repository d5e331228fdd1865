"""Finite-horizon Riccati synthesis and the certainty-equivalent controller."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import spd_solve, sym
from .model import ProcessModel


@dataclass(frozen=True)
class RiccatiSolution:
    """Backward Riccati sequences.

    ``S`` has N+2 entries (k = 0..N+1). ``L``, ``Lam`` and ``Gamma`` are
    indexed by k = 0..N; ``Gamma`` carries one extra zero entry at N+1 so
    ``Gamma[k + 1]`` is always valid. ``kappa`` is the policy-independent part
    of the regulation cost, so that (N+1) J = Psi + kappa.
    """

    S: tuple[np.ndarray, ...]
    L: tuple[np.ndarray, ...]
    Lam: tuple[np.ndarray, ...]
    Gamma: tuple[np.ndarray, ...]
    theta: np.ndarray
    kappa: float

    @property
    def N(self) -> int:
        return len(self.L) - 1


def riccati_backward(model: ProcessModel) -> RiccatiSolution:
    N, n = model.N, model.n
    S = [None] * (N + 2)
    L = [None] * (N + 1)
    Lam = [None] * (N + 1)
    Gamma = [None] * (N + 2)
    S[N + 1] = sym(model.Q[N + 1])
    Gamma[N + 1] = np.zeros((n, n))
    for k in range(N, -1, -1):
        A, B, Sn = model.A[k], model.B[k], S[k + 1]
        Lam[k] = sym(B.T @ Sn @ B + model.R[k])
        L[k] = spd_solve(Lam[k], B.T @ Sn @ A, "Lambda", k)
        Gamma[k] = sym(L[k].T @ Lam[k] @ L[k])
        S[k] = sym(model.Q[k] + A.T @ Sn @ A - Gamma[k])
    # x_0' Q_0 x_0 is not part of the regulation cost, hence S_0 - Q_0
    S0 = S[0] - model.Q[0]
    kappa = float(model.m0 @ S0 @ model.m0 + np.trace(S0 @ model.M0))
    kappa += float(sum(np.trace(S[k + 1] @ model.W[k]) for k in range(N + 1)))
    return RiccatiSolution(S=tuple(S), L=tuple(L), Lam=tuple(Lam), Gamma=tuple(Gamma),
                           theta=np.asarray(model.theta, dtype=float), kappa=kappa)


def ce_control(sol: RiccatiSolution, xhat, k: int) -> np.ndarray:
    """u_k = -L_k xhat_k (batch axes allowed)."""
    return -(np.asarray(xhat, dtype=float) @ sol.L[k].T)


def stage_cost_terms(sol: RiccatiSolution, x, u, k: int) -> np.ndarray:
    """Completed-square control cost (u + L_k x)' Lambda_k (u + L_k x)."""
    d = np.asarray(u, dtype=float) + np.asarray(x, dtype=float) @ sol.L[k].T
    return np.einsum("...i,ij,...j->...", d, sol.Lam[k], d)
