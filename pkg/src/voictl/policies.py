"""Trigger and control policies.

Every trigger sees the stage index and the estimation mismatch (batch axis
first). Per-episode mutable state, such as the decoder covariance used by the
variance-based rule, lives in the object returned by ``start`` and is passed
back to ``decide``; the policy itself stays immutable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimation import CovarianceSchedule
from .lqr import RiccatiSolution, ce_control
from .model import ProcessModel
from .voidp import GridSpec, ValueTable, build_table_or_warn, voi

TRIGGER_KINDS = ("voi_exact", "voi_myopic", "periodic", "always", "never",
                 "mismatch_threshold", "variance_based", "bernoulli")
_NEEDS_PARAM = {"periodic", "mismatch_threshold", "variance_based", "bernoulli"}


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class TriggerPolicy:
    kind: str
    param: float | None = None
    model: ProcessModel | None = None
    sol: RiccatiSolution | None = None
    table: ValueTable | None = None
    schedule: CovarianceSchedule | None = None

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise PolicyError(f"unknown trigger kind {self.kind!r}")
        if self.kind in _NEEDS_PARAM and self.param is None:
            raise PolicyError(f"trigger {self.kind} needs a parameter")
        if self.kind == "periodic" and (int(self.param) != self.param or self.param < 1):
            raise PolicyError(f"periodic period must be a positive integer, got {self.param}")
        if self.kind == "bernoulli" and not 0.0 <= self.param <= 1.0:
            raise PolicyError(f"bernoulli probability must lie in [0, 1], got {self.param}")
        if self.kind == "voi_exact" and self.table is None:
            raise PolicyError("voi_exact needs a value table")
        if self.kind in ("voi_exact", "voi_myopic") and (self.sol is None or self.model is None):
            raise PolicyError(f"{self.kind} needs the model and the Riccati solution")
        if self.kind == "variance_based" and (self.schedule is None or self.model is None):
            raise PolicyError("variance_based needs the model and the covariance schedule")

    @property
    def label(self) -> str:
        if self.param is None:
            return self.kind
        p = int(self.param) if self.kind == "periodic" else self.param
        return f"{self.kind}({p:g})" if isinstance(p, float) else f"{self.kind}({p})"

    def start(self, batch: int) -> dict:
        """Fresh episode-local state for ``batch`` episodes."""
        if self.kind == "variance_based":
            M0 = self.model.M0
            return {"P": np.broadcast_to(M0, (batch,) + M0.shape).copy()}
        return {}

    def decide(self, k: int, e, uniform=None, state: dict | None = None) -> np.ndarray:
        """Transmission decisions for mismatch ``e`` of shape (batch, n)."""
        e = np.atleast_2d(np.asarray(e, dtype=float))
        batch = e.shape[0]
        kind = self.kind
        if kind == "always":
            return np.ones(batch, dtype=bool)
        if kind == "never":
            return np.zeros(batch, dtype=bool)
        if kind == "periodic":
            return np.full(batch, k % int(self.param) == 0)
        if kind == "mismatch_threshold":
            return np.linalg.norm(e, axis=-1) >= self.param
        if kind == "bernoulli":
            if uniform is None:
                raise PolicyError("bernoulli trigger needs per-episode uniforms")
            return np.asarray(uniform, dtype=float).reshape(batch) < self.param
        if kind == "voi_exact":
            return voi(self.table, self.sol, e, k).transmit
        if kind == "voi_myopic":
            return voi(None, self.sol, e, k, A=self.model.A[k]).transmit
        # variance_based: decoder covariance propagated with the no-transmission term dropped
        if state is None or "P" not in state:
            raise PolicyError("variance_based trigger needs its episode state (see start())")
        P = state["P"]
        Y = self.schedule.Y[k]
        gap = np.trace(P, axis1=-2, axis2=-1) - np.trace(Y)
        delta = gap > self.param
        A, W = self.model.A[k], self.model.W[k]
        base = np.where(delta[:, None, None], Y, P)
        state["P"] = A @ base @ A.T + W
        return delta


def decide(policy: TriggerPolicy, k: int, e, rng: np.random.Generator | None = None,
           state: dict | None = None) -> np.ndarray:
    """Single-call convenience around :meth:`TriggerPolicy.decide`."""
    e2 = np.atleast_2d(np.asarray(e, dtype=float))
    uniform = rng.random(e2.shape[0]) if (policy.kind == "bernoulli" and rng is not None) else None
    out = policy.decide(k, e2, uniform, state)
    return out[0] if np.ndim(e) == 1 else out


@dataclass(frozen=True)
class ControlPolicy:
    kind: str = "certainty_equivalent"

    def __post_init__(self):
        if self.kind not in ("certainty_equivalent", "zero"):
            raise PolicyError(f"unknown controller kind {self.kind!r}")

    def act(self, sol: RiccatiSolution, xhat, k: int) -> np.ndarray:
        if self.kind == "zero":
            xhat = np.asarray(xhat, dtype=float)
            return np.zeros(xhat.shape[:-1] + (sol.L[k].shape[0],))
        return ce_control(sol, xhat, k)


CE = ControlPolicy("certainty_equivalent")
ZERO = ControlPolicy("zero")


def act(policy: ControlPolicy, sol: RiccatiSolution, xhat, k: int) -> np.ndarray:
    return policy.act(sol, xhat, k)


def parse_policy(text: str) -> tuple[str, float | None]:
    """``kind[:param]``; ``voi`` is accepted as an alias resolved by :func:`make_trigger`."""
    kind, _, raw = text.strip().partition(":")
    kind = kind.strip().replace("-", "_")
    if kind not in TRIGGER_KINDS and kind != "voi":
        raise PolicyError(f"unknown trigger kind {kind!r}")
    if kind in _NEEDS_PARAM and not raw:
        raise PolicyError(f"trigger {kind} needs a parameter, e.g. {kind}:1")
    try:
        param = float(raw) if raw else None
    except ValueError as exc:
        raise PolicyError(f"bad parameter {raw!r} for trigger {kind}") from exc
    return kind, param


def make_trigger(text: str, model: ProcessModel, sol: RiccatiSolution, schedule: CovarianceSchedule,
                 table: ValueTable | None = None, grid: GridSpec | None = None,
                 myopic: bool = False) -> TriggerPolicy:
    """Build a trigger from ``kind[:param]``. ``voi`` picks the exact table for scalar
    states and the myopic rule otherwise (or when ``myopic`` is set)."""
    kind, param = parse_policy(text)
    if kind == "voi":
        if myopic:
            kind = "voi_myopic"
        else:
            table = table if table is not None else build_table_or_warn(model, sol, grid, schedule)
            kind = "voi_exact" if table is not None else "voi_myopic"
    if kind == "voi_exact" and table is None:
        from .voidp import backward_induction

        table = backward_induction(model, sol, grid, schedule)
    return TriggerPolicy(kind, param, model=model, sol=sol, table=table, schedule=schedule)
