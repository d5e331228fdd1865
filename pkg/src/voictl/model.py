"""Problem instance: a controlled Gauss-Markov process observed by several sensors.

The model is stored with every stage-dependent quantity expanded to a tuple
of per-stage arrays, so downstream code never has to special-case the
time-invariant shorthand accepted by :func:`model_from_dict`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.linalg import block_diag

SYM_TOL = 1e-10
PD_REL_TOL = 1e-12


class ModelError(ValueError):
    """Invalid problem instance. ``field`` names the offending entry."""

    kind = "invalid-model"

    def __init__(self, message: str, field: str, stage: int | None = None, sensor: int | None = None):
        self.field = field
        self.stage = stage
        self.sensor = sensor
        where = []
        if sensor is not None:
            where.append(f"sensor {sensor}")
        if stage is not None:
            where.append(f"stage {stage}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{self.kind}: {field}{suffix}: {message}")


class DimensionMismatchError(ModelError):
    kind = "dimension-mismatch"


class NotPositiveDefiniteError(ModelError):
    kind = "non-positive-definite"


class LambdaRangeError(ModelError):
    kind = "lambda-out-of-range"


@dataclass(frozen=True)
class ProcessModel:
    """One instance of the rate-regulation problem.

    Indexing follows the process equations: ``A[k]``, ``B[k]``, ``W[k]``,
    ``R[k]`` and ``ell[k]`` for k = 0..N; ``C[i][k]``, ``V[i][k]`` per sensor
    for k = 0..N; ``Q[k]`` for k = 0..N+1. Only Q[1..N+1] enter the
    regulation cost; Q[0] only shifts the Riccati matrix S_0.
    """

    N: int
    A: tuple[np.ndarray, ...]
    B: tuple[np.ndarray, ...]
    C: tuple[tuple[np.ndarray, ...], ...]
    V: tuple[tuple[np.ndarray, ...], ...]
    W: tuple[np.ndarray, ...]
    m0: np.ndarray
    M0: np.ndarray
    Q: tuple[np.ndarray, ...]
    R: tuple[np.ndarray, ...]
    ell: np.ndarray
    lam: float
    source: dict[str, Any] | None = field(default=None, compare=False, repr=False)

    @property
    def n(self) -> int:
        return self.A[0].shape[0]

    @property
    def m(self) -> int:
        return self.B[0].shape[1]

    @property
    def sensor_count(self) -> int:
        return len(self.C)

    @property
    def output_dims(self) -> tuple[int, ...]:
        return tuple(c[0].shape[0] for c in self.C)

    @property
    def p(self) -> int:
        return sum(self.output_dims)

    @property
    def theta(self) -> np.ndarray:
        """Transmission price per stage, ell_k (1 - lam) / lam."""
        return self.ell * (1.0 - self.lam) / self.lam

    def with_lambda(self, lam: float) -> "ProcessModel":
        from dataclasses import replace

        out = replace(self, lam=float(lam))
        _check_lambda(out.lam)
        return out


@dataclass(frozen=True)
class AggregateSensor:
    """Stacked output matrices and block-diagonal noise covariances per stage."""

    C: tuple[np.ndarray, ...]
    V: tuple[np.ndarray, ...]
    blocks: tuple[slice, ...]

    def stack(self, outputs: Sequence[np.ndarray]) -> np.ndarray:
        """Concatenate per-sensor outputs (trailing axis) in sensor order."""
        return np.concatenate([np.asarray(y, dtype=float) for y in outputs], axis=-1)

    def split(self, y: np.ndarray) -> list[np.ndarray]:
        return [y[..., b] for b in self.blocks]


# ---------------------------------------------------------------- validation


def _is_symmetric(M: np.ndarray) -> bool:
    return bool(np.all(np.abs(M - M.T) <= SYM_TOL * (1.0 + np.max(np.abs(M)))))


def _eig_bounds(M: np.ndarray) -> tuple[float, float]:
    ev = np.linalg.eigvalsh(0.5 * (M + M.T))
    return float(ev[0]), float(ev[-1])


def _check_spd(M: np.ndarray, name: str, stage=None, sensor=None, semi: bool = False) -> None:
    if not _is_symmetric(M):
        raise NotPositiveDefiniteError("matrix is not symmetric", name, stage, sensor)
    lo, hi = _eig_bounds(M)
    if semi:
        if lo < -PD_REL_TOL * (1.0 + abs(hi)):
            raise NotPositiveDefiniteError(f"smallest eigenvalue {lo:.3g} < 0", name, stage, sensor)
    # scale-free: a tiny but well-conditioned covariance is still definite
    elif lo <= PD_REL_TOL * abs(hi):
        raise NotPositiveDefiniteError(f"smallest eigenvalue {lo:.3g} is not positive", name, stage, sensor)


def _check_shape(M: np.ndarray, shape: tuple[int, ...], name: str, stage=None, sensor=None) -> None:
    if M.shape != shape:
        raise DimensionMismatchError(f"expected shape {shape}, got {M.shape}", name, stage, sensor)


def _check_lambda(lam: float) -> None:
    if not (0.0 < lam < 1.0) or not np.isfinite(lam):
        raise LambdaRangeError(f"must lie in the open interval (0, 1), got {lam}", "lambda")


def validate_model(model: ProcessModel) -> ProcessModel:
    """Check every structural and definiteness assumption; return the model unchanged."""
    N = model.N
    if not isinstance(N, (int, np.integer)) or N < 0:
        raise DimensionMismatchError(f"horizon must be an integer >= 0, got {N!r}", "N")
    _check_lambda(model.lam)
    for name, seq, length in (("A", model.A, N + 1), ("B", model.B, N + 1), ("W", model.W, N + 1),
                              ("R", model.R, N + 1), ("Q", model.Q, N + 2)):
        if len(seq) != length:
            raise DimensionMismatchError(f"expected {length} stages, got {len(seq)}", name)
    n = model.A[0].shape[0] if model.A[0].ndim == 2 else -1
    m = model.B[0].shape[1] if model.B[0].ndim == 2 else -1
    if n < 1:
        raise DimensionMismatchError("state dimension must be >= 1", "A", 0)
    if m < 1:
        raise DimensionMismatchError("input dimension must be >= 1", "B", 0)
    for k in range(N + 1):
        _check_shape(model.A[k], (n, n), "A", k)
        _check_shape(model.B[k], (n, m), "B", k)
        _check_shape(model.W[k], (n, n), "W", k)
        _check_spd(model.W[k], "W", k)
        _check_shape(model.R[k], (m, m), "R", k)
        _check_spd(model.R[k], "R", k)
    for k in range(N + 2):
        _check_shape(model.Q[k], (n, n), "Q", k)
        _check_spd(model.Q[k], "Q", k, semi=True)
    _check_shape(model.m0, (n,), "m0")
    _check_shape(model.M0, (n, n), "M0")
    _check_spd(model.M0, "M0")
    if model.sensor_count < 1:
        raise DimensionMismatchError("at least one sensor is required", "sensors")
    if len(model.V) != model.sensor_count:
        raise DimensionMismatchError("C and V sensor counts differ", "sensors")
    for i, (Ci, Vi) in enumerate(zip(model.C, model.V), start=1):
        if len(Ci) != N + 1 or len(Vi) != N + 1:
            raise DimensionMismatchError(f"expected {N + 1} stages", "sensors", sensor=i)
        p = Ci[0].shape[0] if Ci[0].ndim == 2 else -1
        if p < 1:
            raise DimensionMismatchError("output matrix must be 2-D with >= 1 row", "C", 0, i)
        for k in range(N + 1):
            _check_shape(Ci[k], (p, n), "C", k, i)
            _check_shape(Vi[k], (p, p), "V", k, i)
            _check_spd(Vi[k], "V", k, i)
    ell = np.asarray(model.ell)
    _check_shape(ell, (N + 1,), "ell")
    if np.any(ell < 0) or not np.all(np.isfinite(ell)):
        raise ModelError("rate weights must be finite and >= 0", "ell")
    for k, Ak in enumerate(model.A):
        if not np.all(np.isfinite(Ak)) or not np.all(np.isfinite(model.B[k])):
            raise ModelError("non-finite entries", "A/B", k)
    return model


def aggregate_sensors(model: ProcessModel) -> AggregateSensor:
    dims = model.output_dims
    edges = np.concatenate([[0], np.cumsum(dims)])
    blocks = tuple(slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]))
    C = tuple(np.vstack([model.C[i][k] for i in range(model.sensor_count)]) for k in range(model.N + 1))
    V = tuple(block_diag(*[model.V[i][k] for i in range(model.sensor_count)]) for k in range(model.N + 1))
    return AggregateSensor(C=C, V=V, blocks=blocks)


# ------------------------------------------------------------------ sampling


def episode_rng(master_seed: int, episode: int) -> np.random.Generator:
    """Counter-based generator for one episode: Philox keyed by the master seed,
    with the episode index in the top word of the counter."""
    seed = int(master_seed) & 0xFFFFFFFFFFFFFFFF
    return np.random.Generator(np.random.Philox(key=[seed, 0x5EED], counter=[0, 0, 0, int(episode)]))


def _chol(M: np.ndarray) -> np.ndarray:
    return np.linalg.cholesky(0.5 * (M + M.T))


def step_process(model: ProcessModel, k: int, x, u, rng: np.random.Generator | None = None, z=None) -> np.ndarray:
    """x_{k+1} = A_k x + B_k u + w_k with w_k ~ N(0, W_k).

    ``z`` may supply the standard-normal draws directly (trailing axis n);
    otherwise they come from ``rng``. Leading batch axes are allowed.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if z is None:
        z = rng.standard_normal(x.shape)
    w = np.asarray(z) @ _chol(model.W[k]).T
    return x @ model.A[k].T + u @ model.B[k].T + w


def observe(model: ProcessModel, k: int, x, rng: np.random.Generator | None = None, z=None) -> list[np.ndarray]:
    """Per-sensor outputs y^i_k = C^i_k x + v^i_k with independent v^i_k ~ N(0, V^i_k)."""
    x = np.asarray(x, dtype=float)
    if z is None:
        z = rng.standard_normal(x.shape[:-1] + (model.p,))
    z = np.asarray(z)
    out = []
    start = 0
    for i in range(model.sensor_count):
        p = model.output_dims[i]
        v = z[..., start:start + p] @ _chol(model.V[i][k]).T
        out.append(x @ model.C[i][k].T + v)
        start += p
    return out


def sample_initial_state(model: ProcessModel, rng: np.random.Generator | None = None, z=None) -> np.ndarray:
    if z is None:
        z = rng.standard_normal(model.n)
    return model.m0 + np.asarray(z) @ _chol(model.M0).T


# ------------------------------------------------------------------ config io


def _to_matrix(value: Any, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim == 2:
        return arr
    raise DimensionMismatchError(f"cannot interpret array of rank {arr.ndim} as a matrix", name)


def _stage_seq(value: Any, name: str, count: int) -> tuple[np.ndarray, ...]:
    """Expand a matrix or a per-stage list of matrices to ``count`` stages."""
    try:
        arr = np.asarray(value, dtype=float)
    except ValueError:
        # ragged per-stage list (shapes vary across stages); validation reports it
        seq = tuple(_to_matrix(v, name) for v in value)
        if len(seq) != count:
            raise DimensionMismatchError(f"expected {count} stages, got {len(seq)}", name)
        return seq
    if arr.ndim == 3:
        if arr.shape[0] != count:
            raise DimensionMismatchError(f"expected {count} stages, got {arr.shape[0]}", name)
        return tuple(np.array(a) for a in arr)
    mat = _to_matrix(arr, name)
    return tuple(mat.copy() for _ in range(count))


def model_from_dict(cfg: dict[str, Any]) -> ProcessModel:
    """Build and validate a model from the JSON config layout.

    Keys: N, A, B, sensors [{C, V}], W, M0, m0, Q, R, Qfinal, ell, lambda.
    Any matrix may be a scalar (1x1), a nested row-major array, or a list of
    such arrays with one entry per stage. ``Q`` per stage covers k = 0..N
    (N+1 entries) or k = 1..N (N entries, Q_0 = 0); ``Qfinal`` defaults to Q.
    """
    def need(key: str) -> Any:
        if key not in cfg:
            raise ModelError("missing required key", key)
        return cfg[key]

    try:
        N = need("N")
        if isinstance(N, bool) or not isinstance(N, int) or N < 0:
            raise DimensionMismatchError(f"horizon must be an integer >= 0, got {N!r}", "N")
        A = _stage_seq(need("A"), "A", N + 1)
        B = _stage_seq(need("B"), "B", N + 1)
        W = _stage_seq(need("W"), "W", N + 1)
        R = _stage_seq(need("R"), "R", N + 1)
        sensors = need("sensors")
        if not isinstance(sensors, list) or not sensors:
            raise ModelError("must be a non-empty list of {C, V}", "sensors")
        C, V = [], []
        for i, s in enumerate(sensors, start=1):
            if "C" not in s or "V" not in s:
                raise ModelError("each sensor needs C and V", "sensors", sensor=i)
            C.append(_stage_seq(s["C"], f"sensors[{i}].C", N + 1))
            V.append(_stage_seq(s["V"], f"sensors[{i}].V", N + 1))
        n = A[0].shape[0]
        m0 = np.atleast_1d(np.asarray(cfg.get("m0", np.zeros(n)), dtype=float))
        if m0.ndim != 1:
            raise DimensionMismatchError("must be a vector", "m0")
        M0 = _to_matrix(need("M0"), "M0")
        Qraw = need("Q")
        Qarr = np.asarray(Qraw, dtype=float)
        if Qarr.ndim == 3 and Qarr.shape[0] == N:
            Qmid = (np.zeros((n, n)),) + tuple(np.array(a) for a in Qarr)
        else:
            Qmid = _stage_seq(Qraw, "Q", N + 1)
        Qfinal = _to_matrix(cfg["Qfinal"], "Qfinal") if "Qfinal" in cfg else None
        if Qfinal is None:
            if Qarr.ndim == 3:
                raise ModelError("required when Q is given per stage", "Qfinal")
            Qfinal = Qmid[-1].copy()
        ell_raw = cfg.get("ell", 1.0)
        ell = np.asarray(ell_raw, dtype=float)
        ell = np.full(N + 1, float(ell)) if ell.ndim == 0 else ell
        lam = float(need("lambda"))
    except ModelError:
        raise
    except (TypeError, ValueError) as exc:
        raise ModelError(f"malformed value ({exc})", "config") from exc
    model = ProcessModel(
        N=N, A=A, B=B, C=tuple(C), V=tuple(V), W=W, m0=m0, M0=M0,
        Q=tuple(Qmid) + (Qfinal,), R=R, ell=ell, lam=lam, source=dict(cfg),
    )
    return validate_model(model)


def load_model(path: str | Path) -> ProcessModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def model_to_dict(model: ProcessModel) -> dict[str, Any]:
    """Fully expanded (per-stage) config that round-trips through model_from_dict."""
    lst = lambda seq: [a.tolist() for a in seq]  # noqa: E731
    return {
        "N": model.N,
        "A": lst(model.A),
        "B": lst(model.B),
        "sensors": [{"C": lst(c), "V": lst(v)} for c, v in zip(model.C, model.V)],
        "W": lst(model.W),
        "m0": model.m0.tolist(),
        "M0": model.M0.tolist(),
        "Q": lst(model.Q[:-1]),
        "Qfinal": model.Q[-1].tolist(),
        "R": lst(model.R),
        "ell": model.ell.tolist(),
        "lambda": model.lam,
    }


def scalar_model(N: int = 1, *, A=1.0, B=1.0, C=1.0, W=1.0, V=1.0, Q=1.0, R=1.0, Qfinal=None,
                 M0=1.0, m0=0.0, ell=1.0, lam=0.5, sensors: int = 1) -> ProcessModel:
    """Time-invariant scalar instance; the defaults are the standard scalar instance."""
    cfg = {
        "N": N, "A": A, "B": B, "W": W, "Q": Q, "R": R, "M0": M0, "m0": [m0],
        "Qfinal": Q if Qfinal is None else Qfinal, "ell": ell, "lambda": lam,
        "sensors": [{"C": C, "V": V} for _ in range(sensors)],
    }
    return model_from_dict(cfg)
