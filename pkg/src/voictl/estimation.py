"""Encoder Kalman filter, decoder estimator, and the estimation-mismatch recursion.

All state-carrying functions accept leading batch axes: an encoder estimate of
shape ``(E, n)`` advances ``E`` independent episodes at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import spd_inv, sym
from .model import AggregateSensor, ProcessModel, aggregate_sensors


@dataclass(frozen=True)
class CovarianceSchedule:
    """Offline encoder filter quantities for stages k = 0..N.

    ``Y[k]`` error covariance after fusing y_k; ``Theta[k] = A_k Y_k A_k' + W_k``;
    ``Ninn[k]`` covariance of the aggregate innovation nu_k (the stage-0 entry
    uses M_0 as prior); ``K[k] = Y_k C_k' V_k^-1``; ``prior_gain[k]`` maps the
    predicted mean into x_check_k (Y_k Theta_{k-1}^-1, or Y_0 M_0^-1);
    ``sensor_gain[k][i] = Y_k C^i_k' (V^i_k)^-1``.
    """

    model: ProcessModel
    agg: AggregateSensor
    Y: tuple[np.ndarray, ...]
    Theta: tuple[np.ndarray, ...]
    Ninn: tuple[np.ndarray, ...]
    K: tuple[np.ndarray, ...]
    prior_gain: tuple[np.ndarray, ...]
    sensor_gain: tuple[tuple[np.ndarray, ...], ...]

    @property
    def mismatch_cov(self) -> tuple[np.ndarray, ...]:
        """Covariance K_k N_k K_k' of the mismatch injected at stage k."""
        return tuple(sym(K @ Nk @ K.T) for K, Nk in zip(self.K, self.Ninn))


def covariance_schedule(model: ProcessModel) -> CovarianceSchedule:
    """Information-form covariance recursion, fused over all sensors."""
    agg = aggregate_sensors(model)
    Y, Theta, Ninn, K, prior_gain, sensor_gain = [], [], [], [], [], []
    prior = model.M0
    for k in range(model.N + 1):
        prior_inv = spd_inv(prior, "M0" if k == 0 else "Theta", k - 1 if k else None)
        info = prior_inv.copy()
        Vinv = []
        for i in range(model.sensor_count):
            Ci = model.C[i][k]
            Vi_inv = spd_inv(model.V[i][k], "V", k)
            Vinv.append(Vi_inv)
            info += Ci.T @ Vi_inv @ Ci
        Yk = spd_inv(info, "information matrix", k)
        Y.append(Yk)
        prior_gain.append(Yk @ prior_inv)
        gains = tuple(Yk @ model.C[i][k].T @ Vinv[i] for i in range(model.sensor_count))
        sensor_gain.append(gains)
        K.append(np.hstack(gains))
        Ninn.append(sym(agg.C[k] @ prior @ agg.C[k].T + agg.V[k]))
        Th = sym(model.A[k] @ Yk @ model.A[k].T + model.W[k])
        Theta.append(Th)
        prior = Th
    return CovarianceSchedule(
        model=model, agg=agg, Y=tuple(Y), Theta=tuple(Theta), Ninn=tuple(Ninn), K=tuple(K),
        prior_gain=tuple(prior_gain), sensor_gain=tuple(sensor_gain),
    )


def _per_sensor(schedule: CovarianceSchedule, y) -> list[np.ndarray]:
    if isinstance(y, (list, tuple)):
        return [np.asarray(v, dtype=float) for v in y]
    return schedule.agg.split(np.asarray(y, dtype=float))


def _stacked(schedule: CovarianceSchedule, y) -> np.ndarray:
    if isinstance(y, (list, tuple)):
        return schedule.agg.stack(y)
    return np.asarray(y, dtype=float)


@dataclass(frozen=True)
class EncoderState:
    k: int
    xcheck: np.ndarray
    schedule: CovarianceSchedule


@dataclass(frozen=True)
class DecoderState:
    k: int
    xhat: np.ndarray


def encoder_init(schedule: CovarianceSchedule, y0) -> EncoderState:
    """x_check_0 = Y_0 M_0^-1 m_0 + sum_i Y_0 C^i_0' (V^i_0)^-1 y^i_0."""
    model = schedule.model
    ys = _per_sensor(schedule, y0)
    x = model.m0 @ schedule.prior_gain[0].T
    for gain, yi in zip(schedule.sensor_gain[0], ys):
        x = x + yi @ gain.T
    return EncoderState(0, x, schedule)


def _predict(schedule: CovarianceSchedule, k: int, xcheck, u) -> np.ndarray:
    model = schedule.model
    return np.asarray(xcheck) @ model.A[k].T + np.asarray(u, dtype=float) @ model.B[k].T


def encoder_update(state: EncoderState, y_next, u) -> EncoderState:
    """Inverse-covariance form of the measurement update for stage k+1."""
    sch = state.schedule
    k1 = state.k + 1
    x = _predict(sch, state.k, state.xcheck, u) @ sch.prior_gain[k1].T
    for gain, yi in zip(sch.sensor_gain[k1], _per_sensor(sch, y_next)):
        x = x + yi @ gain.T
    return EncoderState(k1, x, sch)


def innovation(state: EncoderState, y_next, u) -> np.ndarray:
    """nu_{k+1} = y_{k+1} - C_{k+1}(A_k x_check_k + B_k u_k)."""
    sch = state.schedule
    pred = _predict(sch, state.k, state.xcheck, u)
    return _stacked(sch, y_next) - pred @ sch.agg.C[state.k + 1].T


def initial_innovation(schedule: CovarianceSchedule, y0) -> np.ndarray:
    """nu_0 = y_0 - C_0 m_0."""
    return _stacked(schedule, y0) - schedule.model.m0 @ schedule.agg.C[0].T


def encoder_update_innovation(state: EncoderState, y_next, u) -> tuple[EncoderState, np.ndarray]:
    """Aggregate-innovation form: x_check_{k+1} = A x_check + B u + K_{k+1} nu_{k+1}."""
    sch = state.schedule
    nu = innovation(state, y_next, u)
    x = _predict(sch, state.k, state.xcheck, u) + nu @ sch.K[state.k + 1].T
    return EncoderState(state.k + 1, x, sch), nu


class PayloadMismatchError(ValueError):
    pass


def decoder_step(model: ProcessModel, state: DecoderState, u, delta, payload=None) -> DecoderState:
    """Decoder mean propagation with the no-transmission correction set to zero.

    ``delta`` may be a scalar or a boolean array over the batch axis; payload
    rows are used only where delta is set.
    """
    k = state.k
    delta_arr = np.asarray(delta)
    if payload is None:
        if np.any(delta_arr):
            raise PayloadMismatchError(f"stage {k}: delta = 1 requires the encoder estimate as payload")
        base = state.xhat
    else:
        if delta_arr.ndim == 0 and not bool(delta_arr):
            raise PayloadMismatchError(f"stage {k}: payload given although delta = 0")
        base = np.where(delta_arr[..., None].astype(bool), payload, state.xhat) if delta_arr.ndim else payload
    xhat = np.asarray(base) @ model.A[k].T + np.asarray(u, dtype=float) @ model.B[k].T
    return DecoderState(k + 1, xhat)


def mismatch_step(schedule: CovarianceSchedule, e, delta, nu_next, k: int) -> np.ndarray:
    """e_{k+1} = (1 - delta_k) A_k e_k + K_{k+1} nu_{k+1}."""
    keep = 1.0 - np.asarray(delta, dtype=float)
    e = np.asarray(e, dtype=float)
    carried = (e @ schedule.model.A[k].T) * (keep[..., None] if keep.ndim else keep)
    return carried + np.asarray(nu_next) @ schedule.K[k + 1].T


def initial_mismatch(schedule: CovarianceSchedule, nu0) -> np.ndarray:
    return np.asarray(nu0) @ schedule.K[0].T

