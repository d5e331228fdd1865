"""Encoder value function over the estimation mismatch, and the value of information.

The cost-to-go of the trigger satisfies, for a scalar mismatch e at stage k,

    V_k(e) = min{ theta_k + T_k,  a_k e^2 + E[V_{k+1}(A_k e + s_{k+1} Z)] } + c_k

with a_k = A_k' Gamma_{k+1} A_k, T_k = E[V_{k+1}(s_{k+1} Z)] (the mismatch
resets after a transmission), c_k = tr(a_k Y_k + Gamma_{k+1} W_k),
s_{k+1}^2 = K_{k+1} N_{k+1} K_{k+1}' and V_{N+1} = 0. The value of
information is the gap between the two branches:
VoI_k(e) = a_k e^2 - theta_k + rho_k(e).

Two rules are available for the Gaussian expectation:

``"gaussian-linear"`` (default)
    V_{k+1} is represented by its piecewise-linear interpolant and integrated
    exactly against the Gaussian. Evenness and monotonicity in |e| carry over
    from one stage to the next.
``"hermite"``
    Gauss-Hermite quadrature with ``quad_nodes`` nodes. V_{k+1} at off-grid
    points is obtained by one Bellman step from the stage k+2 table, so for
    horizons up to 2 the result equals nested quadrature exactly. A kinked
    integrand sampled at few nodes can make VoI locally non-monotone.

Only scalar states have an exact table; :func:`voi` with ``table=None`` gives
the myopic value (rho = 0) in any dimension.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import ndtr

from .estimation import CovarianceSchedule, covariance_schedule
from .lqr import RiccatiSolution
from .model import ProcessModel

RULES = ("gaussian-linear", "hermite")
_TAIL_SDS = 10.0
_MAX_EXTENSION = 4096
_CHUNK = 256


class ExactModeError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    half_width: float = 8.0
    points: int = 1025
    quad_nodes: int = 15
    rule: str = "gaussian-linear"

    def __post_init__(self):
        if self.points < 3 or self.points % 2 == 0:
            raise ValueError(f"grid points must be odd and >= 3, got {self.points}")
        if not self.half_width > 0:
            raise ValueError(f"grid half-width must be positive, got {self.half_width}")
        if self.quad_nodes < 3:
            raise ValueError(f"quadrature nodes must be >= 3, got {self.quad_nodes}")
        if self.rule not in RULES:
            raise ValueError(f"unknown expectation rule {self.rule!r}; expected one of {RULES}")


def hermite_rule(q: int) -> tuple[np.ndarray, np.ndarray]:
    """Standard-normal Gauss-Hermite nodes and weights, mirrored to be exactly symmetric."""
    z, w = hermegauss(q)
    z = 0.5 * (z - z[::-1])
    w = 0.5 * (w + w[::-1])
    return z, w / w.sum()


def symmetric_grid(half_width: float, points: int) -> np.ndarray:
    half = np.linspace(0.0, half_width, (points + 1) // 2)
    return np.concatenate([-half[:0:-1], half])


def gaussian_expect_piecewise_linear(xs: np.ndarray, fs: np.ndarray, means: np.ndarray, sd: float) -> np.ndarray:
    """E[f(mu + sd Z)] for the linear interpolant f of (xs, fs), constant beyond the ends."""
    means = np.asarray(means, dtype=float)
    flat = means.ravel()
    if sd <= 0:
        return np.interp(flat, xs, fs).reshape(means.shape)
    slope = np.diff(fs) / np.diff(xs)
    out = np.empty_like(flat)
    for start in range(0, flat.size, _CHUNK):
        mu = flat[start:start + _CHUNK, None]
        t = (xs[None, :] - mu) / sd
        cdf = ndtr(t)
        pdf = np.exp(-0.5 * t * t) / np.sqrt(2.0 * np.pi)
        d_cdf = cdf[:, 1:] - cdf[:, :-1]
        d_pdf = pdf[:, 1:] - pdf[:, :-1]
        inner = (fs[:-1] + slope * (mu - xs[:-1])) * d_cdf - slope * sd * d_pdf
        out[start:start + _CHUNK] = fs[0] * cdf[:, 0] + inner.sum(axis=1) + fs[-1] * (1.0 - cdf[:, -1])
    return out.reshape(means.shape)


@dataclass
class ValueTable:
    """Gridded encoder value functions for stages 0..N (stage N+1 is identically 0).

    Per stage: ``nodes`` (symmetric, 0 is the centre node), ``values`` = V_k,
    ``stay`` = non-transmit branch without c_k, ``go`` = transmit branch
    without c_k, ``const`` = c_k, ``rho`` = residual at the nodes. Built by
    :func:`backward_induction`; treat as read-only afterwards.
    """

    N: int
    grid: GridSpec
    A: np.ndarray
    curvature: np.ndarray
    theta: np.ndarray
    const: np.ndarray
    inject_sd: np.ndarray
    scale: np.ndarray
    nodes: list = field(default_factory=list)
    values: list = field(default_factory=list)
    stay: list = field(default_factory=list)
    go: np.ndarray = None
    rho: list = field(default_factory=list)

    def __post_init__(self):
        self._quad = hermite_rule(self.grid.quad_nodes)
        self._lattice: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    # -- evaluation of a stored stage -----------------------------------
    def interp(self, j: int, z) -> np.ndarray:
        """V_j by linear interpolation inside the grid; beyond it the non-transmit
        branch is continued quadratically and capped by the transmit branch."""
        z = np.asarray(z, dtype=float)
        if j > self.N:
            return np.zeros_like(z)
        xs, vs = self.nodes[j], self.values[j]
        out = np.interp(z, xs, vs)
        edge = xs[-1]
        beyond = np.abs(z) > edge
        if np.any(beyond):
            zb = z[beyond]
            stay_edge = np.where(zb > 0, self.stay[j][-1], self.stay[j][0])
            ext = stay_edge + self.curvature[j] * (zb * zb - edge * edge)
            out[beyond] = np.minimum(ext, self.go[j]) + self.const[j]
        return out

    def _lattice_for(self, j: int, reach: float) -> tuple[np.ndarray, np.ndarray]:
        xs = self.nodes[j]
        edge = xs[-1]
        cached = self._lattice.get(j)
        if cached is not None and cached[0][-1] >= reach:
            return cached
        if reach <= edge:
            lat = (xs, self.values[j])
        else:
            h = xs[1] - xs[0]
            count = int(min(np.ceil((reach - edge) / h), _MAX_EXTENSION))
            ext = np.linspace(edge, reach, count + 1)[1:]
            right = self.interp(j, ext)
            left = self.interp(j, -ext[::-1])
            lat = (np.concatenate([-ext[::-1], xs, ext]), np.concatenate([left, self.values[j], right]))
        self._lattice[j] = lat
        return lat

    def _expect_interp(self, j: int, points) -> np.ndarray:
        """E[V_{j+1}(p + s_{j+1} Z)] using the stored stage-(j+1) table."""
        p = np.asarray(points, dtype=float)
        if j + 1 > self.N:
            return np.zeros_like(p)
        sd = self.inject_sd[j + 1]
        if self.grid.rule == "hermite":
            z, w = self._quad
            vals = self.interp(j + 1, p[..., None] + sd * z)
            return vals @ w
        reach = float(np.max(np.abs(p), initial=0.0)) + _TAIL_SDS * sd
        xs, fs = self._lattice_for(j + 1, reach)
        return gaussian_expect_piecewise_linear(xs, fs, p, sd)

    def _bellman(self, j: int, z) -> np.ndarray:
        """V_j(z) by one Bellman step from the stage-(j+1) table."""
        z = np.asarray(z, dtype=float)
        if j > self.N:
            return np.zeros_like(z)
        stay = self.curvature[j] * z * z + self._expect_interp(j, self.A[j] * z)
        return np.minimum(stay, self.go[j]) + self.const[j]

    def expect_next(self, k: int, points) -> np.ndarray:
        """E[V_{k+1}(p + s_{k+1} Z)] under the table's expectation rule."""
        p = np.asarray(points, dtype=float)
        if k + 1 > self.N:
            return np.zeros_like(p)
        if self.grid.rule == "hermite":
            z, w = self._quad
            return self._bellman(k + 1, p[..., None] + self.inject_sd[k + 1] * z) @ w
        return self._expect_interp(k, p)

    def value(self, k: int, e) -> np.ndarray:
        """V_k at arbitrary mismatch values (stage constants included)."""
        if self.grid.rule == "hermite":
            e = np.asarray(e, dtype=float)
            if k > self.N:
                return np.zeros_like(e)
            stay = self.curvature[k] * e * e + self.expect_next(k, self.A[k] * e)
            return np.minimum(stay, self.go[k]) + self.const[k]
        return self.interp(k, e)

    def rho_at(self, k: int, e) -> np.ndarray:
        """Residual rho_k, exact at grid nodes, interpolated between them and
        held constant beyond the grid edge."""
        e = np.asarray(e, dtype=float)
        if k >= self.N:
            return np.zeros_like(e)
        return np.interp(e, self.nodes[k], self.rho[k])


@dataclass(frozen=True)
class VoIResult:
    k: int
    value: np.ndarray
    quadratic: np.ndarray
    price: float
    rho: np.ndarray

    @property
    def transmit(self) -> np.ndarray:
        return self.value >= 0


def _stage_scalars(model: ProcessModel, sol: RiccatiSolution, sched: CovarianceSchedule):
    N = model.N
    A = np.array([model.A[k][0, 0] for k in range(N + 1)])
    gam_next = np.array([sol.Gamma[k + 1][0, 0] for k in range(N + 1)])
    curvature = A * A * gam_next
    const = np.array([curvature[k] * sched.Y[k][0, 0] + gam_next[k] * model.W[k][0, 0] for k in range(N + 1)])
    inject_sd = np.sqrt(np.maximum([c[0, 0] for c in sched.mismatch_cov], 0.0))
    scale = np.where(inject_sd > 0, inject_sd, np.sqrt([y[0, 0] for y in sched.Y]))
    return A, curvature, const, inject_sd, scale


def backward_induction(model: ProcessModel, sol: RiccatiSolution, grid: GridSpec | None = None,
                       schedule: CovarianceSchedule | None = None) -> ValueTable:
    """Grid dynamic program for the scalar encoder value function."""
    if model.n != 1:
        raise ExactModeError(f"exact value tables need a scalar state, got n = {model.n}")
    grid = grid or GridSpec()
    sched = schedule or covariance_schedule(model)
    N = model.N
    A, curvature, const, inject_sd, scale = _stage_scalars(model, sol, sched)
    theta = np.asarray(sol.theta, dtype=float)
    table = ValueTable(N=N, grid=grid, A=A, curvature=curvature, theta=theta, const=const,
                       inject_sd=inject_sd, scale=scale)
    table.nodes = [None] * (N + 1)
    table.values = [None] * (N + 1)
    table.stay = [None] * (N + 1)
    table.rho = [None] * (N + 1)
    table.go = np.zeros(N + 1)
    center = grid.points // 2
    for k in range(N, -1, -1):
        e = symmetric_grid(grid.half_width * scale[k], grid.points)
        ev = table.expect_next(k, A[k] * e)
        stay = curvature[k] * e * e + ev
        go = theta[k] + ev[center]
        table.nodes[k] = e
        table.stay[k] = stay
        table.go[k] = go
        table.rho[k] = ev - ev[center]
        table.values[k] = np.minimum(stay, go) + const[k]
    return table


def voi(table: ValueTable | None, sol: RiccatiSolution, e, k: int, A: np.ndarray | None = None) -> VoIResult:
    """Value of information at stage k for mismatch ``e``.

    ``e`` has trailing axis n (batch axes allowed). With ``table=None`` the
    residual is dropped (myopic value); then ``A`` (= A_k) is required.
    """
    e = np.asarray(e, dtype=float)
    theta = float(sol.theta[k])
    if table is None:
        if A is None:
            raise ValueError("myopic VoI needs the state matrix A_k")
        if e.shape[-1] != A.shape[0]:
            raise ValueError(f"mismatch has dimension {e.shape[-1]}, model has {A.shape[0]}")
        Ae = e @ A.T
        quad = np.einsum("...i,ij,...j->...", Ae, sol.Gamma[k + 1], Ae)
        rho = np.zeros_like(quad)
    else:
        if e.shape[-1] != 1:
            raise ValueError(f"exact tables are scalar; mismatch has dimension {e.shape[-1]}")
        s = e[..., 0]
        quad = table.curvature[k] * s * s
        rho = table.rho_at(k, s)
    return VoIResult(k=k, value=quad - theta + rho, quadratic=quad, price=theta, rho=rho)


def extract_threshold(table: ValueTable, sol: RiccatiSolution, k: int) -> float:
    """Smallest r >= 0 with VoI_k(r) >= 0 (linear root inside the bracketing grid cell)."""
    nodes = table.nodes[k]
    c = nodes.size // 2
    r = nodes[c:]
    v = voi(table, sol, r[:, None], k).value
    hit = np.flatnonzero(v >= 0)
    if hit.size == 0:
        return float("inf")
    i = int(hit[0])
    if i == 0:
        return 0.0
    v0, v1 = v[i - 1], v[i]
    return float(r[i - 1] + (0.0 - v0) * (r[i] - r[i - 1]) / (v1 - v0))


def myopic_threshold(sol: RiccatiSolution, A: np.ndarray, k: int) -> float:
    """Scalar myopic threshold sqrt(theta_k / a_k)."""
    a = float(A[0, 0] ** 2 * sol.Gamma[k + 1][0, 0])
    th = float(sol.theta[k])
    if th <= 0:
        return 0.0
    return float("inf") if a <= 0 else float(np.sqrt(th / a))


def stage_values(table: ValueTable, sol: RiccatiSolution, k: int) -> dict[str, np.ndarray]:
    """Node-wise columns for export: e, V, rho, voi, delta."""
    e = table.nodes[k]
    res = voi(table, sol, e[:, None], k)
    return {"e": e, "V": table.values[k], "rho": res.rho, "voi": res.value, "delta": res.transmit.astype(int)}


def build_table_or_warn(model: ProcessModel, sol: RiccatiSolution, grid: GridSpec | None = None,
                        schedule: CovarianceSchedule | None = None) -> ValueTable | None:
    """Exact table for scalar models; ``None`` (myopic fallback) with a warning otherwise."""
    if model.n == 1:
        return backward_induction(model, sol, grid, schedule)
    warnings.warn(f"state dimension {model.n} > 1: using the myopic value of information (rho = 0)",
                  stacklevel=2)
    return None
