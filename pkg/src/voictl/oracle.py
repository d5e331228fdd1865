"""Reference computations that share no code with the production path.

* :func:`batch_mmse` conditions the joint Gaussian of (x_0, w_0, ..., w_{k-1}, y_0..y_k)
  directly, without any recursion.
* :func:`enumerate_policies` searches every deterministic trigger labelling of a
  Gauss-Hermite scenario tree for a tiny scalar instance, using plain float
  recursions for the Riccati and filter quantities.
* :func:`mc_value_check` rolls the tabulated trigger forward by Monte Carlo.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.linalg import block_diag

from .model import ProcessModel

MAX_TREE_BUDGET = 27
MAX_HORIZON = 2


class BudgetExceededError(ValueError):
    pass


# ---------------------------------------------------------------- batch MMSE


def batch_mmse(model: ProcessModel, ys: Sequence, us: Sequence) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Posterior means and covariances of x_k given y_0..y_k and u_0..u_{k-1}, for every k.

    ``ys[k]`` is the stacked output of all sensors at stage k; ``us[k]`` the
    input applied at stage k. Works on the stacked Gaussian vector
    z = (x_0, w_0, ..., w_{K-1}) with x_k = F_k z + g_k.
    """
    n = model.n
    K = len(ys)
    dim = n * K
    mean_z = np.concatenate([model.m0, np.zeros(n * (K - 1))])
    cov_z = block_diag(model.M0, *[model.W[j] for j in range(K - 1)])
    F = np.zeros((n, dim))
    F[:, :n] = np.eye(n)
    g = np.zeros(n)
    Fs, gs = [], []
    for k in range(K):
        Fs.append(F.copy())
        gs.append(g.copy())
        if k < K - 1:
            F = model.A[k] @ F
            F[:, n * (k + 1):n * (k + 2)] += np.eye(n)
            g = model.A[k] @ g + model.B[k] @ np.asarray(us[k], dtype=float)

    means, covs = [], []
    H_rows, off, Vblocks, obs = [], [], [], []
    for k in range(K):
        Ck = np.vstack([model.C[i][k] for i in range(model.sensor_count)])
        Vk = block_diag(*[model.V[i][k] for i in range(model.sensor_count)])
        H_rows.append(Ck @ Fs[k])
        off.append(Ck @ gs[k])
        Vblocks.append(Vk)
        obs.append(np.asarray(ys[k], dtype=float).ravel())
        H = np.vstack(H_rows)
        Sy = H @ cov_z @ H.T + block_diag(*Vblocks)
        resid = np.concatenate(obs) - (H @ mean_z + np.concatenate(off))
        cross = Fs[k] @ cov_z @ H.T
        gain = np.linalg.solve(Sy, cross.T).T
        means.append(Fs[k] @ mean_z + gs[k] + gain @ resid)
        P = Fs[k] @ cov_z @ Fs[k].T - gain @ cross.T
        covs.append(0.5 * (P + P.T))
    return means, covs


# ---------------------------------------------------------- tiny instances


@dataclass(frozen=True)
class TinyInstance:
    """Scalar process with one sensor and time-invariant weights."""

    N: int
    a: float = 1.0
    b: float = 1.0
    c: float = 1.0
    w: float = 1.0
    v: float = 1.0
    q: float = 1.0
    r: float = 1.0
    qf: float = 1.0
    m0_var: float = 1.0
    ell: float = 1.0
    lam: float = 0.5
    theta: float | None = None  # overrides the price derived from ell and lam

    @classmethod
    def from_model(cls, model: ProcessModel) -> "TinyInstance":
        if model.n != 1 or model.m != 1 or model.p != 1:
            raise ValueError("tiny instances are scalar with a single scalar sensor")
        f = lambda M: float(np.asarray(M).ravel()[0])  # noqa: E731
        return cls(N=model.N, a=f(model.A[0]), b=f(model.B[0]), c=f(model.C[0][0]), w=f(model.W[0]),
                   v=f(model.V[0][0]), q=f(model.Q[1]), r=f(model.R[0]), qf=f(model.Q[-1]),
                   m0_var=f(model.M0), ell=float(model.ell[0]), lam=model.lam)

    def scalars(self) -> dict[str, list[float]]:
        """Plain recursions: gamma_k (k = 0..N+1), filter variance y_k, injection variance s2_k."""
        N = self.N
        s = self.qf
        gamma = [0.0] * (N + 2)
        for k in range(N, -1, -1):
            lam_k = self.b * s * self.b + self.r
            gain = self.b * s * self.a / lam_k
            gamma[k] = gain * lam_k * gain
            s = self.q + self.a * s * self.a - gamma[k]
        prior = self.m0_var
        y, s2 = [], []
        for k in range(N + 1):
            innov = self.c * prior * self.c + self.v
            yk = 1.0 / (1.0 / prior + self.c * self.c / self.v)
            kk = yk * self.c / self.v
            y.append(yk)
            s2.append(kk * innov * kk)
            prior = self.a * yk * self.a + self.w
        theta = self.ell * (1.0 - self.lam) / self.lam if self.theta is None else float(self.theta)
        return {"gamma": gamma, "y": y, "s2": s2, "theta": [theta] * (N + 1)}


@dataclass(frozen=True)
class Enumeration:
    roots: np.ndarray
    values: np.ndarray
    delta0: np.ndarray
    stage1_nodes: np.ndarray  # (roots, Q) mismatch at stage 1 under the optimal first decision
    stage1_labels: np.ndarray  # (roots, Q) optimal stage-1 decisions on those nodes
    labelings_checked: int


def _check_budget(N: int, Q: int) -> None:
    if N > MAX_HORIZON or Q * (N + 1) > MAX_TREE_BUDGET:
        raise BudgetExceededError(
            f"enumeration needs N <= {MAX_HORIZON} and Q*(N+1) <= {MAX_TREE_BUDGET}; got N = {N}, Q = {Q}")


def enumerate_policies(inst: TinyInstance, roots, quad_nodes: int = 9) -> Enumeration:
    """Optimal expected trigger cost from each root mismatch, by brute force over labellings.

    Scenario tree: from mismatch e at stage k the next mismatch is
    (1 - delta) a e + s_{k+1} z_j over Gauss-Hermite nodes z_j. The cost of a
    stage is theta delta + gamma_{k+1} (a^2 y_k + w + (1 - delta) a^2 e^2).
    Every labelling of each sibling group (2^Q of them) is scored; since the
    expected cost is additive over disjoint subtrees, the best labelling of a
    group combined with the best labellings below it is the best policy.
    """
    Q = int(quad_nodes)
    _check_budget(inst.N, Q)
    z, wts = hermegauss(Q)
    z = 0.5 * (z - z[::-1])
    wts = 0.5 * (wts + wts[::-1])
    wts = wts / wts.sum()
    sc = inst.scalars()
    gamma, y, s2, theta = sc["gamma"], sc["y"], sc["s2"], sc["theta"]
    a, N = inst.a, inst.N
    labels = np.array(list(itertools.product((0, 1), repeat=Q)), dtype=float)
    checked = 0

    def stage_cost(k, e, d):
        return theta[k] * d + gamma[k + 1] * (a * a * y[k] + inst.w + (1.0 - d) * a * a * e * e)

    def best_group(k, es):
        """Best labelling of sibling nodes ``es`` at stage k; returns (expected value, labels)."""
        nonlocal checked
        per = np.empty((2, es.size))
        for d in (0, 1):
            per[d] = [stage_cost(k, e, d) + future(k, e, d) for e in es]
        scores = (labels * per[1] + (1.0 - labels) * per[0]) @ wts
        checked += labels.shape[0]
        i = int(np.argmin(scores))
        # ties go to transmitting, matching VoI >= 0
        best = labels[i].copy()
        best[per[1] <= per[0]] = 1.0
        return float(scores[i]), best

    def future(k, e, d):
        if k >= N:
            return 0.0
        children = (1.0 - d) * a * e + np.sqrt(s2[k + 1]) * z
        return best_group(k + 1, children)[0]

    roots = np.atleast_1d(np.asarray(roots, dtype=float))
    values, d0, nodes1, lab1 = [], [], [], []
    for e0 in roots:
        branch = [stage_cost(0, e0, d) + future(0, e0, d) for d in (0, 1)]
        d = 1 if branch[1] <= branch[0] else 0
        values.append(branch[d])
        d0.append(d)
        if N >= 1:
            ch = (1.0 - d) * a * e0 + np.sqrt(s2[1]) * z
            nodes1.append(ch)
            lab1.append(best_group(1, ch)[1])
    empty = np.zeros((roots.size, 0))
    return Enumeration(roots=roots, values=np.array(values), delta0=np.array(d0, dtype=int),
                       stage1_nodes=np.array(nodes1) if nodes1 else empty,
                       stage1_labels=np.array(lab1, dtype=int) if lab1 else empty.astype(int),
                       labelings_checked=checked)


def is_threshold_labeling(nodes: np.ndarray, labels: np.ndarray, atol: float = 1e-12) -> bool:
    """True when the transmit set is {|e| >= r} for some r, restricted to ``nodes``."""
    mag = np.abs(nodes)
    on = labels.astype(bool)
    if not on.any() or on.all():
        return True
    return bool(mag[on].min() >= mag[~on].max() - atol)


# --------------------------------------------------------------- rollouts


@dataclass(frozen=True)
class RolloutCheck:
    mean: float
    se: float
    table_value: float

    @property
    def agrees(self) -> bool:
        return abs(self.mean - self.table_value) <= 3.0 * self.se + 1e-12


def mc_value_check(table, model: ProcessModel, sol, e: float, k: int = 0, episodes: int = 100_000,
                   seed: int = 0) -> RolloutCheck:
    """Roll the table's greedy trigger forward from mismatch ``e`` at stage ``k`` and compare the
    average realised trigger cost with the tabulated value V_k(e)."""
    from .estimation import covariance_schedule
    from .voidp import voi

    N = model.N
    if k > N:
        return RolloutCheck(0.0, 0.0, 0.0)
    sched = covariance_schedule(model)
    rng = np.random.default_rng(seed)
    cur = np.full(episodes, float(e))
    total = np.zeros(episodes)
    for j in range(k, N + 1):
        a = float(model.A[j][0, 0])
        g = float(sol.Gamma[j + 1][0, 0])
        d = voi(table, sol, cur[:, None], j).transmit.astype(float)
        total += sol.theta[j] * d + g * (a * a * sched.Y[j][0, 0] + model.W[j][0, 0] + (1.0 - d) * a * a * cur * cur)
        if j < N:
            sd = np.sqrt(sched.mismatch_cov[j + 1][0, 0])
            cur = (1.0 - d) * a * cur + sd * rng.standard_normal(episodes)
    se = float(total.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    return RolloutCheck(float(total.mean()), se, float(table.value(k, np.array([e]))[0]))


# ------------------------------------------------------------ verification


def _status(ok: bool) -> str:
    return "pass" if ok else "fail"


def _time_invariant(model: ProcessModel) -> bool:
    same = lambda seq: all(np.array_equal(seq[0], s) for s in seq)  # noqa: E731
    return (same(model.A) and same(model.B) and same(model.W) and same(model.R) and same(model.C[0])
            and same(model.V[0]) and same(model.Q[1:-1] or model.Q[-1:]) and np.all(model.ell == model.ell[0]))


def check_filter(model: ProcessModel, seed: int = 0, rtol: float = 1e-8) -> dict:
    """Encoder recursion against the batch conditional mean on one closed-loop trajectory."""
    from .estimation import covariance_schedule
    from .lqr import riccati_backward
    from .policies import CE, TriggerPolicy
    from .sim import run_batch

    sol = riccati_backward(model)
    sched = covariance_schedule(model)
    res = run_batch(model, TriggerPolicy("always"), CE, episodes=1, seed=seed, sol=sol, schedule=sched,
                    keep_traces=True)
    tr = res.trace(0)
    means, covs = batch_mmse(model, list(tr.y), list(tr.u))
    worst = 0.0
    for k in range(model.N + 1):
        scale_m = max(1.0, float(np.max(np.abs(means[k]))))
        scale_c = max(1.0, float(np.max(np.abs(covs[k]))))
        worst = max(worst, float(np.max(np.abs(tr.xcheck[k] - means[k]))) / scale_m,
                    float(np.max(np.abs(sched.Y[k] - covs[k]))) / scale_c)
    return {"name": "filter_vs_batch_mmse", "status": _status(worst <= rtol), "max_rel_error": worst,
            "tolerance": rtol}


def check_structure(table, sol, tol: float = 1e-9) -> list[dict]:
    from .voidp import voi

    even_err, monotone, interval = 0.0, True, True
    for k in range(table.N + 1):
        e = table.nodes[k]
        res = voi(table, sol, e[:, None], k)
        even_err = max(even_err, float(np.max(np.abs(res.value - res.value[::-1]))),
                       float(np.max(np.abs(res.rho - res.rho[::-1]))))
        half = res.value[e.size // 2:]
        monotone &= bool(np.all(np.diff(half) >= -tol))
        d = res.transmit
        interval &= bool(np.array_equal(d, d[::-1])) and is_threshold_labeling(e, d.astype(int))
    return [
        {"name": "voi_even", "status": _status(even_err <= tol), "max_asymmetry": even_err, "tolerance": tol},
        {"name": "voi_monotone", "status": _status(monotone)},
        {"name": "symmetric_interval_region", "status": _status(interval)},
    ]


def check_terminal(table, sol) -> dict:
    from .voidp import voi

    N = table.N
    if sol.theta[N] <= 0:
        return {"name": "terminal_no_transmit", "status": "skip", "reason": "theta_N = 0"}
    sends = voi(table, sol, table.nodes[N][:, None], N).transmit
    return {"name": "terminal_no_transmit", "status": _status(not sends.any())}


def check_enumeration(model: ProcessModel, sol, quad_nodes: int = 9, roots: int = 41, tol: float = 1e-6) -> dict:
    from .voidp import GridSpec, backward_induction

    name = "dp_vs_enumeration"
    if model.n != 1 or model.p != 1 or model.m != 1 or not _time_invariant(model):
        return {"name": name, "status": "skip", "reason": "needs a time-invariant scalar single-sensor model"}
    if model.N > MAX_HORIZON or quad_nodes * (model.N + 1) > MAX_TREE_BUDGET:
        return {"name": name, "status": "skip", "reason": "horizon beyond the enumeration budget"}
    table = backward_induction(model, sol, GridSpec(rule="hermite", quad_nodes=quad_nodes))
    pts = np.linspace(-3.0, 3.0, roots) * table.scale[0]
    enum = enumerate_policies(TinyInstance.from_model(model), pts, quad_nodes)
    err = float(np.max(np.abs(table.value(0, pts) - enum.values)))
    shaped = True
    for nodes, lab in zip(enum.stage1_nodes, enum.stage1_labels):
        shaped &= bool(np.array_equal(lab, lab[::-1])) if np.allclose(nodes, -nodes[::-1]) else True
        shaped &= is_threshold_labeling(nodes, lab)
    ok = err <= tol and shaped and is_threshold_labeling(pts, enum.delta0)
    return {"name": name, "status": _status(ok), "max_abs_error": err, "tolerance": tol,
            "threshold_labelings": shaped, "labelings_checked": enum.labelings_checked}


def run_checks(model: ProcessModel, cfg: dict) -> dict:
    """Oracle verification suite used by the ``verify`` subcommand."""
    from .estimation import covariance_schedule
    from .lqr import riccati_backward
    from .policies import CE, make_trigger
    from .sim import evaluate, run_batch
    from .voidp import GridSpec, backward_induction

    seed = int(cfg.get("seed", 0))
    episodes = int(cfg.get("episodes", 10000))
    grid = GridSpec(**cfg["grid"]) if "grid" in cfg else GridSpec()
    sol = riccati_backward(model)
    sched = covariance_schedule(model)
    checks = [check_filter(model, seed)]
    table = None
    if model.n == 1:
        table = backward_induction(model, sol, grid, sched)
        checks += check_structure(table, sol)
        checks.append(check_terminal(table, sol))
        checks.append(check_enumeration(model, sol))
        e0 = 0.5 * float(table.scale[0])
        mc = mc_value_check(table, model, sol, e0, 0, max(episodes, 2), seed)
        checks.append({"name": "mc_value", "status": _status(mc.agrees), "rollout_mean": mc.mean,
                       "rollout_se": mc.se, "table_value": mc.table_value, "start": e0})
    else:
        checks.append({"name": "exact_dp", "status": "skip", "reason": f"state dimension {model.n} > 1"})
    trig = make_trigger("voi", model, sol, sched, table=table) if table is not None else make_trigger(
        "voi_myopic", model, sol, sched)
    rep = evaluate(run_batch(model, trig, CE, episodes=max(episodes, 2), seed=seed, sol=sol, schedule=sched),
                   model, sol)
    z = abs(rep.residual.mean) / rep.residual.se if rep.residual.se > 0 else 0.0
    checks.append({"name": "loss_identity", "status": _status(z <= 3.0 or abs(rep.residual.mean) < 1e-12),
                   "residual": rep.residual.mean, "residual_se": rep.residual.se, "trigger": trig.label})
    counts = {s: sum(c["status"] == s for c in checks) for s in ("pass", "fail", "skip")}
    return {"checks": checks, "summary": counts}
