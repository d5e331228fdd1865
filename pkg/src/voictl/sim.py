"""Closed-loop episodes over the one-step-delay channel, loss estimates, and lambda sweeps.

Episodes are vectorised over a batch axis. Every episode draws its noise from
its own counter-based stream keyed by (master seed, episode index), so an
episode's trajectory does not depend on which batch it ran in (up to rounding
in batched linear algebra; a fixed chunk size is bit-reproducible for any
thread count), and two policies run on the same :class:`NoiseBank` see
identical process and sensor noise (common random numbers).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .estimation import (
    CovarianceSchedule,
    DecoderState,
    EncoderState,
    covariance_schedule,
    decoder_step,
    encoder_update_innovation,
    initial_innovation,
)
from .lqr import RiccatiSolution, riccati_backward, stage_cost_terms
from .model import ProcessModel, episode_rng, observe, sample_initial_state, step_process
from .policies import CE, ControlPolicy, TriggerPolicy, make_trigger
from .voidp import GridSpec, ValueTable, backward_induction, extract_threshold

TRACE_FIELDS = ("x", "u", "delta", "y", "nu", "xcheck", "xhat", "etilde", "ehat", "varsigma", "cost")


class EmptyBatchError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseBank:
    """Standard-normal and uniform draws for episodes ``start .. start + count - 1``."""

    seed: int
    start: int
    x0: np.ndarray
    w: np.ndarray
    v: np.ndarray
    uniform: np.ndarray

    @property
    def count(self) -> int:
        return self.x0.shape[0]

    @classmethod
    def draw(cls, model: ProcessModel, seed: int, episodes: int, start: int = 0) -> "NoiseBank":
        n, p, S = model.n, model.p, model.N + 1
        size = n + S * (n + p)
        z = np.empty((episodes, size))
        u = np.empty((episodes, S))
        for i in range(episodes):
            rng = episode_rng(seed, start + i)
            z[i] = rng.standard_normal(size)
            u[i] = rng.random(S)
        return cls(seed=seed, start=start, x0=z[:, :n], w=z[:, n:n + S * n].reshape(episodes, S, n),
                   v=z[:, n + S * n:].reshape(episodes, S, p), uniform=u)

    def slice(self, lo: int, hi: int) -> "NoiseBank":
        return NoiseBank(self.seed, self.start + lo, self.x0[lo:hi], self.w[lo:hi], self.v[lo:hi],
                         self.uniform[lo:hi])


@dataclass(frozen=True)
class Trace:
    """One episode; arrays carry the stage axis first (x has N+2 rows)."""

    seed: int
    episode: int
    x: np.ndarray
    u: np.ndarray
    delta: np.ndarray
    y: np.ndarray
    nu: np.ndarray
    xcheck: np.ndarray
    xhat: np.ndarray
    etilde: np.ndarray
    ehat: np.ndarray
    varsigma: np.ndarray
    cost: np.ndarray

    @property
    def elapsed(self) -> np.ndarray:
        """Stages since the last transmission (stage count + 1 before the first)."""
        out = np.empty(self.delta.size, dtype=int)
        last = -1
        for k, d in enumerate(self.delta):
            out[k] = k - last
            if d:
                last = k
        return out


@dataclass
class BatchResult:
    """Per-episode sums, plus full stage arrays when traces were kept."""

    model: ProcessModel
    seed: int
    start: int
    rate_sum: np.ndarray
    reg_sum: np.ndarray
    psi_sum: np.ndarray
    transmissions: np.ndarray
    trigger: str = ""
    controller: str = ""
    traces: dict[str, np.ndarray] | None = None
    silent_sum: np.ndarray | None = None
    silent_count: np.ndarray | None = None

    @property
    def episodes(self) -> int:
        return self.rate_sum.size

    def silent_bias(self) -> np.ndarray | None:
        """Mean decoder error at stage k over episodes with no transmission through k
        (rows k = 0..N; NaN where no episode stayed silent)."""
        if self.silent_sum is None:
            return None
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.silent_sum / self.silent_count[:, None]

    def phi(self) -> np.ndarray:
        lam, N = self.model.lam, self.model.N
        return ((1.0 - lam) * self.rate_sum + lam * self.reg_sum) / (N + 1)

    def trace(self, i: int) -> Trace:
        if self.traces is None:
            raise ValueError("traces were not kept; rerun with keep_traces=True")
        return Trace(seed=self.seed, episode=self.start + i, **{f: self.traces[f][i] for f in TRACE_FIELDS})


def _simulate(model: ProcessModel, sched: CovarianceSchedule, sol: RiccatiSolution, trigger: TriggerPolicy,
              controller: ControlPolicy, noise: NoiseBank, keep: bool) -> dict[str, np.ndarray]:
    N, E = model.N, noise.count
    theta = sol.theta
    rec = {f: [] for f in TRACE_FIELDS} if keep else None

    x = sample_initial_state(model, z=noise.x0)
    xhat = np.broadcast_to(model.m0, (E, model.n)).copy()
    mirror = xhat.copy()  # encoder-side copy of the decoder estimate
    y = np.concatenate(observe(model, 0, x, z=noise.v[:, 0]), axis=-1)
    nu = initial_innovation(sched, y)
    enc = EncoderState(0, model.m0 + nu @ sched.K[0].T, sched)
    state = trigger.start(E)

    rate = np.zeros(E)
    reg = np.zeros(E)
    psi = np.zeros(E)
    sends = np.zeros(E, dtype=int)
    silent = np.ones(E, dtype=bool)
    silent_sum = np.zeros((N + 1, model.n))
    silent_count = np.zeros(N + 1, dtype=int)
    for k in range(N + 1):
        etilde = enc.xcheck - mirror
        delta = trigger.decide(k, etilde, noise.uniform[:, k], state)
        u = controller.act(sol, xhat, k)
        vs = stage_cost_terms(sol, x, u, k)
        x_next = step_process(model, k, x, u, z=noise.w[:, k])
        cost = np.einsum("ei,ij,ej->e", x_next, model.Q[k + 1], x_next) + np.einsum("ei,ij,ej->e", u, model.R[k], u)
        rate += model.ell[k] * delta
        reg += cost
        psi += theta[k] * delta + vs
        sends += delta
        silent &= ~delta
        silent_sum[k] = (x - xhat)[silent].sum(axis=0)
        silent_count[k] = int(silent.sum())
        if keep:
            for f, val in (("x", x), ("u", u), ("delta", delta), ("y", y), ("nu", nu), ("xcheck", enc.xcheck),
                           ("xhat", xhat), ("etilde", etilde), ("ehat", x - xhat), ("varsigma", vs), ("cost", cost)):
                rec[f].append(val)
        payload = enc.xcheck if np.any(delta) else None
        xhat = decoder_step(model, DecoderState(k, xhat), u, delta, payload).xhat
        mirror = decoder_step(model, DecoderState(k, mirror), u, delta, payload).xhat
        if k < N:
            y = np.concatenate(observe(model, k + 1, x_next, z=noise.v[:, k + 1]), axis=-1)
            enc, nu = encoder_update_innovation(enc, y, u)
        x = x_next
    out = {"rate": rate, "reg": reg, "psi": psi, "sends": sends, "silent_sum": silent_sum,
           "silent_count": silent_count}
    if keep:
        rec["x"].append(x)
        out["traces"] = {f: np.stack(v, axis=1) for f, v in rec.items()}
    return out


def run_batch(model: ProcessModel, trigger: TriggerPolicy, controller: ControlPolicy = CE, *,
              episodes: int | None = None, seed: int = 0, start: int = 0, noise: NoiseBank | None = None,
              sol: RiccatiSolution | None = None, schedule: CovarianceSchedule | None = None,
              keep_traces: bool = False, threads: int = 1, chunk: int = 25000) -> BatchResult:
    """Run a Monte Carlo batch. Pass ``noise`` to reuse draws across policies."""
    sol = sol or riccati_backward(model)
    sched = schedule or covariance_schedule(model)
    if noise is None:
        if episodes is None:
            raise ValueError("give either episodes or a noise bank")
        noise = NoiseBank.draw(model, seed, episodes, start)
    elif episodes is not None and episodes != noise.count:
        noise = noise.slice(0, episodes)
    bounds = [(lo, min(lo + chunk, noise.count)) for lo in range(0, noise.count, chunk)]

    def work(b):
        return _simulate(model, sched, sol, trigger, controller, noise.slice(*b), keep_traces)

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    cat = lambda key: np.concatenate([p[key] for p in parts])  # noqa: E731
    traces = None
    if keep_traces:
        traces = {f: np.concatenate([p["traces"][f] for p in parts]) for f in TRACE_FIELDS}
    return BatchResult(model=model, seed=noise.seed, start=noise.start, rate_sum=cat("rate"), reg_sum=cat("reg"),
                       psi_sum=cat("psi"), transmissions=cat("sends"), trigger=trigger.label,
                       controller=controller.kind, traces=traces,
                       silent_sum=sum(p["silent_sum"] for p in parts),
                       silent_count=sum(p["silent_count"] for p in parts))


def run_episode(model: ProcessModel, trigger: TriggerPolicy, controller: ControlPolicy = CE, seed: int = 0,
                episode: int = 0, sol: RiccatiSolution | None = None,
                schedule: CovarianceSchedule | None = None) -> Trace:
    res = run_batch(model, trigger, controller, episodes=1, seed=seed, start=episode, sol=sol,
                    schedule=schedule, keep_traces=True)
    return res.trace(0)


@dataclass(frozen=True)
class Estimate:
    mean: float
    se: float

    def as_dict(self) -> dict[str, float]:
        return {"mean": self.mean, "se": self.se}


def _estimate(a: np.ndarray) -> Estimate:
    return Estimate(float(np.mean(a)), float(np.std(a, ddof=1) / np.sqrt(a.size)))


@dataclass(frozen=True)
class LossReport:
    episodes: int
    R: Estimate
    J: Estimate
    Phi: Estimate
    Psi: Estimate
    kappa: float
    residual: Estimate
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {"episodes": self.episodes, "kappa": self.kappa}
        for name in ("R", "J", "Phi", "Psi", "residual"):
            out[name] = getattr(self, name).as_dict()
        out.update(self.extra)
        return out


def _as_batch(traces, model: ProcessModel, sol: RiccatiSolution) -> BatchResult:
    if isinstance(traces, BatchResult):
        return traces
    traces = list(traces)
    if not traces:
        raise EmptyBatchError("no traces to evaluate")
    theta = sol.theta
    rate = np.array([np.dot(model.ell, t.delta) for t in traces])
    reg = np.array([t.cost.sum() for t in traces])
    psi = np.array([np.dot(theta, t.delta) + t.varsigma.sum() for t in traces])
    sends = np.array([int(t.delta.sum()) for t in traces])
    return BatchResult(model, traces[0].seed, traces[0].episode, rate, reg, psi, sends)


def evaluate(traces: BatchResult | Iterable[Trace], model: ProcessModel, sol: RiccatiSolution) -> LossReport:
    """Rate, regulation, trade-off and equivalent-loss estimates with standard errors.

    The residual (N+1) Phi - lam (Psi + kappa) has zero mean for every policy pair.
    """
    b = _as_batch(traces, model, sol)
    if b.episodes < 2:
        raise EmptyBatchError(f"need at least 2 episodes, got {b.episodes}")
    N, lam = model.N, model.lam
    phi = b.phi()
    resid = (N + 1) * phi - lam * (b.psi_sum + sol.kappa)
    extra = {}
    bias = b.silent_bias()
    if bias is not None:
        extra["silent_ehat_mean"] = [None if np.isnan(r).any() else r.tolist() for r in bias]
        extra["silent_episodes"] = b.silent_count.tolist()
    return LossReport(
        episodes=b.episodes,
        R=_estimate(b.rate_sum / (N + 1)),
        J=_estimate(b.reg_sum / (N + 1)),
        Phi=_estimate(phi),
        Psi=_estimate(b.psi_sum),
        kappa=sol.kappa,
        residual=_estimate(resid),
        extra=extra,
    )


def paired_difference(a: BatchResult, b: BatchResult) -> Estimate:
    """Mean and standard error of Phi(a) - Phi(b) over episodes sharing noise."""
    if a.seed != b.seed or a.start != b.start or a.episodes != b.episodes:
        raise ValueError("paired comparison needs batches run on the same noise bank")
    return _estimate(a.phi() - b.phi())


PolicyBuilder = Callable[[ProcessModel, RiccatiSolution, CovarianceSchedule, "ValueTable | None"],
                         tuple[TriggerPolicy, ControlPolicy]]


def default_builder(model, sol, sched, table):
    return make_trigger("voi", model, sol, sched, table=table), CE


def sweep_lambda(model: ProcessModel, lambdas: Sequence[float], builder: PolicyBuilder = default_builder, *,
                 episodes: int = 10000, seed: int = 0, grid: GridSpec | None = None,
                 threads: int = 1) -> list[dict]:
    """Trade-off curve: one Monte Carlo (R, J) point per lambda, sharing noise across lambdas."""
    lams = sorted(float(v) for v in lambdas)
    sched = covariance_schedule(model)
    noise = NoiseBank.draw(model, seed, episodes)
    rows = []
    for lam in lams:
        m = model.with_lambda(lam)
        sol = riccati_backward(m)
        table = backward_induction(m, sol, grid, sched) if m.n == 1 else None
        trig, ctrl = builder(m, sol, sched, table)
        rep = evaluate(run_batch(m, trig, ctrl, noise=noise, sol=sol, schedule=sched, threads=threads), m, sol)
        row = {"lambda": lam, "theta0": float(sol.theta[0]), "trigger": trig.label,
               "R": rep.R.mean, "R_se": rep.R.se, "J": rep.J.mean, "J_se": rep.J.se,
               "Phi": rep.Phi.mean, "Phi_se": rep.Phi.se}
        if table is not None:
            row["thresholds"] = [extract_threshold(table, sol, k) for k in range(m.N + 1)]
        rows.append(row)
    return rows
