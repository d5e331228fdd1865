import numpy as np
import pytest

from voictl.estimation import covariance_schedule, mismatch_step
from voictl.lqr import riccati_backward
from voictl.model import scalar_model
from voictl.policies import CE, ZERO, TriggerPolicy, make_trigger
from voictl.sim import EmptyBatchError, NoiseBank, evaluate, paired_difference, run_batch, run_episode, sweep_lambda

from conftest import random_model


def test_noiseless_open_loop():
    m = scalar_model(5, A=1.2, W=1e-30, M0=1e-30, m0=2.0)
    tr = run_episode(m, TriggerPolicy("never"), ZERO, seed=3)
    assert np.allclose(tr.x[:, 0], 2.0 * 1.2 ** np.arange(7), rtol=1e-12)


def test_always_transmit_mismatch_covariance():
    m = scalar_model(3)
    sch = covariance_schedule(m)
    res = run_batch(m, TriggerPolicy("always"), CE, episodes=100_000, seed=5, keep_traces=True)
    et = res.traces["etilde"][:, :, 0]
    for k in range(1, m.N + 1):
        assert np.var(et[:, k]) == pytest.approx(sch.mismatch_cov[k][0, 0], rel=0.05)


def test_same_seed_bit_identical():
    m = random_model(np.random.default_rng(2), 2, 2, 6)
    p = make_trigger("mismatch_threshold:0.5", m, riccati_backward(m), covariance_schedule(m))
    a = run_batch(m, p, CE, episodes=50, seed=9, keep_traces=True)
    b = run_batch(m, p, CE, episodes=50, seed=9, keep_traces=True)
    c = run_batch(m, p, CE, episodes=50, seed=9, keep_traces=True, chunk=7, threads=1)
    d = run_batch(m, p, CE, episodes=50, seed=9, keep_traces=True, chunk=7, threads=3)
    for f, v in a.traces.items():
        assert np.array_equal(v, b.traces[f]), f
        assert np.array_equal(c.traces[f], d.traces[f]), f
        assert np.allclose(v, c.traces[f], rtol=1e-12, atol=1e-12), f
    single = run_episode(m, p, CE, seed=9, episode=17)
    assert np.allclose(single.x, a.traces["x"][17], rtol=1e-12, atol=1e-12)
    assert single.seed == 9 and single.episode == 17


def test_trace_invariants(std10, table10):
    m, sol, sch = std10
    p = make_trigger("voi", m, sol, sch, table=table10)
    res = run_batch(m, p, CE, episodes=500, seed=1, sol=sol, schedule=sch, keep_traces=True)
    t = res.traces
    assert np.max(np.abs(t["etilde"] - (t["xcheck"] - t["xhat"]))) <= 1e-9
    assert np.array_equal(t["ehat"], t["x"][:, :-1] - t["xhat"])
    # mismatch recursion from innovations and decisions reproduces the encoder-side mismatch
    e = t["etilde"][:, 0]
    for k in range(m.N):
        e = mismatch_step(sch, e, t["delta"][:, k], t["nu"][:, k + 1], k)
        assert np.max(np.abs(e - t["etilde"][:, k + 1])) <= 1e-9
    # controls depend on the decoder estimate only
    assert np.allclose(t["u"][:, :, 0], -sol.L[0][0, 0] * 0 - np.stack(
        [t["xhat"][:, k, 0] * sol.L[k][0, 0] for k in range(m.N + 1)], axis=1))
    assert np.allclose(res.rate_sum, (t["delta"] * m.ell).sum(axis=1))


def test_rate_accounting_and_bounds(std10):
    m, sol, sch = std10
    res = run_batch(m, TriggerPolicy("always"), CE, episodes=200, seed=0)
    rep = evaluate(res, m, sol)
    assert rep.R.mean == 1.0 and rep.R.se == 0.0
    res = run_batch(m, TriggerPolicy("bernoulli", 0.4), CE, episodes=2000, seed=0)
    rep = evaluate(res, m, sol)
    assert rep.R.mean * (m.N + 1) == pytest.approx(np.mean(res.rate_sum), abs=1e-12)
    assert 0.0 <= rep.R.mean <= max(m.ell)
    assert rep.J.mean >= 0.0


def test_zero_everything_gives_zero_losses():
    m = scalar_model(4, W=1e-300, M0=1e-300, V=1.0)
    sol = riccati_backward(m)
    rep = evaluate(run_batch(m, TriggerPolicy("never"), ZERO, episodes=10, seed=0), m, sol)
    assert rep.J.mean == pytest.approx(0.0, abs=1e-200)
    assert rep.Psi.mean == pytest.approx(0.0, abs=1e-200)


def test_evaluate_accepts_trace_lists(std2):
    m, sol, _ = std2
    res = run_batch(m, TriggerPolicy("periodic", 2), CE, episodes=20, seed=4, keep_traces=True)
    a = evaluate(res, m, sol)
    b = evaluate([res.trace(i) for i in range(20)], m, sol)
    assert a.Phi.mean == pytest.approx(b.Phi.mean, rel=1e-12)
    assert a.residual.mean == pytest.approx(b.residual.mean, rel=1e-9, abs=1e-12)
    with pytest.raises(EmptyBatchError):
        evaluate([res.trace(0)], m, sol)
    with pytest.raises(EmptyBatchError):
        evaluate([], m, sol)


def test_elapsed_since_transmission(std2):
    m, _, _ = std2
    tr = run_episode(m, TriggerPolicy("periodic", 2), CE, seed=0)
    assert tr.elapsed.tolist() == [1, 1, 2]


@pytest.mark.parametrize("trigger", ["never", "always", "bernoulli:0.5"])
def test_loss_identity_residual(std10, trigger):
    m, sol, sch = std10
    p = make_trigger(trigger, m, sol, sch)
    for ctrl in (CE, ZERO):
        rep = evaluate(run_batch(m, p, ctrl, episodes=20_000, seed=12), m, sol)
        assert abs(rep.residual.mean) <= 3 * rep.residual.se


def test_common_random_numbers(std10, table10):
    m, sol, sch = std10
    bank = NoiseBank.draw(m, 21, 4000)
    a = run_batch(m, make_trigger("voi", m, sol, sch, table=table10), CE, noise=bank)
    b = run_batch(m, TriggerPolicy("always"), CE, noise=bank)
    d = paired_difference(a, b)
    assert d.mean < 0
    # noise bank reuse reproduces a fresh draw exactly
    c = run_batch(m, TriggerPolicy("always"), CE, episodes=4000, seed=21)
    assert np.array_equal(b.phi(), c.phi())


def test_sweep_rows_sorted_with_thresholds():
    m = scalar_model(4)
    rows = sweep_lambda(m, [0.9, 0.1, 0.5], episodes=2000, seed=0)
    assert [r["lambda"] for r in rows] == [0.1, 0.5, 0.9]
    assert rows[0]["R"] < rows[-1]["R"]
    assert rows[0]["theta0"] == pytest.approx(9.0)
    assert all(len(r["thresholds"]) == 5 for r in rows)


def test_silent_bias_matches_traces(std10, table10):
    m, sol, sch = std10
    p = make_trigger("voi", m, sol, sch, table=table10)
    res = run_batch(m, p, CE, episodes=3000, seed=8, sol=sol, schedule=sch, keep_traces=True, chunk=1000)
    d, eh = res.traces["delta"], res.traces["ehat"]
    bias = res.silent_bias()
    for k in range(m.N + 1):
        mask = ~d[:, : k + 1].any(axis=1)
        assert res.silent_count[k] == mask.sum()
        assert np.allclose(bias[k], eh[mask, k].mean(axis=0))
    assert len(evaluate(res, m, sol).extra["silent_ehat_mean"]) == m.N + 1
