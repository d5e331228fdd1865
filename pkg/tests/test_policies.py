import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voictl.policies import (
    CE,
    ZERO,
    ControlPolicy,
    PolicyError,
    TriggerPolicy,
    act,
    decide,
    make_trigger,
    parse_policy,
)


def test_never_and_always(std2):
    e = np.random.default_rng(0).normal(size=(50, 1))
    for k in range(3):
        assert not TriggerPolicy("never").decide(k, e).any()
        assert TriggerPolicy("always").decide(k, e).all()


def test_periodic():
    p = TriggerPolicy("periodic", 3)
    assert [bool(decide(p, k, np.zeros(1))) for k in range(7)] == [True, False, False, True, False, False, True]
    with pytest.raises(PolicyError):
        TriggerPolicy("periodic", 1.5)


def test_mismatch_threshold_uses_euclidean_norm():
    p = TriggerPolicy("mismatch_threshold", 5.0)
    assert decide(p, 0, np.array([3.0, 4.0]))
    assert not decide(p, 0, np.array([3.0, 3.9]))


def test_myopic_example(std2):
    m, sol, sch = std2
    p = TriggerPolicy("voi_myopic", model=m, sol=sol)
    assert not decide(p, 0, np.array([1.0]))
    assert decide(p, 0, np.array([1.1]))


def test_bernoulli_uses_uniforms():
    p = TriggerPolicy("bernoulli", 0.3)
    u = np.array([0.1, 0.29, 0.31, 0.9])
    assert p.decide(0, np.zeros((4, 1)), u).tolist() == [True, True, False, False]
    freq = decide(p, 0, np.zeros((100_000, 1)), rng=np.random.default_rng(0)).mean()
    assert freq == pytest.approx(0.3, abs=0.005)
    with pytest.raises(PolicyError):
        TriggerPolicy("bernoulli", 1.2)


def test_variance_based_tracks_decoder_covariance(std10):
    m, sol, sch = std10
    p = TriggerPolicy("variance_based", 1.5, model=m, schedule=sch)
    state = p.start(1)
    P = m.M0.copy()
    for k in range(m.N + 1):
        d = bool(p.decide(k, np.zeros((1, 1)), state=state)[0])
        assert d == (np.trace(P) - np.trace(sch.Y[k]) > 1.5)
        P = m.A[k] @ (sch.Y[k] if d else P) @ m.A[k].T + m.W[k]
        assert np.allclose(state["P"][0], P)
    with pytest.raises(PolicyError):
        p.decide(0, np.zeros((1, 1)))


def test_controllers(std1):
    _, sol, _ = std1
    assert act(ZERO, sol, np.array([5.0]), 0)[0] == 0.0
    assert act(CE, sol, np.array([0.0]), 0)[0] == 0.0
    assert act(CE, sol, np.array([2.0]), 0)[0] == pytest.approx(-1.2)
    with pytest.raises(PolicyError):
        ControlPolicy("bang_bang")


def test_parse_policy():
    assert parse_policy("periodic:2") == ("periodic", 2.0)
    assert parse_policy("voi") == ("voi", None)
    assert parse_policy("mismatch-threshold:1.5") == ("mismatch_threshold", 1.5)
    for bad in ("telepathy", "periodic", "bernoulli:x"):
        with pytest.raises(PolicyError):
            parse_policy(bad)


def test_make_trigger_picks_exact_for_scalars(std2):
    m, sol, sch = std2
    assert make_trigger("voi", m, sol, sch).kind == "voi_exact"
    assert make_trigger("voi", m, sol, sch, myopic=True).kind == "voi_myopic"
    assert make_trigger("periodic:2", m, sol, sch).label == "periodic(2)"


@settings(max_examples=40, deadline=None)
@given(k=st.integers(0, 10), e=st.floats(-6, 6), kind=st.sampled_from(
    ["voi_exact", "voi_myopic", "periodic:2", "always", "never", "mismatch_threshold:1", "variance_based:0.5"]))
def test_even_in_mismatch(std10, table10, k, e, kind):
    m, sol, sch = std10
    p = make_trigger(kind, m, sol, sch, table=table10)
    s_pos, s_neg = p.start(1), p.start(1)
    for j in range(k + 1):
        a = p.decide(j, np.array([[e]]), state=s_pos)
        b = p.decide(j, np.array([[-e]]), state=s_neg)
        assert a[0] == b[0]
