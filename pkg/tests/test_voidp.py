import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voictl.estimation import covariance_schedule
from voictl.lqr import riccati_backward
from voictl.model import scalar_model
from voictl.voidp import (
    ExactModeError,
    GridSpec,
    backward_induction,
    extract_threshold,
    gaussian_expect_piecewise_linear,
    hermite_rule,
    myopic_threshold,
    stage_values,
    symmetric_grid,
    voi,
)

from conftest import random_model

# N = 2 standard scalar instance; reference from adaptive high-precision quadrature of the
# nested expectation (V_2 = 0, V_1(e) = min(e^2 / 2, 1) + 0.8).
REF_V0 = {0.0: 2.4986240759378381, 0.5: 2.7802220802113928, 1.0: 3.4986240759378381, 2.0: 3.4986240759378381}
REF_RHO0 = {0.5: 0.056598004273554681, 1.0: 0.19981498847457898, 2.0: 0.5066350967874311}
REF_R0 = 0.95220807958192939


def test_hermite_rule_moments():
    z, w = hermite_rule(9)
    assert w.sum() == pytest.approx(1.0)
    assert z @ w == pytest.approx(0.0, abs=1e-15)
    assert (z**2) @ w == pytest.approx(1.0)
    assert (z**4) @ w == pytest.approx(3.0)


def test_symmetric_grid_is_exactly_mirrored():
    g = symmetric_grid(3.7, 101)
    assert np.array_equal(g, -g[::-1])
    assert g[50] == 0.0


def test_piecewise_linear_expectation_is_exact_for_linear_and_quadratic_limits():
    xs = np.linspace(-40, 40, 8001)
    means = np.array([-1.0, 0.0, 0.3, 2.0])
    lin = gaussian_expect_piecewise_linear(xs, 2.0 * xs + 1.0, means, 0.7)
    assert np.allclose(lin, 2.0 * means + 1.0, atol=1e-10)
    quad = gaussian_expect_piecewise_linear(xs, xs**2, means, 0.7)
    assert np.allclose(quad, means**2 + 0.49, atol=1e-4)


def test_exact_mode_needs_scalar_state():
    m = random_model(np.random.default_rng(0), 2, 1, 3)
    with pytest.raises(ExactModeError):
        backward_induction(m, riccati_backward(m))


def test_terminal_stage_is_flat_and_silent(std10):
    m, sol, sch = std10
    t = backward_induction(m, sol, schedule=sch)
    assert np.allclose(t.values[m.N], t.const[m.N])
    assert t.const[m.N] == 0.0
    assert not voi(t, sol, t.nodes[m.N][:, None], m.N).transmit.any()
    assert extract_threshold(t, sol, m.N) == float("inf")


def test_values_against_high_precision_reference(std2):
    m, sol, sch = std2
    t = backward_induction(m, sol, schedule=sch)
    e = np.array(sorted(REF_V0))
    assert np.allclose(t.value(0, e), [REF_V0[v] for v in e], atol=5e-5)
    e = np.array(sorted(REF_RHO0))
    assert np.allclose(t.rho_at(0, e), [REF_RHO0[v] for v in e], atol=5e-5)
    assert extract_threshold(t, sol, 0) == pytest.approx(REF_R0, abs=1e-4)


def test_hermite_rule_n1_matches_closed_form(std1):
    # N = 1: V_1 = 0 + c_1 = 0, V_0(e) = min(a0 e^2, theta) + c_0 exactly
    m, sol, sch = std1
    t = backward_induction(m, sol, GridSpec(rule="hermite", quad_nodes=9), sch)
    e = np.linspace(-3, 3, 31)
    a0 = 0.5
    c0 = a0 * 0.5 + 0.5 * 1.0
    assert np.allclose(t.value(0, e), np.minimum(a0 * e * e, 1.0) + c0, atol=1e-14)


def test_voi_at_zero_is_minus_price(std10):
    m, sol, sch = std10
    t = backward_induction(m, sol, schedule=sch)
    for k in range(m.N + 1):
        r = voi(t, sol, np.zeros((1, 1)), k)
        assert r.rho[0] == 0.0
        assert r.value[0] == -sol.theta[k]
        assert not r.transmit[0]


def test_myopic_voi_hand_value(std2):
    _, sol, _ = std2
    assert sol.Gamma[1][0, 0] == pytest.approx(0.9)
    r = voi(None, sol, np.array([[2.0]]), 0, A=np.eye(1))
    assert r.value[0] == pytest.approx(2.6)
    assert r.transmit[0]
    assert myopic_threshold(sol, np.eye(1), 0) == pytest.approx(np.sqrt(1 / 0.9))


def test_voi_dimension_mismatch(std2):
    _, sol, _ = std2
    with pytest.raises(ValueError):
        voi(None, sol, np.zeros((1, 2)), 0, A=np.eye(1))


def test_zero_price_never_waits():
    m = scalar_model(6, ell=0.0)
    sol = riccati_backward(m)
    t = backward_induction(m, sol)
    for k in range(m.N):
        e = t.nodes[k]
        nz = e != 0
        assert np.all(t.stay[k][nz] >= t.go[k] - 1e-12)
        assert extract_threshold(t, sol, k) == 0.0


def test_threshold_nondecreasing_in_price():
    base = scalar_model(6)
    rs = []
    for lam in (0.9, 0.7, 0.5, 0.3, 0.1):
        m = base.with_lambda(lam)
        sol = riccati_backward(m)
        t = backward_induction(m, sol)
        rs.append([extract_threshold(t, sol, k) for k in range(m.N)])
    rs = np.array(rs)
    assert np.all(np.diff(rs, axis=0) >= -1e-9)


def test_stage_values_columns(std2):
    m, sol, sch = std2
    t = backward_induction(m, sol, GridSpec(points=65), sch)
    cols = stage_values(t, sol, 0)
    assert set(cols) == {"e", "V", "rho", "voi", "delta"}
    assert all(len(v) == 65 for v in cols.values())
    assert np.array_equal(cols["delta"], (cols["voi"] >= 0).astype(int))


def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec(points=64)
    with pytest.raises(ValueError):
        GridSpec(rule="simpson")


@settings(max_examples=15, deadline=None)
@given(A=st.floats(0.3, 1.5), W=st.floats(0.1, 3.0), V=st.floats(0.1, 3.0), lam=st.floats(0.05, 0.95),
       N=st.integers(1, 6))
def test_structure_even_monotone_interval(A, W, V, lam, N):
    m = scalar_model(N, A=A, W=W, V=V, lam=lam)
    sol = riccati_backward(m)
    t = backward_induction(m, sol, GridSpec(points=257), covariance_schedule(m))
    for k in range(N + 1):
        e = t.nodes[k]
        r = voi(t, sol, e[:, None], k)
        assert np.max(np.abs(r.value - r.value[::-1])) <= 1e-9
        assert np.max(np.abs(r.rho - r.rho[::-1])) <= 1e-9
        assert np.max(np.abs(t.values[k] - t.values[k][::-1])) <= 1e-9
        half = r.value[e.size // 2:]
        assert np.all(np.diff(half) >= -1e-9)
        d = r.transmit
        if d.any():
            assert np.array_equal(d, np.abs(e) >= np.min(np.abs(e[d])))
