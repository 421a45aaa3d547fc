import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffquot.numerics import DomainError, GridFunction, WField
from diffquot.polynomial import linear_spec, quadratic_spec
from diffquot.transport import (
    ContractionError,
    build_chart,
    contraction_delta,
    delta0_from_gamma,
    evolve_density,
    gronwall_compare,
    picard_solve_L0,
    regime_of,
    solve_phat_pde,
)


def test_chart_constant_speeds():
    ch = build_chart(1.0, 1.0, 0.5)
    t, w = ch.H(0.3, 0.2)
    assert (t, w) == pytest.approx((0.5, 0.2))
    ch = build_chart(2.0, 1.0, 0.5)
    t, w = ch.H(-0.1, 0.2)
    assert (t, w) == pytest.approx((0.2, 0.5))
    assert ch.v_bound() == pytest.approx(0.25)
    with pytest.raises(DomainError):
        build_chart(lambda t: t - 0.5, 1.0, 0.5)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_chart_round_trip(t, w):
    ch = build_chart(lambda s: 1 + s, 1.0, 1.0)
    u, v = ch.H_inv(t, w)
    assert np.allclose(ch.H(u, v), (t, w), atol=1e-9)
    assert v <= t + 1e-12


def _picard(forcing, boundary, lam, nt=33, nw=33, T=1.0, W=0.5):
    ht, hw = T / (nt - 1), W / (nw - 1)
    b = np.asarray(boundary(np.linspace(0, T, nt)), dtype=float).reshape(nt, 1)
    la = np.broadcast_to(np.asarray(lam(np.linspace(0, T, nt)), dtype=float), (nt,)).reshape(nt, 1)
    return picard_solve_L0(forcing, b, la, ht, hw, nw)


def test_picard_pure_transport():
    res = _picard(lambda D: np.zeros_like(D), lambda t: t, lambda t: 0 * t + 1.0)
    t, w = res.field.t[:, None], res.field.w[None, :]
    # the initial line is the C^1 continuation across the corner characteristic
    assert np.max(np.abs(res.field.values[..., 0] - (t - w))) < 1e-12
    res = _picard(lambda D: np.zeros_like(D), lambda t: 0 * t, lambda t: 0 * t + 1.0)
    assert np.all(res.field.values == 0)


@pytest.mark.parametrize("speed", [lambda t: 0 * t + 1.0, lambda t: 1 + t])
def test_picard_constant_forcing(speed):
    g = 0.7
    res = _picard(lambda D: np.full_like(D, g), lambda t: 0 * t, speed, nt=65, nw=65)
    ch = build_chart(speed, 1.0, 0.5)
    t, w = np.meshgrid(res.field.t, res.field.w, indexing="ij")
    u, v = ch.H_inv(t, w)
    exact = g * np.where(u >= 0, v, -u / speed(0.0) + v)
    assert np.max(np.abs(res.field.values[..., 0] - exact)) < 1e-4


def test_picard_linear_damping_ratio():
    k = 0.5
    res = _picard(lambda D: -k * D, lambda t: 1 + t, lambda t: 0 * t + 1.0)
    assert res.max_ratio < 1 and res.iterations < 40


def test_picard_divergence_is_reported():
    with pytest.raises(ContractionError):
        _picard(lambda D: 50.0 * D, lambda t: 1 + t, lambda t: 0 * t + 1.0, W=1.0)


def test_contraction_radius():
    assert contraction_delta(1.0, 1.0, 1.0, 1.0, 1) == pytest.approx(0.5)
    assert contraction_delta(2.0, 1.0, 1.0, 1.0, 1) == pytest.approx(1.0)
    radii = [contraction_delta(1.0, 1.0, 1.0, g2, 2) for g2 in (0.5, 1.0, 2.0, 4.0)]
    assert all(a >= b for a, b in zip(radii, radii[1:]))
    assert contraction_delta(1.0, 1.0, lambda r: r, lambda r: 1.0, 4) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        contraction_delta(0.0, 1.0, 1.0, 1.0, 1)


def test_regime():
    t = np.linspace(0, 1, 5)
    a = np.ones((5, 1))
    assert regime_of(linear_spec(-1.0), a, t) == "existence"
    assert regime_of(linear_spec(1.0), a, t) == "uniqueness"
    assert regime_of(quadratic_spec(-1.0, -1.0), a, t) == "existence"
    # d_yP = 1 - 2y changes sign along a trace running from 0 to 1
    assert regime_of(quadratic_spec(1.0, -1.0), t[:, None], t) is None


def test_phat_linear_closed_forms():
    A0 = GridFunction.from_function(lambda t: t, 0.0, 1.0, 33)
    sol = solve_phat_pde(linear_spec(1.0), A0, nw=33, delta_cap=0.5)
    t, w = sol.field.t[:, None], sol.field.w[None, :]
    assert sol.orientation == "reversed"
    assert np.max(np.abs(sol.field.values[..., 0] - (t + w))) < 1e-10
    sol = solve_phat_pde(linear_spec(-1.0), A0, nw=33, delta_cap=0.5)
    assert sol.orientation == "existence"
    assert np.max(np.abs(sol.field.values[..., 0] - (t - w))) < 1e-10
    c = GridFunction(0.0, 1 / 32, np.full(33, 0.4))
    sol = solve_phat_pde(linear_spec(-2.0), c, nw=17, delta_cap=0.5)
    assert np.max(np.abs(sol.field.values - 0.4)) < 1e-12


def test_phat_first_trace_of_w_derivative():
    A0 = GridFunction.from_function(np.sin, 0.0, 1.0, 65)
    sol = solve_phat_pde(linear_spec(-2.0), A0, nw=17, delta_cap=0.5)
    # B(t, 0) = -A0'(t) / 2 for P = -2y
    assert np.max(np.abs(sol.B[:, 0, 0] + 0.5 * np.cos(A0.coords))) < 1e-6


def test_phat_quadratic_residual_and_ratio():
    A0 = GridFunction.from_function(lambda t: 1 + 0.1 * t, 0.0, 1.0, 33)
    sol = solve_phat_pde(quadratic_spec(-1.0, -1.0), A0, nw=33)
    assert sol.residual <= 1e-4
    assert sol.picard.max_ratio <= sol.predicted_ratio + 0.1
    assert sol.delta <= sol.delta_contraction + 1e-12
    assert np.allclose(sol.field.values[:, 0, 0], A0.values, atol=1e-12)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        with pytest.raises(UserWarning):
            solve_phat_pde(quadratic_spec(-1.0, -1.0), A0, delta=0.99, nw=17)


def test_frame_round_trip():
    A0 = GridFunction.from_function(lambda t: 1 + 0.1 * t, 0.0, 1.0, 17)
    sol = solve_phat_pde(quadratic_spec(-1.0, -1.0), A0, nw=17)
    d = sol.diag
    assert np.allclose(np.einsum("tij,tjk->tik", d.Rinv, d.R), np.eye(1))


def test_evolve_linear_transport():
    w = np.linspace(0.0, 1.0, 129)
    init = GridFunction(0.0, w[1], np.sin(2 * w))
    ev = evolve_density(linear_spec(1.0), init, t_end=0.5)
    for i in range(ev.field.nt):
        k = ev.valid[i]
        exact = np.sin(2 * (w[:k] + ev.t[i]))
        assert np.max(np.abs(ev.field.values[i, :k, 0] - exact)) < 1e-4
    assert np.allclose(ev.gamma0, ev.t, atol=1e-12)
    assert np.all(np.diff(ev.valid) <= 0)
    with pytest.raises(DomainError):
        evolve_density(linear_spec(1.0), init, t_end=2.0)
    open_ = evolve_density(linear_spec(1.0), init)
    assert open_.t[-1] < 1.0 and open_.valid[-1] >= 4


def test_gronwall():
    t = np.linspace(0.0, 1.0, 11)
    A = WField(0.0, 0.1, 0.05, np.outer(1 + t, np.ones(11)))
    rep = gronwall_compare(A, A, 2 * t, 0.5)
    assert rep["passed"] and np.nanmax(rep["E"]) == 0
    assert rep["delta0"] == pytest.approx(0.25)
    assert delta0_from_gamma(t, 0.1 * t, 0.5) == 1.0
    B = WField(0.0, 0.1, 0.05, A.values + 1e-3)
    assert not gronwall_compare(A, B, 2 * t, 0.5)["passed"]
