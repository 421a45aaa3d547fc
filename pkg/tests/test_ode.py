import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from diffquot.numerics import DomainError, GridFunction
from diffquot.ode import (
    BoxExitError,
    linear_exist_closed_form,
    linear_unique_initial,
    solve_main_ode,
    solve_main_ode_fixed_x,
    solve_perturbation_g,
    texp,
    texp_decay_check,
)
from diffquot.polynomial import Box, diagonalize, linear_spec, quadratic_spec


def trace(func, n=65, stop=1.0):
    return GridFunction.from_function(func, 0.0, stop, n)


def rot_diag(s):
    c, d = np.cos(s), np.sin(s)
    R = np.array([[c, -d], [d, c]])
    return R @ np.diag([1.0 + s, 2.0]) @ R.T


@pytest.mark.parametrize("method", ["magnus", "midpoint"])
def test_texp_scalar_and_diagonal(method):
    res = texp(lambda s: 1.0, 0.0, 1.0, x=0.5, method=method)
    assert np.array_equal(res.at(0), np.eye(1))
    assert res.value[0, 0] == pytest.approx(np.exp(-2.0), rel=1e-8)
    res = texp(lambda s: np.diag([1.0, 1 + s]), 0.0, 1.0, x=0.5, method=method)
    assert np.allclose(res.value, np.diag([np.exp(-2.0), np.exp(-3.0)]), rtol=1e-8, atol=0)


def test_texp_matches_dense_reference():
    x = 0.1

    def rhs(t, y):
        return (-rot_diag(t) @ y.reshape(2, 2) / x).ravel()

    ref = solve_ivp(rhs, (0.0, 1.0), np.eye(2).ravel(), method="DOP853", rtol=1e-13, atol=1e-20).y[:, -1]
    res = texp(rot_diag, 0.0, 1.0, x=x, tol=1e-12)
    assert np.allclose(res.value.ravel(), ref, rtol=1e-8, atol=1e-14)


def test_texp_semigroup():
    ab = texp(rot_diag, 0.0, 0.4, x=0.2, tol=1e-12).value
    bc = texp(rot_diag, 0.4, 1.0, x=0.2, tol=1e-12).value
    ac = texp(rot_diag, 0.0, 1.0, x=0.2, tol=1e-12).value
    assert np.max(np.abs(bc @ ab - ac)) <= 1e-9 * np.linalg.norm(ac, 2) + 1e-15


def test_texp_unscaled_generator():
    res = texp(lambda s: np.array([[0.0, 1.0], [-1.0, 0.0]]), 0.0, np.pi / 2)
    assert np.allclose(res.value, [[0.0, 1.0], [-1.0, 0.0]], atol=1e-9)


def _diag_of(Mt, t):
    return diagonalize(np.array([Mt(s) for s in t]), t[0], t[1] - t[0])


def test_decay_bound_cases():
    t = np.linspace(0.0, 1.0, 17)
    xs = np.geomspace(1e-3, 1.0, 8)
    d = _diag_of(lambda s: np.eye(2), t)
    rep = texp_decay_check(lambda s, x: np.eye(2), d, 0.9, xs)
    assert rep["all_hold"] and rep["x_hold"] == pytest.approx(1.0)
    rep0 = texp_decay_check(lambda s, x: np.eye(2), d, 0.0, xs)
    assert rep0["all_hold"]
    off = np.array([[0.0, 1.0], [1.0, 0.0]])
    d2 = _diag_of(lambda s: np.diag([1.0, 2.0]), t)
    rep = texp_decay_check(lambda s, x: np.diag([1.0, 2.0]) + x * off, d2, 0.9, np.geomspace(1e-3, 0.5, 10))
    assert rep["rows"][0]["holds"]
    held = [r["holds"] for r in rep["rows"]]
    k = held.index(False) if False in held else len(held)
    assert all(held[:k]) and rep["x_hold"] == rep["rows"][k - 1]["x"]
    with pytest.raises(ValueError):
        texp_decay_check(lambda s, x: np.eye(2), d, 1.0, xs)


def test_fixed_x_linear_examples():
    spec = linear_spec(-1.0)
    one = trace(np.ones_like)
    for x in (1e-3, 0.1, 2.0):
        assert np.allclose(solve_main_ode_fixed_x(spec, one, [1.0], x), 1.0, atol=1e-9)
    zero = trace(np.zeros_like)
    traj = solve_main_ode_fixed_x(spec, zero, [1.0], 0.5)
    assert traj[-1, 0] == pytest.approx(np.exp(-2.0), rel=1e-8)


def test_stiff_limit_has_no_ringing():
    traj = solve_main_ode_fixed_x(linear_spec(1.0), trace(lambda t: 0 * t + 0.7), [0.7], 1e-3)
    assert np.max(np.abs(traj - 0.7)) <= 1e-6


def test_reversed_linear_matches_initial_law():
    a = trace(lambda t: 1 + np.sin(2 * t))
    spec = linear_spec(1.0)
    for x in (0.05, 0.2, 0.7):
        traj = solve_main_ode_fixed_x(spec, a, [0.3], x, backward=True, rtol=1e-12, atol=1e-14)
        assert traj[0, 0] == pytest.approx(linear_unique_initial(0.3, a, x, 1.0), abs=1e-6)


def test_closed_forms_by_hand():
    one, zero = trace(np.ones_like), trace(np.zeros_like)
    assert linear_exist_closed_form(1.0, one, 0.8, 0.3) == pytest.approx(1.0, abs=1e-12)
    assert linear_exist_closed_form(2.0, zero, 0.8, 0.3) == pytest.approx(2 * np.exp(-0.8 / 0.3), rel=1e-14)
    ramp = trace(lambda t: t)
    x = 0.5
    assert linear_exist_closed_form(0.0, ramp, 1.0, x) == pytest.approx(1 - x + x * np.exp(-1 / x), abs=1e-8)
    assert linear_unique_initial(1.0, one, 0.3, 1.0) == pytest.approx(1.0, abs=1e-12)
    assert linear_unique_initial(2.0, zero, 0.3, 1.0) == pytest.approx(2 * np.exp(-1 / 0.3), rel=1e-14)
    x = 0.25
    assert linear_unique_initial(0.0, ramp, x, 1.0) == pytest.approx(x * (1 - np.exp(-1 / x) * (1 + 1 / x)), abs=1e-8)
    with pytest.raises(DomainError):
        linear_exist_closed_form(1.0, one, 0.5, 0.0)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.1, 2.0), st.floats(-1.0, 1.0))
def test_forward_solve_matches_closed_form(k, f0):
    a = trace(lambda t: np.cos(k * t))
    xs = np.geomspace(1e-3, 0.5, 6)
    f = solve_main_ode(linear_spec(-1.0), a, np.full(6, f0), xs).values
    ts = a.coords
    ref = np.array([[linear_exist_closed_form(f0, a, t, x) for x in xs] for t in ts])
    assert np.max(np.abs(f - ref)) < 5e-7


def test_box_exit_is_an_error():
    spec = quadratic_spec(-1.0, 1.0, V=Box([-2.0], [2.0]))
    with pytest.raises(BoxExitError) as info:
        solve_main_ode(spec, trace(lambda t: 0 * t + 5.0), [1.0], [0.5])
    assert info.value.t > 0


def test_perturbation_examples():
    M = lambda t, x, g: np.array([[1.0]])
    xs = np.geomspace(1e-3, 0.5, 8)
    zero = GridFunction(0.0, 0.01, np.zeros(101))
    g, rep = solve_perturbation_g(M, lambda t, x, g: np.zeros(1), zero, xs)
    assert np.all(g.values == 0.0) and rep["x_safe"] == pytest.approx(0.5)
    lin = GridFunction.from_function(lambda x: x, 0.0, 1.0, 101)
    g, rep = solve_perturbation_g(M, lambda t, x, g: np.zeros(1), lin, xs)
    ref = xs[None, :] * np.exp(-g.t[:, None] / xs[None, :])
    assert np.max(np.abs(g.values - ref)) < 1e-8
    c = 0.3
    g, rep = solve_perturbation_g(M, lambda t, x, g: np.full(1, c), lin, xs, eps_ball=0.2)
    e = np.exp(-g.t[:, None] / xs[None, :])
    ref = c * xs * (1 - e) + xs * e
    assert np.max(np.abs(g.values - ref)) < 1e-8
    # sup over t is x itself, so the ball of radius 0.2 is left at the first node above it
    assert rep["first_violation"] == pytest.approx(xs[xs > 0.2][0])
    assert rep["x_safe"] == pytest.approx(xs[xs <= 0.2][-1])


def test_perturbation_vectorized_agrees():
    xs = np.geomspace(1e-3, 0.3, 5)
    M1 = lambda t, x, g: np.array([[1.0 + t + g[0] ** 2]])
    Mv = lambda t, x, G: (1.0 + t + G[:, 0] ** 2)[:, None, None]
    g0 = lambda x: np.array([np.sin(x)])
    a, _ = solve_perturbation_g(M1, lambda t, x, g: np.array([t]), g0, xs)
    b, _ = solve_perturbation_g(Mv, lambda t, x, G: np.full((x.size, 1), t), g0, xs, vectorized=True)
    assert np.max(np.abs(a.values - b.values)) < 1e-8


def test_perturbation_preconditions():
    one = GridFunction(0.0, 0.1, np.ones(11))
    with pytest.raises(DomainError):
        solve_perturbation_g(lambda t, x, g: np.eye(1), lambda t, x, g: np.zeros(1), one, [0.1])
    zero = GridFunction(0.0, 0.1, np.zeros(11))
    with pytest.raises(DomainError):
        solve_perturbation_g(lambda t, x, g: -np.eye(1), lambda t, x, g: np.zeros(1), zero, [0.1])
