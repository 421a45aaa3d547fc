"""Per-x integration on the x side: time-ordered exponentials, the main equation at
fixed x, the closed forms of the scalar linear examples and the perturbation equation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline
from scipy.linalg import block_diag, expm

from .laplace import laplace_weights
from .numerics import DomainError, GridError, GridFunction, XField, interp
from .polynomial import Diagonalization, PolynomialSpec, eval_P, eval_P_many, jacobian_many


class StiffnessError(RuntimeError):
    """Raised when an integrator cannot meet its tolerance within the step budget."""

    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} at t = {t:.6g}")
        self.t = t


class BoxExitError(DomainError):
    """Raised when a trajectory leaves the admissible y box."""

    def __init__(self, x, t, y):
        super().__init__(f"solution at x = {x:.4g} left the V box at t = {t:.6g} (y = {np.round(y, 6)})")
        self.x, self.t, self.y = x, t, y


@dataclass
class TexpResult:
    """``E(t)`` solving ``dE/dt = K(t) E``, ``E(a) = I``, stored as scale times direction.

    ``log_scale[i] + log(direction[i])`` is the log of ``E(times[i])``; the split
    keeps very small propagators representable.
    """

    times: np.ndarray
    log_scale: np.ndarray
    direction: np.ndarray
    steps: list = field(default_factory=list)

    @property
    def value(self):
        return np.exp(self.log_scale[-1]) * self.direction[-1]

    def at(self, i):
        return np.exp(self.log_scale[i]) * self.direction[i]

    def log_norms(self):
        return self.log_scale + np.log(np.linalg.norm(self.direction, 2, axis=(1, 2)))


def _as_matrix_fn(Mfun):
    def f(s):
        v = np.asarray(Mfun(s), dtype=float)
        return v.reshape(1, 1) if v.ndim == 0 else v

    return f


def texp(Mfun, a, b, x=None, tol=1e-10, t_eval=None, method="magnus", max_steps=2_000_000):
    """Time-ordered exponential of ``-(1/x) M`` (or of ``M`` when ``x`` is None) on [a, b].

    ``method`` is ``"magnus"`` (fourth order Magnus step: two Gauss points and
    one commutator, exact for constant M at any stiffness) or ``"midpoint"``
    (implicit midpoint, whose step is limited by the stiffness itself).
    Steps are controlled by step doubling
    with local Richardson extrapolation; the error test is relative to the
    current norm, and the propagator is renormalized after every step.
    """
    M = _as_matrix_fn(Mfun)
    if x is not None and x <= 0:
        raise DomainError("scale x must be positive")
    if b < a:
        raise ValueError("need a <= b")
    K = (lambda s: -M(s) / x) if x is not None else M
    m = M(a).shape[0]
    eye = np.eye(m)

    if method not in ("magnus", "midpoint"):
        raise ValueError(f"unknown method {method!r}")
    order = 4 if method == "magnus" else 2
    gauss = np.sqrt(3) / 6

    def step(E, s, h):
        if method == "magnus":
            K1, K2 = K(s + (0.5 - gauss) * h), K(s + (0.5 + gauss) * h)
            omega = 0.5 * h * (K1 + K2) + (np.sqrt(3) / 12) * h**2 * (K2 @ K1 - K1 @ K2)
            return expm(omega) @ E
        Km = K(s + h / 2)
        return np.linalg.solve(eye - 0.5 * h * Km, (eye + 0.5 * h * Km) @ E)

    outs = np.unique(np.clip(np.r_[a, b] if t_eval is None else np.r_[a, np.asarray(t_eval, float), b], a, b))
    times, scales, dirs = [a], [0.0], [eye.copy()]
    E, logs, s = eye.copy(), 0.0, float(a)
    span = b - a
    h = span / 16 if x is None else min(span / 16, 0.05 * x / max(1.0, np.linalg.norm(M(a), 2)))
    h = max(h, 1e-12 * max(span, 1.0))
    history = []
    for target in outs[1:]:
        while s < target - 1e-15 * max(1.0, abs(target)):
            hh = min(h, target - s)
            E1 = step(E, s, hh)
            E2 = step(step(E, s, hh / 2), s + hh / 2, hh / 2)
            nrm = max(np.linalg.norm(E2, 2), 1e-300)
            rich = 2**order - 1
            err = np.linalg.norm(E2 - E1, 2) / (rich * nrm)
            if err <= tol:
                E = E2 + (E2 - E1) / rich
                scale = np.linalg.norm(E, 2)
                if not np.isfinite(scale) or scale == 0:
                    raise StiffnessError("propagator lost all precision", s)
                logs += np.log(scale)
                E = E / scale
                s += hh
                history.append(hh)
                if len(history) > max_steps:
                    raise StiffnessError(f"more than {max_steps} steps", s)
            fac = 4.0 if err == 0 else min(4.0, max(0.2, 0.9 * (tol / err) ** (1 / (order + 1))))
            h = hh * fac if (err <= tol or hh == h) else min(h, hh * fac)
            if h < 1e-14 * max(1.0, span):
                raise StiffnessError(f"step size underflow (h = {h:.3e}, error {err:.3e})", s)
        times.append(float(target))
        scales.append(logs)
        dirs.append(E.copy())
    return TexpResult(np.array(times), np.array(scales), np.array(dirs), history)


def texp_decay_check(Mfun, diag: Diagonalization, delta, x_grid, tol=1e-9):
    """Check ``|Texp(-(1/x) int_a^t M(s,x) ds)| <= |R(t)^{-1}| |R(a)| exp(-(delta/x) int_a^t lambda_0)``.

    The check is made at every node of the diagonalization axis. Returns a
    report with per-x flags and ``x_hold``, the largest grid x below which every
    grid x satisfies the bound (None when the smallest fails).
    """
    if not 0 <= delta < 1:
        raise ValueError("delta must lie in [0, 1)")
    t = diag.t
    a = t[0]
    lam_int = np.concatenate([[0.0], np.cumsum(0.5 * diag.ht * (diag.lam0[1:] + diag.lam0[:-1]))])
    log_pref = np.log(np.linalg.norm(diag.Rinv, 2, axis=(1, 2))) + np.log(np.linalg.norm(diag.R[0], 2))
    xs = np.sort(np.asarray(x_grid, dtype=float))
    rows = []
    for x in xs:
        res = texp(lambda s: Mfun(s, x), a, t[-1], x=x, tol=tol, t_eval=t[1:-1])
        observed = res.log_norms()
        bound = log_pref - (delta / x) * lam_int
        margin = float(np.max(observed - bound))
        rows.append({"x": float(x), "max_log_excess": margin, "holds": bool(margin <= 1e-7)})
    x_hold = None
    for r in rows:
        if not r["holds"]:
            break
        x_hold = r["x"]
    return {"delta": float(delta), "rows": rows, "x_hold": x_hold, "all_hold": all(r["holds"] for r in rows)}


def trace_interpolant(a_trace: GridFunction):
    """C^2 cubic spline of the trace, shared by the solvers and the closed forms.

    Queries are clipped to the t axis of the samples.
    """
    vals = a_trace.values
    if a_trace.n < 4:
        raise GridError("trace needs at least 4 nodes")
    sp = CubicSpline(a_trace.coords, vals, axis=0)
    lo, hi = a_trace.start, a_trace.stop
    return lambda s: sp(np.clip(s, lo, hi))


def _box_event(spec, nx):
    if spec.V is None:
        return None
    lo, hi = spec.V.lo, spec.V.hi

    def event(t, y):
        Y = y.reshape(nx, -1)
        return float(min(np.min(Y - lo), np.min(hi - Y)))

    event.terminal = True
    return event


def solve_main_ode(spec: PolynomialSpec, a_trace: GridFunction, f_start, x_nodes, G=None, backward=False,
                   rtol=1e-10, atol=1e-12):
    """Integrate ``df/dt = [P(t,x,f,a) - P(t,0,a,a)]/x + G(t,x,f,a)`` at all x nodes at once.

    ``a_trace`` gives ``f(t, 0)``; its nodes are the output t nodes.
    ``f_start`` has one row per x node: the value at the first t node, or at
    the last with ``backward=True``. The x nodes are independent, so the
    stacked system has a block diagonal Jacobian ``d_yP / x``. ``G``, when
    given, is called as ``G(t, xs, Y, a)`` on (nx, m) arrays. Leaving the V
    box raises ``BoxExitError``. Returns an XField.
    """
    xs = np.atleast_1d(np.asarray(x_nodes, dtype=float))
    if np.any(xs <= 0):
        raise DomainError("x nodes must be positive")
    m = spec.m
    nx = xs.size
    for row in a_trace.values.reshape(a_trace.n, -1):
        spec.check_z(row)
    F0 = np.asarray(f_start, dtype=float).reshape(nx, m)
    for row in F0:
        spec.check_y(row)
    a = trace_interpolant(a_trace)
    inv_x = (1.0 / xs)[:, None]

    def rhs(t, y):
        at = np.atleast_1d(a(t))
        Y = y.reshape(nx, m)
        base = eval_P(spec, t, 0.0, at, at, check=False)
        out = (eval_P_many(spec, t, xs, Y, at) - base[None, :]) * inv_x
        if G is not None:
            out = out + np.asarray(G(t, xs, Y, at), dtype=float).reshape(nx, m)
        return out.ravel()

    def jac(t, y):
        J = jacobian_many(spec, t, xs, y.reshape(nx, m), np.atleast_1d(a(t))) * inv_x[:, :, None]
        return block_diag(*J)

    ts = a_trace.coords
    span = (ts[-1], ts[0]) if backward else (ts[0], ts[-1])
    t_eval = ts[::-1] if backward else ts
    ev = _box_event(spec, nx)
    sol = solve_ivp(rhs, span, F0.ravel(), method="Radau", t_eval=t_eval, jac=jac, rtol=rtol, atol=atol,
                    events=ev, first_step=min(xs.min(), ts[-1] - ts[0]) * 1e-2)
    if ev is not None and sol.t_events[0].size:
        y = sol.y_events[0][0].reshape(nx, m)
        inside = np.all((y >= spec.V.lo - 1e-9) & (y <= spec.V.hi + 1e-9), axis=1)
        k = int(np.argmin(inside)) if not inside.all() else 0
        raise BoxExitError(float(xs[k]), float(sol.t_events[0][0]), y[k])
    if not sol.success:
        raise StiffnessError(f"integration failed: {sol.message}")
    vals = sol.y.T.reshape(-1, nx, m)
    if backward:
        vals = vals[::-1]
    vals = vals[..., 0] if m == 1 else vals
    return XField(a_trace.start, a_trace.h, xs, vals, zero_trace=a_trace)


def solve_main_ode_fixed_x(spec: PolynomialSpec, a_trace: GridFunction, f0x, x, G=None, backward=False,
                           rtol=1e-10, atol=1e-12):
    """Single-x version of ``solve_main_ode``; returns an (nt, m) array.

    ``G`` is called as ``G(t, x, y, a)``.
    """
    if x <= 0:
        raise DomainError("x must be positive")
    Gm = None
    if G is not None:
        Gm = lambda t, xs, Y, at: np.asarray(G(t, xs[0], Y[0], at), dtype=float)[None]
    out = solve_main_ode(spec, a_trace, np.atleast_1d(f0x)[None, :], [x], Gm, backward, rtol, atol)
    return out.values.reshape(a_trace.n, spec.m)


def _resample(a: GridFunction, lo, hi, n):
    s = np.linspace(lo, hi, n)
    vals = np.asarray(trace_interpolant(a)(s), dtype=float)
    if vals.ndim > 1 and vals.shape[1] != 1:
        raise GridError("closed-form laws need a scalar trace")
    return s, vals.reshape(n)


def linear_exist_closed_form(f0x, a_trace: GridFunction, t, x, n=2049):
    """``e^{-t/x} f0 + (1/x) int_0^t e^{(s-t)/x} a(s) ds`` with the integral by product quadrature."""
    if x <= 0:
        raise DomainError("x must be positive")
    if t == 0:
        return float(f0x)
    s, av = _resample(a_trace, 0.0, t, n)
    q = laplace_weights(n, t / (n - 1), x)[0]
    return float(np.exp(-t / x) * f0x + q @ av[::-1])


def linear_unique_initial(f_end, a_trace: GridFunction, x, eps1, n=2049):
    """``f(0,x) = e^{-eps1/x} f(eps1,x) + (1/x) int_0^{eps1} e^{-u/x} a(u) du``."""
    if x <= 0:
        raise DomainError("x must be positive")
    s, av = _resample(a_trace, 0.0, eps1, n)
    q = laplace_weights(n, eps1 / (n - 1), x)[0]
    return float(np.exp(-eps1 / x) * f_end + q @ av)


def solve_perturbation_g(Mfun, G1fun, g0: GridFunction, x_grid, eps1=1.0, nt=65, eps_ball=0.1,
                         rtol=1e-9, atol=1e-12, vectorized=False):
    """Solve ``dg/dt = -(1/x) M(t,x,g) g + G(t,x,g)`` at each x of ``x_grid``.

    ``g0`` is the initial value, a grid function of x starting at x = 0 or a
    callable of x; it must vanish at x = 0; ``M(0,0,0)`` must have real
    positive eigenvalues. With ``vectorized=True`` the callables take an
    array of x and an (nx, m) array of g, return (nx, m, m) and (nx, m), and
    all x are integrated as one block diagonal system. Returns
    ``(field, report)``; the report lists ``sup_t |g(t,x)|`` per x, the
    smallest x leaving the ``eps_ball``, and ``x_safe``, the largest grid x
    below which every trajectory stays inside.
    """
    if callable(g0):
        g_at = lambda x: np.atleast_1d(np.asarray(g0(x), dtype=float))
    else:
        if g0.start != 0.0:
            raise GridError("g0 must be sampled from x = 0")
        g_at = lambda x: np.atleast_1d(interp(g0, x))
    origin = g_at(0.0)
    if np.max(np.abs(origin)) > 1e-12:
        raise DomainError("g0 must vanish at x = 0")
    m = origin.size
    if vectorized:
        M0 = np.asarray(Mfun(0.0, np.zeros(1), np.zeros((1, m))), dtype=float).reshape(m, m)
    else:
        M0 = np.asarray(Mfun(0.0, 0.0, np.zeros(m)), dtype=float).reshape(m, m)
    ev = np.linalg.eigvals(M0)
    if np.max(np.abs(ev.imag)) > 1e-10 or np.min(ev.real) <= 0:
        raise DomainError("M(0,0,0) must have real positive eigenvalues")
    xs = np.sort(np.asarray(x_grid, dtype=float))
    if np.any(xs <= 0):
        raise DomainError("x nodes must be positive")
    ts = np.linspace(0.0, eps1, nt)
    Y0 = np.array([g_at(x).reshape(m) for x in xs])
    if vectorized:
        vals = _perturbation_stacked(Mfun, G1fun, Y0, xs, ts, rtol, atol)
    else:
        vals = np.empty((nt, xs.size, m))
        for k, x in enumerate(xs):

            def rhs(t, g, x=x):
                Mm = np.asarray(Mfun(t, x, g), dtype=float).reshape(m, m)
                return -(Mm @ g) / x + np.asarray(G1fun(t, x, g), dtype=float).reshape(m)

            def jac(t, g, x=x):
                return -np.asarray(Mfun(t, x, g), dtype=float).reshape(m, m) / x

            sol = solve_ivp(rhs, (0.0, eps1), Y0[k], method="Radau", t_eval=ts, jac=jac, rtol=rtol, atol=atol)
            if not sol.success or sol.y.shape[1] != nt:
                raise StiffnessError(f"perturbation solve failed at x = {x:.4g}: {sol.message}",
                                     float(sol.t[-1]) if sol.t.size else None)
            vals[:, k] = sol.y.T
    rows = []
    for k, x in enumerate(xs):
        sup = float(np.max(np.linalg.norm(vals[:, k], axis=1)))
        rows.append({"x": float(x), "sup": sup, "inside": sup <= eps_ball})
    first_bad = next((r["x"] for r in rows if not r["inside"]), None)
    x_safe = None
    for r in rows:
        if not r["inside"]:
            break
        x_safe = r["x"]
    fieldv = vals[..., 0] if m == 1 else vals
    report = {"eps_ball": eps_ball, "rows": rows, "first_violation": first_bad, "x_safe": x_safe}
    return XField(0.0, ts[1] - ts[0], xs, fieldv), report


def _perturbation_stacked(Mfun, G1fun, Y0, xs, ts, rtol, atol):
    nx, m = Y0.shape
    inv_x = (1.0 / xs)[:, None]

    def rhs(t, y):
        G = y.reshape(nx, m)
        Mm = np.asarray(Mfun(t, xs, G), dtype=float).reshape(nx, m, m)
        return (-np.einsum("kij,kj->ki", Mm, G) * inv_x + np.asarray(G1fun(t, xs, G)).reshape(nx, m)).ravel()

    def jac(t, y):
        Mm = np.asarray(Mfun(t, xs, y.reshape(nx, m)), dtype=float).reshape(nx, m, m)
        return block_diag(*(-Mm * inv_x[:, :, None]))

    sol = solve_ivp(rhs, (ts[0], ts[-1]), Y0.ravel(), method="Radau", t_eval=ts, jac=jac, rtol=rtol, atol=atol,
                    first_step=min(xs.min(), ts[-1] - ts[0]) * 1e-2)
    if not sol.success or sol.y.shape[1] != ts.size:
        raise StiffnessError(f"perturbation solve failed: {sol.message}", float(sol.t[-1]) if sol.t.size else None)
    return sol.y.T.reshape(ts.size, nx, m)
