"""Transport systems ``dA/dt = -M(t) dA/dw + G(A)`` on the w side.

The existence solver reduces the equation for P-hat twice in w, moves to
the frame diagonalizing M and solves the resulting level-0 system by a
Picard iteration along characteristics. The uniqueness direction, where
characteristics leave through w = 0 and the trace is an unknown, is
handled by a separate marching solver for initial densities.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator

from .numerics import DomainError, GridError, GridFunction, WField, cumint_array, diff_array
from .polynomial import (
    Diagonalization,
    DiagonalizationError,
    PolynomialSpec,
    SmoothingOperation,
    TraceData,
    assemble_phat,
    diagonalize,
    jacobian_dyP,
    phat_split,
    smoothing_operation,
    transport_matrix,
)

log = logging.getLogger(__name__)


class ContractionError(RuntimeError):
    """Raised when the Picard iteration fails to contract."""

    def __init__(self, message, ratios):
        super().__init__(message)
        self.ratios = list(ratios)


# ---------------------------------------------------------------------------
# Characteristic charts
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CharacteristicChart:
    """Characteristics ``dw/dt = lambda(t)`` of one component on [0, eps1] x [0, delta0].

    Curves with ``u >= 0`` leave the boundary point (u, 0); curves with
    ``u < 0`` leave the initial line at (0, -u). ``v`` is the time spent on
    the curve. ``Lambda(t) = int_0^t lambda`` is piecewise linear between
    the sample nodes, so the forward and inverse maps are exact inverses.
    """

    t_nodes: np.ndarray
    lam: np.ndarray
    eps1: float
    delta0: float
    cum: np.ndarray = field(init=False)

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        if np.any(lam <= 0):
            raise DomainError("characteristic speed must be positive")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "t_nodes", np.asarray(self.t_nodes, dtype=float))
        object.__setattr__(self, "cum", _cumtrap(self.t_nodes, lam))

    @property
    def c0(self):
        return float(self.lam.min())

    def Lambda(self, t):
        return np.interp(t, self.t_nodes, self.cum)

    def Lambda_inv(self, s):
        return np.interp(s, self.cum, self.t_nodes)

    def H(self, u, v):
        """Point reached after time v on the curve labelled u."""
        u, v = np.broadcast_arrays(np.asarray(u, dtype=float), np.asarray(v, dtype=float))
        t = np.where(u >= 0, u + v, v)
        w = np.where(u >= 0, self.Lambda(u + v) - self.Lambda(np.maximum(u, 0.0)), -u + self.Lambda(v))
        return t, w

    def H_inv(self, t, w):
        """Curve label u and elapsed time v of the point (t, w)."""
        t, w = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(w, dtype=float))
        Lt = self.Lambda(t)
        from_boundary = w <= Lt
        u_b = self.Lambda_inv(np.maximum(Lt - w, 0.0))
        u = np.where(from_boundary, u_b, -(w - Lt))
        v = np.where(from_boundary, t - u_b, t)
        return u, v

    def v_bound(self):
        """The bound ``delta0 / c0`` on the time spent by any curve in the box."""
        return self.delta0 / self.c0


def _cumtrap(t, y):
    """Trapezoid prefix integral of y (along axis 0) over the nodes t."""
    y = np.asarray(y, dtype=float)
    dt = np.diff(np.asarray(t, dtype=float)).reshape((-1,) + (1,) * (y.ndim - 1))
    out = np.zeros_like(y)
    out[1:] = np.cumsum(0.5 * dt * (y[1:] + y[:-1]), axis=0)
    return out


def build_chart(lam, eps1, delta0, n=1025):
    """Chart of the characteristics of speed ``lam``.

    ``lam`` is a GridFunction over t, a callable (sampled on ``n`` nodes) or
    a positive constant.
    """
    if isinstance(lam, GridFunction):
        t, vals = lam.coords, lam.values
    elif callable(lam):
        t = np.linspace(0.0, eps1, n)
        vals = np.broadcast_to(np.asarray(lam(t), dtype=float), t.shape)
    else:
        t = np.linspace(0.0, eps1, 2)
        vals = np.full(2, float(lam))
    return CharacteristicChart(t, vals, float(eps1), float(delta0))


# ---------------------------------------------------------------------------
# Picard iteration for the level-0 system
# ---------------------------------------------------------------------------


@dataclass
class PicardResult:
    field: WField
    iterations: int
    ratios: list
    differences: list

    @property
    def last_ratio(self):
        return self.ratios[-1] if self.ratios else 0.0

    @property
    def max_ratio(self):
        return max(self.ratios) if self.ratios else 0.0


def _slab_march(F, boundary, lam, ht, hw, slope=None):
    """One application of the Picard map: integrate F along characteristics.

    ``F`` has shape (nt, nw, m), ``boundary`` (nt, m), ``lam`` (nt, m).
    Values are carried from slab to slab by the trapezoid rule along each
    characteristic; the initial line is ``boundary[0] + slope * w``.
    """
    nt, nw, m = F.shape
    w = hw * np.arange(nw)
    out = np.empty_like(F)
    out[0] = boundary[0] + (0.0 if slope is None else w[:, None] * slope[None, :])
    for i in range(1, nt):
        for j in range(m):
            dL = 0.5 * ht * (lam[i - 1, j] + lam[i, j])
            foot = w - dL
            inside = foot >= 0
            val = np.empty(nw)
            if inside.any():
                prev = CubicSpline(w, out[i - 1, :, j])
                Fprev = CubicSpline(w, F[i - 1, :, j])
                fi = foot[inside]
                val[inside] = prev(fi) + 0.5 * ht * (Fprev(fi) + F[i, inside, j])
            if (~inside).any():
                theta = w[~inside] / dL
                # entry time u = t_i - theta*ht; linear in the slab
                a0 = (1 - theta) * boundary[i, j] + theta * boundary[i - 1, j]
                f0 = (1 - theta) * F[i, 0, j] + theta * F[i - 1, 0, j]
                val[~inside] = a0 + 0.5 * theta * ht * (f0 + F[i, ~inside, j])
            out[i, :, j] = val
    return out


def picard_solve_L0(forcing, boundary, lam, ht, hw, nw, t0=0.0, tol=1e-10, max_iter=200):
    """Fixed point of ``D = D0 + int forcing(D)`` along the characteristics of speed ``lam``.

    ``forcing`` maps an (nt, nw, m) array to one of the same shape and must be
    causal in w. ``boundary`` (nt, m) is the trace ``D(t, 0)``; on the curves
    starting from the initial line the data is linear in w, with the slope
    making the field continuously differentiable across the characteristic
    from the corner: ``lam(0) slope = forcing(0, 0) - d/dt boundary(0)``.
    """
    boundary = np.asarray(boundary, dtype=float).reshape(len(boundary), -1)
    lam = np.asarray(lam, dtype=float).reshape(boundary.shape)
    if np.any(lam <= 0):
        raise DomainError("characteristic speeds must be positive")
    nt, m = boundary.shape
    D = _slab_march(np.zeros((nt, nw, m)), boundary, lam, ht, hw)
    db0 = _spline_dt(boundary, ht)[0]
    diffs, ratios = [], []
    bad = 0
    for it in range(1, max_iter + 1):
        F = forcing(D)
        Dn = _slab_march(F, boundary, lam, ht, hw, (F[0, 0] - db0) / lam[0])
        d = float(np.max(np.abs(Dn - D)))
        if not np.isfinite(d):
            raise ContractionError("Picard iterate is not finite", ratios)
        if diffs and diffs[-1] > 1e-13:
            # ratios of differences at rounding level carry no information
            r = d / diffs[-1]
            ratios.append(r)
            bad = bad + 1 if r >= 1 else 0
            if bad >= 3:
                raise ContractionError(f"no contraction: ratio {r:.3f} for 3 iterations", ratios)
        diffs.append(d)
        D = Dn
        if d <= tol:
            return PicardResult(WField(t0, ht, hw, D), it, ratios, diffs)
    raise ContractionError(f"no convergence in {max_iter} iterations (last difference {diffs[-1]:.3e})", ratios)


# ---------------------------------------------------------------------------
# Reduction in w and the diagonal frame
# ---------------------------------------------------------------------------


def _spline_dt(y, h):
    """Time derivative at the nodes from a not-a-knot cubic spline (third order, also at the ends)."""
    y = np.asarray(y, dtype=float)
    if y.shape[0] < 4:
        return diff_array(y, h, 1, axis=0)
    return CubicSpline(h * np.arange(y.shape[0]), y, axis=0)(h * np.arange(y.shape[0]), 1)


def reduce_level(op: SmoothingOperation, M):
    """One reduction step: the operation ``B -> d/dw G(A0 + int B)`` and the trace of B.

    The new trace is ``M^{-1} (-d/dt(last trace) + G^k)`` where G^k is the
    w = 0 value of ``op``. Returns ``(derived_op, new_trace)``.
    """
    tr = op.traces
    known = [tr.a0] + [a for a in (tr.a1, tr.a2) if a is not None]
    if len(known) >= 3:
        raise ValueError("operation is already at level 0")
    M = np.asarray(M, dtype=float).reshape(tr.nt, op.m, op.m)
    Gk = op.trace_value()
    last = known[-1]
    dlast = _spline_dt(last, tr.ht)
    try:
        new = np.linalg.solve(M, (-dlast + Gk)[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise DiagonalizationError("transport matrix is singular") from exc
    traces = TraceData(tr.t0, tr.ht, *(known + [new]))
    return op.with_traces(traces).derivative(), new


def level0_forcing(op2: SmoothingOperation, diag: Diagonalization, B0, hw):
    """Right-hand side ``Rdot R^{-1} D + R G(R^{-1} D)`` of the level-0 system in the diagonal frame.

    ``G(C)`` evaluates ``op2`` with ``A' = B0 + int_0^w C`` and ``A'' = C``.
    """
    R, Rinv = diag.R, diag.Rinv
    drift = np.einsum("tij,tjk->tik", diag.Rdot, Rinv)
    m = op2.m
    B0 = np.asarray(B0, dtype=float).reshape(diag.nt, m)

    def forcing(D):
        C = np.einsum("tij,twj->twi", Rinv, D)
        Ap = B0[:, None, :] + cumint_array(C, hw, axis=1)
        derivs = {}
        for l in range(m):
            derivs[(l, 1)] = Ap[:, :, l]
            derivs[(l, 2)] = C[:, :, l]
        G = op2.evaluate(derivs, hw, D.shape[1])
        return np.einsum("tij,twj->twi", drift, D) + np.einsum("tij,twj->twi", R, G)

    return forcing


def diagonalize_system(forcing_C, diag: Diagonalization):
    """Conjugate an operation on C-fields into the frame ``D = R C``."""
    R, Rinv = diag.R, diag.Rinv
    drift = np.einsum("tij,tjk->tik", diag.Rdot, Rinv)

    def forcing(D):
        C = np.einsum("tij,twj->twi", Rinv, D)
        return np.einsum("tij,twj->twi", drift, D) + np.einsum("tij,twj->twi", R, forcing_C(C))

    return forcing


def contraction_delta(c0, C4, G1, G2, m):
    """``min(c0 / (2 G2(sqrt(m) M)), c0 C4 / G1(sqrt(m) M))`` with ``M = 2 C4``.

    ``G1`` and ``G2`` are numbers (already evaluated) or increasing functions.
    """
    M = 2.0 * C4
    arg = np.sqrt(m) * M
    g1 = G1(arg) if callable(G1) else G1
    g2 = G2(arg) if callable(G2) else G2
    if min(c0, C4, g1, g2) <= 0 or m < 1:
        raise ValueError("contraction radius needs positive c0, C4, G1, G2 and m >= 1")
    return float(min(0.5 * c0 / g2, c0 * C4 / g1))


def estimate_forcing_bounds(forcing, nt, nw, m, bound, n=50, seed=0, inflate=1.5):
    """Sampled size and Lipschitz constants ``(G1, G2)`` of a forcing on fields with sup <= bound.

    Fields are random smooth trigonometric sums on the (t, w) box. The values
    are estimates of the suprema, inflated by ``inflate``.
    """
    rng = np.random.default_rng(seed)
    tt = np.linspace(0.0, 1.0, nt)[:, None, None]
    ww = np.linspace(0.0, 1.0, nw)[None, :, None]

    def sample():
        f = np.zeros((nt, nw, m))
        for _ in range(3):
            k1, k2 = rng.integers(0, 4, size=2)
            ph = rng.random(2) * 2 * np.pi
            amp = rng.standard_normal(m)[None, None, :]
            f += amp * np.cos(np.pi * k1 * tt + ph[0]) * np.cos(np.pi * k2 * ww + ph[1])
        s = np.max(np.abs(f))
        return f * (bound * rng.random() / s) if s > 0 else f

    g1 = g2 = 0.0
    for _ in range(n):
        a, b = sample(), sample()
        Fa, Fb = forcing(a), forcing(b)
        g1 = max(g1, float(np.max(np.abs(Fa))), float(np.max(np.abs(Fb))))
        dab = float(np.max(np.abs(a - b)))
        if dab > 0:
            g2 = max(g2, float(np.max(np.abs(Fa - Fb))) / dab)
    return inflate * g1, inflate * g2


# ---------------------------------------------------------------------------
# The P-hat equation
# ---------------------------------------------------------------------------


@dataclass
class PhatSolution:
    """Solution of ``dA/dt = P-hat(t, A, A(t,0))`` with prescribed trace, plus diagnostics."""

    field: WField
    B: np.ndarray
    C: np.ndarray
    diag: Diagonalization
    delta: float
    orientation: str
    picard: PicardResult
    G1: float
    G2: float
    delta_contraction: float
    residual: float

    @property
    def predicted_ratio(self):
        return self.delta * self.G2 / self.diag.c0

    def summary(self):
        return {
            "orientation": self.orientation,
            "delta": self.delta,
            "delta_contraction": self.delta_contraction,
            "G1_estimate": self.G1,
            "G2_estimate": self.G2,
            "c0": self.diag.c0,
            "C4": self.diag.C4,
            "picard_iterations": self.picard.iterations,
            "picard_max_ratio": self.picard.max_ratio,
            "predicted_ratio": self.predicted_ratio,
            "residual": self.residual,
        }


def regime_of(spec: PolynomialSpec, a0, t):
    """``"existence"`` when -d_yP has positive eigenvalues along the trace, ``"uniqueness"`` when +d_yP does."""
    eig = np.array([np.linalg.eigvals(jacobian_dyP(spec, ti, 0.0, a, a)) for ti, a in zip(t, a0)])
    if np.max(np.abs(eig.imag)) > 1e-10:
        return None
    if np.all(eig.real < 0):
        return "existence"
    if np.all(eig.real > 0):
        return "uniqueness"
    return None


def phat_residual(spec, Avals, Bvals, t0, ht, hw, a0):
    """``sup |dA/dt - P-hat(t, A, A(t,0))|`` on the grid, with A' supplied as B."""
    nt = Avals.shape[0]
    dA = diff_array(Avals, ht, 1, axis=0)
    res = 0.0
    for i in range(nt):
        t = t0 + i * ht
        ph = assemble_phat(spec, GridFunction(0.0, hw, Avals[i]), a0[i], t, Aprime=GridFunction(0.0, hw, Bvals[i]))
        res = max(res, float(np.max(np.abs(dA[i] - ph.values))))
    return res


def solve_phat_pde(spec: PolynomialSpec, A0: GridFunction, delta=None, nw=65, orientation="auto",
                   tol=1e-10, max_iter=200, bound_samples=50, seed=0, delta_cap=None):
    """Solve ``dA/dt = P-hat(t, A(t,.), A(t,0))`` with ``A(t, 0) = A0(t)`` on [0, eps1] x [0, delta].

    In the existence orientation (-d_yP positive along the trace) the problem
    is solved directly. In the reversed orientation (+d_yP positive) it is
    solved for the time-reversed spec and flipped back. ``delta`` defaults to
    the smallest of the contraction radius, eps2 and ``delta_cap``.
    """
    a0 = A0.values.reshape(A0.n, -1)
    if a0.shape[1] != spec.m:
        raise GridError("trace has the wrong number of components")
    t = A0.coords
    if orientation == "auto":
        orientation = regime_of(spec, a0, t)
        orientation = {"existence": "existence", "uniqueness": "reversed"}.get(orientation)
        if orientation is None:
            raise DiagonalizationError("d_yP is not definite along the trace")
    if orientation == "reversed":
        rspec = spec.reversed()
        rA0 = GridFunction(A0.start, A0.h, a0[::-1])
        sol = solve_phat_pde(rspec, rA0, delta, nw, "existence", tol, max_iter, bound_samples, seed, delta_cap)
        flip = lambda v: v[::-1].copy()
        Av = flip(sol.field.values)
        Bv, Cv = flip(sol.B), flip(sol.C)
        res = phat_residual(spec, Av, Bv, A0.start, A0.h, sol.field.hw, a0)
        return PhatSolution(WField(A0.start, A0.h, sol.field.hw, Av), Bv, Cv, sol.diag.reversed(), sol.delta,
                            "reversed", sol.picard, sol.G1, sol.G2, sol.delta_contraction, res)
    if orientation != "existence":
        raise ValueError(f"unknown orientation {orientation!r}")

    traces = TraceData(A0.start, A0.h, a0)
    M = transport_matrix(spec, traces, sign=-1.0)
    diag = diagonalize(M, A0.start, A0.h, a0)
    if diag.c0 <= 0:
        raise DiagonalizationError("-d_yP has non-positive eigenvalues")
    op = smoothing_operation(spec, traces)
    op1, B0 = reduce_level(op, M)
    op2, C0 = reduce_level(op1, M)
    D0 = np.einsum("tij,tj->ti", diag.R, C0)

    wmax = spec.eps2 if delta_cap is None else min(spec.eps2, delta_cap)
    probe_hw = wmax / (nw - 1)
    probe = level0_forcing(op2, diag, B0, probe_hw)
    C4 = diag.C4 if diag.C4 else 1.0
    Mb = 2.0 * max(C4, float(np.max(np.abs(D0))) if D0.size else 0.0)
    G1, G2 = estimate_forcing_bounds(probe, A0.n, nw, spec.m, np.sqrt(spec.m) * Mb, n=bound_samples, seed=seed)
    if G1 > 0 and G2 > 0:
        d_con = contraction_delta(diag.c0, C4, G1, G2, spec.m)
    else:
        d_con = np.inf
    if delta is None:
        delta = min(d_con, wmax)
    elif delta > d_con:
        warnings.warn(f"delta = {delta:.4g} exceeds the estimated contraction radius {d_con:.4g}", stacklevel=2)
    if delta > spec.eps2 + 1e-12:
        raise DomainError("delta cannot exceed eps2")
    hw = delta / (nw - 1)
    forcing = level0_forcing(op2, diag, B0, hw)
    pic = picard_solve_L0(forcing, D0, diag.lam, A0.h, hw, nw, A0.start, tol, max_iter)
    D = pic.field.values
    C = np.einsum("tij,twj->twi", diag.Rinv, D)
    B = B0[:, None, :] + cumint_array(C, hw, axis=1)
    A = a0[:, None, :] + cumint_array(B, hw, axis=1)
    res = phat_residual(spec, A, B, A0.start, A0.h, hw, a0)
    return PhatSolution(WField(A0.start, A0.h, hw, A), B, C, diag, float(delta), "existence", pic, G1, G2,
                        float(d_con), res)


# ---------------------------------------------------------------------------
# Initial-density evolution in the uniqueness direction
# ---------------------------------------------------------------------------


@dataclass
class DensityEvolution:
    """A(t, w) evolved from A(0, w); entries outside the domain of dependence are NaN."""

    field: WField
    trace: np.ndarray
    valid: np.ndarray
    lam: np.ndarray

    @property
    def t(self):
        return self.field.t

    @property
    def gamma0(self):
        return _cumtrap(self.t, self.lam).max(axis=1)


def _aligned_eig(J, prev):
    m = J.shape[0]
    if np.max(np.abs(J - np.diag(np.diag(J)))) <= 1e-14 * max(1.0, np.max(np.abs(J))):
        return np.eye(m), np.eye(m), np.diag(J).copy()
    vals, vecs = np.linalg.eig(J)
    if np.max(np.abs(vals.imag)) > 1e-10 * max(1.0, np.max(np.abs(vals))):
        raise DiagonalizationError("complex eigenvalues along the trace")
    vals, vecs = vals.real, vecs.real
    order = np.argsort(vals)
    vals, vecs = vals[order], vecs[:, order] / np.linalg.norm(vecs[:, order], axis=0)
    if prev is not None:
        vecs = vecs * np.sign(np.sum(vecs * prev, axis=0) + 1e-300)
    return np.linalg.inv(vecs), vecs, vals


def _backward_diff(A, h):
    """Causal second order differences: node k uses nodes k, k-1, k-2 (one-sided at the start)."""
    out = np.empty_like(A)
    out[2:] = (3 * A[2:] - 4 * A[1:-1] + A[:-2]) / (2 * h)
    out[0] = (-3 * A[0] + 4 * A[1] - A[2]) / (2 * h)
    out[1] = (A[2] - A[0]) / (2 * h)
    return out


def evolve_density(spec: PolynomialSpec, A_init: GridFunction, t_end=None, nt=None, t0=0.0, dt=None):
    """Evolve ``dA/dt = P-hat(t, A, A(t,0))`` from the density A(0, .) when +d_yP is positive.

    Characteristics run toward w = 0 at speeds ``lambda_j(t)`` (eigenvalues of
    d_yP at the current trace), so the trace is produced by the data and the
    domain shrinks: only w with ``w + gamma(t) <= delta'`` stays determined.
    Each step is a semi-Lagrangian Heun step in the diagonal frame with local
    monotone cubic interpolation at the feet and causal differences in w.
    With ``t_end=None`` the march uses steps ``dt`` (default ``hw / max lambda``)
    and stops when the domain is exhausted instead of raising.
    """
    A = A_init.values.reshape(A_init.n, -1).astype(float)
    m, hw, nw = A.shape[1], A_init.h, A_init.n
    if m != spec.m:
        raise GridError("density has the wrong number of components")
    w = hw * np.arange(nw)
    R, Rinv, lam = _aligned_eig(jacobian_dyP(spec, t0, 0.0, A[0], A[0]), None)
    if np.any(lam <= 0):
        raise DiagonalizationError("d_yP must have positive eigenvalues for the uniqueness direction")
    open_ended = t_end is None
    if open_ended:
        dt = hw / lam.max() if dt is None else dt
        nt = int(np.ceil(4 * nw * lam.max() / lam.min())) + 2
    else:
        if nt is None:
            nt = int(np.ceil((t_end - t0) * lam.max() / hw)) + 1
        nt = max(nt, 2)
        dt = (t_end - t0) / (nt - 1)
    vals = np.full((nt, nw, m), np.nan)
    vals[0] = A
    lams = np.empty((nt, m))
    lams[0] = lam
    valid = np.empty(nt, dtype=int)
    valid[0] = nw
    K = nw
    Rdot = np.zeros((m, m))

    def smooth(Arow, t):
        G = GridFunction(0.0, hw, Arow)
        Gp = GridFunction(0.0, hw, _backward_diff(Arow, hw))
        return phat_split(spec, G, Arow[0], t, Aprime=Gp)[1].values.reshape(Arow.shape)

    for n in range(1, nt):
        t = t0 + (n - 1) * dt
        wk = w[:K]
        An = A[:K]
        Dn = An @ R.T
        Sn = smooth(An, t)
        reach = wk[-1]
        Knew = int(np.searchsorted(w, reach - lam.max() * dt + 1e-9 * hw, side="right"))
        if Knew < 4:
            if open_ended:
                nt = n
                break
            raise DomainError(f"domain of dependence exhausted at t = {t:.4g}")
        wn = w[:Knew]
        Phi = Sn @ R.T + An @ Rdot.T
        Dint = PchipInterpolator(wk, Dn, axis=0)
        Pint = PchipInterpolator(wk, Phi, axis=0)
        feet = np.minimum(wn[:, None] + lam[None, :] * dt, reach)
        Dp = np.empty((Knew, m))
        for j in range(m):
            Dp[:, j] = Dint(feet[:, j])[:, j] + dt * Pint(feet[:, j])[:, j]
        Ap = Dp @ (Rinv + dt * (-Rinv @ Rdot @ Rinv)).T
        Rs, Rinvs, lams_ = _aligned_eig(jacobian_dyP(spec, t + dt, 0.0, Ap[0], Ap[0]), Rinv)
        if np.any(lams_ <= 0):
            raise DiagonalizationError(f"d_yP lost positivity at t = {t + dt:.4g}")
        Rdot_s = (Rs - R) / dt
        Phi_c = Sn @ R.T + An @ Rdot_s.T
        Pint = PchipInterpolator(wk, Phi_c, axis=0)
        Ss = smooth(Ap, t + dt)
        Phis = Ss @ Rs.T + Ap @ Rdot_s.T
        lbar = 0.5 * (lam + lams_)
        feet = np.minimum(wn[:, None] + lbar[None, :] * dt, reach)
        Dc = np.empty((Knew, m))
        for j in range(m):
            Dc[:, j] = Dint(feet[:, j])[:, j] + 0.5 * dt * (Pint(feet[:, j])[:, j] + Phis[:, j])
        A = Dc @ Rinvs.T
        R, Rinv, lam = _aligned_eig(jacobian_dyP(spec, t + dt, 0.0, A[0], A[0]), Rinv)
        Rdot = Rdot_s
        K = Knew
        vals[n, :K] = A
        lams[n] = lam
        valid[n] = K
    vals, lams, valid = vals[:nt], lams[:nt], valid[:nt]
    return DensityEvolution(WField(t0, dt, hw, vals), vals[:, 0].copy(), valid, lams)


# ---------------------------------------------------------------------------
# Comparison of two solutions
# ---------------------------------------------------------------------------


def delta0_from_gamma(t, gamma0, delta_prime):
    """``gamma0^{-1}(delta')`` when ``gamma0(end) >= delta'``, else the end of the t axis."""
    if gamma0[-1] >= delta_prime:
        return float(np.interp(delta_prime, gamma0, t))
    return float(t[-1])


def gronwall_compare(A: WField, B: WField, gamma0, delta_prime, tol=1e-6):
    """Energy ``E(v) = sup_{w <= delta' - gamma0(v)} |A - B|(v, w)`` and the trace verdict.

    ``gamma0`` is sampled on the t axis of the fields (``max_j int_0^t lambda_j``).
    Returns a dict with E, delta0, the trace gap and a pass flag.
    """
    if A.values.shape != B.values.shape or abs(A.ht - B.ht) > 1e-14 or abs(A.hw - B.hw) > 1e-14:
        raise GridError("fields must share a grid")
    t, w = A.t, A.w
    gamma0 = np.asarray(gamma0, dtype=float)
    g = A.values - B.values
    g = g if g.ndim == 3 else g[..., None]
    E = np.zeros(A.nt)
    for i in range(A.nt):
        mask = w <= delta_prime - gamma0[i] + 1e-12
        row = np.abs(g[i][mask])
        row = row[np.isfinite(row)]
        E[i] = float(row.max()) if row.size else np.nan
    d0 = delta0_from_gamma(t, gamma0, delta_prime)
    gap = np.max(np.abs(g[:, 0]), axis=1)
    inside = t <= d0 + 1e-12
    trace_gap = float(np.max(gap[inside]))
    slope = None
    pos = np.isfinite(E) & (E > 0)
    if pos.sum() >= 3:
        slope = float(np.polyfit(t[pos], np.log(E[pos]), 1)[0])
    return {
        "E": E,
        "trace_gap": gap,
        "delta0": d0,
        "max_gap_before_delta0": trace_gap,
        "log_energy_slope": slope,
        "passed": bool(trace_gap <= tol),
    }
