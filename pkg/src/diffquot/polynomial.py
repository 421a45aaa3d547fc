"""The polynomial nonlinearity P, its w-side image P-hat and the smoothing part of P-hat.

Each monomial ``c_{alpha,j}(t,x,z) y^alpha e_j`` of P is described by a density
``b_{alpha,j}(t,w,z)`` whose truncated Laplace transform is the coefficient.
Densities are user functions ``b(t, w, z)`` vectorized over ``w``; their
w-derivatives up to order three are passed alongside, or approximated by
finite differences when absent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product as iproduct
from math import comb
from typing import Callable

import numpy as np

from .convolution import _sub_indices, conv_arrays, conv_deriv_monomial, multi_binom, multilinear_difference
from .laplace import laplace_weights
from .numerics import DomainError, GridError, GridFunction, cumint_array, diff_array


class CapabilityError(RuntimeError):
    """Raised when an operation needs data the PolynomialSpec was built without."""


@dataclass(frozen=True)
class Box:
    """Closed axis-aligned box ``lo <= y <= hi``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box needs lo <= hi of equal shape")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def contains(self, y, tol=1e-12):
        y = np.atleast_1d(y)
        return bool(np.all(y >= self.lo - tol) and np.all(y <= self.hi + tol))

    def widened(self, margin):
        return Box(self.lo - margin, self.hi + margin)

    def samples(self, n, rng):
        corners = np.array(list(iproduct(*zip(self.lo, self.hi))))
        inner = self.lo + (self.hi - self.lo) * rng.random((n, self.lo.size))
        return np.vstack([corners, 0.5 * (self.lo + self.hi), inner])


def _fd_derivative(func, order, step=1e-3):
    """w-derivative of ``func(t, w, z)`` by repeated fourth order central differences."""
    if order == 0:
        return func

    def d1(t, w, z, f=_fd_derivative(func, order - 1, step)):
        w = np.asarray(w, dtype=float)
        return (-f(t, w + 2 * step, z) + 8 * f(t, w + step, z) - 8 * f(t, w - step, z) + f(t, w - 2 * step, z)) / (12 * step)

    return d1


def _broadcast(func):
    def wrapped(t, w, z):
        w = np.asarray(w, dtype=float)
        return np.broadcast_to(np.asarray(func(t, w, z), dtype=float), w.shape).astype(float)

    return wrapped


@dataclass(frozen=True, eq=False)
class Term:
    """One monomial of P: multi-index ``alpha``, output component ``j`` and density ``b``.

    ``c_closed(t, x, z)`` optionally gives the x-side coefficient in closed
    form (a polynomial in x, say) which then replaces the truncated transform
    of ``b`` when P is evaluated. The two differ by ``e^{-eps2/x}`` terms.
    """

    alpha: tuple
    j: int
    b: Callable
    db: Callable | None = None
    d2b: Callable | None = None
    d3b: Callable | None = None
    c_closed: Callable | None = None

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(int(k) for k in self.alpha))
        if any(k < 0 for k in self.alpha):
            raise ValueError("multi-index entries must be non-negative")

    @property
    def degree(self):
        return sum(self.alpha)

    @property
    def approximate(self):
        return self.db is None or self.d2b is None or self.d3b is None

    def density(self, order=0):
        given = (self.b, self.db, self.d2b, self.d3b)[order]
        if given is not None:
            return _broadcast(given)
        base = next(k for k in range(order, -1, -1) if (self.b, self.db, self.d2b, self.d3b)[k] is not None)
        return _broadcast(_fd_derivative((self.b, self.db, self.d2b, self.d3b)[base], order - base))


@dataclass(frozen=True)
class LipschitzData:
    """Sampled z-Lipschitz constants of ``b`` and ``db/dw`` (estimates, not bounds)."""

    b_z: float
    db_z: float


@dataclass(frozen=True, eq=False)
class PolynomialSpec:
    m: int
    terms: tuple
    eps1: float = 1.0
    eps2: float = 1.0
    D: int | None = None
    remainder: Callable | None = None
    lipschitz: LipschitzData | None = None
    U: Box | None = None
    V: Box | None = None
    margin: float = 0.05
    name: str = "custom"
    no_constant_term: bool = False
    n_quad: int = 2049
    C0: float = field(init=False, default=np.nan)
    _cache: dict = field(init=False, default_factory=dict, repr=False)

    def __post_init__(self):
        terms = tuple(self.terms)
        object.__setattr__(self, "terms", terms)
        if self.m < 1:
            raise ValueError("dimension m must be at least 1")
        seen = set()
        for term in terms:
            if len(term.alpha) != self.m:
                raise ValueError(f"multi-index {term.alpha} has wrong length for m = {self.m}")
            if not 0 <= term.j < self.m:
                raise ValueError(f"output component {term.j} out of range")
            key = (term.alpha, term.j)
            if key in seen:
                raise ValueError(f"duplicate term {key}")
            seen.add(key)
            if self.no_constant_term and term.degree == 0:
                raise ValueError("constant term present but no_constant_term is set")
        degree = max((t.degree for t in terms), default=0)
        if self.D is None:
            object.__setattr__(self, "D", degree)
        elif degree > self.D:
            raise ValueError(f"term degree {degree} exceeds D = {self.D}")
        object.__setattr__(self, "C0", self._sample_C0())

    def _z_samples(self, n=12, seed=0):
        if self.U is None:
            return np.zeros((1, self.m))
        return self.U.widened(self.margin).samples(n, np.random.default_rng(seed))

    def _sample_C0(self):
        ts = np.linspace(0.0, self.eps1, 9)
        ws = np.linspace(0.0, self.eps2, 65)
        best = 0.0
        for term in self.terms:
            dens = [term.density(k) for k in range(4)]
            for t in ts:
                for z in self._z_samples():
                    for d in dens:
                        best = max(best, float(np.max(np.abs(d(t, ws, z)))))
        return best

    def term_index(self, alpha, j):
        alpha = tuple(int(k) for k in alpha)
        for k, term in enumerate(self.terms):
            if term.alpha == alpha and term.j == j:
                return k
        raise KeyError((alpha, j))

    def check_z(self, z):
        if self.U is not None and not self.U.contains(z):
            raise DomainError(f"z = {np.asarray(z)} outside the U box")

    def check_y(self, y):
        if self.V is not None and not self.V.contains(y):
            raise DomainError(f"y = {np.asarray(y)} outside the V box")

    def reversed(self):
        """The PolynomialSpec of ``-P(eps1 - t, ...)``: time reversal of the equation."""
        e1 = self.eps1

        def flip(f):
            if f is None:
                return None
            return lambda t, w, z, f=f: -np.asarray(f(e1 - t, w, z))

        def flip_c(f):
            if f is None:
                return None
            return lambda t, x, z, f=f: -f(e1 - t, x, z)

        terms = tuple(
            Term(tm.alpha, tm.j, flip(tm.b), flip(tm.db), flip(tm.d2b), flip(tm.d3b), flip_c(tm.c_closed))
            for tm in self.terms
        )
        rem = None
        if self.remainder is not None:
            rem = lambda t, x, y, z, g=self.remainder: -np.asarray(g(e1 - t, x, y, z))
        return PolynomialSpec(
            self.m, terms, self.eps1, self.eps2, self.D, rem, self.lipschitz, self.U, self.V,
            self.margin, self.name + "-reversed", self.no_constant_term, self.n_quad,
        )


def _mono(y, alpha):
    out = 1.0
    for v, k in zip(np.atleast_1d(y), alpha):
        if k:
            out = out * v**k
    return out


def eval_c(spec: PolynomialSpec, alpha, j, t, x, z):
    """``c_{alpha,j}(t,x,z) = (1/x) int_0^{eps2} e^{-w/x} b(t,w,z) dw`` by product quadrature.

    At ``x = 0`` the continuous extension ``b(t, 0, z)`` is returned.
    """
    if x < 0:
        raise DomainError("coefficient needs x >= 0")
    term = spec.terms[spec.term_index(alpha, j)]
    z = np.atleast_1d(np.asarray(z, dtype=float))
    b = term.density(0)
    if x == 0:
        return float(b(t, np.zeros(1), z)[0])
    key = ("c", spec.term_index(alpha, j), float(t), float(x), tuple(z))
    if key not in spec._cache:
        n = spec.n_quad
        w = np.linspace(0.0, spec.eps2, n)
        q = laplace_weights(n, spec.eps2 / (n - 1), x)[0]
        if len(spec._cache) > 100000:
            spec._cache.clear()
        spec._cache[key] = float(q @ b(t, w, z))
    return spec._cache[key]


def coefficient(spec: PolynomialSpec, k, t, x, z):
    """x-side coefficient of term ``k``: the closed form when given, else the transform of b."""
    term = spec.terms[k]
    if term.c_closed is not None:
        return float(term.c_closed(t, x, np.atleast_1d(z)))
    return eval_c(spec, term.alpha, term.j, t, x, z)


def eval_P(spec: PolynomialSpec, t, x, y, z, check=True):
    """``P(t,x,y,z)`` as a length-m vector."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if check:
        spec.check_y(y)
        spec.check_z(z)
    out = np.zeros(spec.m)
    for k, term in enumerate(spec.terms):
        out[term.j] += coefficient(spec, k, t, x, z) * _mono(y, term.alpha)
    return out


def jacobian_dyP(spec: PolynomialSpec, t, x, y, z, check=True):
    """``d_y P`` as an m-by-m matrix, row j and column l, from exact monomial derivatives."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if check:
        spec.check_y(y)
        spec.check_z(z)
    J = np.zeros((spec.m, spec.m))
    for k, term in enumerate(spec.terms):
        if term.degree == 0:
            continue
        c = coefficient(spec, k, t, x, z)
        for l, a in enumerate(term.alpha):
            if a == 0:
                continue
            lowered = list(term.alpha)
            lowered[l] -= 1
            J[term.j, l] += c * a * _mono(y, lowered)
    return J


def coefficients_many(spec: PolynomialSpec, k, t, xs, z):
    """Coefficient of term ``k`` at every x of the array ``xs`` (all positive)."""
    term = spec.terms[k]
    xs = np.asarray(xs, dtype=float)
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if term.c_closed is not None:
        return np.broadcast_to(np.asarray(term.c_closed(t, xs, z), dtype=float), xs.shape)
    key = ("q", xs.tobytes())
    n = spec.n_quad
    if key not in spec._cache:
        spec._cache[key] = laplace_weights(n, spec.eps2 / (n - 1), xs)
    w = np.linspace(0.0, spec.eps2, n)
    return spec._cache[key] @ term.density(0)(t, w, z)


def eval_P_many(spec: PolynomialSpec, t, xs, Y, z):
    """``P(t, x_i, Y_i, z)`` for rows ``Y_i`` of an (nx, m) array; returns (nx, m)."""
    Y = np.asarray(Y, dtype=float).reshape(len(xs), spec.m)
    out = np.zeros_like(Y)
    for k, term in enumerate(spec.terms):
        mono = np.ones(len(xs))
        for l, a in enumerate(term.alpha):
            if a:
                mono = mono * Y[:, l] ** a
        out[:, term.j] += coefficients_many(spec, k, t, xs, z) * mono
    return out


def jacobian_many(spec: PolynomialSpec, t, xs, Y, z):
    """``d_y P`` at each row of Y: shape (nx, m, m)."""
    Y = np.asarray(Y, dtype=float).reshape(len(xs), spec.m)
    J = np.zeros((len(xs), spec.m, spec.m))
    for k, term in enumerate(spec.terms):
        if term.degree == 0:
            continue
        c = coefficients_many(spec, k, t, xs, z)
        for l, a in enumerate(term.alpha):
            if a == 0:
                continue
            mono = a * np.ones(len(xs))
            for q, e in enumerate(term.alpha):
                e = e - 1 if q == l else e
                if e:
                    mono = mono * Y[:, q] ** e
            J[:, term.j, l] += c * mono
    return J


def _as_matrix(A: GridFunction):
    vals = A.values if A.values.ndim == 2 else A.values[:, None]
    return GridFunction(A.start, A.h, vals)


def _density_rows(term, t, w, z):
    return [term.density(k)(t, w, z) for k in range(2)]


def assemble_phat(spec: PolynomialSpec, A_row: GridFunction, A0t, t, Aprime: GridFunction | None = None):
    """``P-hat(t, A, z)(w)`` with ``z = A0t``: the sum over terms of the (|alpha|+1)-st
    w-derivative of ``b ~* (~*^alpha A)``, built from ``A'`` by the expanded formula.

    ``A'`` is taken from ``Aprime`` or a second order difference of ``A_row``.
    """
    scalar = A_row.values.ndim == 1
    A = _as_matrix(A_row)
    if A.m != spec.m:
        raise GridError("A has the wrong number of components")
    Ap = _as_matrix(Aprime) if Aprime is not None else A.with_values(diff_array(A.values, A.h))
    if not A.same_axis(Ap):
        raise GridError("A and A' must share an axis")
    z = np.atleast_1d(np.asarray(A0t, dtype=float))
    spec.check_z(A.values[0])
    w = A.coords
    out = np.zeros((A.n, spec.m))
    for term in spec.terms:
        b, db = _density_rows(term, t, w, z)
        if term.degree == 0:
            out[:, term.j] += db
            continue
        bg, dbg = A.with_values(b), A.with_values(db)
        out[:, term.j] += conv_deriv_monomial(bg, b[0], dbg, A, Ap, A.values[0], term.alpha).values
    return A_row.with_values(out[:, 0] if scalar else out)


def _conv_product(factors, h):
    out = factors[0]
    for f in factors[1:]:
        out = conv_arrays(out, f, h)
    return out


def _alpha_factors(Ap, alpha):
    return [Ap[:, l] for l, k in enumerate(alpha) for _ in range(k)]


def phat_split(spec: PolynomialSpec, A_row: GridFunction, A0t, t, Aprime: GridFunction | None = None):
    """Transport part ``d_yP(t,0,A(0),z) A'`` and smoothing part of P-hat, computed separately.

    The smoothing part collects the pure convolution sums with
    ``|beta| < |alpha| - 1`` and every ``b'``-convolution sum.
    """
    A = _as_matrix(A_row)
    Ap = _as_matrix(Aprime).values if Aprime is not None else diff_array(A.values, A.h)
    z = np.atleast_1d(np.asarray(A0t, dtype=float))
    A0 = A.values[0]
    h, w = A.h, A.coords
    J = jacobian_dyP(spec, t, 0.0, A0, z)
    transport = Ap @ J.T
    smooth = np.zeros((A.n, spec.m))
    for term in spec.terms:
        b, db = _density_rows(term, t, w, z)
        alpha = term.alpha
        order = term.degree
        for beta in _sub_indices(alpha):
            coeff = multi_binom(alpha, beta) * _mono(A0, beta)
            if coeff == 0.0:
                continue
            rest = tuple(a - c for a, c in zip(alpha, beta))
            facs = _alpha_factors(Ap, rest)
            if sum(beta) < order - 1:
                smooth[:, term.j] += coeff * b[0] * _conv_product(facs, h)
            if facs:
                smooth[:, term.j] += coeff * _conv_product([db] + facs, h)
            else:
                smooth[:, term.j] += coeff * db
    shape = A_row.values.shape
    return A_row.with_values(transport.reshape(shape)), A_row.with_values(smooth.reshape(shape))


# ---------------------------------------------------------------------------
# Smoothing operations as sums of convolution monomials
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceData:
    """Boundary data on a t axis: ``a0 = A(t, 0)`` and optionally ``a1 = dA/dw(t, 0)``.

    Arrays have shape ``(nt, m)``.
    """

    t0: float
    ht: float
    a0: np.ndarray
    a1: np.ndarray | None = None
    a2: np.ndarray | None = None

    @property
    def nt(self):
        return self.a0.shape[0]

    @property
    def t(self):
        return self.t0 + self.ht * np.arange(self.nt)


class SmoothingOperation:
    """A causal operation on fields written as a sum of convolution monomials.

    A monomial is ``coef(t) * (f_1 ~* ... ~* f_n)(w) e_out`` where each factor is
    either ``("A", l, d)``, the d-th w-derivative of component l of the
    unknown, or ``("b", k, d)``, the d-th w-derivative of the density of term k
    evaluated at ``z = A0(t)``. Differentiation in w is exact: it moves one
    derivative onto a factor and produces a trace term.
    """

    def __init__(self, spec, traces: TraceData, monomials):
        self.spec = spec
        self.traces = traces
        merged = {}
        for out, coef, factors in monomials:
            key = (out, tuple(sorted(factors)))
            prev = merged.get(key)
            merged[key] = coef.copy() if prev is None else prev + coef
        self.monomials = [(k[0], c, k[1]) for k, c in merged.items() if np.any(c != 0)]
        self._bcache = {}

    @property
    def m(self):
        return self.spec.m

    def factor_trace(self, factor):
        kind, idx, d = factor
        tr = self.traces
        if kind == "A":
            arr = {0: tr.a0, 1: tr.a1, 2: tr.a2}.get(d)
            if arr is None:
                raise CapabilityError(f"trace of d^{d}A/dw^{d} is not available")
            return arr[:, idx]
        term = self.spec.terms[idx]
        dens = term.density(d)
        return np.array([dens(t, np.zeros(1), tr.a0[i])[0] for i, t in enumerate(tr.t)])

    def _pick(self, factors):
        bs = [i for i, f in enumerate(factors) if f[0] == "b" and f[2] < 3]
        if bs:
            return min(bs, key=lambda i: factors[i][2])
        return min(range(len(factors)), key=lambda i: (factors[i][2], factors[i][0] != "A"))

    def derivative(self):
        """The operation ``A -> d/dw G(A)``."""
        out = []
        for j, coef, factors in self.monomials:
            if len(factors) == 1:
                kind, idx, d = factors[0]
                if kind == "b" and d >= 3:
                    raise CapabilityError("fourth w-derivative of a density is not available")
                out.append((j, coef, ((kind, idx, d + 1),)))
                continue
            i = self._pick(factors)
            kind, idx, d = factors[i]
            if kind == "b" and d >= 3:
                raise CapabilityError("fourth w-derivative of a density is not available")
            rest = factors[:i] + factors[i + 1:]
            out.append((j, coef * self.factor_trace(factors[i]), rest))
            out.append((j, coef, rest + ((kind, idx, d + 1),)))
        return SmoothingOperation(self.spec, self.traces, out)

    def trace_value(self):
        """Value at w = 0 as an (nt, m) array; products of two or more factors vanish there."""
        res = np.zeros((self.traces.nt, self.m))
        for j, coef, factors in self.monomials:
            if len(factors) == 1:
                res[:, j] += coef * self.factor_trace(factors[0])
        return res

    def with_traces(self, traces: TraceData):
        op = SmoothingOperation(self.spec, traces, [])
        op.monomials = list(self.monomials)
        return op

    def max_order(self):
        return max((f[2] for _, _, fs in self.monomials for f in fs if f[0] == "A"), default=0)

    def _density_field(self, k, d, w):
        key = (k, d, w.size, float(w[-1]))
        if key not in self._bcache:
            dens = self.spec.terms[k].density(d)
            tr = self.traces
            self._bcache[key] = np.array([dens(t, w, tr.a0[i]) for i, t in enumerate(tr.t)])
        return self._bcache[key]

    def evaluate(self, derivs, hw, nw):
        """Evaluate on a grid given ``derivs[(l, d)]`` arrays of shape (nt, nw).

        Returns an (nt, nw, m) array.
        """
        w = hw * np.arange(nw)
        res = np.zeros((self.traces.nt, nw, self.m))
        for j, coef, factors in self.monomials:
            arrays = []
            for kind, idx, d in factors:
                if kind == "A":
                    arrays.append(derivs[(idx, d)])
                else:
                    arrays.append(self._density_field(idx, d, w))
            prod = arrays[0]
            for a in arrays[1:]:
                prod = conv_arrays(prod, a, hw)
            res[:, :, j] += coef[:, None] * prod
        return res


def smoothing_operation(spec: PolynomialSpec, traces: TraceData) -> SmoothingOperation:
    """The smoothing part of ``A -> P-hat(t, A, A0(t))`` with ``A(t, 0) = A0(t)`` substituted."""
    a0 = traces.a0
    nt = traces.nt
    monos = []
    for k, term in enumerate(spec.terms):
        alpha = term.alpha
        order = term.degree
        dens0 = term.density(0)
        b_at_0 = np.array([dens0(t, np.zeros(1), a0[i])[0] for i, t in enumerate(traces.t)])
        for beta in _sub_indices(alpha):
            c = multi_binom(alpha, beta) * np.prod([a0[:, l] ** e for l, e in enumerate(beta)], axis=0)
            c = np.broadcast_to(np.asarray(c, dtype=float), (nt,)).copy()
            rest = tuple(a - e for a, e in zip(alpha, beta))
            afs = tuple(("A", l, 1) for l, e in enumerate(rest) for _ in range(e))
            if sum(beta) < order - 1:
                monos.append((term.j, c * b_at_0, afs))
            monos.append((term.j, c, (("b", k, 1),) + afs))
    return SmoothingOperation(spec, traces, monos)


def smoothing_traces(spec: PolynomialSpec, traces: TraceData):
    """``(G0, G1)``: the smoothing part and its first w-derivative at w = 0.

    ``G1`` needs ``traces.a1``; a missing first derivative trace raises
    ``CapabilityError``.
    """
    op = smoothing_operation(spec, traces)
    G0 = op.trace_value()
    if traces.a1 is None:
        raise CapabilityError("G1 needs the w-derivative trace a1")
    G1 = op.derivative().trace_value()
    return G0, G1


# ---------------------------------------------------------------------------
# Diagonalization of the transport matrix
# ---------------------------------------------------------------------------


def _c1_norm(arr, ht):
    d = diff_array(arr, ht, 1, axis=0) if arr.shape[0] >= 4 else np.zeros_like(arr)
    nrm = lambda a: np.max(np.linalg.norm(a.reshape(a.shape[0], -1), axis=1)) if a.ndim > 1 else np.max(np.abs(a))
    if arr.ndim == 3:
        nrm = lambda a: float(np.max(np.linalg.norm(a, 2, axis=(1, 2))))
    return float(nrm(arr) + nrm(d))


@dataclass(frozen=True, eq=False)
class Diagonalization:
    """``R(t) M(t) R(t)^{-1} = diag(lambda_j(t))`` sampled on a t axis."""

    t0: float
    ht: float
    M: np.ndarray
    R: np.ndarray
    Rinv: np.ndarray
    lam: np.ndarray
    C4: float | None = None

    @property
    def nt(self):
        return self.M.shape[0]

    @property
    def m(self):
        return self.M.shape[1]

    @property
    def t(self):
        return self.t0 + self.ht * np.arange(self.nt)

    @property
    def lam0(self):
        return self.lam.min(axis=1)

    @property
    def c0(self):
        return float(self.lam.min())

    @property
    def C1(self):
        return _c1_norm(self.R, self.ht)

    @property
    def C2(self):
        return _c1_norm(self.Rinv, self.ht)

    @property
    def C3(self):
        return _c1_norm(np.linalg.inv(self.M), self.ht)

    @property
    def integrated(self):
        """``int_0^t lambda_j`` per component, shape (nt, m)."""
        return cumint_array(self.lam, self.ht, axis=0)

    @property
    def gamma0(self):
        return self.integrated.max(axis=1)

    def gamma0_inverse(self, s):
        """Smallest t with gamma0(t) = s, or None when s exceeds gamma0 at the end of the axis."""
        g = self.gamma0
        if s > g[-1] + 1e-14:
            return None
        return float(np.interp(s, g, self.t))

    @property
    def Rdot(self):
        return diff_array(self.R, self.ht, 1, axis=0) if self.nt >= 4 else np.zeros_like(self.R)

    def check(self, tol_inv=1e-10, tol_off=1e-8):
        eye = np.eye(self.m)
        inv_err = float(np.max(np.abs(self.R @ self.Rinv - eye)))
        D = self.R @ self.M @ self.Rinv
        off = D - np.einsum("tj,jk->tjk", self.lam, eye)
        off_err = float(np.max(np.abs(off)))
        ok = inv_err <= tol_inv and off_err <= tol_off * max(1.0, float(np.max(np.abs(self.lam)))) and self.c0 > 0
        return {"inverse_error": inv_err, "offdiag_error": off_err, "c0": self.c0, "ok": bool(ok)}

    def reversed(self):
        flip = lambda a: a[::-1].copy()
        return Diagonalization(self.t0, self.ht, flip(self.M), flip(self.R), flip(self.Rinv), flip(self.lam), self.C4)


class DiagonalizationError(ValueError):
    pass


def diagonalize(M, t0, ht, A0=None):
    """Eigen-decompose M(t) node by node with real positive eigenvalues.

    Eigenvector columns are normalized and sign-aligned with the previous
    node so R(t) varies smoothly. ``A0`` (nt, m) sets C4, the C^2 norm of the trace.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None, None]
    nt, m, _ = M.shape
    R = np.empty_like(M)
    Rinv = np.empty_like(M)
    lam = np.empty((nt, m))
    prev = None
    for i in range(nt):
        Mi = M[i]
        if np.max(np.abs(Mi - np.diag(np.diag(Mi)))) <= 1e-14 * max(1.0, np.max(np.abs(Mi))):
            vals, vecs = np.diag(Mi).copy(), np.eye(m)
        else:
            vals, vecs = np.linalg.eig(Mi)
            if np.max(np.abs(np.imag(vals))) > 1e-10 * max(1.0, np.max(np.abs(vals))):
                raise DiagonalizationError(f"complex eigenvalues at node {i}")
            vals, vecs = np.real(vals), np.real(vecs)
            order = np.argsort(vals)
            vals, vecs = vals[order], vecs[:, order]
            vecs = vecs / np.linalg.norm(vecs, axis=0)
            if prev is not None:
                vecs = vecs * np.sign(np.sum(vecs * prev, axis=0) + 1e-300)
        prev = vecs
        lam[i] = vals
        Rinv[i] = vecs
        R[i] = np.linalg.inv(vecs)
    if np.any(lam <= 0):
        raise DiagonalizationError(f"eigenvalues must be positive; min is {lam.min():.3e}")
    C4 = None
    if A0 is not None:
        a = np.asarray(A0, dtype=float).reshape(nt, -1)
        C4 = float(np.max(np.abs(a)))
        if nt >= 4:
            C4 += float(np.max(np.abs(diff_array(a, ht, 1)))) + float(np.max(np.abs(diff_array(a, ht, 2))))
    return Diagonalization(float(t0), float(ht), M, R, Rinv, lam, C4)


def transport_matrix(spec: PolynomialSpec, traces: TraceData, sign=-1.0):
    """``sign * d_yP(t, 0, A0(t), A0(t))`` at every trace node, shape (nt, m, m)."""
    return np.array([sign * jacobian_dyP(spec, t, 0.0, traces.a0[i], traces.a0[i]) for i, t in enumerate(traces.t)])


# ---------------------------------------------------------------------------
# Difference bounds
# ---------------------------------------------------------------------------


def estimate_lipschitz(spec: PolynomialSpec, n=64, seed=0) -> LipschitzData:
    """Sampled z-Lipschitz constants of b and db/dw over the widened U box."""
    rng = np.random.default_rng(seed)
    box = spec.U.widened(spec.margin) if spec.U is not None else Box(-np.ones(spec.m), np.ones(spec.m))
    ws = np.linspace(0.0, spec.eps2, 33)
    best = [0.0, 0.0]
    for _ in range(n):
        z1 = box.lo + (box.hi - box.lo) * rng.random(spec.m)
        z2 = box.lo + (box.hi - box.lo) * rng.random(spec.m)
        dz = np.linalg.norm(z1 - z2)
        if dz == 0:
            continue
        t = spec.eps1 * rng.random()
        for term in spec.terms:
            for k in range(2):
                d = term.density(k)
                best[k] = max(best[k], float(np.max(np.abs(d(t, ws, z1) - d(t, ws, z2)))) / dz)
    return LipschitzData(best[0], best[1])


def phat_difference_bound(spec: PolynomialSpec, A_row: GridFunction, B_row: GridFunction, t):
    """Split ``P-hat(A) - P-hat(B)`` into ``d_yP(t,0,A(0),A(0)) g'`` plus a remainder F.

    ``g = A - B``. The convolution products are differenced with the signed
    subset expansion. Returns ``(d_yP, F, C_est)`` where ``C_est`` is the
    largest ratio ``|F(w)| / sup_{r<=w} |g(r)|``.
    """
    if spec.lipschitz is None:
        raise CapabilityError("spec carries no z-Lipschitz data for the densities")
    A, B = _as_matrix(A_row), _as_matrix(B_row)
    if not A.same_axis(B):
        raise GridError("A and B must share an axis")
    h, w, n = A.h, A.coords, A.n
    Ap = diff_array(A.values, h)
    Bp = diff_array(B.values, h)
    a0, b0 = A.values[0], B.values[0]
    J = jacobian_dyP(spec, t, 0.0, a0, a0)
    diff_total = np.zeros((n, spec.m))
    for term in spec.terms:
        ba, dba = _density_rows(term, t, w, a0)
        bb, dbb = _density_rows(term, t, w, b0)
        alpha = term.alpha
        if term.degree == 0:
            diff_total[:, term.j] += dba - dbb
            continue
        for beta in _sub_indices(alpha):
            binom = multi_binom(alpha, beta)
            ca, cb = binom * _mono(a0, beta), binom * _mono(b0, beta)
            rest = tuple(x - y for x, y in zip(alpha, beta))
            fa = [GridFunction(0.0, h, f) for f in _alpha_factors(Ap, rest)]
            fb = [GridFunction(0.0, h, f) for f in _alpha_factors(Bp, rest)]
            pure = sum(beta) < term.degree
            if pure and (ca * ba[0] != 0 or cb * bb[0] != 0):
                Xa = _conv_product([f.values for f in fa], h)
                Xd = multilinear_difference(fa, fb).values
                diff_total[:, term.j] += ca * ba[0] * Xd + (ca * ba[0] - cb * bb[0]) * (Xa - Xd)
            ga, gb = GridFunction(0.0, h, dba), GridFunction(0.0, h, dbb)
            if fa:
                Xd = multilinear_difference([ga] + fa, [gb] + fb).values
                Xb = _conv_product([dbb] + [f.values for f in fb], h)
                diff_total[:, term.j] += ca * Xd + (ca - cb) * Xb
            else:
                diff_total[:, term.j] += ca * dba - cb * dbb
    g = A.values - B.values
    gp = Ap - Bp
    F = diff_total - gp @ J.T
    gsup = np.maximum.accumulate(np.max(np.abs(g), axis=1))
    Fn = np.max(np.abs(F), axis=1)
    mask = gsup > 1e-300
    C_est = float(np.max(Fn[mask] / gsup[mask])) if mask.any() else 0.0
    shape = A_row.values.shape
    return J, A_row.with_values(F.reshape(shape)), C_est


# ---------------------------------------------------------------------------
# Named families
# ---------------------------------------------------------------------------


def _const(v):
    return lambda t, w, z: np.full(np.shape(w), float(v))


def _zero(t, w, z):
    return np.zeros(np.shape(w))


def table_term(alpha, j, coeffs):
    """Term with density ``sum_l coeffs[l] w^l / l!`` and closed coefficient ``sum_l coeffs[l] x^l``."""
    coeffs = [float(c) for c in coeffs]
    from math import factorial

    def make(order):
        def f(t, w, z):
            w = np.asarray(w, dtype=float)
            out = np.zeros(w.shape)
            for l, c in enumerate(coeffs):
                if l >= order and c != 0.0:
                    out = out + c * w ** (l - order) / factorial(l - order)
            return out

        return f

    closed = lambda t, x, z: sum(c * x**l for l, c in enumerate(coeffs))
    return Term(alpha, j, make(0), make(1), make(2), make(3), closed)


def spec_from_table(m, entries, **kw):
    """Build a spec from ``[(alpha, j, [c_0, c_1, ...]), ...]`` polynomial-in-x coefficients."""
    return PolynomialSpec(m, tuple(table_term(a, j, cs) for a, j, cs in entries), **kw)


def linear_spec(slope=-1.0, **kw):
    """Scalar ``P(y) = slope * y`` with a constant density."""
    kw.setdefault("name", "linear")
    return spec_from_table(1, [((1,), 0, [slope])], **kw)


def quadratic_spec(a1=1.0, a2=1.0, **kw):
    """Scalar ``P(y) = a1 y + a2 y^2`` with constant densities."""
    kw.setdefault("name", "quadratic")
    entries = [((1,), 0, [a1])]
    if a2 != 0:
        entries.append(((2,), 0, [a2]))
    return spec_from_table(1, entries, **kw)


def borg_spec(**kw):
    """``P(x, y) = x^2 y^2 + y``: density w^2/2 on the square and 1 on the linear monomial."""
    kw.setdefault("name", "borg")
    return spec_from_table(1, [((1,), 0, [1.0]), ((2,), 0, [0.0, 0.0, 1.0])], **kw)


def sym_pairs(n):
    return [(a, b) for a in range(n) for b in range(a, n)]


def encode_metric(g):
    """Vector ``v_{ab} = sqrt(B(e_a + e_b))`` of the form ``B(xi) = |g| xi^T g^{-1} xi``."""
    g = np.asarray(g, dtype=float)
    n = g.shape[0]
    Q = np.linalg.det(g) * np.linalg.inv(g)
    v = []
    for a, b in sym_pairs(n):
        e = np.zeros(n)
        e[a] += 1.0
        e[b] += 1.0
        v.append(np.sqrt(e @ Q @ e))
    return np.array(v)


def decode_form(v, n):
    """Matrix of the quadratic form B recovered from its encoding v."""
    v = np.asarray(v, dtype=float)
    Q = np.zeros((n, n))
    pairs = sym_pairs(n)
    sq = {p: v[k] ** 2 for k, p in enumerate(pairs)}
    for a in range(n):
        Q[a, a] = sq[(a, a)] / 4.0
    for a, b in pairs:
        if a != b:
            Q[a, b] = Q[b, a] = (sq[(a, b)] - Q[a, a] - Q[b, b]) / 2.0
    return Q


def calderon_F(v, n=2):
    """``|g|^{-1/2}`` for the metric g encoded by v; ``det Q = |g|^{n-1}``."""
    det = np.linalg.det(decode_form(v, n))
    if det <= 0:
        raise DomainError("encoded form is not positive definite")
    return det ** (-1.0 / (2 * (n - 1)))


def calderon_spec(n=2, **kw):
    """System ``P_{ab}(t,x,y,z) = F(z) y_{ab}^2`` over the n(n+1)/2 pairs a <= b."""
    m = n * (n + 1) // 2
    terms = []
    for k in range(m):
        alpha = tuple(2 if i == k else 0 for i in range(m))
        b = lambda t, w, z, n=n: np.full(np.shape(w), calderon_F(z, n))
        closed = lambda t, x, z, n=n: calderon_F(z, n)
        terms.append(Term(alpha, k, b, _zero, _zero, _zero, closed))
    kw.setdefault("name", "calderon-ti")
    if "U" not in kw:
        v = encode_metric(np.eye(n))
        kw["U"] = Box(v - 0.15, v + 0.15)
    return PolynomialSpec(m, tuple(terms), **kw)


FAMILIES = {
    "linear": linear_spec,
    "quadratic": quadratic_spec,
    "borg": borg_spec,
    "calderon-ti": calderon_spec,
}


def build_family(name, **params):
    """Named built-in spec: one of ``linear``, ``quadratic``, ``borg``, ``calderon-ti``."""
    try:
        builder = FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown family {name!r}; choose from {sorted(FAMILIES)}") from None
    return builder(**params)
