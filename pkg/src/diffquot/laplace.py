"""Truncated Laplace transforms, the growing-exponential kernels, inversion and decay fits.

The forward transform ``(1/x) int_0^delta e^{-w/x} A(w) dw`` is computed by
product quadrature: the piecewise linear interpolant of ``A`` is integrated
exactly against the exponential, which stays accurate for ``x`` far below the
grid step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate, special

from .numerics import DomainError, GridError, GridFunction, interp


class ConditioningError(RuntimeError):
    """Raised when the regularized normal equations are numerically singular."""

    def __init__(self, message, condition):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


def _phi1(r):
    """(1 - e^{-r}(1 + r)) / r with a series branch for small r."""
    r = np.asarray(r, dtype=float)
    small = r < 1e-2
    out = np.empty_like(r)
    rs = r[small]
    out[small] = rs / 2 - rs**2 / 3 + rs**3 / 8 - rs**4 / 30 + rs**5 / 144
    rl = r[~small]
    out[~small] = (-np.expm1(-rl) - rl * np.exp(-rl)) / rl
    return out


def laplace_weights(n, h, x):
    """Weights ``q`` with ``sum_k q_k A_k`` equal to the transform of the linear interpolant.

    The grid is ``w_k = k h`` for ``k < n``; ``x`` may be an array, giving a
    matrix of shape ``(len(x), n)``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x <= 0):
        raise DomainError("Laplace transform needs x > 0")
    if n < 2:
        raise GridError("need at least two nodes")
    r = h / x
    p1 = _phi1(r)
    p0 = -np.expm1(-r) - p1
    wk = h * np.arange(n - 1)
    # e^{-w_k/x} taken in log space; underflow to zero is the right limit
    decay = np.exp(-wk[None, :] / x[:, None])
    q = np.zeros((x.size, n))
    q[:, :-1] += decay * p0[:, None]
    q[:, 1:] += decay * p1[:, None]
    return q


def laplace_forward(A: GridFunction, x):
    """``(1/x) int_0^delta e^{-w/x} A(w) dw`` over the whole grid of ``A``.

    Returns a vector of length m for vector valued ``A`` (scalar for m = 1)
    when ``x`` is a scalar, otherwise one row per ``x``.
    """
    if A.start != 0.0:
        raise GridError("density grid must start at w = 0")
    scalar_x = np.ndim(x) == 0
    q = laplace_weights(A.n, A.h, x)
    out = q @ A.values
    return out[0] if scalar_x else out


def laplace_rows(values, hw, x):
    """Transforms of each row of a (nt, nw[, m]) array at the x nodes: shape (nt, nx[, m])."""
    q = laplace_weights(values.shape[1], hw, x)
    return np.einsum("xk,tk...->tx...", q, values)


@dataclass(frozen=True, eq=False)
class LaplaceSamples:
    """Samples f(x_n) of an x-side function at strictly decreasing positive x nodes."""

    x_nodes: np.ndarray
    values: np.ndarray
    delta: float | None = None

    def __post_init__(self):
        x = np.asarray(self.x_nodes, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if x.ndim != 1 or x.size < 1 or np.any(x <= 0):
            raise GridError("x nodes must be positive")
        if x.size > 1 and not np.all(np.diff(x) < 0):
            raise GridError("x nodes must be strictly decreasing")
        if v.shape[0] != x.size:
            raise GridError("one value per x node required")
        object.__setattr__(self, "x_nodes", x)
        object.__setattr__(self, "values", v)

    @property
    def m(self):
        return 1 if self.values.ndim == 1 else self.values.shape[1]

    def to_csv(self, path):
        vals = self.values.reshape(self.x_nodes.size, -1)
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["x"] + [f"f_{j + 1}" for j in range(vals.shape[1])])
            for x, row in zip(self.x_nodes, vals):
                wr.writerow([repr(float(x))] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path):
        with Path(path).open() as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], np.array(rows[1:], dtype=float)
        if head[0] != "x":
            raise GridError("first column must be x")
        vals = body[:, 1:]
        return cls(body[:, 0], vals[:, 0] if vals.shape[1] == 1 else vals)


@dataclass(frozen=True)
class WeierstrassKernel:
    j: int
    N: int
    eps: float
    I_jN: float
    A_j: float

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        logf = np.log(self.N) - np.log(self.I_jN) + self.N * self.j * t - np.exp(self.N * t)
        return np.exp(logf)

    @property
    def peak(self):
        return np.log(self.j) / self.N

    def breakpoints(self, lo, hi):
        """Points where the kernel changes scale, for adaptive quadrature."""
        ys = [1.5, self.j, self.j + 3 * np.sqrt(self.j), self.j + 10 * np.sqrt(self.j), self.j + 40]
        pts = sorted({float(np.log(y) / self.N) for y in ys})
        return [p for p in pts if lo < p < hi] or None


def weierstrass_kernel(j, N, eps, n=2049):
    """The kernel ``(N/I) e^{Njt} e^{-e^{Nt}}`` normalized to unit mass on [0, eps].

    ``I`` is the integral of ``y^{j-1} e^{-y}`` over [1, e^{eps N}], computed by
    adaptive quadrature. Returns the kernel and its samples on ``n`` nodes.
    """
    if j < 1 or N < 1 or eps <= 0:
        raise ValueError("need j, N >= 1 and eps > 0")
    if N * eps > 700:
        raise OverflowError(f"N*eps = {N * eps} exceeds the exponential guard of 700")
    upper = np.exp(N * eps)
    integrand = lambda y: np.exp((j - 1) * np.log(y) - y)
    # the mass sits in [1, j + O(sqrt j)]; integrate the bulk and the tail separately
    split = min(upper, j + 40.0 + 10 * np.sqrt(j))
    pts = [p for p in (j - 1.0, j + 3 * np.sqrt(j)) if 1 < p < split]
    I_jN, _ = integrate.quad(integrand, 1.0, split, points=pts or None, limit=400, epsabs=0, epsrel=1e-13)
    if upper > split:
        I_jN += integrate.quad(integrand, split, upper, limit=400, epsabs=0, epsrel=1e-10)[0]
    A_j = float(special.gamma(j) * special.gammaincc(j, 1.0))
    ker = WeierstrassKernel(int(j), int(N), float(eps), float(I_jN), A_j)
    grid = GridFunction.from_function(ker, 0.0, eps, n)
    return ker, grid


def kernel_mass(ker: WeierstrassKernel, lo=0.0, hi=None):
    """Mass of the kernel on [lo, hi] by adaptive quadrature."""
    hi = ker.eps if hi is None else hi
    val, _ = integrate.quad(ker, lo, hi, points=ker.breakpoints(lo, hi), limit=400, epsabs=1e-15, epsrel=1e-13)
    return val


def weierstrass_estimate(a: GridFunction, j, N, shift=0.0, eps=None):
    """Estimate ``a(shift)`` by ``int_0^{eps-shift} f_{j,N}(t) a(t + shift) dt``.

    ``eps`` defaults to the right end of the grid of ``a`` (which must start at 0).
    """
    eps = a.stop if eps is None else eps
    if not (0 <= shift < eps):
        raise DomainError(f"shift {shift} outside [0, {eps})")
    ker, _ = weierstrass_kernel(j, N, eps, n=2)
    upper = eps - shift
    f = lambda t: ker(t) * interp(a, t + shift)
    val, _ = integrate.quad(f, 0.0, upper, points=ker.breakpoints(0.0, upper), limit=400, epsabs=1e-11, epsrel=1e-10)
    return float(val)


def second_difference_matrix(n):
    D = np.zeros((n - 2, n))
    idx = np.arange(n - 2)
    D[idx, idx] = 1.0
    D[idx, idx + 1] = -2.0
    D[idx, idx + 2] = 1.0
    return D


def inverse_laplace_regularized(samples: LaplaceSamples, delta, mu=None, n_w=129):
    """Density on [0, delta] minimizing ``|K A - f|^2 + mu |D2 A|^2``.

    ``K`` is the product quadrature matrix on ``n_w`` w-nodes and ``D2`` the
    (unscaled) second difference matrix. The default ``mu`` is
    ``1e-8 * |K|_2^2``. Vector samples are inverted componentwise.
    """
    x = samples.x_nodes
    if x.size < 2:
        raise GridError("need at least two samples")
    h = delta / (n_w - 1)
    K = laplace_weights(n_w, h, x)
    normK = np.linalg.norm(K, 2)
    if mu is None:
        mu = 1e-8 * normK**2
    if mu < 0:
        raise ValueError("mu must be non-negative")
    if mu == 0:
        cond = np.linalg.cond(K) if x.size >= n_w else np.inf
        if not np.isfinite(cond) or cond > 1e14:
            raise ConditioningError("unregularized inverse is singular", cond)
        lhs = K
        pad = 0
    else:
        lhs = np.vstack([K, np.sqrt(mu) * second_difference_matrix(n_w)])
        pad = n_w - 2
    f = samples.values.reshape(x.size, -1)
    rhs = np.vstack([f, np.zeros((pad, f.shape[1]))])
    sol, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    vals = sol[:, 0] if samples.values.ndim == 1 else sol
    return GridFunction(0.0, h, vals)


def fit_decay_rate(x_nodes, residuals):
    """Least-squares slope of ``log r`` against ``-1/x``.

    Returns ``(rate, r_squared)``; non-positive residuals are dropped.
    """
    x = np.asarray(x_nodes, dtype=float)
    r = np.abs(np.asarray(residuals, dtype=float))
    keep = (r > 0) & np.isfinite(r) & (x > 0)
    if keep.sum() < 3:
        raise ValueError(f"need at least 3 positive residuals, got {int(keep.sum())}")
    u = -1.0 / x[keep]
    y = np.log(r[keep])
    res = np.polyfit(u, y, 1, full=True)
    slope, intercept = res[0]
    fit = slope * u + intercept
    ss_res = float(np.sum((y - fit) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2
