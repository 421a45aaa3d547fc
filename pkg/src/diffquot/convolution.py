"""Truncated convolution ``(a ~* b)(w) = int_0^w a(w - r) b(r) dr`` and its derivative identities.

Every high order w-derivative of a convolution product used elsewhere in
the package is obtained from the identities here, never by differencing a
convolution numerically.
"""

from __future__ import annotations

from itertools import combinations
from math import comb

import numpy as np

from .numerics import GridError, GridFunction, require_same_axis


def conv_arrays(a, b, h):
    """Trapezoid truncated convolution along the last axis.

    Accepts 1-D samples or 2-D stacks of rows (one convolution per row).
    The value at the first node is exactly zero.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise GridError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 1:
        n = a.size
        full = np.convolve(a, b)[:n]
        return h * (full - 0.5 * (a * b[0] + a[0] * b))
    out = np.empty_like(a)
    for i in range(a.shape[0]):
        out[i] = conv_arrays(a[i], b[i], h)
    return out


def conv(a: GridFunction, b: GridFunction) -> GridFunction:
    """Truncated convolution of two scalar grid functions sharing an axis."""
    require_same_axis(a, b)
    if a.values.ndim != 1 or b.values.ndim != 1:
        raise GridError("conv takes scalar grid functions; use conv_components for vectors")
    if a.start != 0.0:
        raise GridError("convolution axis must start at w = 0")
    return a.with_values(conv_arrays(a.values, b.values, a.h))


def conv_components(a: GridFunction, b: GridFunction) -> GridFunction:
    """Componentwise convolution of two vector grid functions."""
    require_same_axis(a, b)
    if a.values.shape != b.values.shape:
        raise GridError("component count mismatch")
    if a.values.ndim == 1:
        return conv(a, b)
    return a.with_values(conv_arrays(a.values.T, b.values.T, a.h).T)


def conv_chain(fs):
    """Left fold ``f_1 ~* f_2 ~* ... ~* f_n`` of scalar grid functions."""
    fs = list(fs)
    if not fs:
        raise GridError("empty convolution chain")
    out = fs[0]
    for f in fs[1:]:
        out = conv(out, f)
    return out


def _multiset(alpha):
    idx = []
    for l, k in enumerate(alpha):
        if k < 0:
            raise ValueError("multi-index entries must be non-negative")
        idx.extend([l] * int(k))
    return idx


def conv_power(A: GridFunction, alpha) -> GridFunction:
    """``~*^alpha A``: each component A_l convolved in alpha_l times.

    For |alpha| = 1 the single selected component is returned unchanged.
    The |alpha| = 0 case has no grid-function value; callers treat
    ``b ~* (~*^0 A)`` as ``b`` themselves.
    """
    alpha = tuple(alpha)
    if len(alpha) != A.m:
        raise GridError(f"multi-index length {len(alpha)} does not match {A.m} components")
    idx = _multiset(alpha)
    if not idx:
        raise ValueError("conv_power called with |alpha| = 0; use b directly")
    return conv_chain(A.component(l) for l in idx)


def _sub_indices(alpha):
    """All beta <= alpha componentwise."""
    grids = [range(k + 1) for k in alpha]
    betas = [()]
    for g in grids:
        betas = [b + (v,) for b in betas for v in g]
    return betas


def multi_binom(alpha, beta):
    out = 1
    for a, b in zip(alpha, beta):
        out *= comb(a, b)
    return out


def _mono(vec, beta):
    out = 1.0
    for v, k in zip(vec, beta):
        out *= v**k
    return out


def conv_deriv_monomial(b, b0, bprime, A, Aprime, A0, alpha) -> GridFunction:
    """The (|alpha|+1)-st w-derivative of ``b ~* (~*^alpha A)``.

    Assembled from ``b(0)``, ``b'``, ``A(0)`` and ``A'`` by the expanded
    binomial formula, so no convolution is ever differentiated numerically.
    ``A`` is used only to check the axis and its trace.
    """
    alpha = tuple(int(k) for k in alpha)
    if sum(alpha) == 0:
        raise ValueError("|alpha| must be at least 1")
    require_same_axis(b, bprime, A, Aprime)
    if len(alpha) != Aprime.m:
        raise GridError("multi-index length does not match A")
    A0 = np.atleast_1d(np.asarray(A0, dtype=float))
    order = sum(alpha)
    total = np.zeros(b.n)
    for beta in _sub_indices(alpha):
        coeff = multi_binom(alpha, beta) * _mono(A0, beta)
        if coeff == 0.0:
            continue
        rest = tuple(a - c for a, c in zip(alpha, beta))
        if sum(beta) < order:
            total += coeff * b0 * conv_power(Aprime, rest).values
            total += coeff * conv(bprime, conv_power(Aprime, rest)).values
        else:
            total += coeff * bprime.values
    return b.with_values(total)


def multilinear_difference(bs, cs) -> GridFunction:
    """``b_1~*...~*b_L - c_1~*...~*c_L`` expanded as a signed sum over non-empty subsets.

    Each summand convolves the differences ``b_l - c_l`` over the subset with
    the remaining ``b_l``.
    """
    bs, cs = list(bs), list(cs)
    if len(bs) != len(cs) or not bs:
        raise GridError("need two equally long non-empty lists")
    require_same_axis(*bs, *cs)
    L = len(bs)
    diffs = [b - c for b, c in zip(bs, cs)]
    total = np.zeros(bs[0].n)
    for k in range(1, L + 1):
        sign = (-1.0) ** (k + 1)
        for J in combinations(range(L), k):
            factors = [diffs[l] for l in J] + [bs[l] for l in range(L) if l not in J]
            total += sign * conv_chain(factors).values
    return bs[0].with_values(total)


def conv_chain_deriv(fs, fprimes) -> GridFunction:
    """``d^L/dw^L (a_1 ~* ... ~* a_L)`` via the subset expansion.

    Sums, over proper subsets J, the product of the traces a_j(0) for j in J
    times the convolution of the derivatives a_k' over the complement.
    """
    fs, fprimes = list(fs), list(fprimes)
    if len(fs) != len(fprimes) or not fs:
        raise GridError("need matching non-empty lists")
    require_same_axis(*fs, *fprimes)
    L = len(fs)
    total = np.zeros(fs[0].n)
    for k in range(L):
        for J in combinations(range(L), k):
            weight = float(np.prod([fs[j].values[0] for j in J])) if J else 1.0
            if weight == 0.0:
                continue
            total += weight * conv_chain(fprimes[l] for l in range(L) if l not in J).values
    return fs[0].with_values(total)
