"""Uniform grid functions and the basic calculus used by every solver.

A grid function stores samples on ``start + i*h``; coordinates are always
recomputed from the index so long grids do not drift.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import PchipInterpolator

DEFAULT_STEPS = 512


class GridError(ValueError):
    """Raised on malformed grids or incompatible operands."""


class DomainError(ValueError):
    """Raised when a query point lies outside the sampled domain."""


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Samples of a (possibly vector valued) function on a uniform grid.

    ``values`` has shape ``(n,)`` for scalar functions and ``(n, m)`` for
    vector valued ones. Axis 0 is always the grid axis.
    """

    start: float
    h: float
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim not in (1, 2) or vals.shape[0] == 0:
            raise GridError("values must be a non-empty 1-D or 2-D array")
        if vals.ndim == 2 and vals.shape[1] < 1:
            raise GridError("vector dimension must be at least 1")
        if not (np.isfinite(self.h) and self.h > 0):
            raise GridError(f"step must be positive, got {self.h}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "start", float(self.start))
        object.__setattr__(self, "h", float(self.h))

    @classmethod
    def from_function(cls, func, start, stop, n):
        """Sample ``func`` (vectorized over arrays) on ``n`` nodes of [start, stop]."""
        if n < 2:
            raise GridError("need at least two nodes")
        h = (stop - start) / (n - 1)
        x = start + h * np.arange(n)
        vals = np.asarray(func(x), dtype=float)
        if vals.ndim == 0:
            vals = np.full(n, float(vals))
        return cls(start, h, vals)

    @classmethod
    def from_coords(cls, coords, values, rtol=1e-9):
        """Build from explicit coordinates, rejecting non-uniform spacing."""
        coords = np.asarray(coords, dtype=float)
        if coords.size < 2:
            raise GridError("need at least two coordinates")
        steps = np.diff(coords)
        h = (coords[-1] - coords[0]) / (coords.size - 1)
        if h <= 0 or np.max(np.abs(steps - h)) > rtol * max(abs(h), 1.0):
            raise GridError("non-uniform grid rejected")
        return cls(coords[0], h, values)

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def m(self):
        return 1 if self.values.ndim == 1 else self.values.shape[1]

    @property
    def coords(self):
        return self.start + self.h * np.arange(self.n)

    @property
    def stop(self):
        return self.start + self.h * (self.n - 1)

    def same_axis(self, other, rtol=1e-12):
        return (
            self.n == other.n
            and abs(self.h - other.h) <= rtol * self.h
            and abs(self.start - other.start) <= rtol * max(self.h, abs(self.start))
        )

    def with_values(self, values):
        return GridFunction(self.start, self.h, values)

    def component(self, j):
        if self.values.ndim == 1:
            if j != 0:
                raise IndexError(j)
            return self
        return GridFunction(self.start, self.h, self.values[:, j])

    def __add__(self, other):
        return self.with_values(self.values + _vals(other, self))

    def __sub__(self, other):
        return self.with_values(self.values - _vals(other, self))

    def __mul__(self, other):
        return self.with_values(self.values * _vals(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return self.with_values(-self.values)

    def sup(self):
        return float(np.max(np.abs(self.values)))


def _vals(other, ref):
    if isinstance(other, GridFunction):
        if not ref.same_axis(other):
            raise GridError("axis mismatch")
        return other.values
    return other


def require_same_axis(*fs):
    first = fs[0]
    for f in fs[1:]:
        if not first.same_axis(f):
            raise GridError("operands do not share a grid axis")


def diff_array(y, h, order=1, axis=0):
    """Second order finite differences of samples along ``axis``.

    Central stencils in the interior, one-sided second order stencils at the
    two ends. Exact for quadratics (order 1) and cubics (order 2).
    """
    y = np.moveaxis(np.asarray(y, dtype=float), axis, 0)
    n = y.shape[0]
    if n < 4:
        raise GridError(f"finite differences need at least 4 nodes, got {n}")
    out = np.empty_like(y)
    if order == 1:
        out[1:-1] = (y[2:] - y[:-2]) / (2 * h)
        out[0] = (-3 * y[0] + 4 * y[1] - y[2]) / (2 * h)
        out[-1] = (3 * y[-1] - 4 * y[-2] + y[-3]) / (2 * h)
    elif order == 2:
        out[1:-1] = (y[2:] - 2 * y[1:-1] + y[:-2]) / h**2
        out[0] = (2 * y[0] - 5 * y[1] + 4 * y[2] - y[3]) / h**2
        out[-1] = (2 * y[-1] - 5 * y[-2] + 4 * y[-3] - y[-4]) / h**2
    else:
        raise GridError(f"order must be 1 or 2, got {order}")
    return np.moveaxis(out, 0, axis)


def finite_diff(f: GridFunction, order: int = 1) -> GridFunction:
    """First or second derivative of ``f`` on the same axis."""
    return f.with_values(diff_array(f.values, f.h, order))


def cumint_array(y, h, axis=0):
    """Trapezoid prefix integral along ``axis`` starting from zero."""
    y = np.asarray(y, dtype=float)
    if y.shape[axis] < 2:
        raise GridError("cumulative integral needs at least 2 nodes")
    return cumulative_trapezoid(y, dx=h, axis=axis, initial=0.0)


def cumulative_integral(f: GridFunction) -> GridFunction:
    """Prefix integral ``w -> int_start^w f`` by the trapezoid rule."""
    return f.with_values(cumint_array(f.values, f.h))


def interp(f: GridFunction, p, method: str = "pchip"):
    """Evaluate ``f`` at ``p`` (scalar or array) by monotone cubic or linear interpolation."""
    p_arr = np.asarray(p, dtype=float)
    lo, hi = f.start, f.stop
    tol = 1e-12 * max(1.0, abs(lo), abs(hi))
    if np.any(p_arr < lo - tol) or np.any(p_arr > hi + tol):
        raise DomainError(f"query outside [{lo}, {hi}]")
    p_arr = np.clip(p_arr, lo, hi)
    x = f.coords
    if method == "pchip":
        return PchipInterpolator(x, f.values, axis=0)(p_arr)
    if method == "linear":
        if f.values.ndim == 1:
            return np.interp(p_arr, x, f.values)
        return np.stack([np.interp(p_arr, x, f.values[:, j]) for j in range(f.m)], axis=-1)
    raise ValueError(f"unknown interpolation method {method!r}")


def uniform_axis(start, stop, n):
    """Start and step of an ``n`` node uniform axis on [start, stop]."""
    if n < 2:
        raise GridError("need at least two nodes")
    return float(start), (stop - start) / (n - 1)


@dataclass(frozen=True, eq=False)
class WField:
    """A field A(t, w) on a rectangular grid.

    ``values`` has shape ``(nt, nw)`` or ``(nt, nw, m)``; column ``k = 0`` is
    the boundary trace A(t, 0).
    """

    t0: float
    ht: float
    hw: float
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim not in (2, 3) or vals.shape[0] < 1 or vals.shape[1] < 1:
            raise GridError("WField values must have shape (nt, nw) or (nt, nw, m)")
        if not (self.ht > 0 and self.hw > 0):
            raise GridError("steps must be positive")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def nt(self):
        return self.values.shape[0]

    @property
    def nw(self):
        return self.values.shape[1]

    @property
    def m(self):
        return 1 if self.values.ndim == 2 else self.values.shape[2]

    @property
    def t(self):
        return self.t0 + self.ht * np.arange(self.nt)

    @property
    def w(self):
        return self.hw * np.arange(self.nw)

    @property
    def trace(self):
        return GridFunction(self.t0, self.ht, self.values[:, 0])

    def row(self, i):
        return GridFunction(0.0, self.hw, self.values[i])

    def to_csv(self, path):
        _write_rows(path, ["t", "w"], self.m, self.t, self.w, self.values)


@dataclass(frozen=True, eq=False)
class XField:
    """A field f(t, x) on a t axis times a list of positive x nodes."""

    t0: float
    ht: float
    x_nodes: np.ndarray
    values: np.ndarray
    zero_trace: GridFunction | None = field(default=None)

    def __post_init__(self):
        x = np.array(self.x_nodes, dtype=float)
        if x.ndim != 1 or x.size < 1 or np.any(x <= 0):
            raise GridError("x nodes must be a non-empty list of positive reals")
        d = np.diff(x)
        if x.size > 1 and not (np.all(d > 0) or np.all(d < 0)):
            raise GridError("x nodes must be strictly monotone")
        vals = np.array(self.values, dtype=float)
        if vals.ndim not in (2, 3) or vals.shape[1] != x.size:
            raise GridError("values must have shape (nt, nx) or (nt, nx, m)")
        if self.zero_trace is not None:
            zt = self.zero_trace
            if zt.n != vals.shape[0] or abs(zt.h - self.ht) > 1e-12 * self.ht or abs(zt.start - self.t0) > 1e-12:
                raise GridError("zero trace must live on the t axis of the field")
        x.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "x_nodes", x)
        object.__setattr__(self, "values", vals)

    @property
    def nt(self):
        return self.values.shape[0]

    @property
    def m(self):
        return 1 if self.values.ndim == 2 else self.values.shape[2]

    @property
    def t(self):
        return self.t0 + self.ht * np.arange(self.nt)

    def to_csv(self, path):
        _write_rows(path, ["t", "x"], self.m, self.t, self.x_nodes, self.values)


def _fmt(v):
    return repr(float(v))


def _write_rows(path, head, m, first, second, values):
    vals = values if values.ndim == 3 else values[..., None]
    prefix = "A" if head[1] == "w" else "f"
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(head + [f"{prefix}_{j + 1}" for j in range(m)])
        for i, a in enumerate(first):
            for k, b in enumerate(second):
                wr.writerow([_fmt(a), _fmt(b)] + [_fmt(v) for v in vals[i, k]])


def log_spaced_nodes(lo, hi, n=40):
    """Strictly decreasing log-spaced nodes from ``hi`` down to ``lo``."""
    if not (0 < lo < hi):
        raise GridError("need 0 < lo < hi")
    return np.geomspace(hi, lo, n)
